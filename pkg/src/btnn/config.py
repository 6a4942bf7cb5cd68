"""Experiment run configuration: strict schema, defaults, data loading.

Configs are flat JSON documents.  Unknown keys anywhere are errors, so typos
fail before any work starts; the fully resolved ("effective") config is what
gets written next to run outputs for reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    AugmentPolicy,
    LabeledImageSet,
    load_cifar_binary,
    load_idx,
    load_image_dir,
    make_noise_pairs,
    make_sr_pairs,
)
from .net import NetSpec, Task, build_espcn, build_vgg6
from .quant import Granularity, QuantKind, QuantScheme
from .regularize import TransitionRegConfig
from .train import TrainSettings


class ConfigError(ValueError):
    """Invalid run configuration (maps to CLI exit code 2)."""


SCHEME_NAMES = {
    "full": QuantKind.FULL,
    "bwn": QuantKind.BINARY,
    "twn": QuantKind.TERNARY,
    "bt": QuantKind.BT,
}

_TASKS = {t.value: t for t in Task}


def _check_keys(d: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {unknown}")


def _require(d: dict, key: str, context: str):
    if key not in d:
        raise ConfigError(f"missing required key '{key}' in {context}")
    return d[key]


@dataclass
class RunConfig:
    task: Task
    data: dict
    net: dict
    scheme_name: str
    granularity: str
    reg: dict
    optimizer: dict
    augment: dict
    seed: int
    out_dir: str | None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(
            raw,
            {"task", "data", "net", "scheme", "granularity", "reg", "optimizer",
             "augment", "seed", "out_dir"},
            "config",
        )
        task_name = _require(raw, "task", "config")
        if task_name not in _TASKS:
            raise ConfigError(f"unknown task '{task_name}'")
        task = _TASKS[task_name]

        scheme_name = _require(raw, "scheme", "config")
        if scheme_name not in SCHEME_NAMES:
            raise ConfigError(
                f"unknown scheme '{scheme_name}' (expected one of {sorted(SCHEME_NAMES)})"
            )
        granularity = raw.get("granularity", "per_tensor")
        if granularity not in ("per_tensor", "per_channel"):
            raise ConfigError(f"unknown granularity '{granularity}'")

        net = dict(_require(raw, "net", "config"))
        arch = _require(net, "arch", "net")
        if arch == "vgg6":
            _check_keys(net, {"arch", "k", "class_count"}, "net")
            if not isinstance(net.get("k"), int) or net["k"] < 1:
                raise ConfigError("net.k must be a positive integer")
            net.setdefault("class_count", 10)
        elif arch == "espcn":
            _check_keys(net, {"arch", "scale"}, "net")
            if net.get("scale") not in (1, 2, 3, 4):
                raise ConfigError("net.scale must be 1, 2, 3 or 4")
        else:
            raise ConfigError(f"unknown net.arch '{arch}'")

        reg = dict(raw.get("reg", {}))
        _check_keys(reg, {"lambda", "noise_gain", "enabled", "seed"}, "reg")
        reg = {
            "lambda": float(reg.get("lambda", 0.1)),
            "noise_gain": float(reg.get("noise_gain", 0.1)),
            "enabled": bool(reg.get("enabled", False)),
            "seed": int(reg.get("seed", 0)),
        }
        if reg["lambda"] < 0 or reg["noise_gain"] < 0:
            raise ConfigError("reg.lambda and reg.noise_gain must be >= 0")
        if reg["enabled"] and scheme_name == "full":
            raise ConfigError("reg.enabled requires a quantizing scheme")

        optim = dict(raw.get("optimizer", {}))
        _check_keys(optim, {"lr", "epochs", "batch", "milestones"}, "optimizer")
        optim = {
            "lr": float(optim.get("lr", 1e-3)),
            "epochs": int(optim.get("epochs", 60)),
            "batch": int(optim.get("batch", 128)),
            "milestones": [float(m) for m in optim.get("milestones", [0.5, 0.75])],
        }
        if optim["epochs"] < 1 or optim["batch"] < 1 or optim["lr"] <= 0:
            raise ConfigError("optimizer epochs/batch must be >= 1 and lr > 0")

        aug = dict(raw.get("augment", {}))
        _check_keys(aug, {"pad", "cutout"}, "augment")
        aug = {"pad": int(aug.get("pad", 0)), "cutout": int(aug.get("cutout", 0))}

        data = dict(_require(raw, "data", "config"))
        cls._validate_data(data, task)

        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        out_dir = raw.get("out_dir")
        return cls(task, data, net, scheme_name, granularity, reg, optim, aug, seed, out_dir)

    @staticmethod
    def _validate_data(data: dict, task: Task) -> None:
        fmt = _require(data, "format", "data")
        if task is Task.CLASSIFICATION:
            if fmt == "idx":
                _check_keys(
                    data,
                    {"format", "train_images", "train_labels", "val_images", "val_labels"},
                    "data",
                )
                _require(data, "train_images", "data")
            elif fmt == "cifar":
                _check_keys(data, {"format", "train", "val"}, "data")
                _require(data, "train", "data")
            elif fmt == "npz":
                _check_keys(data, {"format", "train", "val"}, "data")
                _require(data, "train", "data")
            else:
                raise ConfigError(f"unknown classification data format '{fmt}'")
        else:
            if fmt != "images":
                raise ConfigError(f"task needs data format 'images', got '{fmt}'")
            _check_keys(
                data,
                {"format", "train_dir", "val_dir", "patch", "stride", "scale", "sigma"},
                "data",
            )
            _require(data, "train_dir", "data")
            if task is Task.DENOISE and "sigma" not in data:
                raise ConfigError("denoise task needs data.sigma")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def effective(self) -> dict:
        """Fully resolved config, suitable for re-running identically."""
        return {
            "task": self.task.value,
            "data": self.data,
            "net": self.net,
            "scheme": self.scheme_name,
            "granularity": self.granularity,
            "reg": self.reg,
            "optimizer": self.optimizer,
            "augment": self.augment,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    # -- derived objects ----------------------------------------------------

    def quant_scheme(self) -> QuantScheme:
        gran = (
            Granularity.PER_CHANNEL
            if self.granularity == "per_channel"
            else Granularity.PER_TENSOR
        )
        return QuantScheme(SCHEME_NAMES[self.scheme_name], granularity=gran)

    def reg_config(self) -> TransitionRegConfig | None:
        if not self.reg["enabled"]:
            return None
        return TransitionRegConfig(
            lam=self.reg["lambda"],
            noise_gain=self.reg["noise_gain"],
            enabled=True,
            rng_seed=self.reg["seed"],
        )

    def net_spec(self) -> NetSpec:
        if self.net["arch"] == "vgg6":
            return build_vgg6(self.net["k"], self.net["class_count"])
        return build_espcn(self.net["scale"], self.task)

    def input_shape(self, train_data) -> tuple[int, ...]:
        if self.task is Task.CLASSIFICATION:
            return tuple(train_data.images.shape[1:])
        return tuple(train_data.inputs.shape[1:])

    def train_settings(self) -> TrainSettings:
        policy = None
        if self.augment["pad"] or self.augment["cutout"]:
            policy = AugmentPolicy(
                random_crop_pad=self.augment["pad"], cutout=self.augment["cutout"]
            )
        return TrainSettings(
            epochs=self.optimizer["epochs"],
            batch_size=self.optimizer["batch"],
            lr=self.optimizer["lr"],
            milestones=tuple(self.optimizer["milestones"]),
            scheme=self.quant_scheme(),
            reg=self.reg_config(),
            augment_policy=policy,
            seed=self.seed,
        )

    def load_split(self, split: str):
        """Load the train or val split described by the data section."""
        if split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {split}")
        data = self.data
        fmt = data["format"]
        if self.task is Task.CLASSIFICATION:
            if fmt == "npz":
                path = data.get(split)
                return LabeledImageSet.load(path) if path else None
            if fmt == "idx":
                images = data.get(f"{split}_images")
                if not images:
                    return None
                return load_idx(images, data.get(f"{split}_labels"))
            paths = data.get(split)
            return load_cifar_binary(paths) if paths else None
        # image-folder tasks
        folder = data.get(f"{split}_dir")
        if not folder:
            return None
        images = load_image_dir(folder)
        patch = int(data.get("patch", 24))
        stride = int(data.get("stride", 14))
        if self.task is Task.SUPER_RESOLUTION:
            scale = int(data.get("scale", self.net.get("scale", 2)))
            if scale != self.net.get("scale"):
                raise ConfigError("data.scale must match net.scale")
            return make_sr_pairs(images, scale, patch, stride)
        sigma = float(data["sigma"])
        rng = np.random.default_rng(self.seed + (0 if split == "train" else 1))
        return make_noise_pairs(images, sigma, patch, stride, rng)
