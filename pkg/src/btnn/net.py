"""Network specs, the concrete network, architecture builders, checkpoints.

A ``NetSpec`` is a declarative layer chain; ``Network`` instantiates it with
parameters and validates that shapes chain correctly for a given input
shape.  Skip connections are restricted to the one pattern the builders
produce: network input added to the final output (identity for matching
sizes, bicubic upsampling when the output is an integer factor larger).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import resize_matrix
from .layers import (
    BatchNorm,
    Conv3x3,
    ForwardCtx,
    FullyConnected,
    MaxPool2,
    Param,
    ReLU,
    Softmax,
    SubPixel,
    _QuantizedWeightLayer,
)
from .quant import QuantScheme

CHECKPOINT_MAGIC = b"BTCK"


class LayerKind(Enum):
    CONV3X3 = "conv3x3"
    FULLY_CONNECTED = "fc"
    MAXPOOL2 = "maxpool2"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    SUBPIXEL = "subpixel"
    SOFTMAX = "softmax"


class Task(Enum):
    CLASSIFICATION = "classification"
    SUPER_RESOLUTION = "super_resolution"
    DENOISE = "denoise"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    width: int = 0  # conv/fc output width; unused otherwise
    quantized: bool = False
    scale: int = 0  # subpixel upscale factor

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "width": self.width,
            "quantized": self.quantized,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(LayerKind(d["kind"]), d["width"], d["quantized"], d["scale"])


@dataclass(frozen=True)
class NetSpec:
    layers: tuple[LayerSpec, ...]
    skip_connections: tuple[tuple[int, int], ...] = ()
    task: Task = Task.CLASSIFICATION

    def to_dict(self) -> dict:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "skip_connections": [list(s) for s in self.skip_connections],
            "task": self.task.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            tuple(tuple(s) for s in d["skip_connections"]),
            Task(d["task"]),
        )


def _infer_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = spec.kind
    if kind is LayerKind.CONV3X3:
        if len(shape) != 3:
            raise ValueError(f"conv3x3 needs (C, H, W) input, got {shape}")
        return (spec.width, shape[1], shape[2])
    if kind is LayerKind.MAXPOOL2:
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ValueError(f"maxpool2 needs spatial input >= 2x2, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if kind is LayerKind.FULLY_CONNECTED:
        return (spec.width,)
    if kind is LayerKind.SUBPIXEL:
        if len(shape) != 3 or shape[0] % (spec.scale**2) != 0:
            raise ValueError(
                f"subpixel x{spec.scale} needs channels divisible by "
                f"{spec.scale**2}, got {shape}"
            )
        return (shape[0] // spec.scale**2, shape[1] * spec.scale, shape[2] * spec.scale)
    if kind is LayerKind.SOFTMAX:
        if len(shape) != 1:
            raise ValueError(f"softmax needs flat input, got {shape}")
        return shape
    # batchnorm / relu preserve shape
    return shape


class Network:
    """A concrete, trainable network built from a NetSpec."""

    def __init__(self, spec: NetSpec, input_shape: tuple[int, ...], rng: np.random.Generator):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.layers: list = []
        shape = self.input_shape
        self.shapes = [shape]
        for ls in spec.layers:
            shape_out = _infer_shape(ls, shape)
            self.layers.append(self._build_layer(ls, shape, rng))
            shape = shape_out
            self.shapes.append(shape)
        self.output_shape = shape
        self._validate_skips()
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                p.name = f"L{i:02d}.{p.name}"
        self._resize_cache: dict[tuple[int, int], np.ndarray] = {}

    @staticmethod
    def _build_layer(ls: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator):
        if ls.kind is LayerKind.CONV3X3:
            return Conv3x3(in_shape[0], ls.width, ls.quantized, rng)
        if ls.kind is LayerKind.FULLY_CONNECTED:
            return FullyConnected(int(np.prod(in_shape)), ls.width, ls.quantized, rng)
        if ls.kind is LayerKind.MAXPOOL2:
            return MaxPool2()
        if ls.kind is LayerKind.BATCHNORM:
            return BatchNorm(in_shape[0])
        if ls.kind is LayerKind.RELU:
            return ReLU()
        if ls.kind is LayerKind.SUBPIXEL:
            return SubPixel(ls.scale)
        if ls.kind is LayerKind.SOFTMAX:
            return Softmax()
        raise ValueError(f"unknown layer kind {ls.kind}")

    def _validate_skips(self) -> None:
        self._skip_scale = None
        for src, dst in self.spec.skip_connections:
            if src != -1 or dst != len(self.layers):
                raise ValueError(
                    "only input-to-output skip connections are supported"
                )
            cin, hin, win = self.input_shape
            cout, hout, wout = self.output_shape
            if cin != cout or hout % hin or wout % win or hout // hin != wout // win:
                raise ValueError(
                    f"skip cannot map input {self.input_shape} onto output "
                    f"{self.output_shape}"
                )
            self._skip_scale = hout // hin

    def _skip_term(self, x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
        if self._skip_scale == 1:
            return x
        h, w = x.shape[-2], x.shape[-1]
        mh = self._resize_cache.setdefault((h, out_hw[0]), resize_matrix(h, out_hw[0]))
        mw = self._resize_cache.setdefault((w, out_hw[1]), resize_matrix(w, out_hw[1]))
        return (mh @ x.astype(np.float64) @ mw.T).astype(x.dtype)

    def forward(
        self,
        x,
        scheme: QuantScheme | None = None,
        mode: str = "train",
        use_packed: bool | None = None,
    ) -> np.ndarray:
        """Run the whole chain; ``eval`` mode uses packed kernels by default."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
        train = mode == "train"
        packed = (not train) if use_packed is None else use_packed
        ctx = ForwardCtx(train=train, scheme=scheme, packed=packed)
        x = np.asarray(x)
        a = x
        for layer in self.layers:
            a = layer.forward(a, ctx)
        if self._skip_scale is not None:
            a = a + self._skip_term(x, (a.shape[-2], a.shape[-1]))
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite activation at network output")
        return a

    def forward_logits(
        self, x, scheme: QuantScheme | None = None, mode: str = "train",
        use_packed: bool | None = None,
    ) -> np.ndarray:
        """Forward pass stopping before the terminal softmax layer."""
        if self.spec.layers[-1].kind is not LayerKind.SOFTMAX:
            raise ValueError("network does not end in a softmax layer")
        train = mode == "train"
        packed = (not train) if use_packed is None else use_packed
        ctx = ForwardCtx(train=train, scheme=scheme, packed=packed)
        a = np.asarray(x)
        for layer in self.layers[:-1]:
            a = layer.forward(a, ctx)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite activation at network output")
        return a

    def backward(self, grad_out: np.ndarray, skip_last: int = 0) -> np.ndarray:
        """Backpropagate to all parameters; returns the input gradient."""
        g = grad_out
        for layer in reversed(self.layers[: len(self.layers) - skip_last]):
            g = layer.backward(g)
        return g

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def quantized_weight_layers(self) -> list[_QuantizedWeightLayer]:
        return [
            l
            for l in self.layers
            if isinstance(l, _QuantizedWeightLayer) and l.quantized
        ]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.params()}
        for i, layer in enumerate(self.layers):
            for name, buf in layer.buffers():
                state[f"L{i:02d}.{name}"] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {src.shape} vs {arr.shape}"
                )
            arr[...] = src


# ---------------------------------------------------------------------------
# architecture builders


def build_vgg6(k: int, class_count: int = 10) -> NetSpec:
    """Six 3x3 conv blocks (widths K,K,2K,2K,4K,4K) with batch norm, three
    2x2 max pools, a hidden fully connected layer of width 8K, and a softmax
    classifier head.  Convolutions carry the quantized flag; fully connected
    layers stay full precision.
    """
    if k < 1:
        raise ValueError(f"base width must be >= 1, got {k}")
    layers: list[LayerSpec] = []
    for i, width in enumerate((k, k, 2 * k, 2 * k, 4 * k, 4 * k)):
        layers.append(LayerSpec(LayerKind.CONV3X3, width=width, quantized=True))
        layers.append(LayerSpec(LayerKind.BATCHNORM))
        layers.append(LayerSpec(LayerKind.RELU))
        if i % 2 == 1:  # pool after each same-width conv pair
            layers.append(LayerSpec(LayerKind.MAXPOOL2))
    layers.append(LayerSpec(LayerKind.FULLY_CONNECTED, width=8 * k))
    layers.append(LayerSpec(LayerKind.RELU))
    layers.append(LayerSpec(LayerKind.FULLY_CONNECTED, width=class_count))
    layers.append(LayerSpec(LayerKind.SOFTMAX))
    return NetSpec(tuple(layers), (), Task.CLASSIFICATION)


def build_espcn(scale: int, task: Task | None = None) -> NetSpec:
    """Fully convolutional restoration net: five width-64 3x3 convs, subpixel
    upsampling for super-resolution, a single-filter output conv, and a
    residual skip from the input to the output.  The first and last convs
    stay full precision; the inner convs carry the quantized flag.

    ``scale == 1`` builds the denoising variant (no subpixel layer).
    """
    if scale not in (1, 2, 3, 4):
        raise ValueError(f"scale must be 1, 2, 3 or 4, got {scale}")
    if task is None:
        task = Task.DENOISE if scale == 1 else Task.SUPER_RESOLUTION
    if (task is Task.DENOISE) != (scale == 1):
        raise ValueError(f"task {task.value} inconsistent with scale {scale}")
    layers = [
        LayerSpec(LayerKind.CONV3X3, width=64, quantized=False),
        LayerSpec(LayerKind.RELU),
    ]
    # channels feeding the subpixel layer must split into scale^2 groups
    feed_width = 64 if scale == 1 or 64 % scale**2 == 0 else -(-64 // scale**2) * scale**2
    for width in (64, 64, 64, feed_width):
        layers.append(LayerSpec(LayerKind.CONV3X3, width=width, quantized=True))
        layers.append(LayerSpec(LayerKind.RELU))
    if scale > 1:
        layers.append(LayerSpec(LayerKind.SUBPIXEL, scale=scale))
    layers.append(LayerSpec(LayerKind.CONV3X3, width=1, quantized=False))
    skip = ((-1, len(layers)),)
    return NetSpec(tuple(layers), skip, task)


# ---------------------------------------------------------------------------
# checkpoints: magic + JSON header + raw little-endian float32 blobs


def save_checkpoint(
    path,
    net: Network,
    optimizer_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = dict(net.state_dict())
    opt_header = None
    if optimizer_state is not None:
        opt_header = {"step": optimizer_state["step"], "lr": optimizer_state["lr"]}
        for group in ("m", "v"):
            for name, arr in optimizer_state[group].items():
                tensors[f"optim.{group}.{name}"] = arr
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": 1,
        "netspec": net.spec.to_dict(),
        "input_shape": list(net.input_shape),
        "tensors": entries,
        "optimizer": opt_header,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


@dataclass
class Checkpoint:
    spec: NetSpec
    input_shape: tuple[int, ...]
    tensors: dict[str, np.ndarray]
    optimizer: dict | None
    meta: dict

    def optimizer_state(self) -> dict | None:
        if self.optimizer is None:
            return None
        m = {k[len("optim.m.") :]: v for k, v in self.tensors.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v.") :]: v for k, v in self.tensors.items() if k.startswith("optim.v.")}
        return {"step": self.optimizer["step"], "lr": self.optimizer["lr"], "m": m, "v": v}


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    base = 8 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"{path}: truncated checkpoint tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(
            np.float32
        )
    return Checkpoint(
        NetSpec.from_dict(header["netspec"]),
        tuple(header["input_shape"]),
        tensors,
        header.get("optimizer"),
        header.get("meta", {}),
    )


def network_from_checkpoint(ck: Checkpoint) -> Network:
    net = Network(ck.spec, ck.input_shape, np.random.default_rng(0))
    net.load_state_dict(
        {k: v for k, v in ck.tensors.items() if not k.startswith("optim.")}
    )
    return net
