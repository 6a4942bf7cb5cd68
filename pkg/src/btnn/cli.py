"""Experiment runner: train / eval / quantize / bench / report subcommands.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
import time
from pathlib import Path

import numpy as np

from . import packing
from .config import SCHEME_NAMES, ConfigError, RunConfig
from .convops import dense_conv2d
from .layers import _QuantizedWeightLayer
from .net import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    NetSpec,
    Network,
    Task,
    load_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
)
from .quant import (
    Granularity,
    QuantKind,
    QuantScheme,
    dequantize,
    diagnostics,
    quantize,
)
from .train import (
    TrainingDiverged,
    evaluate_classifier,
    evaluate_restorer,
    train,
)

PACKED_MODEL_MAGIC = b"BTPM"


def _scheme_from_name(name: str, granularity: str = "per_tensor") -> QuantScheme:
    if name not in SCHEME_NAMES:
        raise ConfigError(f"unknown scheme '{name}'")
    gran = (
        Granularity.PER_CHANNEL if granularity == "per_channel" else Granularity.PER_TENSOR
    )
    return QuantScheme(SCHEME_NAMES[name], granularity=gran)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    raw = cfg.effective()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.scheme is not None:
        raw["scheme"] = args.scheme
    if args.out is not None:
        raw["out_dir"] = args.out
    cfg = RunConfig.from_dict(raw)
    if cfg.out_dir is None:
        raise ConfigError("no output directory: set out_dir in the config or pass --out")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_data = cfg.load_split("train")
    if train_data is None:
        raise ConfigError("config names no training data")
    val_data = cfg.load_split("val")

    seq = np.random.SeedSequence(cfg.seed)
    net_rng, _ = (np.random.default_rng(s) for s in seq.spawn(2))
    net = Network(cfg.net_spec(), cfg.input_shape(train_data), net_rng)

    (out_dir / "config.json").write_text(json.dumps(cfg.effective(), indent=2, sort_keys=True))
    metrics = train(net, train_data, cfg.train_settings(), val_data)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for record in metrics:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    save_checkpoint(
        out_dir / "checkpoint.btck",
        net,
        meta={"config": cfg.effective()},
    )
    last = metrics[-1]
    metric_key = "val_acc" if "val_acc" in last else ("val_psnr" if "val_psnr" in last else "train_loss")
    print(f"finished {cfg.optimizer['epochs']} epochs; {metric_key}={last[metric_key]:.4f}")
    print(f"outputs in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# quantize: checkpoint -> packed model file + diagnostics table


def _quantizable_names(spec: NetSpec) -> set[str]:
    names = set()
    for i, ls in enumerate(spec.layers):
        if ls.quantized and ls.kind.value in ("conv3x3", "fc"):
            names.add(f"L{i:02d}.weight")
    return names


def write_packed_model(path, ck: Checkpoint, scheme: QuantScheme) -> list[dict]:
    """Quantize + pack eligible weights, write container, return per-layer rows."""
    quantizable = _quantizable_names(ck.spec)
    entries = []
    blobs = []
    rows = []
    offset = 0
    for name, arr in ck.tensors.items():
        if name.startswith("optim."):
            continue
        if name in quantizable:
            q = quantize(arr, scheme)
            pq = packing.pack(q)
            blob = packing.to_bytes(pq)
            d = diagnostics(arr, q)
            rows.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "mse": d.mse,
                    "sparsity": d.sparsity,
                    "float_bytes": arr.nbytes,
                    "packed_bytes": pq.nbytes,
                }
            )
            kind = "packed"
        else:
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            kind = "raw"
        entries.append(
            {
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": 1,
        "netspec": ck.spec.to_dict(),
        "input_shape": list(ck.input_shape),
        "scheme": scheme.kind.value,
        "granularity": scheme.granularity.value,
        "meta": ck.meta,
    }
    header["entries"] = entries
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PACKED_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return rows


def load_packed_model(path) -> Network:
    """Rebuild a network from a packed model: frozen planes, dequantized latents."""
    raw = Path(path).read_bytes()
    if raw[:4] != PACKED_MODEL_MAGIC:
        raise ValueError(f"{path}: not a packed model file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    base = 8 + hlen
    spec = NetSpec.from_dict(header["netspec"])
    net = Network(spec, tuple(header["input_shape"]), np.random.default_rng(0))
    state: dict[str, np.ndarray] = {}
    frozen: dict[str, packing.PackedQuantTensor] = {}
    for e in header["entries"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        if e["kind"] == "packed":
            pq = packing.from_bytes(buf)
            frozen[e["name"]] = pq
            state[e["name"]] = dequantize(packing.unpack(pq))
        else:
            state[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    net.load_state_dict(state)
    for i, layer in enumerate(net.layers):
        key = f"L{i:02d}.weight"
        if key in frozen and isinstance(layer, _QuantizedWeightLayer):
            layer.frozen_quant = frozen[key]
    return net


def cmd_quantize(args) -> int:
    raw_head = Path(args.checkpoint).read_bytes()[:4]
    if raw_head == PACKED_MODEL_MAGIC:
        raise ValueError(f"{args.checkpoint} is already a packed model")
    ck = load_checkpoint(args.checkpoint)
    scheme = _scheme_from_name(args.scheme, args.granularity)
    if scheme.kind is QuantKind.FULL:
        raise ConfigError("scheme 'full' has nothing to pack; pick bwn, twn or bt")
    out = Path(args.out or (Path(args.checkpoint).with_suffix(".btq")))
    rows = write_packed_model(out, ck, scheme)
    if not rows:
        raise ValueError("checkpoint has no quantizable layers")
    total_float = sum(r["float_bytes"] for r in rows)
    total_packed = sum(r["packed_bytes"] for r in rows)
    print(f"{'layer':<14}{'shape':<22}{'mse':>12}{'sparsity':>10}{'bytes':>10}{'ratio':>8}")
    for r in rows:
        ratio = r["packed_bytes"] / r["float_bytes"]
        print(
            f"{r['name']:<14}{str(tuple(r['shape'])):<22}{r['mse']:>12.6f}"
            f"{r['sparsity']:>10.4f}{r['packed_bytes']:>10}{ratio:>8.4f}"
        )
    print(
        f"quantized weight bytes: {total_packed} packed vs {total_float} float32 "
        f"({total_float / total_packed:.1f}x smaller)"
    )
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_model_any(path: str):
    head = Path(path).read_bytes()[:4]
    if head == PACKED_MODEL_MAGIC:
        return load_packed_model(path), None
    if head == CHECKPOINT_MAGIC:
        ck = load_checkpoint(path)
        scheme_name = (ck.meta.get("config") or {}).get("scheme")
        return network_from_checkpoint(ck), scheme_name
    raise ValueError(f"{path}: neither a checkpoint nor a packed model")


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config)
    net, ck_scheme = _load_model_any(args.model)
    scheme = None
    if args.scheme is not None:
        scheme = _scheme_from_name(args.scheme, cfg.granularity)
    elif ck_scheme is not None:
        scheme = _scheme_from_name(ck_scheme, cfg.granularity)
    data = cfg.load_split(args.split)
    if data is None:
        raise ConfigError(f"config names no '{args.split}' data")
    if net.spec.task is Task.CLASSIFICATION:
        value = evaluate_classifier(net, data, scheme)
        name = "top1_acc"
    else:
        value = evaluate_restorer(net, data, scheme)
        name = "psnr_db"
    print(f"{'model':<40}{'split':<8}{'metric':<10}{'value':>10}")
    print(f"{Path(args.model).name:<40}{args.split:<8}{name:<10}{value:>10.4f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        result = {"model": str(args.model), "split": args.split, "metric": name, "value": value}
        (Path(args.out) / "eval.json").write_text(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# bench


def _time_best_ns(fn, repeats: int = 5) -> float:
    fn()  # warmup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - t0)
    return best


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    workloads = []
    if args.model:
        net, _ = _load_model_any(args.model)
        c, h, w = net.input_shape
        x = rng.standard_normal((args.batch, c, h, w)).astype(np.float32)
        for i, layer in enumerate(net.layers):
            if isinstance(layer, _QuantizedWeightLayer) and layer.frozen_quant is not None:
                if len(layer.frozen_quant.shape) == 4:
                    f, ci, kh, kw = layer.frozen_quant.shape
                    xin = rng.standard_normal((args.batch, ci, 16, 16)).astype(np.float32)
                    workloads.append((f"L{i:02d} conv {f}x{ci}x{kh}x{kw}", layer.frozen_quant, xin))
    if not workloads:
        for kind in (QuantKind.BINARY, QuantKind.BT):
            wts = rng.standard_normal((32, 32, 3, 3)).astype(np.float32)
            q = quantize(wts, QuantScheme(kind))
            xin = rng.standard_normal((args.batch, 32, 28, 28)).astype(np.float32)
            workloads.append((f"conv 32x32x3x3 {kind.value}", packing.pack(q), xin))
    print(f"{'workload':<28}{'dense ns/op':>14}{'packed ns/op':>14}{'packed/dense':>14}")
    for name, pq, xin in workloads:
        wdense = dequantize(packing.unpack(pq))
        t_dense = _time_best_ns(lambda: dense_conv2d(wdense, xin, 1, 1), args.repeats)
        t_packed = _time_best_ns(lambda: packing.packed_conv2d(pq, xin, 1, 1), args.repeats)
        print(f"{name:<28}{t_dense:>14.0f}{t_packed:>14.0f}{t_packed / t_dense:>13.2f}x")
    return 0


# ---------------------------------------------------------------------------
# report


_SCHEME_ORDER = ["full", "bwn", "twn", "bt"]


def _run_summary(run_dir: Path) -> dict | None:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        return None
    cfg = json.loads(cfg_path.read_text())
    value = None
    eval_path = run_dir / "eval.json"
    metrics_path = run_dir / "metrics.jsonl"
    if eval_path.exists():
        value = json.loads(eval_path.read_text())["value"]
    elif metrics_path.exists():
        lines = metrics_path.read_text().strip().splitlines()
        if lines:
            last = json.loads(lines[-1])
            value = last.get("val_acc", last.get("val_psnr"))
    net = cfg.get("net", {})
    if net.get("arch") == "vgg6":
        arch = f"K={net.get('k')}"
    else:
        arch = f"scale={net.get('scale')}"
        if cfg.get("task") == "denoise":
            arch = f"sigma={cfg.get('data', {}).get('sigma')}"
    return {
        "task": cfg.get("task"),
        "arch": arch,
        "scheme": cfg.get("scheme"),
        "value": value,
    }


def cmd_report(args) -> int:
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for run in args.runs:
        summary = _run_summary(Path(run))
        if summary is None:
            print(f"skipping {run}: no config.json", file=sys.stderr)
            continue
        key = (summary["task"], summary["arch"])
        rows.setdefault(key, {})[summary["scheme"]] = summary["value"]
    if not rows:
        raise ValueError("no usable run directories")
    lines = []
    for task in sorted({t for t, _ in rows}):
        lines.append(f"## {task}")
        lines.append("")
        lines.append("| Arch | " + " | ".join(s.upper() for s in _SCHEME_ORDER) + " |")
        lines.append("|------|" + "------|" * len(_SCHEME_ORDER))
        for (t, arch), by_scheme in sorted(rows.items()):
            if t != task:
                continue
            cells = []
            for s in _SCHEME_ORDER:
                v = by_scheme.get(s)
                cells.append(f"{v:.2f}" if isinstance(v, (int, float)) else "-")
            lines.append(f"| {arch} | " + " | ".join(cells) + " |")
        lines.append("")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btnn",
        description="Quantized-weight training, packing, and evaluation runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--scheme", choices=sorted(SCHEME_NAMES))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("quantize", help="pack a checkpoint's weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", required=True, choices=sorted(SCHEME_NAMES))
    p.add_argument("--granularity", default="per_tensor",
                   choices=["per_tensor", "per_channel"])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="evaluate a checkpoint or packed model")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--scheme", choices=sorted(SCHEME_NAMES))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="kernel throughput: dense vs packed conv")
    p.add_argument("--model")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("report", help="summarize run directories as markdown tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; snapshot: {exc.snapshot}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
