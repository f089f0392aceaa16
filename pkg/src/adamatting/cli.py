"""Command-line entry point: ``adamatting {synth,train,infer,eval}``.

Failures exit non-zero after printing one JSON line to stderr,
``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionMismatchError, MattingError
from .io import atomic_write, metrics_json, read_sequence, write_sequence
from .metrics import aggregate, evaluate_sequence
from .model import MattingModel, ModelConfig
from .pipeline import bidirectional_infer, initial_mask_provider, run_sequence
from .synth import generate_sequence, random_scene
from .training import TrainConfig, default_schedule, native_tail, train_desk_model, train_schedule
from .transformer import ablation_config

log = logging.getLogger("adamatting")

EXIT_CODES = {"usage": 2, "config": 2, "io": 3, "format": 4, "malformed-header": 4, "index-gap": 4,
              "dimension-mismatch": 4, "checkpoint": 5}


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return dims


def build_info() -> str:
    try:
        from importlib.metadata import version
        ver = version("artifact")
    except Exception:
        ver = "0+unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{ver}+{rev}" if rev else ver


def cmd_synth(args) -> dict:
    mode = {"random": None, "static": "static_bg", "dynamic": "dynamic_bg"}[args.mode]
    spec = random_scene(args.seed, frames=args.frames, size=args.size, mode=mode)
    seq = generate_sequence(spec)
    write_sequence(args.out, seq.frames, seq.alpha_gt, mask=seq.mask_gt[0],
                   meta={"mode": spec.mode.removesuffix("_bg"), "seed": args.seed, "frames": args.frames}, f32=True)
    return {"out": str(args.out), "frames": args.frames}


def load_train_config(path: str | None) -> dict:
    """JSON with optional keys: model, stages (per-stage overrides), tail (override or null), seeds, frames, size."""
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_train(args) -> dict:
    cfg = load_train_config(args.config)
    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        model = MattingModel(ModelConfig.from_dict(cfg.get("model", {})))
    names = {f.name for f in fields(TrainConfig)}

    def merged(base: TrainConfig, override: dict) -> TrainConfig:
        unknown = set(override) - names
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        return TrainConfig(**{**asdict(base), **override})

    stages = [merged(st, o) for st, o in zip(default_schedule(), cfg.get("stages", [{}] * 3))]
    tail = None if cfg.get("tail", {}) is None else merged(native_tail(), cfg.get("tail", {}))
    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.jsonl")
    if trace_path.exists():
        trace_path.unlink()
    data_kw = {"train_seeds": cfg.get("seeds", list(range(6))), "frames": cfg.get("frames", 16),
               "size": tuple(cfg.get("size", (64, 64))), "log_path": trace_path}
    if args.stage == "all":
        res = train_desk_model(model, stages, tail=tail, **data_kw)
        stages = stages + ([tail] if tail is not None else [])
    else:
        stages = [s for s in stages if s.stage == int(args.stage)]
        res = train_schedule(model, stages, **data_kw)
    save_checkpoint(model, out, extra={"stages": [asdict(s) for s in stages]})
    return {"checkpoint": str(out), "trace": str(trace_path), "steps": len(res.trace),
            "seconds": {str(k): round(v, 1) for k, v in res.seconds.items()}}


def resolve_init(spec: str, seq, seed: int = 0) -> np.ndarray:
    kind, _, arg = spec.partition(":")
    if kind == "file":
        if not arg:
            raise ConfigError("--init file: needs a path")
        return initial_mask_provider("file", path=arg)
    if kind in ("oracle", "corrupted"):
        if seq.alphas is not None:
            alpha0 = seq.alphas[0]
        elif seq.mask is not None:
            alpha0 = seq.mask
        else:
            raise ConfigError(f"--init {kind} needs alpha_00000 or mask_00000 in the input")
        if kind == "oracle":
            return initial_mask_provider("oracle", alpha0)
        try:
            radius = int(arg)
        except ValueError:
            raise ConfigError(f"bad corruption radius {arg!r}") from None
        return initial_mask_provider("corrupted", alpha0, magnitude=radius, seed=seed)
    raise ConfigError(f"unknown --init {spec!r}")


def pad_to_multiple(a: np.ndarray, m: int = 16) -> np.ndarray:
    """Edge-pad the last two axes up to multiples of ``m``."""
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(0, -h % m), (0, -w % m)]
    return np.pad(a, pad, mode="edge")


def cmd_infer(args) -> dict:
    model, _ = load_checkpoint(args.ckpt)
    seq = read_sequence(args.inp, need_frames=True)
    init = resolve_init(args.init, seq)
    ablation = ablation_config(args.ablate_attn, args.ablate_update)
    h, w = seq.frames[0].shape[-2:]
    frames = [pad_to_multiple(f) for f in seq.frames]
    init = pad_to_multiple(np.asarray(init, dtype=np.float32).reshape(1, h, w))
    t0 = time.perf_counter()
    if args.direction == "bi":
        res = bidirectional_infer(model, frames, init, ablation)
    else:
        res = run_sequence(model, frames, init, ablation)
    elapsed = time.perf_counter() - t0
    alphas = [a[:, :h, :w] for a in res.alphas]
    # predicted masks live on the quarter grid; write them at frame resolution
    masks = [np.repeat(np.repeat(m, 4, axis=1), 4, axis=2)[:, :h, :w] for m in res.masks]
    write_sequence(args.out, alphas=alphas, f32=True,
                   meta={"direction": args.direction, "init": args.init, "attention": ablation.attention,
                         "update": ablation.update})
    if args.save_masks:
        mdir = Path(args.out) / "masks"
        write_sequence(mdir, alphas=masks)
    return {"out": str(args.out), "frames": len(alphas), "fps": round(len(alphas) / max(elapsed, 1e-9), 2)}


def cmd_eval(args) -> dict:
    pred = read_sequence(args.pred, need_frames=False, need_alphas=True)
    gt = read_sequence(args.gt, need_frames=False, need_alphas=True)
    if len(pred.alphas) != len(gt.alphas):
        raise DimensionMismatchError(f"{len(pred.alphas)} predicted frames vs {len(gt.alphas)} ground truth")
    report = evaluate_sequence(np.stack(pred.alphas), np.stack(gt.alphas), with_conn=args.conn == "on")
    name = Path(args.gt).name
    payload = metrics_json({name: report}, aggregate([report]),
                           {"pred": str(args.pred), "gt": str(args.gt), "conn": args.conn}, build_info())
    if args.out:
        atomic_write(args.out, payload)
    return report.to_dict()


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adamatting", description="Video matting with Fg/Bg memory attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic labelled sequence directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--size", type=_size, default=(64, 64), help="HxW, multiples of 16")
    s.add_argument("--mode", choices=("random", "static", "dynamic"), default="random",
                   help="background motion; random draws it from the seed like the training data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run the training schedule (all: stages 1-3 plus the native-resolution tail)")
    t.add_argument("--config", help="JSON training config (model, stages, seeds, frames, size)")
    t.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    t.add_argument("--init", help="checkpoint to continue from")
    t.add_argument("--trace", help="trace output (default: <out>.trace.jsonl)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict alpha mattes for a sequence directory")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--init", default="oracle", help="oracle | corrupted:R | file:PATH")
    i.add_argument("--direction", choices=("forward", "bi"), default="forward")
    i.add_argument("--ablate-attn", choices=("both", "short", "long"), default="both")
    i.add_argument("--ablate-update", choices=("mask", "alpha", "none"), default="mask")
    i.add_argument("--save-masks", action="store_true", help="also write predicted Fg/Bg masks")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted mattes against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--conn", choices=("on", "off"), default="on")
    e.add_argument("--out", help="metrics JSON path")
    e.set_defaults(func=cmd_eval)
    return p


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except MattingError as exc:
        return _fail(exc.kind, str(exc))
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io", str(exc))
    except (KeyError, ValueError) as exc:
        return _fail("invalid", str(exc))
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
