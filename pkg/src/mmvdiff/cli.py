"""``mmvdiff`` command line: gen-data, train, sample, eval, ablate.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from .ablation import AXES, OverfitProtocol, ablation_report, run_axis
from .errors import ConfigError, MMVDError
from .evaluate import evaluate
from .export import export_video
from .pipeline import DiffusionModel, ModelConfig, modality_to_image
from .toyscene.io import make_scene, read_dataset, write_dataset
from .training import TrainConfig, Trainer, model_from_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def parse_seeds(text: str) -> list[int]:
    """``"A..B"`` (inclusive) or a single integer."""
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+)\s*)?", text)
    if not m:
        raise UsageError(f"bad --seeds {text!r}; expected A..B")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) is not None else lo
    if hi < lo:
        raise UsageError(f"bad --seeds {text!r}; B must be >= A")
    return list(range(lo, hi + 1))


def _literal(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_run_config(path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    """JSON ``{"model": {...}, "train": {...}}`` or ``model.key=value`` / ``train.key=value`` lines."""
    if path is None:
        return ModelConfig(), TrainConfig()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except ValueError:
        raw = {"model": {}, "train": {}}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or section not in raw:
                raise ConfigError(f"{path}:{n}: expected model.<key>=<value> or train.<key>=<value>")
            raw[section][name] = _literal(value.strip())
    if not isinstance(raw, dict) or set(raw) - {"model", "train"}:
        raise ConfigError(f"{path}: top level must only hold 'model' and 'train'")
    try:
        return ModelConfig(**raw.get("model", {})), TrainConfig(**raw.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> None:
    samples = [make_scene(s, views=args.views, frames=args.frames, height=args.size, width=args.size)
               for s in parse_seeds(args.seeds)]
    paths = write_dataset(samples, args.out)
    print(f"wrote {len(paths)} scenes to {args.out}")


def cmd_train(args) -> None:
    model_cfg, train_cfg = load_run_config(args.config)
    if args.steps is not None:
        train_cfg.steps = args.steps
    samples = read_dataset(args.data)
    if not samples:
        raise ConfigError(f"no scenes in {args.data}")
    model = DiffusionModel(model_cfg)
    trainer = Trainer(model, train_cfg)
    if args.resume:
        trainer.load(args.resume)
    scenes = [model.prepare(s) for s in samples]
    remaining = max(train_cfg.steps - trainer.step, 0)

    def report(step, loss):
        if step % args.log_every == 0 or step == train_cfg.steps:
            _log(f"step {step} loss {loss:.6f}")

    trainer.fit(scenes, remaining, callback=report)
    first = samples[0]
    trainer.save(args.out, {"data": {"views": first.views, "frames": first.num_frames,
                                     "size": first.rig.height}})
    print(f"saved checkpoint at step {trainer.step} to {args.out}")


def _scene_shape(ckpt_train: dict, args) -> dict:
    data = ckpt_train.get("data", {})
    return {"views": args.views or data.get("views", 2), "frames": args.frames or data.get("frames", 5),
            "size": args.size or data.get("size", 32)}


def cmd_sample(args) -> None:
    model, ckpt = model_from_checkpoint(args.ckpt)
    shape = _scene_shape(ckpt.train_config, args)
    sample = make_scene(args.scene, views=shape["views"], frames=shape["frames"], height=shape["size"],
                        width=shape["size"])
    scene = model.prepare(sample)
    lat = model.sample(scene, steps=args.steps, guidance=args.cfg, eta=args.eta, seed=args.seed,
                       use_text=not args.no_text, use_layout=not args.no_layout, use_ref=args.ref,
                       clip_x0=not args.no_clip)
    decoded = model.decode(lat)
    out = Path(args.out)
    for name, frames in decoded.items():
        export_video(modality_to_image(name, frames), out, name)
        np.save(out / f"{name}.npy", frames)
    print(f"wrote {', '.join(decoded)} for scene {args.scene} to {out}")


def cmd_eval(args) -> None:
    model, _ = model_from_checkpoint(args.ckpt)
    scenes = [model.prepare(s) for s in read_dataset(args.data)]
    if not scenes:
        raise ConfigError(f"no scenes in {args.data}")
    report = evaluate(model, scenes, steps=args.steps, guidance=args.cfg, seed=args.seed,
                      clip_x0=not args.no_clip)
    report.save(args.report)
    print(report.to_json())


def cmd_ablate(args) -> None:
    protocol = OverfitProtocol(scene_seed=args.scene, steps=args.steps, lr=args.lr,
                               sample_steps=args.sample_steps)
    results = run_axis(args.axis, protocol, log=_log)
    text = ablation_report(args.axis, results, protocol)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmvdiff", description="Toy multi-modal multi-view video diffusion.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render toy scenes to a dataset directory")
    g.add_argument("--seeds", required=True, help="inclusive range A..B")
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=2)
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--size", type=int, default=32)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON or key=value run config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate one scene and export it")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", type=int, required=True, help="scene seed")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--cfg", type=float, default=2.0, help="guidance scale")
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--no-layout", action="store_true")
    s.add_argument("--no-text", action="store_true")
    s.add_argument("--ref", action="store_true", help="condition on the first-frame reference")
    s.add_argument("--no-clip", action="store_true", help="do not clip x0 estimates to the codec range")
    for flag in ("--views", "--frames", "--size"):
        s.add_argument(flag, type=int)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="sample every scene of a dataset and write a report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--cfg", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-clip", action="store_true", help="do not clip x0 estimates to the codec range")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="rerun an ablation axis with the one-scene overfit protocol")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--sample-steps", type=int, default=50)
    a.add_argument("--lr", type=float, default=OverfitProtocol.lr)
    a.add_argument("--scene", type=int, default=0)
    a.add_argument("--out", help="also write the report here")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"mmvdiff {args.command}: {exc}", file=sys.stderr)
        return 2
    except (MMVDError, OSError) as exc:
        print(f"mmvdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
