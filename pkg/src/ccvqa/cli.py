"""Command-line entry point: ``ccvqa <command> ...``.

Metrics and other records are printed as JSON lines on stdout; progress and
diagnostics go to stderr through :mod:`logging`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, TrainConfig
from .errors import CCVQAError, ConfigError

log = logging.getLogger("ccvqa")


def _emit(obj) -> None:
    print(obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True), flush=True)


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig.desk()
    try:
        return TrainConfig.load(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def cmd_gen_data(args) -> int:
    from .synth import DESK_OPTIONS, build_dataset

    opts = DESK_OPTIONS if args.preset == "desk" else {}
    manifests = build_dataset(args.videos, args.out, seed=args.seed, frames=args.frames, size=args.size,
                              fmt=args.format, **opts)
    for m in manifests:
        _emit({"split": m.split, "records": len(m.records), "answers": len(m.answers)})
    return 0


def cmd_pretrain_clip(args) -> int:
    from .checkpoint import save_checkpoint
    from .target_encoders import Vocabulary
    from .training import clip_checkpoint_path, pretrain_clip

    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(clip_pretrain_steps=args.steps)
    vocab = Vocabulary.load(Path(args.data) / "vocab.json")
    state, history = pretrain_clip(cfg, args.data, vocab, log_fn=_emit)
    path = Path(args.out) if args.out else clip_checkpoint_path(cfg, args.data, vocab)
    save_checkpoint(path, state, {"kind": "clip", "loss_history": history, "config": cfg.to_dict()})
    _emit({"checkpoint": str(path), "initial_loss": history[0], "final_loss": history[-1]})
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args.config)
    changes = {k: v for k, v in (("mode", args.mode), ("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    cfg = cfg.replace(**changes)
    cfg.validate()
    res = train(cfg, args.data, out=args.out, emit=lambda rec: _emit(rec.to_json()))
    if res.checkpoint is not None:
        log.info("best checkpoint (epoch %d) at %s", res.best_epoch, res.checkpoint)
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate_checkpoint

    _emit(evaluate_checkpoint(args.ckpt, args.split, args.data).to_json())
    return 0


def cmd_ablate(args) -> int:
    from .training import format_ablation_table, run_ablation, summarize_ablation

    cfg = _load_config(args.config)
    seeds = args.seeds if args.seeds else None
    rows = run_ablation(cfg, args.data, seeds=seeds, emit=_emit, out_dir=args.out_dir)
    _emit({"summary": summarize_ablation(rows)})
    print(format_ablation_table(rows), flush=True)
    return 0


def cmd_keyframes(args) -> int:
    from .keyframe import load_frames, select_keyframes

    sel = select_keyframes(load_frames(args.frames), args.k, seed=args.seed)
    for index, score in zip(sel.indices, sel.scores):
        _emit({"index": int(index), "score": float(score)})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, check_seed

    worst = 0.0
    for seed in range(args.start, args.start + args.seeds):
        r = check_seed(seed, args.coords)
        worst = max(worst, r.max_rel_error)
        _emit({"seed": seed, "max_rel_error": r.max_rel_error, "params": r.n_params, "seconds": round(r.seconds, 3),
               "passed": r.passed})
    _emit({"max_rel_error": worst, "tolerance": TOLERANCE, "passed": worst < TOLERANCE})
    return 0 if worst < TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccvqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic VideoQA dataset")
    g.add_argument("--videos", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=8, help="frames rendered per video")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--format", choices=("ppm", "png"), default="ppm")
    g.add_argument("--preset", choices=("desk", "all"), default="desk",
                   help="desk: 8-answer colour/shape set; all: every question type")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("pretrain-clip", help="contrastively pretrain the CLIP branch")
    c.add_argument("--data", required=True)
    c.add_argument("--steps", type=int)
    c.add_argument("--config")
    c.add_argument("--out", help="checkpoint path (default: cached inside the data directory)")
    c.set_defaults(func=cmd_pretrain_clip)

    t = sub.add_parser("train", help="train one model, streaming metrics")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", default="ccvqa.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--data", help="dataset directory (default: the one recorded in the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train all three modes over the configured seeds")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, nargs="*")
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_ablate)

    k = sub.add_parser("keyframes", help="select key frames from a frame directory")
    k.add_argument("--frames", required=True)
    k.add_argument("--k", type=int, default=1)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_keyframes)

    r = sub.add_parser("gradcheck", help="finite-difference check over random geometries")
    r.add_argument("--seeds", type=int, default=20)
    r.add_argument("--start", type=int, default=0)
    r.add_argument("--coords", type=int, default=2, help="coordinates sampled per parameter")
    r.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CCVQAError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
