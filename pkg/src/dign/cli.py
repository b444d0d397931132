"""Command-line entry points: gen, train, eval, gradcheck, ablate, explain, ksweep."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import DignError
from .graphdata import generate_scene, load_scene, save_dataset
from .trainer import (ABLATION_VARIANTS, EVAL_INDEX_OFFSET, TrainConfig, ablate,
                      evaluate, explain, format_table, gradcheck, k_sweep,
                      load_checkpoint, load_dataset, model_from_checkpoint, train)


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


def _cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = [generate_scene(cfg.synthetic, i) for i in range(cfg.train_scenes)]
    test_syn = replace(cfg.synthetic, bias_strength=0.0)
    test_set = [generate_scene(test_syn, EVAL_INDEX_OFFSET + i) for i in range(cfg.eval_scenes)]
    save_dataset(train_set, out / "train.jsonl")
    save_dataset(test_set, out / "test.jsonl")
    print(f"wrote {len(train_set)} train scenes and {len(test_set)} test scenes to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.data:
        cfg = replace(cfg, train_path=str(Path(args.data) / "train.jsonl"),
                      eval_path=str(Path(args.data) / "test.jsonl"))
    result = train(cfg, out_path=args.out, metrics_path=args.metrics)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.step} steps; final batch loss "
          f"{last.get('total', float('nan')):.4f}, train acc {last.get('acc', 0.0):.3f}")
    if args.out:
        print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data_path = Path(args.data)
    if data_path.is_dir():
        data_path = data_path / "test.jsonl"
    instances = load_dataset(data_path)
    report = evaluate(ckpt, instances)
    print(json.dumps({
        "accuracy": report.accuracy,
        "unmatchable_instances": report.unmatchable_instances,
        "losses": report.losses,
    }, indent=2))
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck(dropout_on=args.dropout)
    if report.skipped:
        print(report.message)
        return 0
    for name in sorted(report.per_tensor):
        print(f"{name:32s} {report.per_tensor[name]:.3e}")
    print(report.message)
    return 0 if report.passed else 1


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    result = ablate(cfg, variants, n_seeds=args.seeds)
    print(format_table(result, "variant"))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=2)
        print(f"table written to {args.out}")
    return 0


def _cmd_explain(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    scene = load_scene(args.scene)
    attribution = explain(model, scene, eps=ckpt.config.eps)
    with open(args.out, "w") as fh:
        json.dump(attribution, fh, indent=2)
    print(f"attribution written to {args.out}")
    return 0


def _cmd_ksweep(args) -> int:
    cfg = _load_config(args.config)
    k_values = [int(v) for v in args.k.split(",") if v.strip()]
    result = k_sweep(cfg, k_values, n_seeds=args.seeds)
    print(format_table(result, "chunks"))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=2)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dign",
        description="Disentangled interventional graph grounding on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="checkpoint JSON path")
    p.add_argument("--metrics", default=None, help="metrics JSON-lines path")
    p.add_argument("--data", default=None, help="directory with train.jsonl/test.jsonl")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at IoU@0.5")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    p.add_argument("--dropout", action="store_true",
                   help="ask for the (skipped) stochastic path")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--config", default=None)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("explain", help="export routing-weight motif attribution")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("ksweep", help="accuracy per chunk count")
    p.add_argument("--config", default=None)
    p.add_argument("--k", default="1,2,4,8")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ksweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
