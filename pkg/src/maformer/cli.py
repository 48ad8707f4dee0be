"""``maformer`` command line: describe, gradcheck, train, eval, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .analysis import count_macs, count_params, stage_table, stage_table_text
from .config import ConfigError, ModelConfig, resolve_config
from .data import load_splits

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
GRADCHECK_MAX_PARAMS = 50_000
GRADCHECK_TOL = 1e-3


class UsageError(Exception):
    pass


def _model_config(ref) -> ModelConfig:
    """A model config from a preset name, a model JSON or a training JSON with a ``model`` key."""
    p = Path(ref)
    if p.suffix == ".json" and not p.exists():
        raise ConfigError(f"{p}: no such file")
    if p.is_file():
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if isinstance(d, dict) and "model" in d and not isinstance(d["model"], dict):
            m = d["model"]
            return resolve_config(str(p.parent / m) if (p.parent / m).is_file() else m)
        return ModelConfig.load(p)
    return resolve_config(ref)


def _train_config(ref, args):
    from .train import TrainConfig

    cfg = TrainConfig.load(ref)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "precision", None):
        cfg = replace(cfg, precision=args.precision)
    if getattr(args, "epochs", None):
        cfg = replace(cfg, epochs=args.epochs)
    return cfg


# --------------------------------------------------------------------------

def cmd_describe(args) -> int:
    cfg = _model_config(args.config)
    report = count_macs(cfg, args.input_size) if args.input_size else count_params(cfg)
    if args.json:
        out = {"config": cfg.to_dict(), "stages": stage_table(cfg),
               "cost": report.to_dict()}
        print(json.dumps(out, indent=2))
        return EXIT_OK
    print(f"model: {cfg.name}  input: {cfg.in_channels}x{cfg.img_size[0]}x{cfg.img_size[1]}")
    print(stage_table_text(cfg))
    print()
    print(report.to_text() if args.verbose else _summary(report))
    return EXIT_OK


def _summary(report) -> str:
    stages = {}
    for r in report.rows:
        key = r.path.split(".")[0]
        p, m = stages.get(key, (0, 0))
        stages[key] = (p + r.params, m + r.macs)
    w = max(len(k) for k in stages)
    lines = [f"{'module':<{w}}  {'params':>12}  {'FLOPs (MAC convention)':>24}"]
    for k, (p, m) in stages.items():
        lines.append(f"{k:<{w}}  {p:>12,d}  {m:>24,d}")
    lines.append(f"{'total':<{w}}  {report.total_params:>12,d}  {report.total_macs:>24,d}")
    lines.append(f"params {report.total_params / 1e6:.2f}M  FLOPs(MAC) {report.total_macs / 1e9:.2f}G")
    return "\n".join(lines)


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model

    cfg = _model_config(args.config)
    if args.precision and args.precision != "f64":
        print("note: gradcheck always runs in float64", file=sys.stderr)
    n = count_params(cfg).total_params
    if n > GRADCHECK_MAX_PARAMS:
        raise UsageError(f"config has {n:,d} parameters; gradcheck is limited to "
                         f"{GRADCHECK_MAX_PARAMS:,d}. Shrink stage_dims/stage_depths or img_size.")
    res = check_model(cfg, args.seed or 0, args.batch)
    if args.verbose:
        for k, v in res["errors"].items():
            print(f"{v:.3e}  {k}")
    ok = res["max_error"] < GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'}  params={n}  max_rel_err={res['max_error']:.3e}  "
          f"worst={res['worst']}  tol={GRADCHECK_TOL:g}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args.config, args)
    if args.overfit:
        cfg = replace(cfg, overfit_batch=args.overfit)
    out = Path(args.out_dir)
    res = train(cfg, out, print if args.verbose else None)
    print(f"steps={res['steps']}  final_train_loss={res['final_train_loss']:.4f}  "
          f"best_val_acc={res['best_val_accuracy']:.4f}  time={res['seconds']:.1f}s  out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import DatasetSpec, Split
    from .train import evaluate

    model, params, meta = checkpoint.load(args.checkpoint)
    dataset = DatasetSpec(image_size=model.img_size[0], num_classes=model.num_classes)
    if args.config:
        try:
            tc = _train_config(args.config, argparse.Namespace())
            expected, dataset = tc.model, tc.dataset
        except ConfigError:
            expected = _model_config(args.config)
        if expected.to_dict() != model.to_dict():
            diff = [k for k, v in expected.to_dict().items() if model.to_dict().get(k) != v]
            raise ConfigError(f"checkpoint {args.checkpoint} was saved for a different config "
                              f"(fields differ: {', '.join(diff)})")
    train_split, val_split = load_splits(dataset)
    split = train_split if args.split == "train" else val_split
    if args.limit:
        split = Split(split.images[:args.limit], split.labels[:args.limit])
    if args.precision:
        params = params.astype(np.float64 if args.precision == "f64" else np.float32)
    order = None
    if args.shuffle_seed is not None:
        order = np.random.default_rng(args.shuffle_seed).permutation(len(split))
    res = evaluate(params, model, split, order=order)
    print(json.dumps({"split": args.split, "accuracy": res["accuracy"], "loss": res["loss"],
                      "n": res["n"]}, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablate, ablation_table

    cfg = _train_config(args.config, args)
    grid = None
    if args.grid:
        grid = json.loads(Path(args.grid).read_text())
    rows = ablate(cfg, grid, args.out_dir, print if args.verbose else None)
    print(ablation_table(rows))
    none = [r for r in rows if r["global"] == "none"]
    gld = [r for r in rows if r["global"] == "gld"]
    ok = all(n["params"] < g["params"] for n in none for g in gld
             if (n["attention"], n["fusion"]) == (g["attention"], g["fusion"]))
    if not ok:
        print("FAIL: a 'none' cell does not have fewer parameters than its GLD counterpart")
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", required=True, help=config_help)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default="runs/latest")
        sp.add_argument("--precision", choices=["f32", "f64"], default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    d = sub.add_parser("describe", help="stage table and parameter/MAC report")
    common(d, "preset name (maformer_s|b|l) or model/train JSON")
    d.add_argument("--input-size", type=int, nargs="+", default=None)
    d.add_argument("--json", action="store_true")
    d.set_defaults(fn=cmd_describe)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    common(g, "model or train JSON (<= 50k parameters)")
    g.add_argument("--batch", type=int, default=2)
    g.set_defaults(fn=cmd_gradcheck)

    t = sub.add_parser("train", help="train a model; writes metrics.jsonl and best.ckpt")
    common(t, "train JSON")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--overfit", type=int, default=0, metavar="N",
                   help="train on the first N samples only")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", default=None, help="expected train/model config; mismatch is refused")
    e.add_argument("--split", choices=["train", "val"], default="val")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--shuffle-seed", type=int, default=None)
    e.add_argument("--precision", choices=["f32", "f64"], default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="local x global x fusion grid")
    common(a, "train JSON used for every cell")
    a.add_argument("--grid", default=None, help="JSON with attention_kinds/global_kinds/fusion_variants")
    a.add_argument("--epochs", type=int, default=None)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, UsageError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        where = f": {e.filename}" if e.filename else ""
        print(f"error: {e.strerror or e}{where}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
