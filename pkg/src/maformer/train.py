"""Training, evaluation and the ablation grid."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .analysis import count_params
from .config import ConfigError, ModelConfig, resolve_config
from .data import DatasetSpec, Split, batches, load_splits
from .model import forward, init_params
from .optim import AdamW, lr_at
from .params import ParameterStore
from .tensor import Tape

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class OptimizerSpec:
    lr: float = 1.6e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class ScheduleSpec:
    warmup_epochs: float = 1.0
    min_lr: float = 1e-5


@dataclass
class TrainConfig:
    model: ModelConfig
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    drop_path: float | None = None  # overrides model.drop_path_rate when set
    precision: str = "f32"
    overfit_batch: int = 0  # >0: train on the first N training samples only
    max_steps: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision: expected one of {sorted(PRECISIONS)}")
        if self.drop_path is not None:
            self.model = replace(self.model, drop_path_rate=float(self.drop_path))
        if self.model.img_size != [self.dataset.image_size] * 2:
            raise ConfigError(f"dataset.image_size: {self.dataset.image_size} does not match "
                              f"model.img_size {self.model.img_size}")
        if self.dataset.kind == "synthetic_shapes" and self.model.num_classes != self.dataset.num_classes:
            raise ConfigError("dataset.num_classes: does not match model.num_classes")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"{bad[0]}: unknown field")
        if "model" not in d:
            raise ConfigError("model: required (preset name, path or mapping)")
        d["model"] = resolve_config(d["model"])
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        for key, typ in (("optimizer", OptimizerSpec), ("schedule", ScheduleSpec)):
            if key in d:
                sub = d[key]
                unknown = sorted(set(sub) - set(typ.__dataclass_fields__))
                if unknown:
                    raise ConfigError(f"{key}.{unknown[0]}: unknown field")
                d[key] = typ(**sub)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"{path}: cannot read ({e.strerror})") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "model" not in d and "stage_dims" in d:
            # a bare model config trains with defaults
            return cls(model=ModelConfig.from_dict(d))
        ref = d.get("model")
        if isinstance(ref, str) and (path.parent / ref).is_file():
            d["model"] = str(path.parent / ref)
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d


# --------------------------------------------------------------------------

def evaluate(params: ParameterStore, config: ModelConfig, split: Split, batch_size: int = 100,
             order=None) -> dict:
    """Top-1 accuracy and mean cross-entropy; ``order`` permutes evaluation order."""
    idx = np.arange(len(split)) if order is None else np.asarray(order)
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        x = split.images[sel].astype(params.dtype, copy=False)
        logits = forward(x, config, params)
        correct += int((logits.data.argmax(axis=1) == split.labels[sel]).sum())
        loss_sum += float(T.cross_entropy(logits, split.labels[sel]).data) * len(sel)
    n = max(len(idx), 1)
    return {"accuracy": correct / n, "loss": loss_sum / n, "n": int(len(idx))}


def train_step(params: ParameterStore, config: ModelConfig, x, y, opt: AdamW, lr: float, rng):
    tape = Tape()
    scope = params.bind(tape)
    logits = forward(x, config, scope, rng)
    loss = T.cross_entropy(logits, y)
    tape.backward(loss)
    opt.step(scope.grads(), lr)
    acc = float((logits.data.argmax(axis=1) == y).mean())
    return float(loss.data), acc


class MetricsLog:
    """Line-delimited JSON records; floats are written with full repr for bit-level diffs."""

    def __init__(self, path: Path | None, echo=None):
        self.path = path
        self.echo = echo
        self.records = []
        if path is not None:
            path.write_text("")

    def write(self, **rec):
        self.records.append(rec)
        line = json.dumps(rec, sort_keys=True)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(line + "\n")
        if self.echo:
            self.echo(line)


def train(cfg: TrainConfig, out_dir=None, echo=None, splits=None) -> dict:
    """Run training; returns a summary with the final parameters and best validation accuracy."""
    dtype = PRECISIONS[cfg.precision]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    log = MetricsLog(out / "metrics.jsonl" if out else None, echo)

    train_split, val_split = splits if splits is not None else load_splits(cfg.dataset)
    if cfg.overfit_batch:
        n = cfg.overfit_batch
        train_split = Split(train_split.images[:n], train_split.labels[:n])

    model = cfg.model
    params = init_params(model, cfg.seed, dtype)
    o = cfg.optimizer
    opt = AdamW(params.arrays, o.lr, tuple(o.betas), o.eps, o.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    dp_rng = np.random.default_rng(cfg.seed + 2) if model.drop_path_rate > 0 else None

    steps_per_epoch = -(-len(train_split) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    warmup = int(round(cfg.schedule.warmup_epochs * steps_per_epoch))

    best = {"accuracy": -1.0, "epoch": -1}
    step = 0
    t0 = time.perf_counter()
    last_loss = float("nan")
    for epoch in range(cfg.epochs):
        losses, accs, sizes = [], [], []
        for x, y in batches(train_split, cfg.batch_size, rng, cfg.dataset.hflip):
            if step >= total:
                break
            lr = lr_at(step, total, o.lr, warmup, cfg.schedule.min_lr)
            loss, acc = train_step(params, model, x.astype(dtype, copy=False), y, opt, lr, dp_rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(y))
            last_loss = loss
            step += 1
            if cfg.overfit_batch:
                log.write(step=step, epoch=epoch, split="train", loss=loss, accuracy=acc, lr=lr)
        if not losses:
            break
        w = np.array(sizes, dtype=np.float64)
        tr_loss = float(np.dot(losses, w) / w.sum())
        tr_acc = float(np.dot(accs, w) / w.sum())
        if not cfg.overfit_batch:
            log.write(step=step, epoch=epoch, split="train", loss=tr_loss, accuracy=tr_acc, lr=lr)
        last_epoch = (epoch == cfg.epochs - 1) or step >= total
        if not cfg.overfit_batch and ((epoch + 1) % cfg.eval_every == 0 or last_epoch):
            ev = evaluate(params, model, val_split)
            log.write(step=step, epoch=epoch, split="val", loss=ev["loss"], accuracy=ev["accuracy"], lr=lr)
            if ev["accuracy"] > best["accuracy"]:
                best = {"accuracy": ev["accuracy"], "epoch": epoch}
                if out is not None:
                    checkpoint.save(out / "best.ckpt", model, params,
                                    {"epoch": epoch, "step": step, "val_accuracy": ev["accuracy"]})
        if step >= total:
            break
    if out is not None:
        checkpoint.save(out / "last.ckpt", model, params, {"step": step})
        if cfg.overfit_batch:
            checkpoint.save(out / "best.ckpt", model, params, {"step": step})
    return {"params": params, "steps": step, "best_val_accuracy": best["accuracy"],
            "best_epoch": best["epoch"], "final_train_loss": last_loss,
            "seconds": time.perf_counter() - t0, "records": log.records}


# --------------------------------------------------------------------------

ATTENTION_AXIS = ("shifted_window", "cross_shaped")
GLOBAL_AXIS = ("gld", "conv", "none")
FUSION_AXIS = ("maf", "local_enhanced")


def ablation_cells(grid: dict | None = None):
    grid = grid or {}
    att = grid.get("attention_kinds", ATTENTION_AXIS)
    glob = grid.get("global_kinds", GLOBAL_AXIS)
    fus = grid.get("fusion_variants", FUSION_AXIS)
    return list(itertools.product(att, glob, fus))


def ablate(cfg: TrainConfig, grid: dict | None = None, out_dir=None, echo=None) -> list[dict]:
    """Train every cell of the grid with identical seed, data and budget."""
    splits = load_splits(cfg.dataset)
    rows = []
    for att, glob, fus in ablation_cells(grid):
        model = replace(cfg.model, attention_kinds=[att] * 4, global_kind=glob, fusion_variant=fus)
        model.validate()
        cell = replace(cfg, model=model)
        name = f"{att}-{glob}-{fus}"
        sub = Path(out_dir) / name if out_dir is not None else None
        res = train(cell, sub, None, splits)
        row = {"attention": att, "global": glob, "fusion": fus,
               "params": count_params(model).total_params,
               "val_accuracy": res["best_val_accuracy"], "final_train_loss": res["final_train_loss"]}
        rows.append(row)
        if echo:
            echo(json.dumps(row, sort_keys=True))
    if out_dir is not None:
        Path(out_dir, "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return rows


def ablation_table(rows: list[dict]) -> str:
    head = f"{'local aggregation':<18} {'global':<6} {'fusion':<15} {'params':>10} {'val acc':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['attention']:<18} {r['global']:<6} {r['fusion']:<15} "
                     f"{r['params']:>10,d} {100 * r['val_accuracy']:>7.2f}%")
    return "\n".join(lines)
