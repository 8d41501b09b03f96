"""Dihedral augmentation, the training loop, and split evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .grid import Manifest, Realization
from .models import ModelSpec, TrainedModel, build
from .nn import Adam
from .tensor import ShapeError, Tensor

# Dihedral group of the square: t = 4 * flip + quarter_turns; 0 is the identity.
TRANSFORM_NAMES = ("identity", "rot90", "rot180", "rot270",
                   "flip", "flip_rot90", "flip_rot180", "flip_rot270")


class TrainingError(RuntimeError):
    pass


def dihedral(values: np.ndarray, t: int) -> np.ndarray:
    """Apply dihedral element ``t``: optional left-right flip, then ``t % 4`` quarter turns."""
    if not 0 <= t < 8:
        raise ValueError(f"dihedral transform index must be in 0..7, got {t}")
    v = np.asarray(values)
    if t % 2 and v.shape[-1] != v.shape[-2]:
        raise ShapeError(f"quarter turns need a square image, got {v.shape}")
    if t >= 4:
        v = v[..., :, ::-1]
    return np.ascontiguousarray(np.rot90(v, t % 4, axes=(-2, -1)))


def flip(values: np.ndarray) -> np.ndarray:
    return dihedral(values, 4)


def augment_plan(n_items: int, target_count: int, seed: int) -> np.ndarray:
    """(target_count, 2) array of (item, transform): originals first, then distinct non-identity pairs."""
    if target_count < n_items:
        raise ValueError(f"augmentation target {target_count} is below the source count {n_items}")
    if target_count > 8 * n_items:
        raise ValueError(f"augmentation target {target_count} exceeds the {8 * n_items} distinct "
                         f"(item, transform) pairs available for {n_items} items")
    extra = np.random.default_rng(np.random.SeedSequence([seed, 17])).choice(
        7 * n_items, size=target_count - n_items, replace=False)
    orig = np.stack([np.arange(n_items), np.zeros(n_items, dtype=np.int64)], axis=1)
    more = np.stack([extra // 7, extra % 7 + 1], axis=1)
    return np.concatenate([orig, more]).astype(np.int64)


def augment(items: list[Realization], target_count: int, seed: int = 0) -> list[Realization]:
    """Grow ``items`` to ``target_count`` with flipped/rotated copies; labels are copied unchanged."""
    plan = augment_plan(len(items), target_count, seed)
    return [items[i] if t == 0 else items[i].with_values(dihedral(items[i].values, t)) for i, t in plan]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 40
    patience: int = 10
    augment_to: int | None = None
    val_fraction: float = 0.2
    seed: int = 0
    label_scale: str = "log"

    def __post_init__(self):
        if self.label_scale not in ("log", "linear"):
            raise ValueError(f"label_scale must be 'log' or 'linear', got {self.label_scale!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5]")
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self):
        return dict(self.__dict__)


def load_arrays(manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    reals = manifest.load_all()
    if not reals:
        return np.zeros((0, manifest.grid.ny, manifest.grid.nx), np.float32), np.zeros(0)
    return np.stack([r.values for r in reals]), np.array([r.label.range_m for r in reals], dtype=np.float64)


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per distinct label, send round(fraction * count) items (at least one when count >= 2) to validation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    train, val = [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(idx.size)]
        k = 0 if idx.size < 2 else min(idx.size - 1, max(1, int(round(val_fraction * idx.size))))
        val.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _loss_on(model: TrainedModel, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    total = 0.0
    for sl in _batches(len(x), batch):
        pred = model.forward(x[sl])
        total += float(np.sum((pred - y[sl]) ** 2))
    return total / max(1, len(x))


def train(spec: ModelSpec, manifest: Manifest, cfg: TrainConfig, progress=None) -> TrainedModel:
    """Fit ``spec`` to the manifest's images; returns the best-validation model with its history.

    ``progress`` is an optional callable receiving one dict per epoch.
    """
    grid = manifest.grid
    if (grid.nx, grid.ny) != (spec.input_size, spec.input_size):
        raise ShapeError(f"manifest grid {grid.nx}x{grid.ny} does not match model input {spec.input_size}")
    if not manifest.items:
        raise ValueError("cannot train on an empty manifest")
    values, labels = load_arrays(manifest)
    train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)

    model = build(spec, seed=cfg.seed, check=False)
    lo, hi = float(labels[train_idx].min()), float(labels[train_idx].max())
    model.range_min, model.range_max = lo, (hi if hi > lo else lo + 1.0)
    model.label_scale = cfg.label_scale
    tv = values[train_idx].astype(np.float64)
    model.input_mean = float(tv.mean())
    model.input_std = float(tv.std()) or 1.0

    if cfg.augment_to is not None:
        plan = augment_plan(len(train_idx), cfg.augment_to, cfg.seed)
        x_train = np.stack([dihedral(values[train_idx[i]], t) for i, t in plan])
        y_train = labels[train_idx[plan[:, 0]]]
    else:
        x_train, y_train = values[train_idx], labels[train_idx]
    y_train = model.normalize_labels(y_train)
    if len(val_idx):
        x_val, y_val = values[val_idx], model.normalize_labels(labels[val_idx])
    else:
        x_val, y_val = x_train, y_train

    net = model.network
    params = net.parameters()
    opt = Adam(params, lr=cfg.lr)
    shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    xs = model.standardize(x_train)
    ys = y_train.astype(np.float32)

    history = {"train_loss": [], "val_loss": [], "best_epoch": -1, "best_val_loss": math.inf,
               "n_train": int(len(x_train)), "n_val": int(len(val_idx))}
    best_state = net.state_dict()
    stale = 0
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(xs))
        total = 0.0
        for b, sl in enumerate(_batches(len(order), cfg.batch_size)):
            idx = order[sl]
            opt.zero_grad()
            pred = net(Tensor(xs[idx][:, None]))
            loss = T.mse_loss(pred, ys[idx][:, None])
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            opt.step()
            total += lv * len(idx)
        train_loss = total / len(xs)
        val_loss = _loss_on(model, x_val, y_val, max(cfg.batch_size, 64))
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if val_loss < history["best_val_loss"]:
            history["best_val_loss"], history["best_epoch"] = val_loss, epoch
            best_state = net.state_dict()
            stale = 0
        else:
            stale += 1
        if progress is not None:
            progress({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if stale >= cfg.patience:
            break
    history["epochs_run"] = len(history["train_loss"])
    net.load_state_dict(best_state)
    model.history = history
    return model


def evaluate_split(model: TrainedModel, manifest: Manifest) -> list[tuple[float, float]]:
    """(true range, predicted range) per manifest item, in manifest order.

    Items are run one at a time so results never depend on batch composition
    and equal :meth:`TrainedModel.predict_range` exactly.
    """
    n = model.spec.input_size
    if manifest.items and (manifest.grid.nx, manifest.grid.ny) != (n, n):
        raise ShapeError(f"manifest grid {manifest.grid.nx}x{manifest.grid.ny} does not match model input {n}")
    return [(r.label.range_m, model.predict_range(r)) for r in manifest.load_all()]
