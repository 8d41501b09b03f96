"""CNN, ViT and shifted-window transformer regressors mapping an image to a variogram range."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (MultiHeadSelfAttention, WindowAttention, WindowLayout, patchify,
                        positional_encoding, shifted_window_mask, window_partition, window_reverse)
from .grid import Realization
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter, load_archive, save_archive
from .tensor import ShapeError, Tensor

FAMILIES = ("cnn", "vit", "swin")
BUDGET_TOLERANCE = 0.15


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters.

    ``channels`` are the CNN conv widths; ``depth`` is the ViT encoder depth or
    the per-stage count of W-MSA/SW-MSA block pairs for swin; ``embed_dim`` is
    the ViT width or the swin stage-1 width (doubled at each later stage);
    ``heads`` is a single count for ViT and per-stage counts for swin.
    """

    family: str
    input_size: int = 224
    channels: tuple = (16, 32, 64, 64)
    patch: int = 28
    depth: int | tuple = 6
    embed_dim: int = 48
    heads: int | tuple = 4
    mlp_ratio: float = 2.0
    head_hidden: int = 32
    window: int = 7
    pos_embedding: str = "sinusoidal"
    param_budget: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.input_size < 4:
            raise ValueError("input_size must be >= 4")
        if self.pos_embedding not in ("sinusoidal", "learned"):
            raise ValueError(f"pos_embedding must be 'sinusoidal' or 'learned', got {self.pos_embedding!r}")
        for name in ("channels", "depth", "heads"):
            val = getattr(self, name)
            if isinstance(val, list):
                object.__setattr__(self, name, tuple(val))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Widths below are the frozen outcome of ``search_spec`` (see that function)
# at 224 x 224 input; the desk variants shrink input and patch/window geometry.
PAPER_SPECS = {
    "cnn": ModelSpec("cnn", 224, channels=(15, 30, 60, 60), param_budget=240_000),
    "vit": ModelSpec("vit", 224, patch=28, depth=6, embed_dim=60, heads=4, mlp_ratio=2.0,
                     head_hidden=32, param_budget=226_000),
    "swin": ModelSpec("swin", 224, patch=4, depth=(1, 1, 1, 1), embed_dim=12, heads=(1, 2, 4, 8),
                      mlp_ratio=2.0, head_hidden=32, window=7, param_budget=233_000),
}

DESK_SPECS = {
    "cnn": ModelSpec("cnn", 64, channels=(8, 16, 32, 32)),
    "vit": ModelSpec("vit", 64, patch=8, depth=6, embed_dim=48, heads=4, mlp_ratio=2.0, head_hidden=32),
    "swin": ModelSpec("swin", 64, patch=4, depth=(1, 1, 1, 1), embed_dim=24, heads=(1, 2, 4, 8),
                      mlp_ratio=2.0, head_hidden=32, window=4),
}


def default_spec(family: str, profile: str = "paper") -> ModelSpec:
    table = {"paper": PAPER_SPECS, "desk": DESK_SPECS}.get(profile)
    if table is None:
        raise ValueError(f"unknown profile {profile!r}")
    if family not in table:
        raise ValueError(f"unknown model family {family!r}")
    return table[family]


# ---------------------------------------------------------------------------
# building blocks


class Mlp(Module):
    def __init__(self, dim, hidden, out, rng, dtype):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, out, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class RegressionHead(Module):
    """LayerNorm -> Linear -> GELU -> Linear(1)."""

    def __init__(self, dim, hidden, rng, dtype):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, hidden, 1, rng, dtype)

    def forward(self, x):
        return self.mlp(self.norm(x))


class CNN(Module):
    """conv-ReLU x3 (same padding) -> max pool -> conv-ReLU (valid) -> max pool -> fully connected."""

    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        c1, c2, c3, c4 = spec.channels
        self.convs = [Conv2d(1, c1, 3, rng, padding="same", dtype=dtype),
                      Conv2d(c1, c2, 3, rng, padding="same", dtype=dtype),
                      Conv2d(c2, c3, 3, rng, padding="same", dtype=dtype)]
        self.conv4 = Conv2d(c3, c4, 3, rng, padding=0, dtype=dtype)
        side = cnn_feature_side(spec.input_size)
        self.fc = Linear(c4 * side * side, 1, rng, dtype=dtype)

    def forward(self, x):
        for conv in self.convs:
            x = T.relu(conv(x))
        x = T.max_pool2d(x, 2)
        x = T.max_pool2d(T.relu(self.conv4(x)), 2)
        return self.fc(T.reshape(x, (x.shape[0], -1)))


def cnn_feature_side(n):
    side = (n // 2 - 2) // 2
    if side < 1:
        raise ShapeError(f"input size {n} too small for the CNN pooling geometry")
    return side


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, heads, mlp_ratio, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim, rng, dtype)

    def forward(self, x, mask=None, bias=None):
        x = T.add(x, self.attn(self.norm1(x), mask=mask, bias=bias))
        return T.add(x, self.mlp(self.norm2(x)))


class ViT(Module):
    """Patch partition -> linear projection -> + positional encoding -> encoder x depth -> mean token -> head."""

    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        p = spec.patch
        self.patch = p
        n_side = -(-spec.input_size // p)
        self.n_tokens = n_side * n_side
        d = spec.embed_dim
        self.proj = Linear(p * p, d, rng, dtype=dtype)
        if spec.pos_embedding == "learned":
            self.pos = Parameter((0.02 * rng.standard_normal((self.n_tokens, d))).astype(dtype))
        else:
            self.pos_table = positional_encoding(self.n_tokens, d).astype(dtype)
        self.layers = [EncoderLayer(d, spec.heads, spec.mlp_ratio, rng, dtype) for _ in range(spec.depth)]
        self.norm = LayerNorm(d, dtype=dtype)
        self.head = RegressionHead(d, spec.head_hidden, rng, dtype)

    def embed(self, x):
        tokens = self.proj(patchify(x, self.patch))
        if hasattr(self, "pos"):
            return T.add(tokens, self.pos)
        return T.add_constant(tokens, self.pos_table.astype(tokens.dtype))

    def forward(self, x):
        z = self.embed(x)
        for layer in self.layers:
            z = layer(z)
        z = T.mean(self.norm(z), axis=1)
        return self.head(z)


class SwinBlock(Module):
    def __init__(self, dim, heads, window, shift, mlp_ratio, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim, rng, dtype)
        self.window = window
        self.shift = shift

    def layout(self, h, w):
        return WindowLayout(self.window, self.shift, h, w)

    def forward(self, x):
        B, H, W, C = x.shape
        lay = self.layout(H, W)
        win = window_partition(self.norm1(x), lay)
        att = window_reverse(self.attn(win, shifted_window_mask(lay)), lay)
        x = T.add(x, att)
        return T.add(x, self.mlp(self.norm2(x)))


class PatchMerging(Module):
    """Concatenate each 2x2 neighbourhood (4C) -> LayerNorm -> Linear to 2C; halves the map side."""

    def __init__(self, dim, rng, dtype):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            x = T.pad(x, ((0, 0), (0, H % 2), (0, W % 2), (0, 0)))
        parts = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        return self.reduction(self.norm(T.concat(parts, axis=-1)))


def stage_window(side, window):
    """Window and shift used at a stage; a map no larger than the window gets one unshifted window."""
    if side <= window:
        return side, 0
    return window, window // 2


class Swin(Module):
    """Patch partition (patch x patch) -> 4 stages of [merge] + W-MSA/SW-MSA pairs -> average pool -> head."""

    def __init__(self, spec: ModelSpec, rng, dtype=np.float32, global_window: bool = False):
        depths = spec.depth if isinstance(spec.depth, tuple) else (spec.depth,) * 4
        heads = spec.heads if isinstance(spec.heads, tuple) else (spec.heads,) * len(depths)
        if len(heads) != len(depths):
            raise ValueError("swin: heads and depth need one entry per stage")
        self.patch = spec.patch
        side = -(-spec.input_size // spec.patch)
        dim = spec.embed_dim
        self.embed = Linear(spec.patch * spec.patch, dim, rng, dtype=dtype)
        self.embed_norm = LayerNorm(dim, dtype=dtype)
        self.merges = []
        self.stages = []
        self.sides = []
        for s, (n_pairs, h) in enumerate(zip(depths, heads)):
            if s > 0:
                self.merges.append(PatchMerging(dim, rng, dtype))
                dim *= 2
                side = -(-side // 2)
            if global_window:
                win, shift = side, 0
            else:
                win, shift = stage_window(side, spec.window)
            blocks = []
            for _ in range(n_pairs):
                blocks.append(SwinBlock(dim, h, win, 0, spec.mlp_ratio, rng, dtype))
                blocks.append(SwinBlock(dim, h, win, shift, spec.mlp_ratio, rng, dtype))
            self.stages.append(blocks)
            self.sides.append(side)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.head = RegressionHead(dim, spec.head_hidden, rng, dtype)

    def features(self, x):
        B = x.shape[0]
        side = self.sides[0]
        z = self.embed_norm(self.embed(patchify(x, self.patch)))
        z = T.reshape(z, (B, side, side, z.shape[-1]))
        for s, blocks in enumerate(self.stages):
            if s > 0:
                z = self.merges[s - 1](z)
            for blk in blocks:
                z = blk(z)
        return z

    def forward(self, x):
        z = self.features(x)
        B, H, W, C = z.shape
        z = T.mean(T.reshape(self.norm(z), (B, H * W, C)), axis=1)
        return self.head(z)


NETWORKS = {"cnn": CNN, "vit": ViT, "swin": Swin}


def build_network(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Module:
    return NETWORKS[spec.family](spec, np.random.default_rng(seed), dtype)


def count_parameters(spec: ModelSpec) -> int:
    return build_network(spec).num_parameters()


def check_budget(spec: ModelSpec, count: int):
    if spec.param_budget is None:
        return
    rel = abs(count - spec.param_budget) / spec.param_budget
    if rel > BUDGET_TOLERANCE:
        raise BudgetError(f"{spec.family}: {count} parameters is {rel:.1%} away from the "
                          f"{spec.param_budget} budget (tolerance {BUDGET_TOLERANCE:.0%})")


def search_spec(family: str, budget: int, input_size: int = 224) -> ModelSpec:
    """Pick free widths so the parameter count lands closest to ``budget``.

    cnn: widths (c, 2c, 4c, 4c) for c in 4..64.
    vit: depth 6, embed_dim a multiple of 4 from 16 to 128, heads 4, MLP ratio 2.
    swin: depth one pair per stage, stage-1 width a multiple of 4 from 4 to 64,
    heads doubling from 1, MLP ratio 2.
    Ties go to the smaller model.
    """
    if family == "cnn":
        cands = [replace(PAPER_SPECS["cnn"], input_size=input_size, channels=(c, 2 * c, 4 * c, 4 * c),
                         param_budget=budget) for c in range(4, 65)]
    elif family == "vit":
        cands = [replace(PAPER_SPECS["vit"], input_size=input_size, embed_dim=d, param_budget=budget)
                 for d in range(16, 129, 4)]
    elif family == "swin":
        cands = [replace(PAPER_SPECS["swin"], input_size=input_size, embed_dim=c, param_budget=budget)
                 for c in range(4, 65, 4)]
    else:
        raise ValueError(f"unknown model family {family!r}")
    scored = [(abs(count_parameters(s) - budget), count_parameters(s), i) for i, s in enumerate(cands)]
    return cands[min(scored)[2]]


# ---------------------------------------------------------------------------
# trained model + checkpoints


@dataclass
class TrainedModel:
    spec: ModelSpec
    network: Module
    range_min: float = 0.0
    range_max: float = 1.0
    input_mean: float = 0.0
    input_std: float = 1.0
    history: dict = field(default_factory=dict)
    seed: int = 0
    label_scale: str = "log"

    @property
    def num_parameters(self) -> int:
        return self.network.num_parameters()

    def _bounds(self):
        if self.label_scale == "linear":
            return self.range_min, self.range_max
        if self.label_scale == "log":
            return np.log(self.range_min), np.log(self.range_max)
        raise ValueError(f"unknown label scale {self.label_scale!r}")

    def normalize_labels(self, ranges):
        """Affine map of range (or log range) onto [0, 1] over the training span."""
        lo, hi = self._bounds()
        r = np.asarray(ranges, dtype=np.float64)
        return ((np.log(r) if self.label_scale == "log" else r) - lo) / (hi - lo)

    def denormalize(self, y):
        lo, hi = self._bounds()
        out = lo + np.asarray(y, dtype=np.float64) * (hi - lo)
        return np.exp(out) if self.label_scale == "log" else out

    def standardize(self, values):
        v = np.asarray(values, dtype=np.float32)
        return ((v - np.float32(self.input_mean)) / np.float32(self.input_std)).astype(np.float32)

    def forward(self, images) -> np.ndarray:
        """Normalized outputs (B,) for raw images (B, H, W)."""
        x = self.standardize(images)
        if x.ndim != 3 or x.shape[1:] != (self.spec.input_size,) * 2:
            raise ShapeError(f"expected images (B, {self.spec.input_size}, {self.spec.input_size}), got {x.shape}")
        with T.no_grad():
            out = self.network(Tensor(x[:, None]))
        return out.data[:, 0].astype(np.float64)

    def predict_values(self, values: np.ndarray) -> float:
        return float(self.denormalize(self.forward(np.asarray(values)[None]))[0])

    def predict_range(self, r: Realization) -> float:
        n = self.spec.input_size
        if (r.grid.nx, r.grid.ny) != (n, n):
            raise ShapeError(f"realization grid {r.grid.nx}x{r.grid.ny} does not match model input {n}x{n}")
        return self.predict_values(r.values)

    def meta(self) -> dict:
        return {"format": "nsbench-model", "version": 1, "spec": self.spec.to_dict(),
                "normalization": {"range_min": self.range_min, "range_max": self.range_max,
                                  "label_scale": self.label_scale,
                                  "input_mean": self.input_mean, "input_std": self.input_std},
                "seed": self.seed, "num_parameters": self.num_parameters, "history": self.history}

    def save(self, directory) -> Path:
        directory = Path(directory)
        save_archive(self.network.state_dict(), directory)
        (directory / "model.json").write_text(json.dumps(self.meta(), indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        if meta.get("format") != "nsbench-model":
            raise ValueError(f"{directory}: not a model checkpoint")
        spec = ModelSpec.from_dict(meta["spec"])
        model = build(spec, seed=meta.get("seed", 0), check=False)
        model.network.load_state_dict(load_archive(directory))
        norm = meta["normalization"]
        model.range_min, model.range_max = norm["range_min"], norm["range_max"]
        model.label_scale = norm.get("label_scale", "linear")
        model.input_mean, model.input_std = norm["input_mean"], norm["input_std"]
        model.history = meta.get("history", {})
        return model

    def import_weights(self, directory) -> list[str]:
        """Load an external archive after validating every name and shape; returns the loaded names."""
        state = load_archive(directory)
        self.network.load_state_dict(state, strict=True)
        return sorted(state)


def build(spec: ModelSpec, seed: int = 0, check: bool = True) -> TrainedModel:
    net = build_network(spec, seed)
    if check:
        check_budget(spec, net.num_parameters())
    return TrainedModel(spec, net, seed=seed)


def _build_family(family, spec, seed):
    if spec.family != family:
        raise ValueError(f"expected a {family} spec, got {spec.family}")
    return build(spec, seed)


def build_cnn(spec: ModelSpec | None = None, seed: int = 0) -> TrainedModel:
    return _build_family("cnn", spec or PAPER_SPECS["cnn"], seed)


def build_vit(spec: ModelSpec | None = None, seed: int = 0) -> TrainedModel:
    return _build_family("vit", spec or PAPER_SPECS["vit"], seed)


def build_swin(spec: ModelSpec | None = None, seed: int = 0) -> TrainedModel:
    return _build_family("swin", spec or PAPER_SPECS["swin"], seed)
