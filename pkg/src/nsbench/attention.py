"""Attention primitives shared by the ViT and shifted-window models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, Parameter
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, bias: Tensor | None = None,
                                 return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k) + bias + mask) v over the last two axes.

    ``mask`` is a constant array (0 or MASK_VALUE) broadcastable to the logits;
    ``bias`` is a Tensor whose shape matches the trailing logit dimensions.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1]
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    logits = T.scale(T.matmul(q, T.transpose(k, perm)), 1.0 / math.sqrt(d_k))
    if bias is not None:
        logits = T.add(logits, bias)
    if mask is not None:
        logits = T.add_constant(logits, mask)
    w = T.softmax(logits, axis=-1)
    out = T.matmul(w, v)
    return (out, w) if return_weights else out


@dataclass
class AttentionWeights:
    """Projections for ``heads`` heads, stored fused: head i owns columns i*d_k:(i+1)*d_k."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None

    def __post_init__(self):
        d_model = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape[0] != d_model or w.shape[1] % self.heads:
                raise ShapeError(f"{name}: shape {w.shape} incompatible with d_model={d_model}, heads={self.heads}")
        if self.wq.shape[1] != self.wk.shape[1]:
            raise ShapeError(f"wq {self.wq.shape} and wk {self.wk.shape} disagree on d_k")
        if self.wo.shape != (self.wv.shape[1], d_model):
            raise ShapeError(f"wo: shape {self.wo.shape}, expected {(self.wv.shape[1], d_model)}")

    @property
    def d_model(self):
        return self.wq.shape[0]

    @property
    def d_k(self):
        return self.wq.shape[1] // self.heads

    @property
    def d_v(self):
        return self.wv.shape[1] // self.heads

    def head(self, i):
        """(W_i^Q, W_i^K, W_i^V) as arrays."""
        sk, sv = slice(i * self.d_k, (i + 1) * self.d_k), slice(i * self.d_v, (i + 1) * self.d_v)
        return self.wq.data[:, sk], self.wk.data[:, sk], self.wv.data[:, sv]

    @classmethod
    def init(cls, d_model, heads, rng, bias=True, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        lim = math.sqrt(6.0 / (2 * d_model))

        def mat():
            return Parameter(rng.uniform(-lim, lim, (d_model, d_model)).astype(dtype))

        def vec():
            return Parameter(np.zeros(d_model, dtype=dtype)) if bias else None

        return cls(mat(), mat(), mat(), mat(), heads, vec(), vec(), vec(), vec())


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, width = x.shape
    x = T.reshape(x, (*lead, n, heads, width // heads))
    nd = len(lead)
    return T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    nd = len(lead)
    x = T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return T.reshape(x, (*lead, n, h * d))


def multi_head_attention(x: Tensor, weights: AttentionWeights, mask=None, bias: Tensor | None = None) -> Tensor:
    """Self-attention Concat(head_1..head_h) W_o with head_i = Attention(x W_i^Q, x W_i^K, x W_i^V).

    ``x`` is (..., n, d_model). ``bias`` (heads, n, n) is added to every
    head's logits; ``mask`` must broadcast against (..., heads, n, n).
    """
    if x.shape[-1] != weights.d_model:
        raise ShapeError(f"multi_head_attention: input width {x.shape[-1]} != d_model {weights.d_model}")
    q = _split_heads(T.linear(x, weights.wq, weights.bq), weights.heads)
    k = _split_heads(T.linear(x, weights.wk, weights.bk), weights.heads)
    v = _split_heads(T.linear(x, weights.wv, weights.bv), weights.heads)
    out = scaled_dot_product_attention(q, k, v, mask=mask, bias=bias)
    return T.linear(_merge_heads(out), weights.wo, weights.bo)


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model, heads, rng, bias=True, dtype=np.float32):
        self.attn = AttentionWeights.init(d_model, heads, rng, bias, dtype)
        for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            setattr(self, name, getattr(self.attn, name))

    def forward(self, x, mask=None, bias=None):
        return multi_head_attention(x, self.attn, mask, bias)


def positional_encoding(n_positions: int, d_m: int) -> np.ndarray:
    """Sinusoidal table: sin(pos / 10000^(j/d_m)) for even j, cos(pos / 10000^((j-1)/d_m)) for odd j."""
    if n_positions < 1 or d_m < 1:
        raise ValueError("positional_encoding needs n_positions >= 1 and d_m >= 1")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    j = np.arange(d_m)
    even = j - (j % 2)
    angle = pos / np.power(10000.0, even / d_m)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------------------
# patches


def patch_partition(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) image -> (n_patches, patch*patch*C), patches row-major, each flattened (row, col, channel).

    Sides that are not multiples of ``patch`` are zero-padded at the bottom/right.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    Hp, Wp = -(-H // patch) * patch, -(-W // patch) * patch
    if (Hp, Wp) != (H, W):
        img = np.pad(img, ((0, Hp - H), (0, Wp - W), (0, 0)))
    x = img.reshape(Hp // patch, patch, Wp // patch, patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(-1, patch * patch * C)


def patchify(x: Tensor, patch: int) -> Tensor:
    """Differentiable batch version of :func:`patch_partition` for NCHW input -> (B, N, p*p*C)."""
    B, C, H, W = x.shape
    Hp, Wp = -(-H // patch) * patch, -(-W // patch) * patch
    if (Hp, Wp) != (H, W):
        x = T.pad(x, ((0, 0), (0, 0), (0, Hp - H), (0, Wp - W)))
    x = T.reshape(x, (B, C, Hp // patch, patch, Wp // patch, patch))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))
    return T.reshape(x, (B, (Hp // patch) * (Wp // patch), patch * patch * C))


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowLayout:
    window_size: int
    shift: int
    height: int
    width: int

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift {self.shift} must lie in [0, {self.window_size})")

    @property
    def padded(self) -> tuple[int, int]:
        w = self.window_size
        return -(-self.height // w) * w, -(-self.width // w) * w

    @property
    def n_windows(self) -> int:
        Hp, Wp = self.padded
        return (Hp // self.window_size) * (Wp // self.window_size)

    @property
    def tokens(self) -> int:
        return self.window_size ** 2


def window_partition(x: Tensor, layout: WindowLayout) -> Tensor:
    """(B, H, W, C) -> (B * n_windows, window^2, C); pads bottom/right, then rolls by -shift."""
    B, H, W, C = x.shape
    if (H, W) != (layout.height, layout.width):
        raise ShapeError(f"window_partition: map {H}x{W} does not match layout {layout.height}x{layout.width}")
    Hp, Wp = layout.padded
    if (Hp, Wp) != (H, W):
        x = T.pad(x, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
    if layout.shift:
        x = T.roll(x, (-layout.shift, -layout.shift), (1, 2))
    w = layout.window_size
    x = T.reshape(x, (B, Hp // w, w, Wp // w, w, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * layout.n_windows, w * w, C))


def window_reverse(windows: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition`."""
    w = layout.window_size
    Hp, Wp = layout.padded
    nw, n, C = windows.shape
    if n != w * w or nw % layout.n_windows:
        raise ShapeError(f"window_reverse: windows {windows.shape} do not match layout {layout}")
    B = nw // layout.n_windows
    x = T.reshape(windows, (B, Hp // w, Wp // w, w, w, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, Hp, Wp, C))
    if layout.shift:
        x = T.roll(x, (layout.shift, layout.shift), (1, 2))
    if (Hp, Wp) != (layout.height, layout.width):
        x = x[:, :layout.height, :layout.width, :]
    return x


def shifted_window_mask(layout: WindowLayout) -> np.ndarray | None:
    """(n_windows, N, N) additive mask for the rolled map, or None when shift is 0.

    Regions of the padded map are labelled before the roll; after rolling,
    tokens sharing a window but coming from different regions were not
    neighbours in the original map and may not attend to each other.
    """
    if layout.shift == 0:
        return None
    Hp, Wp = layout.padded
    w, s = layout.window_size, layout.shift
    region = np.zeros((Hp, Wp), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            region[hs, ws] = cnt
            cnt += 1
    ids = region.reshape(Hp // w, w, Wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    diff = ids[:, None, :] != ids[:, :, None]
    return np.where(diff, MASK_VALUE, 0.0)


def relative_position_index(window: int) -> np.ndarray:
    """(N, N) index into a ((2w-1)^2)-row bias table for token pairs of a w x w window."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


class WindowAttention(Module):
    """Multi-head self-attention inside windows with a learned relative position bias."""

    def __init__(self, dim, heads, window, rng, dtype=np.float32):
        self.msa = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.rel_bias = Parameter(
            (0.02 * rng.standard_normal(((2 * window - 1) ** 2, heads))).astype(dtype))
        self.window = window
        self.heads = heads
        self._index = relative_position_index(window)

    def bias(self) -> Tensor:
        b = T.take(self.rel_bias, self._index)  # (N, N, h)
        return T.transpose(b, (2, 0, 1))

    def forward(self, windows: Tensor, mask=None) -> Tensor:
        if mask is not None:
            nw = mask.shape[0]
            B = windows.shape[0] // nw
            mask = np.tile(mask, (B, 1, 1))[:, None]
        return self.msa(windows, mask=mask, bias=self.bias())
