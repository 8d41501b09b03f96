"""A small reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Node ids increase
with creation, so sorting the nodes reachable from the loss by id gives a
topological order; :class:`Tape` replays it backwards.

Broadcasting is deliberately limited. ``add``/``mul`` accept either equal
shapes or a right operand whose shape equals the trailing dimensions of the
left one (the bias pattern); anything else needs an explicit reshape or
``broadcast_to``.

Arrays keep the dtype they were created with: float32 for training, float64
for gradient checks.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_state = threading.local()

# Set to True to assert every op output is finite.
CHECK_FINITE = False


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make(data, parents, backward_fn, op) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(p for p in t.parents if p.requires_grad)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor, seed_grad=None):
        grads = {root.node_id: np.ones_like(root.data) if seed_grad is None else seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_root(loss).backward(loss)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _bias_compatible(big, small):
    return small.ndim <= big.ndim and big.shape[big.ndim - small.ndim:] == small.shape


def _reduce_to(g, shape):
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        if _bias_compatible(b.data, a.data):
            a, b = b, a
        elif not _bias_compatible(a.data, b.data):
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    sb = b.shape

    def bw(g):
        return g, _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        if _bias_compatible(b.data, a.data):
            a, b = b, a
        elif not _bias_compatible(a.data, b.data):
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def add_constant(a: Tensor, c) -> Tensor:
    """Add a non-differentiable array using full numpy broadcasting (masks, encodings)."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data + c
    if out.shape != a.shape:
        raise ShapeError(f"add_constant: constant {c.shape} would change shape {a.shape}")
    return _make(out, (a,), lambda g: (g,), "add_constant")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m) with equal batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if bd.ndim == 2:
        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return _make(ad @ bd, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if not axes else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None):
            raise TypeError("slice supports basic indexing only")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw, "slice")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Repeat along new leading axes or axes of size 1."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}")
    expanded = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)
    src = a.shape

    def bw(g):
        g = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (_reduce_to(g, src).reshape(src),)

    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return _make(out, (a,), bw, "broadcast_to")


def roll(a: Tensor, shifts, axes) -> Tensor:
    neg = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg, axes),), "roll")


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for ``np.pad``."""
    pad_width = tuple(tuple(p) for p in pad_width)
    idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g: (np.ascontiguousarray(g[idx]),), "pad")


def take(table: Tensor, index) -> Tensor:
    """Gather rows ``table[index]`` (integer array of any shape); backward scatter-adds."""
    index = np.asarray(index)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index.ravel(), g.reshape(-1, *shape[1:]))
        return (full,)

    return _make(table.data[index], (table,), bw, "take")


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    u = c * (x + x.dtype.type(0.044715) * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1 + t)

    def bw(g):
        du = c * (1 + x.dtype.type(3 * 0.044715) * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def softmax(a: Tensor, axis=-1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize along ``axis`` then apply an optional affine map (shape = that axis)."""
    axis = axis % a.ndim
    x = np.moveaxis(a.data, axis, -1)
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    n = x.shape[-1]
    gd = None if gamma is None else gamma.data
    out = xhat if gd is None else xhat * gd
    if beta is not None:
        out = out + beta.data
    parents = [a] + [t for t in (gamma, beta) if t is not None]

    def bw(g):
        g = np.moveaxis(g, axis, -1)
        gh = g if gd is None else g * gd
        gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        grads = [np.moveaxis(gx, -1, axis)]
        flat = g.reshape(-1, n)
        if gamma is not None:
            grads.append((flat * xhat.reshape(-1, n)).sum(0))
        if beta is not None:
            grads.append(flat.sum(0))
        return tuple(grads)

    return _make(np.moveaxis(out, -1, axis), parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x (B, C, H, W) with w (O, C, kh, kw); symmetric zero padding.

    ``padding="same"`` pads (k - 1) // 2 on each side (odd kernels, stride 1).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} must be rank 4")
    B, C, H, W = x.shape
    O, Ck, kh, kw = w.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    sh, sw = _pair(stride)
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0 or (sh, sw) != (1, 1):
            raise ShapeError("conv2d: 'same' padding needs odd kernels and stride 1")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        ph, pw = _pair(padding)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    # im2col in NHWC with columns ordered (ki, kj, c): every tap is a contiguous channel block
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def tap(i, j):
        return (slice(None), slice(i, i + sh * (Ho - 1) + 1, sh), slice(j, j + sw * (Wo - 1) + 1, sw))

    cols = np.concatenate([xp[tap(i, j)] for i, j in taps], axis=-1).reshape(B * Ho * Wo, kh * kw * C)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1).reshape(O, -1))
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = [x, w] + ([b] if b is not None else [])

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        grads = [None, np.ascontiguousarray(gw)]
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, kh * kw * C)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for t, (i, j) in enumerate(taps):
                gxp[tap(i, j)] += gcols[..., t * C:(t + 1) * C]
            grads[0] = np.ascontiguousarray(gxp[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2))
        if b is not None:
            grads.append(g2.sum(0))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def _pool_windows(x, k):
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"pool: window {k} larger than input {H}x{W}")
    xc = x[:, :, :Ho * k, :Wo * k]
    return xc.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped."""
    B, C, H, W = x.shape
    win = _pool_windows(x.data, k)
    arg = win.argmax(-1)
    out = np.take_along_axis(win, arg[..., None], -1)[..., 0]
    Ho, Wo = out.shape[2:]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], -1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :Ho * k, :Wo * k] = gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            B, C, Ho * k, Wo * k)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def mean_pool2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    win = _pool_windows(x.data, k)
    out = win.mean(-1)
    Ho, Wo = out.shape[2:]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        rep = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / g.dtype.type(k * k)
        gx[:, :, :Ho * k, :Wo * k] = rep
        return (gx,)

    return _make(out, (x,), bw, "mean_pool2d")


# ---------------------------------------------------------------------------
# composites


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size

    def bw(g):
        return (g * (2.0 / n) * diff,)

    return _make(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), bw, "mse_loss")


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(f, arrays, eps=1e-4, index_sets=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array (mutated in place, restored)."""
    out = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        idxs = np.ndindex(arr.shape) if index_sets is None else index_sets[k]
        for idx in idxs:
            old = arr[idx]
            arr[idx] = old + eps
            fp = f(*arrays)
            arr[idx] = old - eps
            fm = f(*arrays)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def grad_check(fn, arrays, eps=1e-4, seed=0):
    """Max relative error between analytic and finite-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. A random linear functional of the
    output is used when the output is not already scalar. Error metric:
    ||analytic - numeric||_inf / max(1, ||numeric||_inf), worst over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(*arrs, grad=False):
        nonlocal probe
        ts = [Tensor(a.copy(), requires_grad=grad) for a in arrs]
        y = fn(*ts)
        if y.data.size != 1:
            if probe is None:
                probe = np.random.default_rng(seed).standard_normal(y.shape)
            y = sum_(mul(y, Tensor(probe)))
        return y, ts

    y, ts = scalar(*arrays, grad=True)
    backward(y)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    numeric = numerical_grad(lambda *a: scalar(*a)[0].data.item(), arrays, eps)
    worst = 0.0
    for an, nu in zip(analytic, numeric):
        err = np.max(np.abs(an - nu)) / max(1.0, np.max(np.abs(nu)))
        worst = max(worst, float(err))
    return worst
