"""Modules, layers, the Adam optimizer and the named-tensor weight archive."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


def Parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Container whose Tensor/Module/list attributes form a parameter tree."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            _collect(val, f"{prefix}{key}", out)
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        errors = []
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing:
                errors.append(f"missing tensors: {missing}")
            if unexpected:
                errors.append(f"unexpected tensors: {unexpected}")
        for k, arr in state.items():
            if k in params and tuple(np.shape(arr)) != params[k].shape:
                errors.append(f"{k}: archive shape {tuple(np.shape(arr))} != model shape {params[k].shape}")
        if errors:
            raise ValueError("; ".join(errors))
        for k, arr in state.items():
            if k in params:
                params[k].data = np.array(arr, dtype=params[k].dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(val, name, out):
    if isinstance(val, Tensor):
        if val.requires_grad:
            out.append((name, val))
    elif isinstance(val, Module):
        out.extend(val.named_parameters(name + "."))
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _collect(item, f"{name}.{i}", out)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float32):
        # Glorot-uniform weights, zero bias
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Parameter(rng.uniform(-limit, limit, (n_in, n_out)).astype(dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, dtype=np.float32):
        fan_in = c_in * k * k
        # He-uniform for ReLU stacks
        limit = np.sqrt(6.0 / fan_in)
        self.weight = Parameter(rng.uniform(-limit, limit, (c_out, c_in, k, k)).astype(dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def module_grad_check(module: Module, loss_fn, inputs=(), max_entries=8, eps=1e-4, seed=0) -> float:
    """Finite-difference check of d loss / d (parameters, inputs) for a float64 module.

    ``loss_fn(*input_tensors)`` must return a scalar Tensor built from
    ``module``. Up to ``max_entries`` randomly chosen entries of each array are
    perturbed. Returns the worst ||analytic - numeric||_inf / max(1, ||numeric||_inf).
    """
    params = module.parameters()
    if any(p.dtype != np.float64 for p in params):
        raise TypeError("module_grad_check needs a float64 module")
    xs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    module.zero_grad()
    T.backward(loss_fn(*xs))
    targets = params + xs
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in targets]
    rng = np.random.default_rng(seed)

    def value(*_):
        with T.no_grad():
            return loss_fn(*[Tensor(x.data) for x in xs]).data.item()

    worst = 0.0
    for t, an in zip(targets, analytic):
        flat = rng.choice(t.data.size, size=min(max_entries, t.data.size), replace=False)
        idx = [np.unravel_index(int(i), t.data.shape) for i in flat]
        nu = T.numerical_grad(value, [t.data], eps, [idx])[0]
        picked = np.array([an[i] for i in idx])
        numeric = np.array([nu[i] for i in idx])
        worst = max(worst, float(np.max(np.abs(picked - numeric)) / max(1.0, np.max(np.abs(numeric)))))
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns (new_params, new_state); inputs are not modified."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    if len(m_prev) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam: param {p.shape}, grad {g.shape}, moment {m.shape} disagree")
        dt = p.dtype.type
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        new_p.append(p - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps)))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state,
                                    self.lr, self.beta1, self.beta2, self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# weight archive: <stem>.bin holds raw little-endian float32, <stem>.json the index


def save_archive(named: dict[str, np.ndarray], directory, stem="weights") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(directory / f"{stem}.bin", "wb") as f:
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype="<f4")
            f.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.nbytes
    meta = {"format": "nsbench-weights", "version": 1, "dtype": "<f4", "tensors": index}
    (directory / f"{stem}.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_archive(directory, stem="weights") -> dict[str, np.ndarray]:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    if meta.get("format") != "nsbench-weights":
        raise ValueError(f"{directory}: not a weight archive index")
    raw = (directory / f"{stem}.bin").read_bytes()
    out = {}
    for t in meta["tensors"]:
        end = t["offset"] + 4 * t["count"]
        if end > len(raw):
            raise ValueError(f"{directory}: archive truncated in tensor {t['name']}")
        arr = np.frombuffer(raw[t["offset"]:end], dtype="<f4").astype(np.float32)
        if arr.size != int(np.prod(t["shape"], dtype=np.int64)):
            raise ValueError(f"{t['name']}: count {arr.size} does not match shape {t['shape']}")
        out[t["name"]] = arr.reshape(t["shape"])
    return out
