"""Differentiable numeric core.

A small tape-based reverse-mode autodiff over float64 numpy arrays, the
handful of layer primitives the Q-network is built from, Adam, and a
central-difference gradient checker.

Every op accepts arbitrary leading batch dimensions; the "row" and "column"
axes are always the last two.  Gradients are produced by explicit per-op
backward rules applied in reverse topological order of the recorded graph.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ConsistencyError, DimensionError, WindowError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (forward-only, cheaper)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim >= 2:
        return _matmul_weight(a, b)

    def bw(g):
        A, B = a.data, b.data
        a1, b1 = A.ndim == 1, B.ndim == 1
        A2 = A[None, :] if a1 else A
        B2 = B[:, None] if b1 else B
        if a1 and b1:
            G = np.asarray(g).reshape(1, 1)
        elif a1:
            G = g[..., None, :]
        elif b1:
            G = g[..., :, None]
        else:
            G = g
        ga = G @ np.swapaxes(B2, -1, -2)
        gb = np.swapaxes(A2, -1, -2) @ G
        if a1:
            ga = ga[..., 0, :]
        if b1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _make(a.data @ b.data, (a, b), bw)


def _matmul_weight(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, m) as a single 2-D GEMM
    k, m = b.shape
    if a.shape[-1] != k:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, k)

    def bw(g):
        g2 = g.reshape(-1, m)
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _make((a2 @ b.data).reshape(lead + (m,)), (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with a scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


def mask_fill(a, mask) -> Tensor:
    """Zero out entries where ``mask`` is False (mask broadcasts against ``a``)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),))


def masked_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked-out entries get weight exactly 0.

    A slice whose entries are all masked returns all zeros.
    """
    x = as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        xm = np.where(mask, x.data, -np.inf)
        top = xm.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(xm - top), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def unfold_rows(a, m: int) -> Tensor:
    """Sliding windows of ``m`` consecutive rows: (..., K, d) -> (..., K-m+1, m, d)."""
    a = as_tensor(a)
    K = a.shape[-2]
    L = K - m + 1
    win = np.lib.stride_tricks.sliding_window_view(a.data, m, axis=-2)  # (..., L, d, m)
    out = np.ascontiguousarray(np.swapaxes(win, -1, -2))

    def bw(g):
        full = np.zeros_like(a.data)
        for j in range(m):
            full[..., j : j + L, :] += g[..., :, j, :]
        return (full,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# layer primitives


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.shape[-1:] != W.shape[:1]:
        raise DimensionError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    return add(matmul(x, W), b)


def mlp(x, layers: Sequence[tuple]) -> Tensor:
    """Stack of affine layers; ReLU on hidden layers, identity on the last."""
    if len(layers) == 0:
        raise ConfigError("mlp needs at least one layer")
    h = as_tensor(x)
    for i, (W, b) in enumerate(layers):
        h = affine(h, W, b)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def softmax_rows(M, mask=None) -> Tensor:
    return masked_softmax(M, mask=mask, axis=-1)


def sdpa(Qm, Km, Vm, scale: float, mask=None) -> Tensor:
    """Scaled dot-product attention ``softmax(Q Kᵀ / scale) V``.

    ``mask`` (broadcastable to the score matrix) marks keys that may be attended.
    """
    Qm, Km, Vm = as_tensor(Qm), as_tensor(Km), as_tensor(Vm)
    if Qm.shape[-1] != Km.shape[-1] or Km.shape[-2] != Vm.shape[-2]:
        raise DimensionError(f"sdpa: Q {Qm.shape}, K {Km.shape}, V {Vm.shape} do not conform")
    if not scale > 0:
        raise ValueError(f"sdpa scale must be positive, got {scale}")
    scores = mul(matmul(Qm, swapaxes(Km)), 1.0 / scale)
    return matmul(softmax_rows(scores, mask), Vm)


def conv_page(E, kernels, bias) -> Tensor:
    """Valid convolution sliding over page rows.

    E: (..., K, d); kernels: (n_c, m, d); bias: (n_c,) -> (..., K-m+1, n_c).
    """
    E, kernels, bias = as_tensor(E), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 3:
        raise DimensionError(f"conv_page: kernels must be (n_c, m, d), got {kernels.shape}")
    n_c, m, d = kernels.shape
    K = E.shape[-2]
    if E.shape[-1] != d:
        raise DimensionError(f"conv_page: page {E.shape} vs kernels {kernels.shape}")
    if m < 1 or m > K:
        raise WindowError(f"conv_page: window m={m} does not fit a page of K={K} rows")
    if bias.shape != (n_c,):
        raise DimensionError(f"conv_page: bias {bias.shape} vs kernels {kernels.shape}")
    L = K - m + 1
    windows = reshape(unfold_rows(E, m), E.shape[:-2] + (L, m * d))
    flat = reshape(kernels, (n_c, m * d))
    return add(matmul(windows, swapaxes(flat)), bias)


def avg_pool_rows(M) -> Tensor:
    M = as_tensor(M)
    if M.ndim < 2 or M.shape[-2] < 1:
        raise DimensionError(f"avg_pool_rows needs at least one row, got {M.shape}")
    return mean(M, axis=-2)


# ---------------------------------------------------------------------------
# parameters and optimisation


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None,
           fan_out: int | None = None) -> np.ndarray:
    """Uniform in ±sqrt(6 / (fan_in + fan_out))."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    if fan_out is None:
        fan_out = shape[1] if len(shape) == 2 else shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamSet:
    """Named float64 arrays with Adam moment state.

    Names iterate in sorted order; shapes are fixed once a name exists.
    """

    def __init__(self, values: Mapping[str, np.ndarray] | None = None):
        self._values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        for name in sorted(values or {}):
            self.add(name, values[name])

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise ConsistencyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=DTYPE)
        if arr.size == 0 or any(s <= 0 for s in arr.shape):
            raise DimensionError(f"parameter {name!r} has empty shape {arr.shape}")
        self._values[name] = arr
        self._values = dict(sorted(self._values.items()))
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.steps[name] = 0

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=DTYPE)
        if name not in self._values:
            raise ConsistencyError(f"unknown parameter {name!r}")
        if arr.shape != self._values[name].shape:
            raise ConsistencyError(f"{name}: shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._values.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def leaves(self) -> dict[str, Tensor]:
        """Fresh grad-tracking leaves sharing this set's arrays."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self._values.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet({k: v.copy() for k, v in self._values.items()})
        for k in self._values:
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
            out.steps[k] = self.steps[k]
        return out

    def check_compatible(self, other: "ParamSet | Mapping[str, np.ndarray]") -> None:
        other_names = list(other.keys() if isinstance(other, Mapping) else other.names())
        if sorted(other_names) != self.names():
            missing = sorted(set(self.names()) ^ set(other_names))
            raise ConsistencyError(f"parameter names differ: {missing[:5]}")
        for k in self._values:
            if np.shape(other[k]) != self._values[k].shape:
                raise ConsistencyError(f"{k}: shape {np.shape(other[k])} != {self._values[k].shape}")


@dataclass
class TrainingHyper:
    learning_rate: float = 1e-3
    batch_size: int = 8192
    gamma: float = 0.95
    tau: float = 0.9
    seed: int = 0
    epochs: int = 10
    hard_sync_every: int = 0  # >0 replaces the soft update with a periodic copy

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.batch_size < 1 or self.epochs < 0 or self.hard_sync_every < 0:
            raise ConfigError("batch_size must be >= 1; epochs and hard_sync_every >= 0")


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], hyper: TrainingHyper) -> None:
    """One bias-corrected Adam update, in place."""
    for name in params.names():
        if name not in grads:
            raise ConsistencyError(f"no gradient for parameter {name!r}")
    lr = hyper.learning_rate
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != p.shape:
            raise ConsistencyError(f"{name}: gradient shape {g.shape} != {p.shape}")
        t = params.steps[name] + 1
        params.steps[name] = t
        m = params.m[name] = ADAM_BETA1 * params.m[name] + (1 - ADAM_BETA1) * g
        v = params.v[name] = ADAM_BETA2 * params.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_path: str | None = None
    worst_index: tuple[int, ...] | None = None
    n_checked: int = 0
    failure: str | None = None
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failure is None

    def __float__(self) -> float:
        return self.max_rel_error


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(
    scalar_fn: Callable[[dict[str, Tensor]], Tensor],
    params: ParamSet | Mapping[str, np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``scalar_fn`` maps a dict of leaf tensors to a scalar tensor.  With
    ``max_coords`` set, at most that many coordinates per parameter are
    probed, chosen by ``rng``; otherwise every coordinate is.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    items = params.items() if isinstance(params, ParamSet) else sorted(params.items())
    leaves = {k: Tensor(np.array(v, dtype=DTYPE), requires_grad=True, name=k) for k, v in items}
    out = scalar_fn(leaves)
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    for k, g in analytic.items():
        if not np.all(np.isfinite(g)):
            return GradCheckReport(math.inf, worst_path=k, failure=f"non-finite analytic gradient in {k}")

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(0.0)
    with no_grad():
        for k, leaf in leaves.items():
            arr = leaf.data
            flat_idx = np.arange(arr.size)
            if max_coords is not None and arr.size > max_coords:
                flat_idx = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
            worst_here = 0.0
            for fi in flat_idx:
                idx = np.unravel_index(fi, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + eps
                f_plus = scalar_fn(leaves).item()
                arr[idx] = orig - eps
                f_minus = scalar_fn(leaves).item()
                arr[idx] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                err = float(rel_error(analytic[k][idx], numeric))
                report.n_checked += 1
                worst_here = max(worst_here, err)
                if not math.isfinite(numeric):
                    report.failure = f"non-finite numeric gradient in {k}{tuple(int(i) for i in idx)}"
                    err = math.inf
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst_path = k
                    report.worst_index = tuple(int(i) for i in idx)
            report.per_param[k] = worst_here
    return report


def iter_layers(params: Mapping[str, Tensor] | ParamSet, prefix: str) -> list[tuple]:
    """Collect ``prefix.{i}.w`` / ``prefix.{i}.b`` pairs in layer order."""
    out = []
    i = 0
    while f"{prefix}.{i}.w" in params:
        out.append((params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]))
        i += 1
    return out


def init_mlp(rng: np.random.Generator, prefix: str, in_dim: int, widths: Iterable[int]) -> dict[str, np.ndarray]:
    widths = list(widths)
    if not widths:
        raise ConfigError(f"{prefix}: layer width list is empty")
    out = {}
    prev = in_dim
    for i, w in enumerate(widths):
        if w < 1:
            raise ConfigError(f"{prefix}: layer {i} width must be positive, got {w}")
        out[f"{prefix}.{i}.w"] = glorot(rng, (prev, w))
        out[f"{prefix}.{i}.b"] = np.zeros(w)
        prev = w
    return out
