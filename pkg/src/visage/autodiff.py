"""Dense-tensor math with reverse-mode differentiation.

Tensors wrap numpy arrays (float64 by default) and record the operations
applied to them. Calling :func:`backward` on a scalar result walks the
recorded graph once, in reverse topological order, and accumulates
gradients into every tensor created with ``requires_grad=True``.

The op set is deliberately small: exactly what the gesture model needs
(matmul, add, elementwise mul, concat/slice/reshape, embedding lookup,
relu, masked softmax, layer norm, 1-d convolution, dropout, cross
entropy). Each op checks shapes up front and raises :class:`ShapeError`
naming the op and the offending shapes.

Tensors are immutable once created except for gradient accumulation.
A graph belongs to one thread; independent graphs may run in parallel.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

WEIGHTS_FORMAT = "visage-weights-v1"


class ShapeError(ValueError):
    """Raised when an op receives shape-incompatible inputs."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small operator sugar used by tests and model code
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward_fn) -> Tensor:
    """Build an op result, recording parents only when grad is live."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Populate ``.grad`` on every reachable requires_grad tensor.

    ``loss`` must be scalar. Each graph node is visited exactly once, in
    reverse topological order. Calling backward twice on the same result
    is an error; leaves that do not participate in the graph are simply
    left with ``grad`` of ``None`` (read as zero by the optimizer).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran for this result; rebuild the graph first")
    loss._backward_ran = True

    # iterative postorder: parents land before their consumers
    order = []
    seen = set()
    stack = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                _accum(parent, g)
        node._parents = ()
        node._backward = None


def zero_grads(tensors):
    for t in tensors.values() if isinstance(tensors, dict) else tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports [n, m] + [m] bias broadcast."""
    if a.data.shape == b.data.shape:
        def back(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def back(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    return _result(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    def back(g):
        return g * b.data, g * a.data
    return _result(a.data * b.data, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    def back(g):
        return (g * s,)
    return _result(a.data * s, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    def back(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got {a.data.shape}")
    def back(g):
        return (g.T,)
    return _result(a.data.T, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    def back(g):
        return (g.reshape(old),)
    return _result(a.data.reshape(shape), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-d tensor, got {a.data.shape}")
    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)
    return _result(a.data[:, start:stop].copy(), (a,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-d, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"embedding_lookup: token id out of range for vocab {vocab}")
    def back(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)
    return _result(table.data[ids], (table,), back)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    def back(g):
        return (g * keep,)
    return _result(np.where(keep, a.data, 0.0), (a,), back)


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``. Masked-out positions get exactly zero mass.

    ``mask`` is a boolean array broadcastable to ``a``; True marks
    positions allowed to receive probability.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a slice has every position masked out")
        shifted = np.where(mask, x, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(shifted - m), 0.0)
    else:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    p = e / e.sum(axis=axis, keepdims=True)
    def back(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)
    return _result(p, (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-9) -> Tensor:
    d = a.data.shape[axis]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    def back(g):
        reduce_axes = tuple(i for i in range(g.ndim) if i != (axis % g.ndim))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        da = inv * (dxhat
                    - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return da, dgain, dbias
    return _result(xhat * gain.data + bias.data, (a, gain, bias), back)


def conv1d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """1-d convolution over the time axis.

    ``x`` is [T, C_in], ``w`` is [K, C_in, C_out], ``b`` is [C_out].
    ``padding="same"`` centers the kernel with zero padding; ``"causal"``
    pads on the left only, so output t never sees input beyond t.
    """
    if x.data.ndim != 2 or w.data.ndim != 3 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes x={x.data.shape} w={w.data.shape}")
    k = w.data.shape[0]
    if b.data.shape != (w.data.shape[2],):
        raise ShapeError(f"conv1d: bias shape {b.data.shape} vs {w.data.shape[2]} filters")
    if padding == "same":
        left = (k - 1) // 2
    elif padding == "causal":
        left = k - 1
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    right = k - 1 - left
    t = x.data.shape[0]
    xp = np.pad(x.data, ((left, right), (0, 0)))
    out = np.zeros((t, w.data.shape[2]), dtype=DTYPE)
    for i in range(k):
        out += xp[i:i + t] @ w.data[i]
    out += b.data
    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(k):
            dxp[i:i + t] += g @ w.data[i].T
            dw[i] = xp[i:i + t].T @ g
        dx = dxp[left:left + t] if right == 0 else dxp[left:-right]
        return dx, dw, g.sum(axis=0)
    return _result(out, (x, w, b), back)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scaling happens at train time, inference is identity."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    def back(g):
        return (g * keep,)
    return _result(a.data * keep, (a,), back)


def cross_entropy(logits: Tensor, targets, ignore=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of logits.

    ``targets`` is [T] int bin indices for logits [T, V]; rows where
    ``ignore`` is True are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape}")
    v = logits.data.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"cross_entropy: target token out of range for vocab {v}")
    keep = np.ones(targets.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every row is ignored")
    m = logits.data.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    nll = logz - logits.data[np.arange(targets.size), targets]
    value = np.array((nll * keep).sum() / n)
    def back(g):
        p = np.exp(logits.data - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(targets.size), targets] -= 1.0
        return (p * (keep[:, None] * (float(g) / n)),)
    return _result(value, (logits,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        return (np.full_like(a.data, float(g)),)
    return _result(np.array(a.data.sum()), (a,), back)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class FDReport:
    """Per-parameter max relative error of analytic vs central-difference grads."""
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def failures(self) -> list:
        return sorted(name for name, e in self.errors.items() if e > self.tol)

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_difference_check(f, params: dict, h: float = 1e-6, tol: float = 1e-4,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> FDReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be deterministic (dropout off) and close over ``params``, a
    name -> Tensor dict of requires_grad leaves. Checks every entry of
    every parameter unless ``max_entries`` caps the per-tensor sample.
    Entries where analytic and numeric are both below 1e-8 count as zero
    error (pure floating-point noise); otherwise the error is
    |a - n| / max(|a|, |n|, 1e-4).
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = FDReport(tol=tol)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                if rng is None:
                    rng = np.random.default_rng(0)
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            worst = 0.0
            aflat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = aflat[i]
                if abs(a) < 1e-8 and abs(numeric) < 1e-8:
                    continue
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
                worst = max(worst, err)
            report.errors[name] = worst
    return report


# ---------------------------------------------------------------------------
# weight checkpoint format


def save_weights(path, tensors: dict, extra: dict | None = None):
    """Write a name -> (shape, row-major values) map as versioned JSON."""
    payload = {
        "format": WEIGHTS_FORMAT,
        "tensors": {
            name: {
                "shape": list(t.data.shape if isinstance(t, Tensor) else np.shape(t)),
                "data": np.asarray(t.data if isinstance(t, Tensor) else t,
                                   dtype=DTYPE).reshape(-1).tolist(),
            }
            for name, t in tensors.items()
        },
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_weights(path):
    """Read back a weight file; returns (name -> ndarray, extra dict)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"unsupported weight file format: {payload.get('format')!r}")
    tensors = {
        name: np.asarray(entry["data"], dtype=DTYPE).reshape(entry["shape"])
        for name, entry in payload["tensors"].items()
    }
    return tensors, payload.get("extra", {})
