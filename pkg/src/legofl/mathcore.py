"""Numerical substrate: seeded streams, a reverse-mode tape, and the layer primitives.

Plain ``numpy.ndarray`` (float32, 2-D or batched 2-D) is the matrix type.  Graph
nodes are :class:`Var`; an operation is recorded only while a :class:`Tape` is
active and at least one operand requires a gradient, so evaluation-only forward
passes cost nothing extra.
"""
from __future__ import annotations

import threading
import zlib
from typing import Callable, Iterable

import numpy as np

from .errors import InputError, NumericError, ShapeError

FLOAT = np.float32


# --------------------------------------------------------------------------- rng


class Rng:
    """Counter-based (Philox) stream addressed by ``seed`` plus a label path.

    ``spawn`` derives an independent child from labels alone, so a client's
    stream never depends on how many draws other clients made before it.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(p.encode()) for p in self.path]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def spawn(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(x) for x in labels))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(FLOAT)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(FLOAT)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return self._gen.random(shape) < p

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def random(self) -> float:
        return float(self._gen.random())


# -------------------------------------------------------------------------- tape


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''}{self.value.shape}, requires_grad={self.requires_grad})"


_local = threading.local()


class Tape:
    """Records primitive ops in order; :meth:`backward` replays them reversed.

    The active tape is per thread, so clients can train concurrently.
    """

    def __init__(self):
        self.ops: list[tuple[str, Var, tuple, Callable]] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def record(self, name: str, out: Var, inputs: tuple, backward: Callable) -> None:
        self.ops.append((name, out, inputs, backward))

    def backward(self, loss: Var, visit: Callable[[str], None] | None = None) -> None:
        if loss.value.size != 1:
            raise ShapeError("backward needs a scalar loss")
        if not np.isfinite(loss.value).all():
            raise NumericError(f"non-finite loss {loss.value.reshape(-1)[0]}")
        loss.grad = np.ones_like(loss.value)
        for name, out, inputs, fn in reversed(self.ops):
            if visit is not None:
                visit(name)
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Var) or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g

    def gradients(self, params: dict[str, Var]) -> dict[str, np.ndarray]:
        """Map of parameter name to gradient; untouched or frozen params get zeros."""
        out = {}
        for k, v in params.items():
            g = v.grad if (v.requires_grad and v.grad is not None) else None
            out[k] = np.zeros_like(v.value) if g is None else g
        return out


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(name: str, value: np.ndarray, inputs: tuple, backward: Callable) -> Var:
    needs = any(isinstance(i, Var) and i.requires_grad for i in inputs)
    out = Var(value, requires_grad=needs)
    tape = getattr(_local, "tape", None)
    if needs and tape is not None:
        tape.record(name, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------------- primitives


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return _emit(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def back(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.value * b.value, (a, b), back)


def scale(a, c: float) -> Var:
    a = _as_var(a)
    c = a.value.dtype.type(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product.

    Plain arrays must be 2-D and are accumulated in float64 before rounding
    back, which keeps sums reproducible against a naive loop.  ``Var`` operands
    (2-D or batched with equal leading dims) are recorded on the active tape.
    """
    if not isinstance(a, Var) and not isinstance(b, Var):
        a, b = np.asarray(a), np.asarray(b)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul dimension mismatch {a.shape} x {b.shape}")
        dtype = np.float64 if np.float64 in (a.dtype, b.dtype) else FLOAT
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)
    a, b = _as_var(a), _as_var(b)
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch {a.shape} x {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", np.matmul(a.value, b.value), (a, b), back)


def linear(x, w) -> Var:
    """``x @ w.T`` with ``w`` stored (out, in); ``x`` may carry any leading dims."""
    x, w = _as_var(x), _as_var(w)
    if x.value.shape[-1] != w.value.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")

    def back(g):
        gx = g @ w.value if x.requires_grad else None
        gw = None
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.value.reshape(-1, x.value.shape[-1])
            gw = g2.T @ x2
        return gx, gw

    return _emit("linear", x.value @ w.value.T, (x, w), back)


def transpose(a, axes: tuple) -> Var:
    a = _as_var(a)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: tuple) -> Var:
    a = _as_var(a)
    old = a.value.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def softmax(a) -> Var:
    """Softmax over the last axis."""
    a = _as_var(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), back)


def rmsnorm(x, gain, eps: float = 1e-5) -> Var:
    x, gain = _as_var(x), _as_var(gain)
    xv = x.value
    inv = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + xv.dtype.type(eps))
    xhat = xv * inv
    d = xv.shape[-1]

    def back(g):
        gx = gg = None
        gh = g * gain.value
        if x.requires_grad:
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, gg

    return _emit("rmsnorm", xhat * gain.value, (x, gain), back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Var:
    """tanh-approximated GELU."""
    x = _as_var(x)
    v = x.value
    c = v.dtype.type(_GELU_C)
    k = v.dtype.type(0.044715)
    t = np.tanh(c * (v + k * v * v * v))
    y = 0.5 * v * (1 + t)

    def back(g):
        dt = (1 - t * t) * c * (1 + 3 * k * v * v)
        return (g * (0.5 * (1 + t) + 0.5 * v * dt),)

    return _emit("gelu", y, (x,), back)


def embedding(ids: np.ndarray, table) -> Var:
    table = _as_var(table)
    ids = np.asarray(ids)

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.value.shape[1]))
        return (gt,)

    return _emit("embedding", table.value[ids], (table,), back)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Var:
    """Weighted mean token cross-entropy; ``logits`` (..., V), ``targets`` (...)."""
    logits = _as_var(logits)
    lv = logits.value
    V = lv.shape[-1]
    l2 = lv.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    w = np.ones(t.shape, dtype=lv.dtype) if weights is None else np.asarray(weights, dtype=lv.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise InputError("cross_entropy: no weighted targets")
    z = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(t)), t]
    loss = (nll * w).sum() / total

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(t)), t] -= 1
        p *= (w / total)[:, None]
        return ((p * g).reshape(lv.shape).astype(lv.dtype),)

    return _emit("cross_entropy", np.asarray(loss, dtype=lv.dtype), (logits,), back)


def sum_all(a) -> Var:
    a = _as_var(a)
    return _emit("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ------------------------------------------------------------------------ masks


def masked_where(mask: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise ``a`` where ``mask`` is set, else ``b``."""
    mask, a, b = np.asarray(mask), np.asarray(a), np.asarray(b)
    if not (mask.shape == a.shape == b.shape):
        raise ShapeError(f"masked_where shape mismatch {mask.shape}, {a.shape}, {b.shape}")
    return np.where(mask.astype(bool), a, b)


# ------------------------------------------------------------------- grad check


def grad_check(
    f: Callable[[dict[str, Var]], Var],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Worst relative gap between tape gradients and central differences.

    ``f`` maps a dict of Vars to a scalar Var.  Evaluation happens in float64 so
    the finite-difference side is not swamped by float32 rounding.  The error
    for one parameter is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8)`` with
    ``|.|`` the Frobenius norm over that parameter's entries.
    """
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values) -> float:
        out = f({k: Var(v) for k, v in values.items()})
        val = float(np.asarray(out.value))
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss {val}")
        return val

    with Tape() as tape:
        vs = {k: Var(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
        loss = f(vs)
        loss = _as_var(loss)
        if loss.requires_grad:
            tape.backward(loss)
        elif not np.isfinite(loss.value).all():
            raise NumericError("non-finite loss")
    analytic = tape.gradients(vs)

    worst = 0.0
    for k, v in base.items():
        numeric = np.zeros_like(v)
        flat = v.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = evaluate(base)
            flat[i] = old - epsilon
            down = evaluate(base)
            flat[i] = old
            nflat[i] = (up - down) / (2 * epsilon)
        a = analytic[k]
        num = np.linalg.norm(a - numeric)
        den = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(num / den))
    return worst


def all_finite(values: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(v).all() for v in values)
