"""Dense float64 matrices with a reverse-mode differentiation tape.

Every value is a 2-D double-precision array: scalars are 1x1, row vectors
1xN, column vectors Nx1.  Operations compute eagerly; inside a
``with Tape() as tape:`` block each differentiable operation additionally
appends exactly one node to that tape, and ``backward(tape, out, seed)``
replays the nodes in reverse to accumulate adjoints.

Concurrency: the active-tape stack is thread-local.  A tape is single-owner
(record and differentiate it from one thread); pure calls on other threads
never touch it.  Replaying the same computation is bit-identical because
nothing here is stochastic.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, UsageError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A 2-D float64 value, optionally tracked on the active tape."""

    __slots__ = ("data", "tid")
    _ids = itertools.count()

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.tid = next(Tensor._ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- operator sugar ---------------------------------------------------
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        other = as_tensor(other)
        if other.shape == self.shape:
            return add(self, other)
        return add_broadcast(self, other)

    def __sub__(self, other):
        other = as_tensor(other)
        if other.shape == self.shape:
            return sub(self, other)
        return add_broadcast(self, smul(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        other = as_tensor(other)
        if other.shape == (1, 1) and self.shape != (1, 1):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return smul(self, -1.0)

    def __truediv__(self, c: float):
        return smul(self, 1.0 / float(c))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class TapeNode:
    """One recorded operation: output id, input tensors, and the vjp rule.

    ``vjp(g)`` maps the output adjoint to per-input adjoints (None for
    non-differentiable inputs).  Arrays the rule needs are captured in the
    closure at record time, so later rebinding of ``Tensor.data`` (e.g. by an
    optimizer) cannot corrupt a pending backward sweep.
    """

    op: str
    out_id: int
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Recording of differentiable operations, in execution order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tls_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tls_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_tls = threading.local()


def _tls_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tls_stack()
    return stack[-1] if stack else None


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(TapeNode(op, out.tid, inputs, vjp))
        tape._out_ids.add(out.tid)


class GradientMap:
    """Adjoints keyed by tensor identity; zero for tensors never reached."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.tid)
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.tid in self._grads


def backward(tape: Tape, output: Tensor, seed: Tensor | np.ndarray | None = None) -> GradientMap:
    """Reverse sweep over ``tape`` from ``output`` seeded with ``seed``.

    Adjoints accumulate additively across fan-out.  The seed defaults to
    ones with the output's shape.
    """
    if output.tid not in tape._out_ids:
        raise UsageError("backward seed is not an output recorded on this tape")
    seed_arr = np.ones(output.shape) if seed is None else as_array(seed)
    if seed_arr.shape != output.data.shape:
        raise DimensionError(
            f"seed adjoint shape {seed_arr.shape} != output shape {output.data.shape}"
        )
    grads: dict[int, np.ndarray] = {output.tid: np.array(seed_arr, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            acc = grads.get(inp.tid)
            grads[inp.tid] = gi if acc is None else acc + gi
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)
    _record("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T)
    _record("transpose", out, (a,), lambda g: (g.T,))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    _record("add", out, (a, b), lambda g: (g, g))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    _record("sub", out, (a, b), lambda g: (g, -g))
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    _record("mul", out, (a, b), lambda g: (g * bd, g * ad))
    return out


def smul(a, c: float) -> Tensor:
    """Multiply by a constant scalar (not differentiable in ``c``)."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    _record("smul", out, (a,), lambda g: (g * c,))
    return out


def scale(a, s) -> Tensor:
    """Multiply matrix ``a`` by 1x1 tensor ``s``; differentiable in both."""
    a, s = as_tensor(a), as_tensor(s)
    if s.shape != (1, 1):
        raise DimensionError(f"scale: scalar operand has shape {s.shape}")
    ad, sv = a.data, float(s.data[0, 0])
    out = Tensor(ad * sv)
    _record("scale", out, (a, s), lambda g: (g * sv, np.sum(g * ad).reshape(1, 1)))
    return out


def add_broadcast(a, b) -> Tensor:
    """Add a row vector (1xC), column vector (Rx1) or scalar (1x1) to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    r, c = a.shape
    br, bc = b.shape
    if not ((br == 1 and bc == c) or (br == r and bc == 1) or (br, bc) == (1, 1)):
        raise DimensionError(f"add_broadcast: {a.shape} + {b.shape}")

    def vjp(g):
        gb = g
        if br == 1:
            gb = gb.sum(axis=0, keepdims=True)
        if bc == 1:
            gb = gb.sum(axis=1, keepdims=True)
        return g, gb

    out = Tensor(a.data + b.data)
    _record("add_broadcast", out, (a, b), vjp)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = Tensor(np.maximum(ad, 0.0))
    # subgradient 0 at the kink
    _record("relu", out, (a,), lambda g: (g * (ad > 0.0),))
    return out


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = as_tensor(a)
    ad = a.data
    phi = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = Tensor(ad * phi)

    def vjp(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        return (g * (phi + ad * pdf),)

    _record("gelu", out, (a,), vjp)
    return out


def sign(a) -> Tensor:
    """Elementwise sign; derivative 0 everywhere (0 at the jump)."""
    a = as_tensor(a)
    out = Tensor(np.sign(a.data))
    _record("sign", out, (a,), lambda g: (np.zeros_like(g),))
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = Tensor(np.abs(ad))
    # subgradient 0 at the kink
    _record("abs", out, (a,), lambda g: (g * np.sign(ad),))
    return out


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine per column.

    ``gain`` and ``bias`` are 1xC; eps is fixed by the caller's configuration
    (default 1e-5).
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    r, c = a.shape
    if gain.shape != (1, c) or bias.shape != (1, c):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} for input {a.shape}")
    ad = a.data
    mu = ad.mean(axis=1, keepdims=True)
    var = ad.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (ad - mu) * inv
    gd = gain.data
    out = Tensor(xhat * gd + bias.data)

    def vjp(g):
        dxhat = g * gd
        gx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        ggain = (g * xhat).sum(axis=0, keepdims=True)
        gbias = g.sum(axis=0, keepdims=True)
        return gx, ggain, gbias

    _record("layer_norm", out, (a, gain, bias), vjp)
    return out


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with row-max subtraction for stability."""
    a = as_tensor(a)
    ad = a.data
    shifted = ad - ad.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    _record("softmax_rows", out, (a,), vjp)
    return out


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data).reshape(1, 1))
    shape = a.shape
    _record("sum_all", out, (a,), lambda g: (np.full(shape, float(g[0, 0])),))
    return out


def sumsq(a) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    a = as_tensor(a)
    ad = a.data
    out = Tensor(np.sum(ad * ad).reshape(1, 1))
    _record("sumsq", out, (a,), lambda g: (2.0 * float(g[0, 0]) * ad,))
    return out


def sum_abs(a) -> Tensor:
    """Sum of absolute entries (entrywise l1 norm); subgradient 0 at 0."""
    a = as_tensor(a)
    ad = a.data
    out = Tensor(np.sum(np.abs(ad)).reshape(1, 1))
    _record("sum_abs", out, (a,), lambda g: (float(g[0, 0]) * np.sign(ad),))
    return out


def fro_norm(a) -> Tensor:
    """Frobenius norm; gradient defined as 0 at the origin."""
    a = as_tensor(a)
    ad = a.data
    n = float(np.sqrt(np.sum(ad * ad)))
    out = Tensor(np.array(n).reshape(1, 1))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (float(g[0, 0]) / n * ad,)

    _record("fro_norm", out, (a,), vjp)
    return out


def take_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start < stop <= a.rows):
        raise DimensionError(f"take_rows[{start}:{stop}] on {a.shape}")
    shape = a.shape
    out = Tensor(a.data[start:stop, :])

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop, :] = g
        return (full,)

    _record("take_rows", out, (a,), vjp)
    return out


def take_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start < stop <= a.cols):
        raise DimensionError(f"take_cols[{start}:{stop}] on {a.shape}")
    shape = a.shape
    out = Tensor(a.data[:, start:stop])

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    _record("take_cols", out, (a,), vjp)
    return out


def concat_rows(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise UsageError("concat_rows of no parts")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(f"concat_rows: column mismatch {p.shape} vs {parts[0].shape}")
    sizes = [p.rows for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))

    def vjp(g):
        offs = np.cumsum([0] + sizes)
        return tuple(g[offs[i] : offs[i + 1], :] for i in range(len(sizes)))

    _record("concat_rows", out, parts, vjp)
    return out


def concat_cols(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise UsageError("concat_cols of no parts")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError(f"concat_cols: row mismatch {p.shape} vs {parts[0].shape}")
    sizes = [p.cols for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))

    def vjp(g):
        offs = np.cumsum([0] + sizes)
        return tuple(g[:, offs[i] : offs[i + 1]] for i in range(len(sizes)))

    _record("concat_cols", out, parts, vjp)
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; rows of ``logits`` are samples.

    ``labels`` is an integer array of class indices, not differentiated.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64).ravel()
    m, c = logits.shape
    if y.shape[0] != m:
        raise DimensionError(f"cross_entropy: {m} rows vs {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= c:
        raise UsageError(f"cross_entropy: label outside [0, {c})")
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -float(np.mean(logp[np.arange(m), y]))
    out = Tensor(np.array(loss).reshape(1, 1))

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(m), y] -= 1.0
        return (float(g[0, 0]) / m * p,)

    _record("cross_entropy", out, (logits,), vjp)
    return out


# ---------------------------------------------------------------------------
# non-differentiable numerics
# ---------------------------------------------------------------------------


def spectral_norm_sq(a, iters: int = 2000, tol: float = 1e-13) -> float:
    """Largest squared singular value by power iteration on AᵀA.

    Deterministic all-ones start; returns 0.0 for the zero matrix.  On
    matrices with a spectral gap the relative error is bounded by ``tol``
    (Rayleigh-quotient stationarity test).
    """
    A = as_array(a)
    if A.size == 0 or not np.any(A):
        return 0.0
    v = np.ones(A.shape[1]) / math.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        lam_new = float(v @ w)  # Rayleigh quotient for current v
        v = w / nw
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return lam
