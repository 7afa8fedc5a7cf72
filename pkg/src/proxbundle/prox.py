"""Unrolled proximal-gradient self-expression on feature columns.

Given features Z (d x m, one column per sample) the module iterates

    W_{k+1} = shrink_relu(W_k - gamma_k * Zᵀ(Z W_k - Z) [· R_k], gamma_k * lam)

for a fixed number of steps.  The fixed variant omits the preconditioner
R_k; the learnable variant treats every gamma_k and R_k as a trainable
parameter.  All steps run through the differentiation tape, so the whole
unroll is trainable end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import (
    Tensor,
    add_broadcast,
    as_array,
    as_tensor,
    matmul,
    mul,
    relu,
    scale,
    smul,
    spectral_norm_sq,
    sub,
    transpose,
)


@dataclass
class ProxSchedule:
    """Per-iteration step sizes, sparsity weight and optional preconditioners.

    ``gammas`` entries may be floats or 1x1 tensors (trainable step sizes);
    ``preconditioners`` is None for the fixed variant or one m x m matrix
    (array or tensor) per iteration for the learnable variant.
    """

    lam: float
    gammas: Sequence
    preconditioners: Sequence | None = None
    zero_diagonal: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise UsageError(f"sparsity weight must be nonnegative, got {self.lam}")
        if self.preconditioners is not None and len(self.preconditioners) != len(self.gammas):
            raise UsageError(
                f"{len(self.preconditioners)} preconditioners for {len(self.gammas)} steps"
            )
        for g in self.gammas:
            if isinstance(g, (int, float)) and g <= 0:
                raise UsageError(f"step size must be positive, got {g}")

    @property
    def k_max(self) -> int:
        return len(self.gammas)

    @classmethod
    def fixed(cls, lam: float, gamma: float, k_max: int, zero_diagonal: bool = False):
        """Fixed variant: one shared step size, identity preconditioning."""
        return cls(lam=lam, gammas=[float(gamma)] * k_max, zero_diagonal=zero_diagonal)


@dataclass
class SelfRepresentation:
    """Result of an unroll: z_hat = Z @ w_final plus the objective trace."""

    z_hat: Tensor
    w_final: Tensor
    objective_trace: list[float] = field(default_factory=list)


def reconstruction_gradient(z, w) -> Tensor:
    """Gradient of f(W) = 1/2 ||Z - ZW||_F^2, computed as Zᵀ(ZW - Z)."""
    z, w = as_tensor(z), as_tensor(w)
    if w.rows != z.cols or w.cols != z.cols:
        raise DimensionError(f"coefficients {w.shape} do not conform to features {z.shape}")
    return matmul(transpose(z), sub(matmul(z, w), z))


def shrink_relu(u, threshold) -> Tensor:
    """Soft-threshold then ReLU: max(0, sgn(u)·max(|u| - t, 0)) == max(0, u - t).

    ``threshold`` may be a nonnegative float or a 1x1 tensor (differentiable,
    e.g. gamma_k * lam with trainable gamma_k).
    """
    u = as_tensor(u)
    if isinstance(threshold, Tensor):
        if threshold.shape != (1, 1):
            raise DimensionError(f"threshold tensor must be 1x1, got {threshold.shape}")
        return relu(add_broadcast(u, smul(threshold, -1.0)))
    t = float(threshold)
    if t < 0:
        raise UsageError(f"threshold must be nonnegative, got {t}")
    return relu(add_broadcast(u, Tensor(-t)))


def _zero_diag_mask(m: int) -> Tensor:
    return Tensor(1.0 - np.eye(m))


def _prox_step(z, w, gamma, lam: float, r=None, zero_diagonal: bool = False) -> Tensor:
    grad = reconstruction_gradient(z, w)
    if r is not None:
        r = as_tensor(r)
        m = as_tensor(w).rows
        if r.shape != (m, m):
            raise DimensionError(f"preconditioner {r.shape} for {m}x{m} coefficients")
        grad = matmul(grad, r)
    if isinstance(gamma, Tensor):
        step = scale(grad, gamma)
        threshold = smul(gamma, lam)
    else:
        gamma = float(gamma)
        if gamma <= 0:
            raise UsageError(f"step size must be positive, got {gamma}")
        step = smul(grad, gamma)
        threshold = gamma * lam
    w_next = shrink_relu(sub(as_tensor(w), step), threshold)
    if zero_diagonal:
        w_next = mul(w_next, _zero_diag_mask(w_next.rows))
    return w_next


def prox_step_fixed(z, w, gamma, lam: float, zero_diagonal: bool = False) -> Tensor:
    """One proximal-gradient step with identity preconditioning."""
    return _prox_step(z, w, gamma, lam, r=None, zero_diagonal=zero_diagonal)


def prox_step_learnable(z, w, gamma, lam: float, r, zero_diagonal: bool = False) -> Tensor:
    """One preconditioned proximal-gradient step."""
    if r is None:
        raise UsageError("learnable step requires a preconditioner; use prox_step_fixed")
    return _prox_step(z, w, gamma, lam, r=r, zero_diagonal=zero_diagonal)


def objective(z, w, lam: float) -> float:
    """F(W) = 1/2 ||Z - ZW||_F^2 + lam * ||W||_1 on plain arrays (untracked)."""
    zd, wd = as_array(z), as_array(w)
    resid = zd - zd @ wd
    return 0.5 * float(np.sum(resid * resid)) + lam * float(np.sum(np.abs(wd)))


def unroll(z, schedule: ProxSchedule, w0=None) -> SelfRepresentation:
    """Apply ``schedule.k_max`` proximal steps starting from ``w0`` (default 0).

    Returns z_hat = Z @ W_k, the final coefficients, and the objective value
    at every iterate (k_max + 1 entries).  Runs on the active tape when one
    is open, so the whole unroll is differentiable.
    """
    z = as_tensor(z)
    m = z.cols
    if m < 2:
        raise UsageError(f"self-expression needs at least 2 samples, got {m}")
    if w0 is None:
        w = Tensor(np.zeros((m, m)))
    else:
        w = as_tensor(w0)
        if w.shape != (m, m):
            raise DimensionError(f"w0 {w.shape} for {m} samples")
    rs = schedule.preconditioners
    trace = [objective(z, w, schedule.lam)]
    for k, gamma in enumerate(schedule.gammas):
        w = _prox_step(
            z,
            w,
            gamma,
            schedule.lam,
            r=None if rs is None else rs[k],
            zero_diagonal=schedule.zero_diagonal,
        )
        trace.append(objective(z, w, schedule.lam))
    return SelfRepresentation(z_hat=matmul(z, w), w_final=w, objective_trace=trace)


def default_step(z) -> float:
    """Classical step size 1/L with L the largest squared singular value of Z."""
    zd = as_array(z)
    if not np.any(zd):
        raise UsageError("default step undefined for a zero feature matrix")
    return 1.0 / spectral_norm_sq(zd)


def write_trace_csv(path, trace: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective"])
        for k, val in enumerate(trace):
            writer.writerow([k, repr(float(val))])
