"""Feature-geometry diagnostics.

Exact Wasserstein-1 distances between discrete point clouds (linear-program
optimum with Euclidean ground cost), class-wise distance matrices,
intra/inter-class separability reports, and an exact O(m^2) t-SNE embedding
with a per-point perplexity search.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .data import LabeledFeatures
from .errors import UsageError
from .rng import Rng


@dataclass
class TransportPlan:
    """Optimal coupling between two weighted point sets and its cost."""

    plan: np.ndarray  # (P, Q), nonnegative, marginals = mu / nu
    cost: float


def _pairwise_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))


def wasserstein1(x, y, mu=None, nu=None) -> TransportPlan:
    """Exact W1 between point clouds with Euclidean ground cost.

    ``x`` is (P, dim) and ``y`` (Q, dim), rows are points.  Weights default
    to uniform.  Solved as the transport linear program; the returned cost
    is recomputed as sum(plan * cost matrix) for the returned plan.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise UsageError("wasserstein1 needs nonempty point sets")
    p, q = x.shape[0], y.shape[0]
    mu = np.full(p, 1.0 / p) if mu is None else np.asarray(mu, dtype=np.float64)
    nu = np.full(q, 1.0 / q) if nu is None else np.asarray(nu, dtype=np.float64)
    if mu.shape != (p,) or nu.shape != (q,):
        raise UsageError(f"weights {mu.shape}/{nu.shape} for {p}/{q} points")
    if abs(mu.sum() - nu.sum()) > 1e-9:
        raise UsageError(f"weight masses differ: {mu.sum()} vs {nu.sum()}")
    cost = _pairwise_dist(x, y)
    a_eq = np.zeros((p + q, p * q))
    for i in range(p):
        a_eq[i, i * q : (i + 1) * q] = 1.0
    for j in range(q):
        a_eq[p + j, j::q] = 1.0
    res = linprog(
        cost.ravel(),
        A_eq=a_eq,
        b_eq=np.concatenate([mu, nu]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(p, q)
    return TransportPlan(plan=plan, cost=float(np.sum(plan * cost)))


def class_distance_matrix(lf: LabeledFeatures) -> np.ndarray:
    """Symmetric c x c matrix of pairwise class W1 distances, zero diagonal.

    Classes are the sorted distinct labels; distributions are empirical with
    uniform weights over each class's feature columns.
    """
    classes = lf.classes()
    if len(classes) < 2:
        raise UsageError(f"need at least 2 classes, got {len(classes)}")
    clouds = [lf.class_columns(c).T for c in classes]
    c = len(classes)
    dist = np.zeros((c, c))
    for i in range(c):
        for j in range(i + 1, c):
            w = wasserstein1(clouds[i], clouds[j]).cost
            dist[i, j] = w
            dist[j, i] = w
    return dist


def mean_intra_class_distance(lf: LabeledFeatures) -> dict[int, float]:
    """Mean pairwise Euclidean distance within each class."""
    out = {}
    for c in lf.classes():
        pts = lf.class_columns(c).T
        n = pts.shape[0]
        if n < 2:
            out[int(c)] = 0.0
            continue
        d = _pairwise_dist(pts, pts)
        out[int(c)] = float(d[np.triu_indices(n, k=1)].mean())
    return out


def separability_report(pre: LabeledFeatures, post: LabeledFeatures) -> dict:
    """Intra-class compactness and inter-class W1 statistics, pre vs post."""
    if not np.array_equal(pre.labels, post.labels):
        raise UsageError("pre and post features must carry identical labels")
    intra_pre = mean_intra_class_distance(pre)
    intra_post = mean_intra_class_distance(post)
    dm_pre = class_distance_matrix(pre)
    dm_post = class_distance_matrix(post)
    off = ~np.eye(dm_pre.shape[0], dtype=bool)
    inter_pre = float(dm_pre[off].mean())
    inter_post = float(dm_post[off].mean())
    per_class = {
        str(c): {
            "intra_pre": intra_pre[c],
            "intra_post": intra_post[c],
            "intra_delta": intra_post[c] - intra_pre[c],
        }
        for c in intra_pre
    }
    mean_pre = float(np.mean(list(intra_pre.values())))
    mean_post = float(np.mean(list(intra_post.values())))
    return {
        "per_class": per_class,
        "mean_intra": {"pre": mean_pre, "post": mean_post, "delta": mean_post - mean_pre},
        "mean_inter_w1": {"pre": inter_pre, "post": inter_post, "delta": inter_post - inter_pre},
    }


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 15.0
    iterations: int = 500
    learning_rate: float = 20.0
    early_exaggeration: float = 4.0
    exaggeration_iters: int = 50
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 100
    seed: int = 0


def _conditional_row(d2: np.ndarray, target_perp: float, tol: float = 1e-5,
                     max_iter: int = 200) -> tuple[np.ndarray, bool]:
    """Binary search the precision beta so 2^entropy hits the perplexity."""
    lo, hi = 0.0, np.inf
    beta = 1.0
    p = None
    for _ in range(max_iter):
        w = np.exp(-d2 * beta)
        s = w.sum()
        if s <= 0:
            perp = float(len(d2))
            p = np.full_like(d2, 1.0 / len(d2))
        else:
            p = w / s
            nz = p > 0
            h = -np.sum(p[nz] * np.log2(p[nz]))
            perp = 2.0 ** h
        if abs(perp - target_perp) <= tol:
            return p, True
        if perp > target_perp:  # too flat -> sharpen
            lo = beta
            beta = beta * 2.0 if np.isinf(hi) else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else 0.5 * (beta + lo)
    return p, False


def joint_probabilities(features: np.ndarray, perplexity: float,
                        tol: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrized neighbor distribution P from feature columns (d x m).

    Returns (P, converged) where converged[i] flags whether the perplexity
    search for point i hit the target within ``tol``.
    """
    x = np.asarray(features, dtype=np.float64).T  # (m, d)
    m = x.shape[0]
    if perplexity >= m - 1:
        raise UsageError(f"perplexity {perplexity} must be < m - 1 = {m - 1}")
    if perplexity <= 0:
        raise UsageError(f"perplexity must be positive, got {perplexity}")
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    cond = np.zeros((m, m))
    converged = np.zeros(m, dtype=bool)
    for i in range(m):
        others = np.delete(d2[i], i)
        row, ok = _conditional_row(others, perplexity, tol=tol)
        cond[i, np.arange(m) != i] = row
        converged[i] = ok
    p = (cond + cond.T) / (2.0 * m)
    return p, converged


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne_embed(features: np.ndarray, cfg: TsneConfig = TsneConfig()) -> tuple[np.ndarray, list[float]]:
    """Embed feature columns (d x m) into m x 2 by gradient descent with momentum.

    Exact O(m^2) similarities; early exaggeration for the first
    ``exaggeration_iters`` iterations.  Returns the embedding and the per
    iteration KL divergence (always against the unexaggerated P).
    """
    x = np.asarray(features, dtype=np.float64)
    m = x.shape[1]
    if m > 2000:
        raise UsageError(f"exact t-SNE is limited to 2000 points, got {m}")
    p, converged = joint_probabilities(x, cfg.perplexity)
    if not converged.all():
        warnings.warn(
            f"perplexity search did not converge for {int((~converged).sum())} point(s)",
            RuntimeWarning,
        )
    rng = Rng(cfg.seed)
    y = 1e-4 * rng.normal(m, 2)
    update = np.zeros_like(y)
    kl_trace: list[float] = []
    eps = np.finfo(np.float64).tiny
    for it in range(cfg.iterations):
        diff = y[:, None, :] - y[None, :, :]
        w = 1.0 / (1.0 + (diff * diff).sum(axis=2))
        np.fill_diagonal(w, 0.0)
        q = np.maximum(w / w.sum(), eps)
        p_it = p * cfg.early_exaggeration if it < cfg.exaggeration_iters else p
        grad = 4.0 * np.einsum("ij,ijk->ik", (p_it - q) * w, diff)
        if it == cfg.exaggeration_iters:
            # drop momentum built against the exaggerated objective so the
            # KL trace descends monotonically once exaggeration ends
            update = np.zeros_like(y)
        momentum = cfg.momentum_start if it < cfg.momentum_switch_iter else cfg.momentum_final
        update = momentum * update - cfg.learning_rate * grad
        y = y + update
        y = y - y.mean(axis=0, keepdims=True)
        kl_trace.append(_kl_divergence(p, q))
    return y, kl_trace
