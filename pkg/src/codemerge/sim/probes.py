"""Analytical checks: loss barrier, Hessian link, fingerprint/weight correlation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..codebook import Codebook
from ..errors import ParameterError, StateError
from ..scoring import ScoringConfig, ridge_leverage_scores
from ..tensor_store import (
    Checkpoint,
    check_compatible,
    checkpoint_linear_combination,
    flatten,
)
from .loop import SimConfig, build_source_model
from .model import adapt_step, mse
from .stream import generate_stream


@dataclass(frozen=True)
class BarrierReport:
    max_deviation: float
    lambdas: np.ndarray
    losses: np.ndarray
    linear: np.ndarray


def lmc_barrier(
    theta_a: Checkpoint,
    theta_b: Checkpoint,
    loss_fn: Callable[[Checkpoint], float],
    grid_points: int = 11,
) -> BarrierReport:
    """Largest gap between the loss on the straight path and the chord."""
    if grid_points < 3:
        raise ParameterError("grid_points must be >= 3")
    check_compatible([theta_a, theta_b])
    lambdas = np.linspace(0.0, 1.0, grid_points)
    losses = np.empty(grid_points)
    for j, lam in enumerate(lambdas):
        if j == 0:
            mix = theta_a
        elif j == grid_points - 1:
            mix = theta_b
        else:
            mix = checkpoint_linear_combination([(1.0 - lam, theta_a), (lam, theta_b)])
        losses[j] = float(loss_fn(mix))
    linear = (1.0 - lambdas) * losses[0] + lambdas * losses[-1]
    return BarrierReport(float(np.max(losses - linear)), lambdas, losses, linear)


def sgd_pair_barrier(cfg: SimConfig, grid_points: int = 11, n_updates: int = 20) -> BarrierReport:
    """Barrier between two heads fine-tuned from the source head.

    The heads take ``n_updates`` gradient steps each, on the even and the odd
    batches of the stream; loss is clean-target MSE over the whole stream.
    """
    source = build_source_model(cfg)
    batches = generate_stream(cfg.stream)
    heads = []
    for half in (batches[0::2], batches[1::2]):
        head = source.head
        for batch in half[:n_updates]:
            head = adapt_step(source.with_head(head), batch.x, batch.y, 1, cfg.lr, cfg.head_lambda)
        heads.append(head)
    F = source.features(np.concatenate([b.x for b in batches]))
    y = np.concatenate([b.y_clean for b in batches])
    return lmc_barrier(heads[0], heads[1].with_step(1), lambda c: mse(c, F, y), grid_points)


def hessian_quadratic_forms(Z, lam: float) -> np.ndarray:
    """``z_i^T H^{-1} z_i`` with ``H = 2 (Z^T Z / n + lam I)`` formed explicitly."""
    Z = np.asarray(Z, dtype=np.float64)
    n, dp = Z.shape
    H = 2.0 * (Z.T @ Z / n + lam * np.eye(dp))
    return np.einsum("ij,ji->i", Z, np.linalg.solve(H, Z.T))


def hessian_rls_check(Z, lam: float) -> float:
    """Max relative error between ``z^T H^{-1} z`` and half the leverage score."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.size == 0 or not np.all(np.isfinite(Z)):
        raise ParameterError("Z must be a finite, non-empty 2-D matrix")
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    quad = hessian_quadratic_forms(Z, lam)
    half = ridge_leverage_scores(Z, ScoringConfig(lam=lam)) / 2.0
    scale = np.maximum(np.abs(half), np.finfo(float).tiny)
    err = np.where((quad == 0) & (half == 0), 0.0, np.abs(quad - half) / scale)
    return float(err.max())


def pearson(a, b) -> tuple[float, bool]:
    """Pearson r and a flag that is True when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da @ da) * (db @ db))
    if denom == 0:
        return 0.0, True
    return float((da @ db) / denom), False


def kendall_tau(a, b) -> tuple[float, bool]:
    """Kendall tau-a over all pairs; tied pairs contribute zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = a.size
    if m < 2:
        return 0.0, True
    iu = np.triu_indices(m, 1)
    sa = np.sign(a[:, None] - a[None, :])[iu]
    sb = np.sign(b[:, None] - b[None, :])[iu]
    if not sa.any() or not sb.any():
        return 0.0, True
    return float((sa * sb).sum() / sa.size), False


@dataclass(frozen=True)
class CorrelationReport:
    pearson_r: float
    kendall_tau: float
    fingerprint_distances: np.ndarray
    weight_distances: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    degenerate: bool

    def summary(self) -> str:
        return f"pearson={self.pearson_r:.6f} kendall={self.kendall_tau:.6f} pairs={len(self.pairs)}"


def correlate_distances(a, b, pairs=()) -> CorrelationReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r, deg_r = pearson(a, b)
    tau, deg_t = kendall_tau(a, b)
    return CorrelationReport(r, tau, a, b, tuple(pairs), deg_r or deg_t)


def fingerprint_weight_correlation(cb: Codebook) -> CorrelationReport:
    """Correlate pairwise fingerprint distances with pairwise weight distances."""
    entries = cb.snapshot()
    if len(entries) < 3:
        raise StateError(f"need at least 3 codebook entries, have {len(entries)}")
    Z = np.stack([e.fingerprint.values.astype(np.float64) for e in entries])
    W = np.stack([flatten(e.resolve()) for e in entries])
    i, j = np.triu_indices(len(entries), 1)
    a = np.linalg.norm(Z[i] - Z[j], axis=1)
    b = np.linalg.norm(W[i] - W[j], axis=1)
    pairs = tuple((entries[p].step, entries[q].step) for p, q in zip(i, j))
    return correlate_distances(a, b, pairs)
