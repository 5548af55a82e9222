"""Merge-weight computations: ridge leverage scores, EMA and kernel synergy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import NumericalError, ParameterError


@dataclass(frozen=True)
class ScoringConfig:
    """Hyperparameters for the weight computations.

    ``divisor_mode="row_count"`` normalises the fingerprint covariance by the
    number of stored rows; ``"fixed"`` divides by ``top_k`` instead.
    """

    lam: float = 1.0
    divisor_mode: Literal["row_count", "fixed"] = "row_count"
    top_k: int = 5
    ema_beta: float = 0.99
    kernel_jitter: float = 1e-6
    clamp_negative_mos: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ParameterError(f"lambda must be positive and finite, got {self.lam}")
        if self.divisor_mode not in ("row_count", "fixed"):
            raise ParameterError(f"unknown divisor_mode {self.divisor_mode!r}")
        if int(self.top_k) < 1:
            raise ParameterError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.ema_beta < 1.0:
            raise ParameterError(f"ema_beta must lie in (0, 1), got {self.ema_beta}")
        if not (math.isfinite(self.kernel_jitter) and self.kernel_jitter >= 0):
            raise ParameterError(f"kernel_jitter must be >= 0, got {self.kernel_jitter}")

    def divisor(self, n_rows: int) -> float:
        return float(n_rows if self.divisor_mode == "row_count" else self.top_k)


@dataclass(frozen=True)
class MergePlan:
    selected_steps: tuple[int, ...]
    raw_scores: tuple[float, ...]
    weights: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "steps": list(self.selected_steps),
            "raw_scores": list(self.raw_scores),
            "weights": list(self.weights),
        }


def ridge_leverage_scores(Z, cfg: ScoringConfig | None = None, *, lam: float | None = None) -> np.ndarray:
    """Ridge leverage score of every row of ``Z``.

    ``s_i = z_i^T (Z^T Z / c + lam I)^{-1} z_i`` where ``c`` is the row count
    (or ``cfg.top_k`` in fixed mode).  The eigen-decomposition is taken on the
    smaller of the ``d' x d'`` covariance and the ``n x n`` Gram matrix.
    """
    cfg = cfg or ScoringConfig()
    lam = cfg.lam if lam is None else float(lam)
    if not (math.isfinite(lam) and lam > 0):
        raise ParameterError(f"lambda must be positive, got {lam}")
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise ParameterError(f"expected a non-empty 2-D matrix, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ParameterError("fingerprint matrix contains non-finite values")
    n, dp = Z.shape
    c = cfg.divisor(n)

    if n < dp:
        # Z M^{-1} Z^T = c G (G + c lam I)^{-1} with G = Z Z^T
        evals, evecs = np.linalg.eigh(Z @ Z.T)
        evals = np.clip(evals, 0.0, None)
        return c * (evecs**2) @ (evals / (evals + c * lam))
    evals, evecs = np.linalg.eigh(Z.T @ Z / c)
    evals = np.clip(evals, 0.0, None)
    proj = Z @ evecs
    return (proj**2) @ (1.0 / (evals + lam))


def make_merge_plan(scores, steps, K: int, must_include: Sequence[int] = ()) -> MergePlan:
    """Pick the top-``K`` steps by score and normalise their scores to weights.

    Ordering is descending score, ties broken by ascending step.  Steps in
    ``must_include`` always occupy a slot; the rest are filled by rank.
    Entries with a zero score cannot carry weight and are skipped.
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    steps = [int(s) for s in steps]
    if scores.size != len(steps) or not steps:
        raise ParameterError("scores and steps must be aligned and non-empty")
    if not np.all(np.isfinite(scores)) or np.any(scores < 0):
        raise ParameterError("scores must be finite and non-negative")
    forced = set(int(s) for s in must_include)
    if not forced <= set(steps):
        raise ParameterError(f"must_include steps {sorted(forced - set(steps))} are not present")
    if len(forced) > K:
        raise ParameterError("more forced steps than merge slots")

    order = sorted(range(len(steps)), key=lambda i: (-scores[i], steps[i]))
    chosen = [i for i in order if steps[i] in forced]
    for i in order:
        if len(chosen) >= K:
            break
        if steps[i] not in forced and scores[i] > 0:
            chosen.append(i)
    chosen.sort(key=lambda i: (-scores[i], steps[i]))
    picked = scores[chosen]
    total = math.fsum(picked)
    if total <= 0:
        raise ParameterError("all selected scores are zero; nothing to weight")
    weights = picked / total
    return MergePlan(
        tuple(steps[i] for i in chosen),
        tuple(float(s) for s in picked),
        tuple(float(w) for w in weights),
    )


def ema_weights(t: int, beta: float) -> np.ndarray:
    """Weights over steps ``0..t`` produced by unrolling the EMA recursion.

    With the average initialised at step 0, step 0 keeps ``beta**t`` and step
    ``i >= 1`` gets ``(1 - beta) * beta**(t - i)``.
    """
    if t < 0:
        raise ParameterError(f"t must be >= 0, got {t}")
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie in (0, 1), got {beta}")
    w = (1.0 - beta) * beta ** np.arange(t, -1, -1, dtype=np.float64)
    w[0] = beta**t
    return w


def _cosine_gram(vectors) -> np.ndarray:
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 1:
        raise ParameterError("expected one vector per model")
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(V)):
        raise ParameterError("similarity vectors must be finite and non-zero")
    U = V / norms[:, None]
    G = U @ U.T
    np.fill_diagonal(G, 1.0)
    return G


def synergy_kernel(outputs, features) -> np.ndarray:
    """Element-wise product of output and feature cosine-similarity matrices."""
    Ko = _cosine_gram(outputs)
    Kf = _cosine_gram(features)
    if Ko.shape != Kf.shape:
        raise ParameterError("outputs and features must describe the same models")
    return Ko * Kf


_MAX_COND = 1e13


def mos_weights(outputs, features, jitter: float = 1e-6, clamp_negative: bool = False) -> np.ndarray:
    """Normalised row sums of the inverse synergy kernel.

    Weights can be negative when the inverse has negative row sums; they are
    returned as-is unless ``clamp_negative`` is set, in which case negatives are
    zeroed and the rest renormalised.
    """
    if not (math.isfinite(jitter) and jitter >= 0):
        raise ParameterError(f"jitter must be >= 0, got {jitter}")
    K = synergy_kernel(outputs, features)
    K = K + jitter * np.eye(K.shape[0])
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > _MAX_COND:
        raise NumericalError(
            f"synergy kernel is singular (condition number {cond:.3g}); increase the jitter"
        )
    row_sums = np.linalg.solve(K, np.ones(K.shape[0]))
    # pre-scaling makes equal row sums exactly 1.0, so symmetric kernels give exactly 1/K
    row_sums = row_sums / np.max(np.abs(row_sums))
    total = math.fsum(row_sums)
    if not np.isfinite(total) or abs(total) < 1e-12:
        raise NumericalError("inverse kernel sums to zero; increase the jitter")
    w = row_sums / total
    if clamp_negative:
        w = np.clip(w, 0.0, None)
        if w.sum() <= 0:
            raise NumericalError("no positive synergy weights remain after clamping")
        w = w / w.sum()
    return w
