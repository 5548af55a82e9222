"""Checkpoint merging: sign-consistent weighted merge, plain average, EMA.

Merges run tensor by tensor, so peak working memory is bounded by the largest
parameter block times the number of checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import ParameterError
from .tensor_store import Checkpoint, Tensor, check_compatible

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SignPolicy:
    """How the per-coordinate majority sign is elected.

    Zeros never vote.  An even split goes to the sign of the heaviest
    non-zero entry (``"highest_score_sign"``) or zeroes the coordinate
    (``"zero"``).  When several entries share that top weight but disagree, the
    sign of their sum decides, and an exact cancellation counts as positive.
    ``renormalize_per_coordinate`` rescales surviving weights to sum to one at
    each coordinate instead of leaving masked mass out.
    """

    tie_break: Literal["highest_score_sign", "zero"] = "highest_score_sign"
    renormalize_per_coordinate: bool = False

    def __post_init__(self):
        if self.tie_break not in ("highest_score_sign", "zero"):
            raise ParameterError(f"unknown tie_break {self.tie_break!r}")


def _check_weights(weights, n: int, allow_negative: bool) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise ParameterError(f"expected {n} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite")
    if not allow_negative and np.any(w < 0):
        raise ParameterError("negative merge weight; sign-consistent merge needs w >= 0")
    total = math.fsum(w)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ParameterError(f"weights must sum to 1 (got {total!r})")
    return w


def majority_sign(values: np.ndarray, weights: np.ndarray, tie_break: str = "highest_score_sign") -> np.ndarray:
    """Per-column elected sign of a ``(K, m)`` value matrix: -1, 0 or +1."""
    pos = (values > 0).sum(axis=0)
    neg = (values < 0).sum(axis=0)
    maj = np.sign(pos - neg).astype(np.float64)
    tied = (pos == neg) & (pos > 0)
    if np.any(tied):
        if tie_break == "zero":
            maj[tied] = 0.0
        else:
            sub = values[:, tied]
            w = np.broadcast_to(weights[:, None], sub.shape)
            w_nz = np.where(sub != 0, w, -np.inf)
            top = w_nz == w_nz.max(axis=0)
            s = np.sign(np.where(top, sub, 0.0).sum(axis=0))
            maj[tied] = np.where(s == 0, 1.0, s)
    return maj


def sign_consistent_values(values, weights, policy: SignPolicy = SignPolicy()) -> np.ndarray:
    """Float64 core of the sign-consistent merge over a ``(K, m)`` matrix."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    maj = majority_sign(values, weights, policy.tie_break)
    keep = (np.sign(values) == maj) & (maj != 0)
    eff = np.where(keep, weights[:, None], 0.0)
    merged = (eff * values).sum(axis=0)
    if policy.renormalize_per_coordinate:
        mass = eff.sum(axis=0)
        merged = np.divide(merged, mass, out=np.zeros_like(merged), where=mass > 0)
    return merged


def sign_consistent_merge(
    checkpoints: Sequence[Checkpoint], weights, policy: SignPolicy = SignPolicy()
) -> Checkpoint:
    """Weighted merge that drops entries disagreeing with the majority sign."""
    checkpoints = list(checkpoints)
    check_compatible(checkpoints)
    w = _check_weights(weights, len(checkpoints), allow_negative=False)
    out = {}
    for name, ref in checkpoints[0].entries.items():
        stack = np.stack([c.entries[name].data for c in checkpoints]).astype(np.float64)
        out[name] = Tensor(ref.dims, sign_consistent_values(stack, w, policy))
    return Checkpoint(max(c.step for c in checkpoints), out)


def weighted_average_merge(checkpoints: Sequence[Checkpoint], weights) -> Checkpoint:
    """Plain per-coordinate weighted sum; weights may be negative but must sum to 1."""
    checkpoints = list(checkpoints)
    check_compatible(checkpoints)
    w = _check_weights(weights, len(checkpoints), allow_negative=True)
    out = {}
    for name, ref in checkpoints[0].entries.items():
        stack = np.stack([c.entries[name].data for c in checkpoints]).astype(np.float64)
        out[name] = Tensor(ref.dims, w @ stack)
    return Checkpoint(max(c.step for c in checkpoints), out)


def ema_update(prev: Checkpoint, new: Checkpoint, beta: float) -> Checkpoint:
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie in (0, 1), got {beta}")
    check_compatible([prev, new])
    out = {}
    for name, ref in prev.entries.items():
        a = ref.data.astype(np.float64)
        b = new.entries[name].data.astype(np.float64)
        out[name] = Tensor(ref.dims, beta * a + (1.0 - beta) * b)
    return Checkpoint(max(prev.step, new.step), out)
