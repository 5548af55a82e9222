"""Frozen random feature extractor with a trainable linear head.

The head is stored as a checkpoint with two parameters, ``head.weight`` of
shape ``(d,)`` and the scalar ``head.bias``.  Training minimises

    L(w, b) = mean((phi(x) @ w + b - y)**2) + lam * ||w||**2

(the bias is not regularised).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import NumericalError, ParameterError
from ..tensor_store import Checkpoint, Tensor

WEIGHT = "head.weight"
BIAS = "head.bias"


@dataclass(frozen=True, eq=False)
class Extractor:
    W: np.ndarray  # (d, d_raw)
    b: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(np.asarray(x, dtype=np.float64) @ self.W.T + self.b)


def make_extractor(d_raw: int, d: int, seed: int) -> Extractor:
    rng = np.random.default_rng([seed, 0xFE])
    W = rng.normal(size=(d, d_raw)) / math.sqrt(d_raw)
    b = rng.uniform(-0.5, 0.5, size=d)
    W.setflags(write=False)
    b.setflags(write=False)
    return Extractor(W, b)


def head_checkpoint(w, b: float, step: int = 0) -> Checkpoint:
    w = np.asarray(w, dtype=np.float64)
    return Checkpoint(step, {WEIGHT: Tensor((w.size,), w), BIAS: Tensor.scalar(b)})


def head_params(c: Checkpoint) -> tuple[np.ndarray, float]:
    return c[WEIGHT].data.astype(np.float64), float(c[BIAS].data[0])


@dataclass(frozen=True)
class ToyModel:
    extractor: Extractor
    head: Checkpoint

    def features(self, x) -> np.ndarray:
        return self.extractor(x)

    def predict(self, x) -> np.ndarray:
        return predict(self.head, self.extractor(x))

    def with_head(self, head: Checkpoint) -> "ToyModel":
        return replace(self, head=head)


def predict(head: Checkpoint, F: np.ndarray) -> np.ndarray:
    w, b = head_params(head)
    return F @ w + b


def mse(head: Checkpoint, F: np.ndarray, y: np.ndarray) -> float:
    r = predict(head, F) - y
    return float(np.mean(r * r))


def ridge_loss(w: np.ndarray, b: float, F: np.ndarray, y: np.ndarray, lam: float) -> float:
    r = F @ w + b - y
    return float(np.mean(r * r) + lam * (w @ w))


def ridge_gradient(w: np.ndarray, b: float, F: np.ndarray, y: np.ndarray, lam: float):
    """Analytic gradient ``(2/N F^T r + 2 lam w, 2/N sum r)`` with ``r = F w + b - y``."""
    n = F.shape[0]
    r = F @ w + b - y
    return 2.0 / n * (F.T @ r) + 2.0 * lam * w, 2.0 / n * r.sum()


def closed_form_ridge(F: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Exact minimiser of :func:`ridge_loss` (bias unregularised)."""
    n, d = F.shape
    A = np.hstack([F, np.ones((n, 1))])
    reg = np.full(d + 1, lam)
    reg[-1] = 0.0
    sol = np.linalg.solve(A.T @ A / n + np.diag(reg), A.T @ y / n)
    return sol[:d], float(sol[d])


def adapt_step(
    model: ToyModel,
    x: np.ndarray,
    y: np.ndarray,
    n_grad_steps: int = 1,
    lr: float = 0.1,
    lam: float = 1e-3,
    step: int | None = None,
) -> Checkpoint:
    """Gradient descent on the ridge objective, starting from ``model.head``."""
    if n_grad_steps < 0:
        raise ParameterError("n_grad_steps must be >= 0")
    if not (math.isfinite(lr) and lr > 0):
        raise ParameterError(f"learning rate must be positive, got {lr}")
    F = model.features(x)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(y))):
        raise ParameterError("batch contains non-finite values")
    step = model.head.step if step is None else step
    if n_grad_steps == 0:
        return model.head.with_step(step)
    w, b = head_params(model.head)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_grad_steps):
            gw, gb = ridge_gradient(w, b, F, y, lam)
            w, b = w - lr * gw, b - lr * gb
            if not (np.all(np.isfinite(w)) and math.isfinite(b)):
                raise NumericalError(f"gradient descent diverged; try a learning rate below {lr}")
        loss = ridge_loss(w, b, F, y, lam)
    if not math.isfinite(loss) or np.max(np.abs(w)) > 3e38:
        raise NumericalError(f"gradient descent diverged; try a learning rate below {lr}")
    return head_checkpoint(w, b, step)
