"""Synthetic regression streams with scheduled distribution shifts.

Clean inputs are drawn from ``N(0, diag(scales**2))`` with a decaying
per-coordinate scale, so rotations change the covariance.  Labels are a fixed
function of the clean input; shifts corrupt only what the model observes, so
a head fitted on clean inputs degrades under shift.  A schedule entry
``(start, kind, magnitude)`` is active from ``start`` until the next entry's
start; steps before the first entry use the base distribution.

Shift kinds:

``mean_shift``
    adds ``magnitude`` to a seeded subset of ``shift_fraction * d_raw`` coordinates.
``covariance_rotation``
    rotates coordinate pairs ``(j, j + d_raw//2)`` by ``magnitude`` radians,
    mixing high- and low-variance directions.
``label_noise_burst``
    raises the label noise standard deviation by ``magnitude``.
``feature_dropout``
    zeroes each input coordinate independently with probability ``magnitude``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError

SHIFT_KINDS = ("mean_shift", "covariance_rotation", "label_noise_burst", "feature_dropout")


@dataclass(frozen=True)
class Shift:
    start: int
    kind: str
    magnitude: float


@dataclass(frozen=True)
class StreamConfig:
    d_raw: int = 32
    batch_size: int = 32
    n_steps: int = 40
    shift_schedule: tuple[Shift, ...] = ()
    label_noise_sigma: float = 0.1
    seed: int = 0
    shift_fraction: float = 0.5

    def __post_init__(self):
        sched = tuple(s if isinstance(s, Shift) else Shift(*s) for s in self.shift_schedule)
        object.__setattr__(self, "shift_schedule", sched)
        self.validate()

    def validate(self) -> None:
        if self.d_raw < 2 or self.batch_size < 1 or self.n_steps < 1:
            raise ConfigError("d_raw >= 2, batch_size >= 1 and n_steps >= 1 are required")
        if not (math.isfinite(self.label_noise_sigma) and self.label_noise_sigma >= 0):
            raise ConfigError("label_noise_sigma must be finite and >= 0")
        if not 0 < self.shift_fraction <= 1:
            raise ConfigError("shift_fraction must lie in (0, 1]")
        last = -1
        for s in self.shift_schedule:
            if s.kind not in SHIFT_KINDS:
                raise ConfigError(f"unknown shift kind {s.kind!r}; choose from {SHIFT_KINDS}")
            if not 0 <= s.start < self.n_steps:
                raise ConfigError(f"shift start {s.start} outside [0, {self.n_steps})")
            if s.start <= last:
                raise ConfigError("shift starts must be strictly increasing")
            if not math.isfinite(s.magnitude):
                raise ConfigError(f"shift magnitude must be finite, got {s.magnitude}")
            if s.kind == "feature_dropout" and not 0 <= s.magnitude < 1:
                raise ConfigError("feature_dropout magnitude is a probability in [0, 1)")
            if s.kind == "label_noise_burst" and s.magnitude < 0:
                raise ConfigError("label_noise_burst magnitude must be >= 0")
            last = s.start

    def active_shift(self, step: int) -> Shift | None:
        current = None
        for s in self.shift_schedule:
            if s.start <= step:
                current = s
        return current

    def first_shift_step(self) -> int | None:
        return self.shift_schedule[0].start if self.shift_schedule else None


@dataclass(frozen=True)
class Batch:
    step: int
    x: np.ndarray        # (batch, d_raw), as observed after any shift
    y: np.ndarray        # observed, noisy labels
    y_clean: np.ndarray  # noiseless target, used for evaluation


@dataclass(frozen=True)
class Environment:
    """Seeded quantities shared by every batch of one stream."""

    scales: np.ndarray
    shifted_coords: np.ndarray
    target: Callable[[np.ndarray], np.ndarray]


def make_environment(cfg: StreamConfig) -> Environment:
    rng = np.random.default_rng([cfg.seed, 0xE7])
    d = cfg.d_raw
    scales = np.linspace(1.5, 0.5, d)
    n_shift = max(1, int(round(cfg.shift_fraction * d)))
    shifted = np.sort(rng.permutation(d)[:n_shift])
    a = rng.normal(size=d) / math.sqrt(d)
    v = rng.normal(size=d) / math.sqrt(d)

    def target(x: np.ndarray) -> np.ndarray:
        return x @ a + 0.5 * np.tanh(2.0 * (x @ v))

    return Environment(scales, shifted, target)


def _apply_shift(x: np.ndarray, shift: Shift | None, env: Environment, rng) -> np.ndarray:
    if shift is None:
        return x
    if shift.kind == "mean_shift":
        x = x.copy()
        x[:, env.shifted_coords] += shift.magnitude
    elif shift.kind == "covariance_rotation":
        half = x.shape[1] // 2
        c, s = math.cos(shift.magnitude), math.sin(shift.magnitude)
        lo, hi = x[:, :half].copy(), x[:, half : 2 * half].copy()
        x = x.copy()
        x[:, :half] = c * lo - s * hi
        x[:, half : 2 * half] = s * lo + c * hi
    elif shift.kind == "feature_dropout":
        keep = rng.random(x.shape) >= shift.magnitude
        x = x * keep
    return x


def base_sample(cfg: StreamConfig, env: Environment, n: int, rng) -> np.ndarray:
    return rng.normal(size=(n, cfg.d_raw)) * env.scales


def generate_stream(cfg: StreamConfig) -> list[Batch]:
    """Deterministic list of ``n_steps`` batches."""
    cfg.validate()
    env = make_environment(cfg)
    rng = np.random.default_rng([cfg.seed, 0x5A])
    batches = []
    for t in range(cfg.n_steps):
        shift = cfg.active_shift(t)
        clean = base_sample(cfg, env, cfg.batch_size, rng)
        x = _apply_shift(clean, shift, env, rng)
        y_clean = env.target(clean)
        sigma = cfg.label_noise_sigma
        if shift is not None and shift.kind == "label_noise_burst":
            sigma += shift.magnitude
        y = y_clean + sigma * rng.normal(size=cfg.batch_size)
        batches.append(Batch(t, x, y, y_clean))
    return batches


def source_sample(cfg: StreamConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Unshifted labelled data used to fit the source head."""
    env = make_environment(cfg)
    rng = np.random.default_rng([cfg.seed, 0x50])
    x = base_sample(cfg, env, n, rng)
    y = env.target(x) + cfg.label_noise_sigma * rng.normal(size=n)
    return x, y


def stream_bytes(batches: Sequence[Batch]) -> bytes:
    return b"".join(b.x.tobytes() + b.y.tobytes() + b.y_clean.tobytes() for b in batches)
