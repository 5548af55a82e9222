"""Gaussian random projection of pooled features into compact fingerprints.

Projection entries are reproducible from ``(d, d_prime, seed)`` alone:

* raw 64-bit words come from ``numpy.random.Philox(key=seed)``: Philox-4x64-10
  with key ``(seed, 0)``, blocks at counters ``1, 2, 3, ...`` (each block
  yields four words, in order);
* each word becomes a double ``(w >> 11) * 2**-53`` in ``[0, 1)``;
* consecutive pairs ``(u1, u2)`` go through Box-Muller with ``1 - u1`` in
  ``(0, 1]`` for the radius, yielding ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)``;
* normals fill the ``d x d_prime`` matrix row-major and are scaled by
  ``1/sqrt(d_prime)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .tensor_store import Tensor

_U64_MAX = (1 << 64) - 1


def philox_uniforms(seed: int, count: int) -> np.ndarray:
    """``count`` doubles in ``[0, 1)`` from Philox keyed by ``seed``."""
    bg = np.random.Philox(key=int(seed))
    raw = bg.random_raw(count).astype(np.uint64)
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def box_muller_normals(seed: int, count: int) -> np.ndarray:
    """``count`` standard normals via Box-Muller over :func:`philox_uniforms`."""
    pairs = (count + 1) // 2
    u = philox_uniforms(seed, 2 * pairs)
    u1, u2 = 1.0 - u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    d: int
    d_prime: int
    seed: int
    entries: np.ndarray  # (d, d_prime) float64, read-only

    def __eq__(self, other):
        if not isinstance(other, ProjectionMatrix):
            return NotImplemented
        return (
            (self.d, self.d_prime, self.seed) == (other.d, other.d_prime, other.seed)
            and np.array_equal(self.entries, other.entries)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Projected feature vector for one batch, stored as float32."""

    step: int
    values: np.ndarray

    def __post_init__(self):
        if int(self.step) < 0:
            raise ParameterError(f"fingerprint step must be non-negative, got {self.step}")
        values = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ParameterError("fingerprint contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "step", int(self.step))
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.step == other.step and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )

    __hash__ = None


def make_projection(d: int, d_prime: int, seed: int) -> ProjectionMatrix:
    if d < 1 or d_prime < 1:
        raise ParameterError(f"projection dims must be positive, got d={d}, d'={d_prime}")
    if d_prime > d:
        raise ParameterError(f"d_prime ({d_prime}) must not exceed d ({d})")
    if not 0 <= int(seed) <= _U64_MAX:
        raise ParameterError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    entries = box_muller_normals(seed, d * d_prime).reshape(d, d_prime)
    entries /= np.sqrt(d_prime)
    entries.setflags(write=False)
    return ProjectionMatrix(int(d), int(d_prime), int(seed), entries)


def pool_features(feature_map: Tensor | np.ndarray) -> np.ndarray:
    """Mean over every leading axis, keeping the last (feature) axis."""
    arr = feature_map.array() if isinstance(feature_map, Tensor) else np.asarray(feature_map)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 1:
        raise ParameterError("feature map must have rank >= 1")
    if arr.size == 0:
        raise ParameterError("feature map is empty")
    if arr.ndim == 1:
        return arr.copy()
    return arr.reshape(-1, arr.shape[-1]).mean(axis=0)


def compute_fingerprint(features, p: ProjectionMatrix, step: int) -> Fingerprint:
    vec = np.asarray(features, dtype=np.float64).reshape(-1)
    if vec.size != p.d:
        raise ParameterError(f"feature length {vec.size} does not match projection d={p.d}")
    return Fingerprint(step, vec @ p.entries)
