"""Tensors, checkpoints and the CMCK binary checkpoint format.

CMCK layout (little-endian, no padding)::

    magic  b"CMCK"
    version u32 (= 1)
    step    u64
    count   u64
    count x { name_len u32 | name utf-8 | rank u32 | dims u64 x rank | f32 x prod(dims) }

All tensors are float32 and stored row-major.  Arithmetic on checkpoints is
carried out in float64 and rounded back to float32 once per coordinate.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError, ParameterError, StorageError, StructuralError

MAGIC = b"CMCK"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True, eq=False)
class Tensor:
    """A dense float32 array with explicit dims.

    ``data`` is a flat, read-only float32 buffer.  An empty ``dims`` tuple is a
    scalar holding one value.
    """

    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in dims):
            raise ParameterError(f"tensor dims must be positive, got {dims}")
        data = np.array(self.data, dtype=np.float32, copy=True).reshape(-1)
        if data.size != math.prod(dims):
            raise ParameterError(
                f"tensor data length {data.size} does not match dims {dims}"
            )
        if not np.all(np.isfinite(data)):
            raise ParameterError("tensor contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> "Tensor":
        arr = np.asarray(array, dtype=np.float32)
        return cls(arr.shape, arr.reshape(-1))

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls((), np.array([value], dtype=np.float32))

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """Read-only view shaped by ``dims``."""
        return self.data.reshape(self.dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        # bitwise, so -0.0 != 0.0 and round-trips are checked exactly
        return self.dims == other.dims and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def __hash__(self):
        return hash((self.dims, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """An insertion-ordered mapping of parameter name to :class:`Tensor`."""

    step: int
    entries: Mapping[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        step = int(self.step)
        if step < 0:
            raise ParameterError(f"checkpoint step must be non-negative, got {step}")
        items = self.entries.items() if isinstance(self.entries, Mapping) else self.entries
        entries: dict[str, Tensor] = {}
        for name, tensor in items:
            if not isinstance(name, str) or not name:
                raise ParameterError("parameter names must be non-empty strings")
            if name in entries:
                raise ParameterError(f"duplicate parameter name {name!r}")
            if not isinstance(tensor, Tensor):
                tensor = Tensor.from_array(tensor)
            entries[name] = tensor
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "entries", MappingProxyType(entries))

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray] | Iterable) -> "Checkpoint":
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        return cls(step, {name: Tensor.from_array(a) for name, a in items})

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def with_step(self, step: int) -> "Checkpoint":
        return Checkpoint(step, self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.step == other.step
            and list(self.entries) == list(other.entries)
            and all(self.entries[k] == other.entries[k] for k in self.entries)
        )

    def __hash__(self):
        return hash((self.step, tuple(self.entries.items())))

    def __repr__(self):
        shapes = ", ".join(f"{k}: {v.dims}" for k, v in self.entries.items())
        return f"Checkpoint(step={self.step}, {{{shapes}}})"


def check_compatible(checkpoints: Sequence[Checkpoint]) -> None:
    """Raise :class:`StructuralError` unless all checkpoints share names and dims."""
    if not checkpoints:
        raise ParameterError("at least one checkpoint is required")
    ref = checkpoints[0]
    for other in checkpoints[1:]:
        if set(other.entries) != set(ref.entries):
            missing = sorted(set(ref.entries) ^ set(other.entries))
            raise StructuralError(f"parameter name sets differ at {missing[0]!r}")
        for name, tensor in ref.entries.items():
            if other.entries[name].dims != tensor.dims:
                raise StructuralError(
                    f"parameter {name!r} has dims {other.entries[name].dims}, "
                    f"expected {tensor.dims}"
                )


def flatten(checkpoint: Checkpoint) -> np.ndarray:
    """Concatenate all parameters in insertion order into one float64 vector."""
    if not checkpoint.entries:
        return np.zeros(0)
    return np.concatenate([t.data.astype(np.float64) for t in checkpoint.entries.values()])


def checkpoint_linear_combination(terms: Sequence[tuple[float, Checkpoint]]) -> Checkpoint:
    """Return ``sum_k coeff_k * checkpoint_k`` coordinate-wise.

    The result carries the largest input step.
    """
    terms = list(terms)
    if not terms:
        raise ParameterError("linear combination needs at least one term")
    coeffs = [float(c) for c, _ in terms]
    if not all(math.isfinite(c) for c in coeffs):
        raise ParameterError("coefficients must be finite")
    ckpts = [c for _, c in terms]
    check_compatible(ckpts)
    out = {}
    for name in ckpts[0].entries:
        acc = np.zeros(ckpts[0].entries[name].size, dtype=np.float64)
        for coeff, ck in zip(coeffs, ckpts):
            acc += coeff * ck.entries[name].data.astype(np.float64)
        out[name] = Tensor(ckpts[0].entries[name].dims, acc)
    return Checkpoint(max(c.step for c in ckpts), out)


# ---------------------------------------------------------------------------
# CMCK serialization


def encode_checkpoint(c: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U64.pack(c.step), _U64.pack(len(c.entries))]
    for name, tensor in c.entries.items():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(tensor.rank))
        parts.extend(_U64.pack(d) for d in tensor.dims)
        parts.append(tensor.data.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over a byte buffer that reports which field ran out of bytes."""

    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.source}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    def f32(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)

    def utf8(self, n: int, what: str) -> str:
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.source}: {what} is not valid UTF-8") from exc

    def header(self, magic: bytes, version: int) -> None:
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"{self.source}: bad magic {got!r}, expected {magic!r}")
        v = self.u32("version")
        if v != version:
            raise FormatError(f"{self.source}: unsupported version {v}, expected {version}")

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.source}: {len(self.buf) - self.pos} trailing bytes after last record"
            )


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    r.header(MAGIC, VERSION)
    step = r.u64("step")
    count = r.u64("tensor count")
    entries: dict[str, Tensor] = {}
    for idx in range(count):
        name_len = r.u32(f"name length of tensor #{idx}")
        name = r.utf8(name_len, f"name of tensor #{idx}")
        if not name:
            raise FormatError(f"{source}: tensor #{idx} has an empty name")
        if name in entries:
            raise FormatError(f"{source}: duplicate tensor name {name!r}")
        rank = r.u32(f"rank of tensor {name!r}")
        dims = tuple(r.u64(f"dims of tensor {name!r}") for _ in range(rank))
        if any(d == 0 for d in dims):
            raise FormatError(f"{source}: tensor {name!r} has a zero dimension")
        data = r.f32(math.prod(dims), f"data of tensor {name!r}")
        if not np.all(np.isfinite(data)):
            raise FormatError(f"{source}: tensor {name!r} contains non-finite values")
        entries[name] = Tensor(dims, data)
    r.finish()
    return Checkpoint(step, entries)


def checkpoint_save(c: Checkpoint, path) -> None:
    """Write ``c`` to ``path`` in CMCK format."""
    path = Path(path)
    try:
        path.write_bytes(encode_checkpoint(c))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint ({exc.strerror})", path) from exc


def checkpoint_load(path) -> Checkpoint:
    """Read a CMCK file.  Raises :class:`FormatError` on any malformation."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint ({exc.strerror})", path) from exc
    return decode_checkpoint(buf, str(path))
