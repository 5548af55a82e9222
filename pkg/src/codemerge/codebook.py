"""Append-only fingerprint -> checkpoint index and its CMIX file format.

CMIX layout (little-endian, no padding)::

    magic b"CMIX" | version u32 (= 1) | d_prime u32 | count u64
    count x { step u64 | path_len u32 | path utf-8 | f32 x d_prime }

Paths are stored relative to the directory holding the index file and are
resolved lazily: loading an index never opens a checkpoint.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path, PurePosixPath
from typing import Iterator, Union

import numpy as np

from .errors import (
    FormatError,
    MissingReferenceError,
    ParameterError,
    StateError,
    StorageError,
)
from .fingerprint import Fingerprint
from .tensor_store import Checkpoint, _Reader, checkpoint_load, checkpoint_save

MAGIC = b"CMIX"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

CheckpointRef = Union[Path, Checkpoint]


@dataclass(frozen=True)
class CodebookEntry:
    fingerprint: Fingerprint
    checkpoint_ref: CheckpointRef
    step: int

    def __post_init__(self):
        if self.fingerprint.step != self.step:
            raise ParameterError(
                f"fingerprint step {self.fingerprint.step} != entry step {self.step}"
            )

    def resolve(self) -> Checkpoint:
        """Return the referenced checkpoint, loading it from disk if needed."""
        ref = self.checkpoint_ref
        if isinstance(ref, Checkpoint):
            return ref
        if not Path(ref).is_file():
            raise MissingReferenceError(
                f"checkpoint for step {self.step} is missing", ref
            )
        return checkpoint_load(ref)


class Codebook:
    """Ordered key-value store of ``(fingerprint, checkpoint)`` pairs.

    Single writer, many readers: :meth:`snapshot` returns an immutable tuple
    that later appends never change.  ``max_entries`` is an optional hard cap
    (``None`` means unbounded); appending past it raises :class:`StateError`
    because entries are never evicted.
    """

    def __init__(self, d_prime: int, max_entries: int | None = None):
        if d_prime < 1:
            raise ParameterError(f"d_prime must be positive, got {d_prime}")
        if max_entries is not None and max_entries < 1:
            raise ParameterError("max_entries must be positive or None")
        self.d_prime = int(d_prime)
        self.max_entries = max_entries
        self._entries: tuple[CodebookEntry, ...] = ()
        self._lock = threading.Lock()

    def append(self, fp: Fingerprint, ref: CheckpointRef) -> CodebookEntry:
        if len(fp) != self.d_prime:
            raise ParameterError(
                f"fingerprint length {len(fp)} does not match codebook d_prime {self.d_prime}"
            )
        if not isinstance(ref, Checkpoint):
            ref = Path(ref)
        with self._lock:
            if self._entries and fp.step <= self._entries[-1].step:
                raise ParameterError(
                    f"step {fp.step} is not greater than last stored step {self._entries[-1].step}"
                )
            if self.max_entries is not None and len(self._entries) >= self.max_entries:
                raise StateError(f"codebook is full ({self.max_entries} entries)")
            entry = CodebookEntry(fp, ref, fp.step)
            # rebinding a new tuple keeps earlier snapshots untouched
            self._entries = self._entries + (entry,)
        return entry

    def snapshot(self) -> tuple[CodebookEntry, ...]:
        return self._entries

    @property
    def entries(self) -> tuple[CodebookEntry, ...]:
        return self._entries

    def steps(self) -> list[int]:
        return [e.step for e in self._entries]

    def __len__(self):
        return len(self._entries)

    def __iter__(self) -> Iterator[CodebookEntry]:
        return iter(self._entries)

    def __getitem__(self, idx) -> CodebookEntry:
        return self._entries[idx]

    def by_step(self, step: int) -> CodebookEntry:
        for e in self._entries:
            if e.step == step:
                return e
        raise KeyError(step)


def codebook_append(cb: Codebook, fp: Fingerprint, ref: CheckpointRef) -> None:
    cb.append(fp, ref)


def fingerprint_matrix(cb: Codebook | tuple) -> np.ndarray:
    """Stack fingerprints row-wise (insertion order) into a float64 matrix."""
    entries = cb.snapshot() if isinstance(cb, Codebook) else tuple(cb)
    if not entries:
        raise StateError("codebook is empty")
    return np.stack([e.fingerprint.values.astype(np.float64) for e in entries])


def codebook_save(cb: Codebook, path, checkpoint_dir=None) -> None:
    """Write the index to ``path``.

    In-memory checkpoint references are first written as CMCK files into
    ``checkpoint_dir`` (default: ``<index stem>_ckpts`` next to the index).
    """
    path = Path(path)
    base = path.parent.resolve()
    entries = cb.snapshot()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(cb.d_prime), _U64.pack(len(entries))]
    for e in entries:
        ref = e.checkpoint_ref
        if isinstance(ref, Checkpoint):
            out_dir = Path(checkpoint_dir) if checkpoint_dir else path.with_name(path.stem + "_ckpts")
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageError(f"cannot create checkpoint directory ({exc.strerror})", out_dir) from exc
            ref = out_dir / f"step_{e.step:08d}.cmck"
            checkpoint_save(e.checkpoint_ref, ref)
        rel = PurePosixPath(*Path(os.path.relpath(Path(ref).resolve(), base)).parts)
        raw = str(rel).encode("utf-8")
        parts += [_U64.pack(e.step), _U32.pack(len(raw)), raw]
        parts.append(e.fingerprint.values.astype("<f4").tobytes())
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise StorageError(f"cannot write codebook ({exc.strerror})", path) from exc


def codebook_load(path, max_entries: int | None = None) -> Codebook:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read codebook ({exc.strerror})", path) from exc
    r = _Reader(buf, str(path))
    r.header(MAGIC, VERSION)
    d_prime = r.u32("d_prime")
    if d_prime == 0:
        raise FormatError(f"{path}: d_prime is zero")
    count = r.u64("entry count")
    cb = Codebook(d_prime, max_entries)
    base = path.parent
    last = -1
    for idx in range(count):
        step = r.u64(f"step of entry #{idx}")
        plen = r.u32(f"path length of entry step {step}")
        rel = r.utf8(plen, f"path of entry step {step}")
        values = r.f32(d_prime, f"fingerprint of entry step {step}")
        if step <= last:
            raise FormatError(f"{path}: entry steps not strictly increasing at step {step}")
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}: fingerprint of entry step {step} is non-finite")
        last = step
        cb.append(Fingerprint(step, values), base / rel)
    r.finish()
    return cb
