"""Dual FIFO replay buffers with temporal weighting and binary snapshots.

Concurrency contract: one writer (the adaptation loop) and any number of
readers. ``insert`` and ``entries`` both take the buffer's lock, so a reader
always sees a consistent snapshot and never a half-applied insert.
"""
from __future__ import annotations

import math
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoder import EncoderParams, as_command

SNAPSHOT_MAGIC = b"XPRSBUF1"
SNAPSHOT_VERSION = 1
ACTION_DIM = 7
SUCCESS_ROLE = 1
FAILURE_ROLE = 0
UNIT_NORM_TOL = 1e-6


class RoleMismatchError(ValueError):
    pass


class SnapshotError(Exception):
    """Base class for unreadable snapshot files."""


class BadMagicError(SnapshotError):
    pass


class VersionMismatchError(SnapshotError):
    pass


class TruncatedSnapshotError(SnapshotError):
    pass


class ChecksumMismatchError(SnapshotError):
    pass


@dataclass(frozen=True)
class DecayConfig:
    decay_lambda: float = 0.1

    def __post_init__(self):
        if not math.isfinite(self.decay_lambda) or self.decay_lambda < 0:
            raise ValueError("decay_lambda must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class Experience:
    """One stored trajectory.

    ``embedding`` and ``actions`` are kept as float32, the persisted
    precision, so a snapshot round trip is exact. ``actions`` has shape
    ``(7, T)``: expert actions for successes, executed ones for failures.
    """

    embedding: np.ndarray
    command: tuple[int, ...]
    actions: np.ndarray
    success: bool
    stored_cycle: int

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embedding, dtype=np.float32)
        if emb.ndim != 1:
            raise ValueError("embedding must be 1-D")
        norm = float(np.linalg.norm(emb.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"embedding norm {norm} is not 1")
        acts = np.ascontiguousarray(self.actions, dtype=np.float32)
        if acts.ndim != 2 or acts.shape[0] != ACTION_DIM or acts.shape[1] < 1:
            raise ValueError(f"actions must have shape (7, T>=1), got {acts.shape}")
        if not np.all(np.isfinite(acts)):
            raise ValueError("actions must be finite")
        if self.stored_cycle < 0:
            raise ValueError("stored_cycle must be >= 0")
        emb.setflags(write=False)
        acts.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "command", as_command(self.command))
        object.__setattr__(self, "success", bool(self.success))
        object.__setattr__(self, "stored_cycle", int(self.stored_cycle))

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def nbytes(self) -> int:
        return 4 * (self.embedding.size + self.actions.size + len(self.command))

    def same_as(self, other: "Experience") -> bool:
        return (
            self.success == other.success
            and self.stored_cycle == other.stored_cycle
            and self.command == other.command
            and self.embedding.tobytes() == other.embedding.tobytes()
            and self.actions.shape == other.actions.shape
            and self.actions.tobytes() == other.actions.tobytes()
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring for one outcome role."""

    def __init__(self, capacity: int = 50, success: bool = True):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.success = bool(success)
        self.insert_count = 0
        self._entries: list[Experience] = []
        self._lock = threading.RLock()

    @property
    def role(self) -> int:
        return SUCCESS_ROLE if self.success else FAILURE_ROLE

    def insert(self, exp: Experience) -> Optional[Experience]:
        """Append ``exp`` as newest; return the evicted oldest entry if full."""
        if exp.success != self.success:
            kind = "success" if self.success else "failure"
            raise RoleMismatchError(f"{kind} buffer cannot store success={exp.success}")
        with self._lock:
            evicted = None
            if len(self._entries) >= self.capacity:
                evicted = self._entries.pop(0)
            self._entries.append(exp)
            self.insert_count += 1
            return evicted

    def entries(self) -> tuple[Experience, ...]:
        with self._lock:
            return tuple(self._entries)

    def view(self) -> tuple[tuple[Experience, ...], np.ndarray]:
        """Entries together with their insertion sequence numbers."""
        with self._lock:
            ents = tuple(self._entries)
            first = self.insert_count - len(ents)
        return ents, np.arange(first, first + len(ents), dtype=np.int64)

    def copy(self) -> "ReplayBuffer":
        """Independent buffer sharing the (immutable) experiences."""
        out = ReplayBuffer(self.capacity, self.success)
        with self._lock:
            out._entries = list(self._entries)
            out.insert_count = self.insert_count
        return out

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries())

    def same_state(self, other: "ReplayBuffer") -> bool:
        a, b = self.entries(), other.entries()
        return (
            self.capacity == other.capacity
            and self.success == other.success
            and self.insert_count == other.insert_count
            and len(a) == len(b)
            and all(x.same_as(y) for x, y in zip(a, b))
        )


def temporal_weight(delta_t: int, cfg: DecayConfig | float = DecayConfig()) -> float:
    """Recency weight ``exp(-lambda * delta_t)`` with ``delta_t`` in cycles."""
    lam = cfg.decay_lambda if isinstance(cfg, DecayConfig) else float(cfg)
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    return math.exp(-lam * delta_t)


def memory_usage(buffers: Iterable[ReplayBuffer]) -> int:
    """Bytes held by embeddings, actions and command tokens of all entries."""
    return sum(e.nbytes() for buf in buffers for e in buf.entries())


# -- snapshots ---------------------------------------------------------------

def _pack_buffer(buf: ReplayBuffer) -> bytes:
    ents = buf.entries()
    parts = [struct.pack("<BIQI", buf.role, buf.capacity, buf.insert_count, len(ents))]
    for e in ents:
        parts.append(struct.pack("<QI", e.stored_cycle, len(e.command)))
        parts.append(np.asarray(e.command, dtype="<i4").tobytes())
        parts.append(struct.pack("<I", e.horizon))
        parts.append(e.actions.astype("<f4").tobytes())
        parts.append(struct.pack("<B", int(e.success)))
        parts.append(e.embedding.astype("<f4").tobytes())
    return b"".join(parts)


def dump_snapshot(success_buf: ReplayBuffer, failure_buf: ReplayBuffer,
                  encoder: EncoderParams) -> bytes:
    enc = encoder.to_bytes()
    body = b"".join([
        SNAPSHOT_MAGIC,
        struct.pack("<III", SNAPSHOT_VERSION, encoder.d_sem, encoder.d_spa),
        struct.pack("<I", len(enc)), enc,
        _pack_buffer(success_buf),
        _pack_buffer(failure_buf),
    ])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def snapshot(success_buf: ReplayBuffer, failure_buf: ReplayBuffer,
             encoder: EncoderParams, path) -> None:
    data = dump_snapshot(success_buf, failure_buf, encoder)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedSnapshotError(
                f"snapshot ends early: need {n} bytes at offset {self.pos}, body is {self.end}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_buffer(r: _Reader, d_e: int) -> tuple[int, int, int, list[Experience]]:
    role, capacity, insert_count, count = r.unpack("<BIQI")
    if role not in (SUCCESS_ROLE, FAILURE_ROLE):
        raise SnapshotError(f"unknown buffer role byte {role}")
    if count > capacity:
        raise SnapshotError(f"entry count {count} exceeds capacity {capacity}")
    raw = []
    for _ in range(count):
        cycle, n_tok = r.unpack("<QI")
        tokens = np.frombuffer(r.take(4 * n_tok), dtype="<i4")
        (horizon,) = r.unpack("<I")
        actions = np.frombuffer(r.take(4 * ACTION_DIM * horizon), dtype="<f4")
        (flag,) = r.unpack("<B")
        emb = np.frombuffer(r.take(4 * d_e), dtype="<f4")
        raw.append((cycle, tokens, horizon, actions, flag, emb))
    return role, capacity, insert_count, raw


def load_snapshot(data: bytes) -> tuple[ReplayBuffer, ReplayBuffer, EncoderParams]:
    if len(data) < len(SNAPSHOT_MAGIC):
        raise TruncatedSnapshotError("file shorter than the magic header")
    if data[:8] != SNAPSHOT_MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}")
    if len(data) < 8 + 12 + 4:
        raise TruncatedSnapshotError("file shorter than the fixed header")
    r = _Reader(data, len(data) - 4)
    r.take(8)
    version, d_sem, d_spa = r.unpack("<III")
    if version != SNAPSHOT_VERSION:
        raise VersionMismatchError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    (enc_len,) = r.unpack("<I")
    enc_blob = r.take(enc_len)
    bufs = [_read_buffer(r, d_sem + d_spa) for _ in range(2)]
    if r.pos != r.end:
        raise SnapshotError(f"{r.end - r.pos} unexpected trailing bytes before checksum")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual:
        raise ChecksumMismatchError(f"CRC32 mismatch: stored {stored_crc:08x}, computed {actual:08x}")

    try:
        encoder = EncoderParams.from_bytes(enc_blob)
    except ValueError as exc:
        raise SnapshotError(f"bad encoder block: {exc}") from exc
    if (encoder.d_sem, encoder.d_spa) != (d_sem, d_spa):
        raise SnapshotError("encoder block dims disagree with header")

    out = []
    for role, capacity, insert_count, raw in bufs:
        buf = ReplayBuffer(capacity, success=role == SUCCESS_ROLE)
        for cycle, tokens, horizon, actions, flag, emb in raw:
            buf._entries.append(Experience(
                embedding=emb, command=tuple(int(t) for t in tokens),
                actions=actions.reshape(ACTION_DIM, horizon),
                success=bool(flag), stored_cycle=cycle,
            ))
            if bool(flag) != buf.success:
                raise SnapshotError("entry outcome flag disagrees with its buffer role")
        buf.insert_count = insert_count
        out.append(buf)
    success_buf, failure_buf = out
    if not success_buf.success or failure_buf.success:
        raise SnapshotError("buffers stored in the wrong order")
    return success_buf, failure_buf, encoder


def restore(path) -> tuple[ReplayBuffer, ReplayBuffer, EncoderParams]:
    return load_snapshot(Path(path).read_bytes())


def buffer_from_experiences(exps: Sequence[Experience], capacity: int, success: bool) -> ReplayBuffer:
    buf = ReplayBuffer(capacity, success)
    for e in exps:
        buf.insert(e)
    return buf
