"""Frozen synthetic feature extractor and embedding utilities.

The encoder stands in for a pair of pretrained vision backbones: one stream
pools the image coarsely (global "semantic" content), the other pools it on a
finer grid (spatial layout). Pooled features are standardized per image, then
each stream applies a fixed random projection followed by ``tanh``. Parameters are generated once from a seed, stored as float32 and
marked read-only.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IMAGE_SIZE = 224
CHANNELS = 3
RAW_IMAGE_BYTES = IMAGE_SIZE * IMAGE_SIZE * CHANNELS  # 150528
BYTES_PER_COMPONENT = 4
MAX_COMMAND_LENGTH = 32


class ZeroNormError(ValueError):
    """Raised when normalizing a vector with zero (or non-finite) norm."""


@dataclass(frozen=True)
class Observation:
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS) or px.dtype != np.uint8:
            raise ValueError(
                f"observation must be uint8 {IMAGE_SIZE}x{IMAGE_SIZE}x{CHANNELS}, "
                f"got {px.dtype} {px.shape}"
            )

    @property
    def raw_byte_size(self) -> int:
        return int(self.pixels.nbytes)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EncoderParams:
    """Frozen projection weights for both streams.

    ``w_sem`` has shape ``(d_sem, grid_sem**2 * 3)`` and ``w_spa`` has shape
    ``(d_spa, grid_spa**2 * 3)``.
    """

    d_sem: int
    d_spa: int
    grid_sem: int
    grid_spa: int
    w_sem: np.ndarray = field(repr=False)
    b_sem: np.ndarray = field(repr=False)
    w_spa: np.ndarray = field(repr=False)
    b_spa: np.ndarray = field(repr=False)

    def __post_init__(self):
        for g in (self.grid_sem, self.grid_spa):
            if g < 1 or IMAGE_SIZE % g:
                raise ValueError(f"pooling grid {g} must divide {IMAGE_SIZE}")
        expect = {
            "w_sem": (self.d_sem, self.grid_sem ** 2 * CHANNELS),
            "b_sem": (self.d_sem,),
            "w_spa": (self.d_spa, self.grid_spa ** 2 * CHANNELS),
            "b_spa": (self.d_spa,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, declared dims need {shape}")
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def create(cls, d_sem: int = 768, d_spa: int = 256, seed: int = 0,
               grid_sem: int = 8, grid_spa: int = 16,
               bias_scale: float = 0.0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        n_sem = grid_sem ** 2 * CHANNELS
        n_spa = grid_spa ** 2 * CHANNELS
        w_sem = rng.standard_normal((d_sem, n_sem)) / np.sqrt(n_sem)
        w_spa = rng.standard_normal((d_spa, n_spa)) / np.sqrt(n_spa)
        b_sem = rng.standard_normal(d_sem) * bias_scale
        b_spa = rng.standard_normal(d_spa) * bias_scale
        return cls(d_sem, d_spa, grid_sem, grid_spa, w_sem, b_sem, w_spa, b_spa)

    @property
    def d_e(self) -> int:
        return self.d_sem + self.d_spa

    def to_bytes(self) -> bytes:
        head = struct.pack("<4I", self.d_sem, self.d_spa, self.grid_sem, self.grid_spa)
        body = b"".join(
            a.astype("<f4").tobytes() for a in (self.w_sem, self.b_sem, self.w_spa, self.b_spa)
        )
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncoderParams":
        if len(blob) < 16:
            raise ValueError("encoder block too short")
        d_sem, d_spa, g_sem, g_spa = struct.unpack_from("<4I", blob, 0)
        shapes = [
            (d_sem, g_sem ** 2 * CHANNELS), (d_sem,),
            (d_spa, g_spa ** 2 * CHANNELS), (d_spa,),
        ]
        need = 16 + 4 * sum(int(np.prod(s)) for s in shapes)
        if len(blob) != need:
            raise ValueError(f"encoder block is {len(blob)} bytes, expected {need}")
        arrays = []
        off = 16
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(s))
            off += 4 * n
        return cls(d_sem, d_spa, g_sem, g_spa, *arrays)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None  # type: ignore[assignment]


def _pool(pixels: np.ndarray, grid: int) -> np.ndarray:
    """Block-mean pooled image, centered per channel and scaled per image (zero image -> zeros)."""
    b = IMAGE_SIZE // grid
    x = pixels.astype(np.float64).reshape(grid, b, grid, b, CHANNELS)
    f = x.mean(axis=(1, 3)) / 255.0
    f = (f - f.mean(axis=(0, 1))).ravel()
    return f / (f.std() + 1e-6)


def encode(obs: Observation, params: EncoderParams) -> np.ndarray:
    """Map an observation to its (un-normalized) float64 embedding."""
    px = obs.pixels if isinstance(obs, Observation) else Observation(np.asarray(obs)).pixels
    sem = np.tanh(params.w_sem.astype(np.float64) @ _pool(px, params.grid_sem)
                  + params.b_sem.astype(np.float64))
    spa = np.tanh(params.w_spa.astype(np.float64) @ _pool(px, params.grid_spa)
                  + params.b_spa.astype(np.float64))
    return np.concatenate([sem, spa])


def normalize(e: np.ndarray) -> np.ndarray:
    """Scale the whole concatenated vector to unit Euclidean norm."""
    e = np.asarray(e, dtype=np.float64)
    m = np.max(np.abs(e)) if e.size else 0.0
    if not np.isfinite(m) or m == 0.0:
        raise ZeroNormError("cannot normalize a zero-norm or non-finite embedding")
    # pre-scale so tiny or huge entries cannot under/overflow the norm
    out = e / m
    out = out / np.linalg.norm(out)
    # one refinement pass keeps |norm - 1| at the 1e-16 level
    return out / np.linalg.norm(out)


def split_embedding(e: np.ndarray, d_sem: int) -> tuple[np.ndarray, np.ndarray]:
    return e[:d_sem], e[d_sem:]


def embedding_nbytes(d_e: int) -> int:
    return d_e * BYTES_PER_COMPONENT


def compression_ratio(d_e: int) -> float:
    if d_e < 1:
        raise ValueError("d_e must be >= 1")
    return RAW_IMAGE_BYTES / (d_e * BYTES_PER_COMPONENT)


def storage_reduction(d_e: int) -> float:
    """Fraction of raw image bytes saved by storing the embedding instead."""
    return 1.0 - embedding_nbytes(d_e) / RAW_IMAGE_BYTES


def as_command(tokens: Sequence[int], max_len: int = MAX_COMMAND_LENGTH) -> tuple[int, ...]:
    """Validate a token sequence and return it as a tuple of ints."""
    toks = tuple(int(t) for t in tokens)
    if not 1 <= len(toks) <= max_len:
        raise ValueError(f"command length {len(toks)} outside [1, {max_len}]")
    if any(t < 0 or t > 0x7FFFFFFF for t in toks):
        raise ValueError("token ids must be non-negative 32-bit integers")
    return toks
