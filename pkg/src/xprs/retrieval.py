"""Similarity retrieval from the replay buffers and batch construction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .memory import DecayConfig, Experience, ReplayBuffer, temporal_weight

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class NotUnitNormError(ValueError):
    pass


@dataclass
class ScoredExperience:
    experience: Experience
    similarity: float
    temporal_weight: float
    sampling_prob: float = 0.0
    seq: int = 0  # insertion sequence number inside its buffer


@dataclass(frozen=True)
class RetrievalConfig:
    max_k: int = 5
    k_divisor: int = 10
    n_positives: int = 3
    n_negatives: int = 2
    decay: DecayConfig = field(default_factory=DecayConfig)


@dataclass
class CurrentItem:
    embedding: np.ndarray
    command: tuple[int, ...]
    expert_actions: np.ndarray


@dataclass
class TrainBatch:
    current: CurrentItem
    positives: list[ScoredExperience] = field(default_factory=list)
    negatives: list[ScoredExperience] = field(default_factory=list)
    retrieved_success: int = 0
    retrieved_failure: int = 0
    uniform_fallback: bool = False

    @property
    def sizes(self) -> tuple[int, int, int]:
        return 1, len(self.positives), len(self.negatives)

    @property
    def has_contrastive(self) -> bool:
        return bool(self.positives) and bool(self.negatives)


def _check_unit(v: np.ndarray, name: str) -> None:
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_TOL:
        raise NotUnitNormError(f"{name} has norm {n}, expected 1")


def similarity(q: np.ndarray, e: np.ndarray) -> float:
    """Cosine similarity of unit vectors, i.e. their dot product."""
    q = np.asarray(q, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if q.shape != e.shape:
        raise ValueError(f"dimension mismatch {q.shape} vs {e.shape}")
    _check_unit(q, "query")
    _check_unit(e, "entry")
    return float(np.dot(q, e))


def k_policy(buffer_size: int) -> int:
    """``min(5, floor(|B| / 10))``; zero means skip this buffer."""
    if buffer_size < 0:
        raise ValueError("buffer_size must be >= 0")
    return min(5, buffer_size // 10)


def top_k(buf: ReplayBuffer, q: np.ndarray, k: int, current_cycle: int,
          decay: DecayConfig = DecayConfig(),
          exclude: Sequence[Experience] = ()) -> list[ScoredExperience]:
    """The ``k`` entries most similar to ``q``.

    Ties go to the more recently inserted entry, then the lower index.
    Entries in ``exclude`` (compared by identity) are not candidates.
    """
    entries, seqs = buf.view()
    if exclude:
        skip = {id(x) for x in exclude}
        keep = [i for i, e in enumerate(entries) if id(e) not in skip]
        entries = tuple(entries[i] for i in keep)
        seqs = seqs[keep]
    if k < 0 or k > len(entries):
        raise ValueError(f"k={k} but only {len(entries)} candidates")
    if k == 0:
        return []
    q = np.ascontiguousarray(q, dtype=np.float64)
    _check_unit(q, "query")
    mat = np.ascontiguousarray(np.stack([e.embedding for e in entries]), dtype=np.float64)
    if mat.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch {mat.shape[1]} vs {q.shape[0]}")
    scores = kernels.dot_scores(mat, q)
    order = kernels.top_k_order(scores, np.ascontiguousarray(seqs, dtype=np.int64), k)
    out = []
    for i in order:
        e = entries[i]
        out.append(ScoredExperience(
            experience=e,
            similarity=float(scores[i]),
            temporal_weight=temporal_weight(current_cycle - e.stored_cycle, decay),
            seq=int(seqs[i]),
        ))
    return out


def sampling_probs(items: list[ScoredExperience]) -> tuple[list[ScoredExperience], bool]:
    """Fill ``sampling_prob`` proportional to similarity times recency weight.

    Negative products are clipped to zero so the result is a distribution.
    If nothing positive remains the probabilities fall back to uniform and
    the returned flag is True.
    """
    if not items:
        raise ValueError("cannot compute probabilities for an empty set")
    raw = np.array([s.similarity * s.temporal_weight for s in items], dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite similarity x weight product")
    mass = np.maximum(raw, 0.0)
    total = mass.sum()
    fallback = not total > 0.0
    if fallback:
        log.warning("non-positive retrieval mass %.3g; sampling uniformly", raw.sum())
        probs = np.full(len(items), 1.0 / len(items))
    else:
        probs = mass / total
    for s, p in zip(items, probs):
        s.sampling_prob = float(p)
    return items, fallback


def sample_without_replacement(items: list[ScoredExperience], m: int,
                               rng: np.random.Generator) -> list[ScoredExperience]:
    """Draw ``m`` distinct items by probability; result is ordered by prob desc."""
    if m >= len(items):
        chosen = list(range(len(items)))
    else:
        p = np.array([s.sampling_prob for s in items])
        nz = np.flatnonzero(p > 0)
        if len(nz) >= m:
            chosen = list(rng.choice(len(items), size=m, replace=False, p=p))
        else:
            zero = [i for i in range(len(items)) if p[i] <= 0]
            chosen = list(nz) + zero[: m - len(nz)]
    chosen.sort(key=lambda i: (-items[i].sampling_prob, i))
    return [items[i] for i in chosen]


def retrieve(buf: ReplayBuffer, q: np.ndarray, current_cycle: int, cfg: RetrievalConfig,
             exclude: Sequence[Experience] = ()) -> tuple[list[ScoredExperience], bool]:
    n = len(buf) - sum(1 for e in buf.entries() if any(e is x for x in exclude))
    k = min(cfg.max_k, n // cfg.k_divisor)
    found = top_k(buf, q, k, current_cycle, cfg.decay, exclude)
    if not found:
        return [], False
    return sampling_probs(found)


def build_batch(current: CurrentItem, success_buf: Optional[ReplayBuffer],
                failure_buf: Optional[ReplayBuffer], rng: np.random.Generator,
                current_cycle: int, cfg: RetrievalConfig = RetrievalConfig(),
                exclude: Sequence[Experience] = ()) -> TrainBatch:
    """Current item plus sampled successes (positives) and failures (negatives).

    Passing ``None`` for a buffer skips retrieval from it.
    """
    batch = TrainBatch(current=current)
    if success_buf is not None:
        r_s, fb = retrieve(success_buf, current.embedding, current_cycle, cfg, exclude)
        batch.retrieved_success = len(r_s)
        batch.uniform_fallback |= fb
        if r_s:
            batch.positives = sample_without_replacement(r_s, cfg.n_positives, rng)
    if failure_buf is not None:
        r_f, fb = retrieve(failure_buf, current.embedding, current_cycle, cfg, exclude)
        batch.retrieved_failure = len(r_f)
        batch.uniform_fallback |= fb
        if r_f:
            batch.negatives = sample_without_replacement(r_f, cfg.n_negatives, rng)
    return batch
