"""Run-level statistics and the JSONL event stream."""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Optional, Sequence

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Episode:
    domain: str
    success: bool
    steps: int
    phase: str = "deploy"
    bc_loss: Optional[float] = None  # policy vs expert, recorded for successes


class Rate(NamedTuple):
    value: float
    count: int  # 0 flags an empty selection


def cumulative_adapt_loss(history: Iterable[Episode]) -> float:
    """Sum of imitation losses over successful episodes only."""
    return float(sum(ep.bc_loss or 0.0 for ep in history if ep.success))


def success_rate(episodes: Sequence[Episode], domain: Optional[str] = None) -> Rate:
    sel = [ep for ep in episodes if domain is None or ep.domain == domain]
    if not sel:
        return Rate(0.0, 0)
    return Rate(sum(ep.success for ep in sel) / len(sel), len(sel))


def moving_success_rate(flags: Sequence[bool], window: int = 10) -> list[float]:
    """Trailing moving average; early points average what is available."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out, acc = [], 0.0
    for i, f in enumerate(flags):
        acc += float(f)
        if i >= window:
            acc -= float(flags[i - window])
        out.append(acc / min(i + 1, window))
    return out


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(n); 0 for fewer than two values."""
    if len(values) < 2:
        return 0.0
    return statistics.stdev(values) / math.sqrt(len(values))


@dataclass
class RunMetrics:
    episodes: list[Episode] = field(default_factory=list)
    cycles: list[dict] = field(default_factory=list)
    memory_trace: list[int] = field(default_factory=list)
    path_counts: dict = field(default_factory=lambda: {"triplet": 0, "infonce": 0, "none": 0})
    final_forgetting: float = 0.0

    def add_cycle(self, report: dict) -> None:
        self.cycles.append(report)
        self.memory_trace.append(report["memory_bytes"])
        for k, v in report["path_counts"].items():
            self.path_counts[k] += v

    def domain_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for ep in self.episodes:
            out[ep.domain] = out.get(ep.domain, 0) + 1
        return out

    def threshold_split(self) -> dict[str, float]:
        """Share of contrastive evaluations that took each branch."""
        n = self.path_counts["triplet"] + self.path_counts["infonce"]
        if n == 0:
            return {"triplet": 0.0, "infonce": 0.0}
        return {"triplet": self.path_counts["triplet"] / n, "infonce": self.path_counts["infonce"] / n}


def _clean(obj):
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return repr(obj)
        return obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


class MetricsWriter:
    """Append-only JSONL sink; every line carries ``schema`` and ``kind``."""

    def __init__(self, path: Optional[Path] = None, stream: Optional[IO[str]] = None):
        self.path = path
        self._fh = stream if stream is not None else (open(path, "w") if path else None)
        self.events: list[dict] = []

    def emit(self, kind: str, **payload) -> None:
        rec = {"schema": SCHEMA_VERSION, "kind": kind, **_clean(payload)}
        self.events.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None and self.path is not None:
            self._fh.close()
            self._fh = None


def write_summary(path: Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(_clean(summary), sort_keys=True, indent=2) + "\n")
