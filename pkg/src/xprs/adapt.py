"""Windowed adaptation trigger and the online adaptation cycle."""
from __future__ import annotations

import collections
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderParams, encode, normalize
from .losses import ContrastivePath, ThclConfig, bc_loss, loss_gradients
from .memory import Experience, ReplayBuffer, memory_usage
from .policy import Policy
from .retrieval import CurrentItem, RetrievalConfig, TrainBatch, build_batch
from .simenv import Trajectory

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_contrastive", "no_retrieval", "no_replay", "naive")


class AdaptationError(RuntimeError):
    pass


class TriggerState:
    """Ring of the last ``window`` success flags."""

    def __init__(self, window: int = 10, threshold: float = 0.8):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.threshold = threshold
        self.flags: collections.deque[bool] = collections.deque(maxlen=window)

    def record(self, success: bool) -> None:
        self.flags.append(bool(success))

    def reset(self) -> None:
        self.flags.clear()

    @property
    def full(self) -> bool:
        return len(self.flags) == self.window

    def rate(self) -> float:
        return sum(self.flags) / len(self.flags) if self.flags else 0.0


def should_adapt(ts: TriggerState) -> bool:
    """Fire only on a full window whose success rate is below threshold."""
    return ts.full and sum(ts.flags) / ts.window < ts.threshold


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 2
    accumulation_steps: int = 8
    clip_inf_norm: float = 1.0
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.accumulation_steps < 1:
            raise ValueError("learning_rate, epochs and accumulation_steps must be positive")
        if self.clip_inf_norm <= 0 or self.weight_decay < 0:
            raise ValueError("clip_inf_norm must be > 0 and weight_decay >= 0")


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return base_lr
    if step == total_steps:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(grads, limit: float):
    """Clamp every component to ``[-limit, limit]``.

    Accepts an array or a ``{name: (dB, dA)}`` mapping and returns the same
    structure.
    """
    if isinstance(grads, dict):
        return {k: tuple(clip_gradients(g, limit) for g in v) for k, v in grads.items()}
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient component")
    return np.clip(g, -limit, limit)


def optimizer_steps(epochs: int, n_success: int, accumulation: int) -> int:
    return math.ceil(epochs * n_success / accumulation)


def forgetting_metric(policy: Policy, success_buf: ReplayBuffer) -> float:
    """Mean BC loss of ``policy`` over stored successes (0 for an empty buffer)."""
    entries = success_buf.entries()
    if not entries:
        return 0.0
    total = 0.0
    for e in entries:
        total += imitation_loss(policy, e.embedding.astype(np.float64), e.command, e.actions)
    return total / len(entries)


def imitation_loss(policy: Policy, embedding: np.ndarray, command, expert_actions: np.ndarray) -> float:
    """BC loss of the policy's open-loop prediction against physical expert actions."""
    action, _ = policy.forward(embedding, command)
    return bc_loss(action, policy.normalize_actions(expert_actions))


@dataclass
class CycleReport:
    cycle_index: int
    trajectories_used: int
    successes: int
    failures: int
    batches: int
    optimizer_steps: int
    mean_total_loss: float
    mean_bc_loss: float
    triplet_fraction: float
    path_counts: dict = field(default_factory=dict)
    batch_sizes: dict = field(default_factory=dict)
    uniform_fallbacks: int = 0
    adapt_loss_metric: float = 0.0
    forgetting_metric: float = 0.0
    memory_bytes: int = 0
    wall_time: float = 0.0

    def as_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


def experience_from(traj: Trajectory, embedding: np.ndarray, cycle: int) -> Experience:
    actions = traj.expert_actions if traj.success else traj.actions
    return Experience(embedding, traj.command, actions, traj.success, cycle)


class OnlineAdapter:
    """Owns the policy, both buffers and the global cycle counter.

    ``variant`` selects an ablation: ``no_contrastive`` zeroes the
    contrastive weight, ``no_retrieval`` trains on the current item alone,
    ``no_replay`` retrieves only among the trajectories of the current cycle
    (the long-term buffers are still filled, for metrics), and ``naive``
    is conventional fine-tuning: it trains the base weights of every layer
    on the current item alone, with no adapters, buffers or contrastive term.
    """

    def __init__(self, policy: Policy, encoder: EncoderParams, success_buf: ReplayBuffer,
                 failure_buf: ReplayBuffer, train: TrainConfig = TrainConfig(),
                 thcl: ThclConfig = ThclConfig(), retrieval: RetrievalConfig = RetrievalConfig(),
                 variant: str = "full"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant in ("no_contrastive", "naive"):
            thcl = ThclConfig(thcl.margin_alpha, thcl.temperature_tau, thcl.threshold_beta, 0.0)
        self.policy = policy
        self.encoder = encoder
        self.success_buf = success_buf
        self.failure_buf = failure_buf
        self.train = train
        self.thcl = thcl
        self.retrieval = retrieval
        self.variant = variant
        self.trains_base = variant == "naive"
        if self.trains_base:
            policy.thaw()
        self.cycle = 0

    def _params(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return self.policy.get_base() if self.trains_base else self.policy.get_lora()

    def _set_params(self, params) -> None:
        (self.policy.set_base if self.trains_base else self.policy.set_lora)(params)

    def embed(self, traj: Trajectory) -> np.ndarray:
        obs = traj.initial_observation
        if obs is None:
            obs = next(s.observation for s in traj.steps if s.observation is not None)
        return normalize(encode(obs, self.encoder))

    def _batch(self, item: CurrentItem, own: Experience, rng, local) -> TrainBatch:
        if self.variant in ("no_retrieval", "naive"):
            return TrainBatch(current=item)
        if self.variant == "no_replay":
            sb, fb = local
        else:
            sb, fb = self.success_buf, self.failure_buf
        return build_batch(item, sb, fb, rng, self.cycle, self.retrieval, exclude=(own,))

    def run_adaptation_cycle(self, collected: Sequence[Trajectory],
                             rng: np.random.Generator) -> CycleReport:
        """One pass of the online adaptation procedure over ``collected``.

        Buffer inserts are kept even if training fails; adapter factors are
        restored to their pre-cycle values on any error.
        """
        if not collected:
            raise ValueError("need at least one collected trajectory")
        t_start = time.perf_counter()
        cfg = self.train
        exps = [experience_from(tr, self.embed(tr), self.cycle) for tr in collected]
        if self.variant != "naive":
            for e in exps:
                (self.success_buf if e.success else self.failure_buf).insert(e)
        local = (ReplayBuffer(max(len(exps), 1), True), ReplayBuffer(max(len(exps), 1), False))
        if self.variant == "no_replay":
            for e in exps:
                (local[0] if e.success else local[1]).insert(e)

        current = [(CurrentItem(e.embedding.astype(np.float64), e.command,
                                e.actions.astype(np.float64)), e)
                   for e in exps if e.success]
        n_steps = optimizer_steps(cfg.epochs, len(current), cfg.accumulation_steps)
        saved = self._params()
        counts = {p.value: 0 for p in ContrastivePath}
        sizes: dict[str, int] = {}
        losses, bcs = [], []
        fallbacks = 0
        steps_done = 0
        try:
            acc = None
            acc_n = 0
            for _ in range(cfg.epochs):
                for item, own in current:
                    batch = self._batch(item, own, rng, local)
                    bg = loss_gradients(batch, self.policy, self.thcl, base=self.trains_base)
                    counts[bg.report.selected.value] += 1
                    key = "%d,%d,%d" % batch.sizes
                    sizes[key] = sizes.get(key, 0) + 1
                    fallbacks += int(batch.uniform_fallback)
                    losses.append(bg.report.total)
                    bcs.append(bg.report.bc)
                    acc = bg.grads if acc is None else {
                        k: (acc[k][0] + g[0], acc[k][1] + g[1]) for k, g in bg.grads.items()}
                    acc_n += 1
                    if acc_n == cfg.accumulation_steps:
                        self._apply(acc, acc_n, steps_done, n_steps)
                        steps_done += 1
                        acc, acc_n = None, 0
            if acc_n:
                self._apply(acc, acc_n, steps_done, n_steps)
                steps_done += 1
        except Exception as exc:
            self._set_params(saved)
            raise AdaptationError(f"adaptation cycle {self.cycle} aborted: {exc}") from exc

        adapt_metric = sum(
            imitation_loss(self.policy, item.embedding, item.command, item.expert_actions)
            for item, _ in current
        )
        report = CycleReport(
            cycle_index=self.cycle,
            trajectories_used=len(collected),
            successes=len(current),
            failures=len(exps) - len(current),
            batches=len(losses),
            optimizer_steps=steps_done,
            mean_total_loss=float(np.mean(losses)) if losses else 0.0,
            mean_bc_loss=float(np.mean(bcs)) if bcs else 0.0,
            triplet_fraction=counts["triplet"] / len(losses) if losses else 0.0,
            path_counts=counts,
            batch_sizes=sizes,
            uniform_fallbacks=fallbacks,
            adapt_loss_metric=adapt_metric,
            forgetting_metric=forgetting_metric(self.policy, self.success_buf),
            memory_bytes=memory_usage([self.success_buf, self.failure_buf]),
        )
        self.cycle += 1
        report.wall_time = time.perf_counter() - t_start
        log.info("cycle %d: %d batches, %d steps, loss %.4g", report.cycle_index,
                 report.batches, report.optimizer_steps, report.mean_total_loss)
        return report

    def _apply(self, acc, count: int, step: int, total: int) -> None:
        cfg = self.train
        lr = lr_schedule(step, total, cfg.learning_rate)
        grads = clip_gradients({k: (b / count, a / count) for k, (b, a) in acc.items()},
                               cfg.clip_inf_norm)
        shrink = 1.0 - lr * cfg.weight_decay
        new = {}
        for k, (p, q) in self._params().items():
            gp, gq = grads[k]
            new[k] = (p * shrink - lr * gp, q * shrink - lr * gq)
        self._set_params(new)
