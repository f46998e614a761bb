"""Behavioral cloning, triplet, InfoNCE and the thresholded hybrid switch.

Each loss has a companion ``*_grad`` returning derivatives with respect to its
representation arguments; ``loss_gradients`` chains them through the policy
to the adapter factors.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .policy import Policy
from .retrieval import TrainBatch


class NonFiniteLossError(FloatingPointError):
    pass


class ContrastivePath(str, enum.Enum):
    TRIPLET = "triplet"
    INFONCE = "infonce"
    NONE = "none"


@dataclass(frozen=True)
class ThclConfig:
    margin_alpha: float = 0.5
    temperature_tau: float = 0.1
    threshold_beta: float = 1.0
    contrastive_weight: float = 0.3

    def __post_init__(self):
        if not self.temperature_tau > 0:
            raise ValueError("temperature_tau must be > 0")
        if self.contrastive_weight < 0:
            raise ValueError("contrastive_weight must be >= 0")


@dataclass
class ThclResult:
    selected: ContrastivePath
    triplet: Optional[float]
    infonce: Optional[float]
    value: float


@dataclass
class LossReport:
    bc: float
    triplet: Optional[float]
    infonce: Optional[float]
    selected: ContrastivePath
    total: float

    def as_dict(self) -> dict:
        return {"bc": self.bc, "triplet": self.triplet, "infonce": self.infonce,
                "selected": self.selected.value, "total": self.total}


def _as_steps(pred: np.ndarray, expert: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    if expert.ndim == 1:
        expert = expert[:, None]
    if pred.ndim == 1:
        if pred.shape[0] != expert.shape[0]:
            raise ValueError(f"action dims differ: {pred.shape} vs {expert.shape}")
        pred = np.broadcast_to(pred[:, None], expert.shape)
    if pred.shape != expert.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {expert.shape}")
    return pred, expert


def bc_loss(pred: np.ndarray, expert: np.ndarray) -> float:
    """``0.5 * sum ||pred - expert||^2`` over steps (unit Gaussian NLL).

    Arrays are ``(7, T)``; a 1-D ``pred`` is held constant over the ``T``
    steps, which is how an open-loop chunk executes it.
    """
    p, e = _as_steps(pred, expert)
    d = p - e
    return 0.5 * float(np.sum(d * d))


def bc_grad(pred: np.ndarray, expert: np.ndarray) -> np.ndarray:
    p, e = _as_steps(pred, expert)
    g = p - e
    return g.sum(axis=1) if np.ndim(pred) == 1 else g


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


def triplet_loss(h: np.ndarray, h_pos: np.ndarray, h_neg: np.ndarray, margin: float = 0.5) -> float:
    if not h.shape == h_pos.shape == h_neg.shape:
        raise ValueError("representation dims differ")
    return max(0.0, _dist(h, h_pos) - _dist(h, h_neg) + margin)


def _unit_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    n = np.linalg.norm(d)
    # subgradient 0 where the distance is zero
    return d / n if n > 0 else np.zeros_like(d)


def triplet_grad(h, h_pos, h_neg, margin: float = 0.5):
    """``(d/dh, d/dh_pos, d/dh_neg)``; zero on the flat side of the hinge."""
    if _dist(h, h_pos) - _dist(h, h_neg) + margin <= 0.0:
        z = np.zeros_like(h)
        return z, z.copy(), z.copy()
    u_pos = _unit_diff(h, h_pos)
    u_neg = _unit_diff(h, h_neg)
    return u_pos - u_neg, -u_pos, u_neg


def _logits(h, h_pos, negatives, tau):
    if len(negatives) == 0:
        raise ValueError("InfoNCE needs at least one negative")
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    return np.array([h @ h_pos] + [h @ n for n in negatives], dtype=np.float64) / tau


def infonce_loss(h: np.ndarray, h_pos: np.ndarray, negatives: Sequence[np.ndarray],
                 tau: float = 0.1) -> float:
    """Negative log softmax probability of the positive, log-sum-exp form."""
    z = _logits(h, h_pos, negatives, tau)
    m = z.max()
    lse = m + math.log(float(np.sum(np.exp(z - m))))
    return float(lse - z[0])


def infonce_grad(h, h_pos, negatives, tau: float = 0.1):
    """``(d/dh, d/dh_pos, [d/dh_neg_i])``."""
    z = _logits(h, h_pos, negatives, tau)
    p = np.exp(z - z.max())
    p /= p.sum()
    coef = p.copy()
    coef[0] -= 1.0  # dL/dz
    coef /= tau
    reps = [h_pos] + list(negatives)
    d_h = sum(c * r for c, r in zip(coef, reps))
    d_pos = coef[0] * h
    d_negs = [c * h for c in coef[1:]]
    return d_h, d_pos, d_negs


def thcl(h: np.ndarray, h_pos: Optional[np.ndarray], negatives: Sequence[np.ndarray],
         cfg: ThclConfig = ThclConfig()) -> ThclResult:
    """Triplet loss against the first negative when it is <= beta, else InfoNCE."""
    if h_pos is None or len(negatives) == 0:
        return ThclResult(ContrastivePath.NONE, None, None, 0.0)
    trip = triplet_loss(h, h_pos, negatives[0], cfg.margin_alpha)
    if trip <= cfg.threshold_beta:
        return ThclResult(ContrastivePath.TRIPLET, trip, None, trip)
    nce = infonce_loss(h, h_pos, negatives, cfg.temperature_tau)
    return ThclResult(ContrastivePath.INFONCE, trip, nce, nce)


def total_loss(bc: float, fragment: ThclResult, cfg: ThclConfig = ThclConfig()) -> LossReport:
    extra = 0.0 if fragment.selected is ContrastivePath.NONE else cfg.contrastive_weight * fragment.value
    return LossReport(bc, fragment.triplet, fragment.infonce, fragment.selected, bc + extra)


@dataclass
class BatchGradient:
    report: LossReport
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _check(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteLossError(f"non-finite value in {name}")


def batch_loss(batch: TrainBatch, policy: Policy, cfg: ThclConfig = ThclConfig()) -> LossReport:
    return loss_gradients(batch, policy, cfg, need_grad=False).report


def loss_gradients(batch: TrainBatch, policy: Policy, cfg: ThclConfig = ThclConfig(),
                   need_grad: bool = True, base: bool = False) -> BatchGradient:
    """Total loss of a batch and its exact gradient w.r.t. the adapter factors.

    With ``base=True`` the gradient is taken w.r.t. the base ``(W, b)`` of
    every layer instead.

    BC is averaged over the current item and every positive (each with its
    stored expert actions, compared in the policy's normalized action units),
    so replayed items do not inflate the step size. The anchor is the current item, the positive is the
    highest-probability success and negatives are ordered by probability.
    Representations of retrieved items are recomputed by the current policy,
    so gradients flow through them as well. The THCL branch indicator is
    held fixed at the evaluated point.
    """
    cur = batch.current
    items = [(policy.inputs(cur.embedding, cur.command),
              policy.normalize_actions(cur.expert_actions), "current")]
    for i, s in enumerate(batch.positives):
        e = s.experience
        items.append((policy.inputs(e.embedding.astype(np.float64), e.command),
                      policy.normalize_actions(e.actions), f"positive[{i}]"))
    for i, s in enumerate(batch.negatives):
        e = s.experience
        items.append((policy.inputs(e.embedding.astype(np.float64), e.command), None, f"negative[{i}]"))

    caches = [policy.forward_cache(x) for x, _, _ in items]
    for c, (_, _, name) in zip(caches, items):
        _check(f"forward pass of {name}", c.action)

    n_bc = 1 + len(batch.positives)
    bc = 0.0
    d_action = []
    for c, (_, expert, _) in zip(caches, items):
        if expert is None:
            d_action.append(np.zeros_like(c.action))
            continue
        bc += bc_loss(c.action, expert) / n_bc
        d_action.append(bc_grad(c.action, expert) / n_bc)
    _check("bc loss", bc)

    n_pos = len(batch.positives)
    hs = [c.h for c in caches]
    h_pos = hs[1] if n_pos else None
    negs = hs[1 + n_pos:]
    frag = thcl(hs[0], h_pos, negs, cfg)
    _check("contrastive term", frag.value)
    report = total_loss(bc, frag, cfg)
    if not need_grad:
        return BatchGradient(report)

    d_h = [np.zeros_like(h) for h in hs]
    w = cfg.contrastive_weight
    if frag.selected is ContrastivePath.TRIPLET and w != 0.0:
        g0, gp, gn = triplet_grad(hs[0], h_pos, negs[0], cfg.margin_alpha)
        d_h[0] += w * g0
        d_h[1] += w * gp
        d_h[1 + n_pos] += w * gn
    elif frag.selected is ContrastivePath.INFONCE and w != 0.0:
        g0, gp, gns = infonce_grad(hs[0], h_pos, negs, cfg.temperature_tau)
        d_h[0] += w * g0
        d_h[1] += w * gp
        for j, g in enumerate(gns):
            d_h[1 + n_pos + j] += w * g

    grads = None
    for c, da, dh, (_, _, name) in zip(caches, d_action, d_h, items):
        g = policy.backward(c, da, dh, base=base)
        if base:
            g = g[1]
        if grads is None:
            grads = {k: (np.zeros_like(gb), np.zeros_like(ga)) for k, (gb, ga) in g.items()}
        for k, (gb, ga) in g.items():
            _check(f"gradient of {name}", gb)
            _check(f"gradient of {name}", ga)
            grads[k] = (grads[k][0] + gb, grads[k][1] + ga)
    return BatchGradient(report, grads)
