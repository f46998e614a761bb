"""Two-domain deployment scenario: pretrain, preload, deploy, adapt, evaluate."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapt import (
    OnlineAdapter, TriggerState, experience_from, forgetting_metric, imitation_loss, should_adapt,
)
from .config import RunConfig
from .encoder import EncoderParams, encode, normalize
from .memory import DecayConfig, ReplayBuffer, memory_usage
from .metrics import Episode, MetricsWriter, RunMetrics, cumulative_adapt_loss
from .policy import Policy, PolicyConfig, pretrain
from .retrieval import RetrievalConfig
from .simenv import (
    SOURCE_STYLE, TARGET_STYLE, Scene, TaskSpec, Trajectory, expert_demo, make_tasks,
    rollout, sample_scene, style_from_dict,
)

log = logging.getLogger(__name__)


@dataclass
class World:
    """Everything shared by all variants of one seed."""

    cfg: RunConfig
    encoder: EncoderParams
    source_tasks: list[TaskSpec]
    target_tasks: list[TaskSpec]
    source_style: object
    target_style: object
    policy: Policy
    success_buf: ReplayBuffer
    failure_buf: ReplayBuffer
    eval_source: list[Scene]
    eval_target: list[Scene]
    pretrain_loss: float = 0.0


@dataclass
class VariantResult:
    variant: str
    seed: int
    pre_source: float
    pre_target: float
    post_source: float
    post_target: float
    cycles: int
    metrics: RunMetrics = field(repr=False, default_factory=RunMetrics)
    policy: Optional[Policy] = field(repr=False, default=None)
    success_buf: Optional[ReplayBuffer] = field(repr=False, default=None)
    failure_buf: Optional[ReplayBuffer] = field(repr=False, default=None)

    def row(self) -> dict:
        return {
            "variant": self.variant, "seed": self.seed, "cycles": self.cycles,
            "pre_source": self.pre_source, "pre_target": self.pre_target,
            "post_source": self.post_source, "post_target": self.post_target,
            "source_drop": self.pre_source - self.post_source,
            "path_counts": dict(self.metrics.path_counts),
        }


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def policy_config(cfg: RunConfig) -> PolicyConfig:
    p = cfg.policy
    return PolicyConfig(d_e=cfg.encoder.d_sem + cfg.encoder.d_spa, d_c=p.d_c, hidden=p.hidden,
                        d_h=p.d_h, rank=p.rank, adapted=tuple(p.adapted), lora_init_std=p.lora_init_std,
                        action_scale=tuple(p.action_scale))


def retrieval_config(cfg: RunConfig) -> RetrievalConfig:
    r = cfg.retrieval
    return RetrievalConfig(r.max_k, r.k_divisor, r.n_positives, r.n_negatives,
                           DecayConfig(cfg.memory.decay_lambda))


def prepare_world(cfg: RunConfig) -> World:
    sc = cfg.scenario
    r_task, r_pre, r_pol, r_load, r_eval = _rngs(cfg.seed, 5)
    e = cfg.encoder
    encoder = EncoderParams.create(e.d_sem, e.d_spa, cfg.seed, e.grid_sem, e.grid_spa, e.bias_scale)
    src_style = style_from_dict(sc.source_style) if sc.source_style else SOURCE_STYLE
    tgt_style = style_from_dict(sc.target_style) if sc.target_style else TARGET_STYLE
    source_tasks = make_tasks(sc.n_tasks, r_task, sc.commands)
    target_tasks = source_tasks if sc.target_geometry == "shared" else make_tasks(sc.n_tasks, r_task, sc.commands)

    demos = []
    for i in range(sc.pretrain_demos):
        scene = sample_scene(source_tasks[i % len(source_tasks)], "source", src_style, r_pre, sc.jitter)
        demos.append(expert_demo(scene, cfg.sim, cfg.success))
    pol = Policy.create(policy_config(cfg), r_pol)
    x = np.stack([pol.inputs(normalize(encode(d.initial_observation, encoder)), d.command) for d in demos])
    y = np.stack([pol.normalize_actions(d.expert_actions.mean(axis=1)) for d in demos])
    loss = pretrain(pol, x, y, sc.pretrain_epochs, sc.pretrain_lr, rng=r_pol)
    pol.freeze_base()
    pol.reset_lora(r_pol)
    log.info("pretrained base policy, final BC %.3g", loss)

    sbuf = ReplayBuffer(cfg.memory.success_capacity, True)
    fbuf = ReplayBuffer(cfg.memory.failure_capacity, False)
    for i in range(sc.preload_episodes):
        scene = sample_scene(source_tasks[i % len(source_tasks)], "source", src_style, r_load, sc.jitter)
        demo = expert_demo(scene, cfg.sim, cfg.success)
        tr = rollout(pol, scene, encoder, sc.horizon, sc.chunk, cfg.sim, cfg.success, demo.expert_actions)
        emb = normalize(encode(tr.initial_observation, encoder))
        if tr.success:
            sbuf.insert(experience_from(tr, emb, 0))
        else:
            fbuf.insert(experience_from(tr, emb, 0))
            sbuf.insert(experience_from(demo, emb, 0))

    def scenes(tasks, domain, style, yaw=0.0):
        return [sample_scene(tasks[i % len(tasks)], domain, style, r_eval, sc.jitter, yaw)
                for i in range(sc.eval_episodes)]

    return World(cfg, encoder, source_tasks, target_tasks, src_style, tgt_style, pol, sbuf, fbuf,
                 scenes(source_tasks, "source", src_style), scenes(target_tasks, "target", tgt_style, math.radians(sc.target_actuator_yaw_deg)), loss)


def evaluate(policy: Policy, world: World, scenes: list[Scene]) -> float:
    cfg = world.cfg
    hits = 0
    for scene in scenes:
        tr = rollout(policy, scene, world.encoder, cfg.scenario.horizon, cfg.scenario.chunk,
                     cfg.sim, cfg.success, expert=np.zeros((7, 1)))
        hits += tr.success
    return hits / len(scenes)


def run_variant(world: World, variant: str = "full", writer: Optional[MetricsWriter] = None) -> VariantResult:
    """Deploy on the target domain with online adaptation, then evaluate."""
    cfg, sc = world.cfg, world.cfg.scenario
    writer = writer or MetricsWriter()
    policy = copy.deepcopy(world.policy)
    sbuf = world.success_buf.copy() if variant != "naive" else ReplayBuffer(cfg.memory.success_capacity, True)
    fbuf = world.failure_buf.copy() if variant != "naive" else ReplayBuffer(cfg.memory.failure_capacity, False)
    train = cfg.train
    if variant == "naive" and sc.naive_learning_rate is not None:
        train = dataclasses.replace(train, learning_rate=sc.naive_learning_rate)
    adapter = OnlineAdapter(policy, world.encoder, sbuf, fbuf, train, cfg.thcl,
                            retrieval_config(cfg), variant)
    r_deploy, r_adapt = _rngs(cfg.seed + 7919, 2)
    metrics = RunMetrics()

    pre_s = evaluate(policy, world, world.eval_source)
    pre_t = evaluate(policy, world, world.eval_target)
    writer.emit("eval", variant=variant, phase="pre", source=pre_s, target=pre_t)

    trigger = TriggerState(cfg.trigger.window, cfg.trigger.threshold)
    collected: list[Trajectory] = []
    for ep in range(sc.deploy_episodes):
        task = world.target_tasks[int(r_deploy.integers(len(world.target_tasks)))]
        scene = sample_scene(task, "target", world.target_style, r_deploy, sc.jitter,
                             math.radians(sc.target_actuator_yaw_deg))
        demo = expert_demo(scene, cfg.sim, cfg.success)
        tr = rollout(policy, scene, world.encoder, sc.horizon, sc.chunk, cfg.sim, cfg.success,
                     demo.expert_actions)
        loss = None
        if tr.success:
            emb = normalize(encode(tr.initial_observation, world.encoder))
            loss = imitation_loss(policy, emb, scene.command, demo.expert_actions)
        episode = Episode("target", tr.success, len(tr.steps), "deploy", loss)
        metrics.episodes.append(episode)
        writer.emit("episode", variant=variant, index=ep, domain="target", success=tr.success,
                    steps=len(tr.steps), bc_loss=loss, cycle=adapter.cycle)
        collected.append(tr)
        if not tr.success and sc.corrections:
            collected.append(demo)
        trigger.record(tr.success)
        if should_adapt(trigger) and adapter.cycle < sc.max_cycles:
            report = adapter.run_adaptation_cycle(collected, r_adapt)
            d = report.as_dict()
            metrics.add_cycle(d)
            writer.emit("cycle", variant=variant, **d)
            collected = []
            trigger.reset()
        writer.flush()

    post_s = evaluate(policy, world, world.eval_source)
    post_t = evaluate(policy, world, world.eval_target)
    writer.emit("eval", variant=variant, phase="post", source=post_s, target=post_t)
    metrics.final_forgetting = forgetting_metric(policy, sbuf)
    res = VariantResult(variant, cfg.seed, pre_s, pre_t, post_s, post_t, adapter.cycle, metrics,
                        policy, sbuf, fbuf)
    writer.emit("summary", variant=variant, cumulative_adapt_loss=cumulative_adapt_loss(metrics.episodes),
                final_forgetting=metrics.final_forgetting,
                forgetting_epsilon=cfg.forgetting_epsilon,
                memory_bytes=memory_usage([sbuf, fbuf]),
                memory_budget_bytes=int(cfg.memory_budget_mb * 1024 * 1024),
                threshold_split=metrics.threshold_split(), **{k: v for k, v in res.row().items() if k != "variant"})
    return res
