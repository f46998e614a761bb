"""Synthetic two-domain pick-and-place bench.

A point-mass end effector carries one object toward one goal inside the unit
cube. A fixed top-down camera renders the scene as coloured blobs; the two
domains share dynamics and differ only in visual style (lighting, object hue,
camera offset), unless a scenario gives the target its own geometry.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .encoder import IMAGE_SIZE, EncoderParams, Observation, as_command, encode, normalize

ACTION_DIM = 7
GRIP_CLOSED = 4.0


class UnreachableError(ValueError):
    pass


@dataclass(frozen=True)
class VisualStyle:
    background: tuple[float, float, float] = (90.0, 90.0, 95.0)
    object_color: tuple[float, float, float] = (200.0, 40.0, 40.0)
    goal_color: tuple[float, float, float] = (40.0, 180.0, 60.0)
    effector_color: tuple[float, float, float] = (20.0, 20.0, 20.0)
    layout_offset: tuple[float, float] = (0.0, 0.0)
    object_radius: float = 10.0
    goal_radius: float = 14.0
    goal_ring: float = 4.0
    effector_radius: float = 4.0

    def __post_init__(self):
        for name in ("background", "object_color", "goal_color", "effector_color", "layout_offset"):
            v = tuple(float(c) for c in getattr(self, name))
            if len(v) != (2 if name == "layout_offset" else 3):
                raise ValueError(f"{name} has wrong length")
            object.__setattr__(self, name, v)


SOURCE_STYLE = VisualStyle()
TARGET_STYLE = VisualStyle(
    background=(165.0, 150.0, 120.0),
    object_color=(230.0, 140.0, 30.0),
    goal_color=(60.0, 120.0, 200.0),
    layout_offset=(7.0, -5.0),
)


@dataclass(frozen=True)
class SimConfig:
    workspace_lo: float = 0.0
    workspace_hi: float = 1.0
    max_step: float = 0.1
    grip_radius: float = 0.05
    expert_speed: float = 0.08
    margin_px: float = 20.0


@dataclass(frozen=True)
class SuccessConfig:
    eps_pos: float = 0.05
    eps_force: float = 2.0
    t_max: int = 100
    f_expected: float = 1.0

    def __post_init__(self):
        if min(self.eps_pos, self.eps_force, self.t_max, self.f_expected) <= 0:
            raise ValueError("success thresholds must be positive")


def _vec3(v) -> np.ndarray:
    a = np.array(v, dtype=np.float64).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Scene:
    object_pos: np.ndarray
    goal_pos: np.ndarray
    effector_pos: np.ndarray
    command: tuple[int, ...]
    domain: str = "source"
    style: VisualStyle = SOURCE_STYLE
    seed: int = 0
    # dynamics shift: commanded translations are rotated by this yaw (radians)
    actuator_yaw: float = 0.0

    def __post_init__(self):
        for name in ("object_pos", "goal_pos", "effector_pos"):
            v = _vec3(getattr(self, name))
            if np.any(v < 0.0) or np.any(v > 1.0):
                raise ValueError(f"{name} {v} outside the workspace box")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "command", as_command(self.command))
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if not math.isfinite(self.actuator_yaw):
            raise ValueError("actuator_yaw must be finite")


@dataclass
class Step:
    observation: Optional[Observation]
    action: np.ndarray
    effector_pos: np.ndarray
    object_pos: np.ndarray
    gripper_force: float


@dataclass
class Trajectory:
    scene: Scene
    steps: list[Step]
    success: bool
    expert_actions: Optional[np.ndarray] = None
    initial_observation: Optional[Observation] = None
    source: str = "rollout"

    def __post_init__(self):
        if self.success and self.expert_actions is None:
            raise ValueError("successful trajectories must carry expert actions")

    @property
    def actions(self) -> np.ndarray:
        """Executed actions as a ``(7, T)`` array."""
        if not self.steps:
            return np.zeros((ACTION_DIM, 0))
        return np.stack([s.action for s in self.steps], axis=1)

    @property
    def command(self) -> tuple[int, ...]:
        return self.scene.command

    def to_json(self) -> dict:
        return {
            "domain": self.scene.domain,
            "source": self.source,
            "success": self.success,
            "command": list(self.command),
            "object_start": self.scene.object_pos.tolist(),
            "goal": self.scene.goal_pos.tolist(),
            "actions": self.actions.T.tolist(),
            "effector": [s.effector_pos.tolist() for s in self.steps],
            "object": [s.object_pos.tolist() for s in self.steps],
            "gripper_force": [s.gripper_force for s in self.steps],
            "expert_actions": None if self.expert_actions is None else self.expert_actions.T.tolist(),
        }


# -- rendering ---------------------------------------------------------------

def world_to_pixel(pos: np.ndarray, style: VisualStyle, sim: SimConfig = SimConfig()) -> tuple[float, float, float]:
    """``(col, row, scale)``; height changes the apparent blob size."""
    span = IMAGE_SIZE - 2.0 * sim.margin_px
    col = sim.margin_px + float(pos[0]) * span + style.layout_offset[0]
    row = sim.margin_px + float(pos[1]) * span + style.layout_offset[1]
    return col, row, 0.75 + 0.5 * float(pos[2])


def pixel_to_world_xy(col: float, row: float, style: VisualStyle,
                      sim: SimConfig = SimConfig()) -> tuple[float, float]:
    span = IMAGE_SIZE - 2.0 * sim.margin_px
    return ((col - style.layout_offset[0] - sim.margin_px) / span,
            (row - style.layout_offset[1] - sim.margin_px) / span)


def render(scene: Scene, effector_pos=None, object_pos=None,
           sim: SimConfig = SimConfig()) -> Observation:
    st = scene.style
    eff = scene.effector_pos if effector_pos is None else np.asarray(effector_pos, dtype=np.float64)
    obj = scene.object_pos if object_pos is None else np.asarray(object_pos, dtype=np.float64)
    canvas = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    canvas[...] = np.asarray(st.background)
    gc, gr, gs = world_to_pixel(scene.goal_pos, st, sim)
    kernels.paint_disk(canvas, gc, gr, st.goal_radius * gs, np.asarray(st.goal_color), st.goal_ring * gs)
    oc, orow, os_ = world_to_pixel(obj, st, sim)
    kernels.paint_disk(canvas, oc, orow, st.object_radius * os_, np.asarray(st.object_color))
    ec, er, es = world_to_pixel(eff, st, sim)
    kernels.paint_disk(canvas, ec, er, st.effector_radius * es, np.asarray(st.effector_color))
    return Observation(np.rint(np.clip(canvas, 0.0, 255.0)).astype(np.uint8))


def locate_color(obs: Observation, color, tol: float = 40.0) -> Optional[tuple[float, float]]:
    """Centroid ``(col, row)`` of pixels within ``tol`` of ``color``."""
    px = obs.pixels.astype(np.float64)
    mask = np.linalg.norm(px - np.asarray(color), axis=2) < tol
    if not mask.any():
        return None
    rows, cols = np.nonzero(mask)
    return float(cols.mean()), float(rows.mean())


def decode_positions(obs: Observation, style: VisualStyle,
                     sim: SimConfig = SimConfig()) -> dict[str, Optional[tuple[float, float]]]:
    """Recover object and goal ``(x, y)`` from an image rendered with ``style``."""
    out = {}
    for name, color in (("object", style.object_color), ("goal", style.goal_color)):
        c = locate_color(obs, color)
        out[name] = None if c is None else pixel_to_world_xy(c[0], c[1], style, sim)
    return out


# -- dynamics ----------------------------------------------------------------

def _yaw(action: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate the translation part of ``action`` about the vertical axis."""
    if yaw == 0.0:
        return action
    c, s = math.cos(yaw), math.sin(yaw)
    out = action.copy()
    out[0] = c * action[0] - s * action[1]
    out[1] = s * action[0] + c * action[1]
    return out


def _chunk(eff, obj, goal, action, n, t0, sim, cfg, stop, yaw=0.0):
    action = np.ascontiguousarray(action, dtype=np.float64)
    if action.shape != (ACTION_DIM,) or not np.all(np.isfinite(action)):
        raise ValueError("action must be a finite 7-vector")
    action = _yaw(action, yaw)
    return kernels.run_chunk(
        np.asarray(eff, dtype=np.float64), np.asarray(obj, dtype=np.float64),
        np.asarray(goal, dtype=np.float64), action, int(n), int(t0),
        sim.max_step, sim.grip_radius, cfg.f_expected, cfg.eps_force, cfg.eps_pos,
        int(cfg.t_max), sim.workspace_lo, sim.workspace_hi, stop,
    )


def step(scene: Scene, effector_pos, action, object_pos=None, sim: SimConfig = SimConfig(),
         cfg: SuccessConfig = SuccessConfig()) -> tuple[np.ndarray, float, np.ndarray]:
    """One control step; returns ``(effector_pos, gripper_force, object_pos)``.

    Translation is ``action[0:3]`` with its norm capped at ``max_step`` and the
    result clamped to the workspace. Orientation dims 3..5 are carried but
    inert. The object follows the effector while gripped. A scene with a
    nonzero ``actuator_yaw`` rotates the commanded translation first.
    """
    obj = scene.object_pos if object_pos is None else object_pos
    eh, oh, fh, _, _ = _chunk(effector_pos, obj, scene.goal_pos, action, 1, 0, sim, cfg, False,
                              scene.actuator_yaw)
    return eh[0].copy(), float(fh[0]), oh[0].copy()


def success_predicate(object_pos, goal_pos, gripper_force: float, t: int,
                      cfg: SuccessConfig = SuccessConfig()) -> bool:
    d = math.dist(tuple(object_pos), tuple(goal_pos))
    return d < cfg.eps_pos and abs(gripper_force - cfg.f_expected) < cfg.eps_force and t < cfg.t_max


def detect_success(traj: Trajectory, cfg: SuccessConfig = SuccessConfig()) -> bool:
    """Three-conjunct success test on the trajectory's final state."""
    if not traj.steps:
        raise ValueError("empty trajectory")
    last = traj.steps[-1]
    return success_predicate(last.object_pos, traj.scene.goal_pos, last.gripper_force,
                             len(traj.steps), cfg)


def _append(steps, obs, action, eh, oh, fh):
    for i in range(eh.shape[0]):
        steps.append(Step(obs if i == 0 else None, action.copy(), eh[i].copy(), oh[i].copy(), float(fh[i])))


def expert_demo(scene: Scene, sim: SimConfig = SimConfig(),
                cfg: SuccessConfig = SuccessConfig()) -> Trajectory:
    """Scripted straight-line demonstrator: reach the object, then carry it.

    Each segment moves at constant velocity (at most ``expert_speed`` per
    step) so an open-loop policy can reproduce it exactly.
    """
    obs = render(scene, sim=sim)
    steps: list[Step] = []
    eff, obj = scene.effector_pos, scene.object_pos
    segments = []
    if math.dist(tuple(eff), tuple(obj)) > 0.0:
        segments.append((obj - eff, 0.0))
    segments.append((scene.goal_pos - obj, GRIP_CLOSED))
    t = 0
    succeeded = math.dist(tuple(obj), tuple(scene.goal_pos)) < cfg.eps_pos
    if succeeded:
        # already placed: one hold step with the grip closed records the force
        segments = [(np.zeros(3), GRIP_CLOSED)]
    for delta, grip in segments:
        dist = float(np.linalg.norm(delta))
        n = max(1, math.ceil(dist / sim.expert_speed - 1e-12))
        action = np.zeros(ACTION_DIM)
        action[:3] = delta / n
        action[6] = grip
        # command in the actuator frame so the motion is the straight line
        action = _yaw(action, -scene.actuator_yaw)
        eh, oh, fh, done, ok = _chunk(eff, obj, scene.goal_pos, action, n, t, sim, cfg, grip > 0,
                                      scene.actuator_yaw)
        _append(steps, obs if t == 0 else None, action, eh, oh, fh)
        t += done
        eff, obj = eh[-1], oh[-1]
        succeeded = ok
        if t >= cfg.t_max:
            break
    traj = Trajectory(scene, steps, False, None, obs, "expert")
    if not succeeded or not detect_success(traj, cfg):
        raise UnreachableError("scripted expert could not complete the scene")
    traj.success = True
    traj.expert_actions = traj.actions
    return traj


def rollout(policy, scene: Scene, encoder: EncoderParams, horizon: Optional[int] = None,
            chunk: Optional[int] = None, sim: SimConfig = SimConfig(),
            cfg: SuccessConfig = SuccessConfig(), expert: Optional[np.ndarray] = None) -> Trajectory:
    """Run ``policy`` open loop: one query per chunk on that chunk's first frame.

    ``horizon`` defaults to ``t_max`` and ``chunk`` to the whole horizon.
    ``expert`` attaches demonstration actions in case the rollout succeeds.
    """
    horizon = cfg.t_max if horizon is None else int(horizon)
    chunk = horizon if chunk is None else int(chunk)
    eff, obj = scene.effector_pos, scene.object_pos
    steps: list[Step] = []
    t = 0
    first = None
    succeeded = False
    while t < horizon and not succeeded:
        obs = render(scene, eff, obj, sim)
        first = first or obs
        action = policy.act(normalize(encode(obs, encoder)), scene.command)
        eh, oh, fh, done, succeeded = _chunk(eff, obj, scene.goal_pos, action,
                                             min(chunk, horizon - t), t, sim, cfg, True,
                                             scene.actuator_yaw)
        _append(steps, obs, np.asarray(action, dtype=np.float64), eh, oh, fh)
        t += done
        eff, obj = eh[-1], oh[-1]
    traj = Trajectory(scene, steps, False, None, first, "rollout")
    if detect_success(traj, cfg):
        traj.success = True
        traj.expert_actions = expert if expert is not None else expert_demo(scene, sim, cfg).expert_actions
    return traj


# -- tasks -------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    object_pos: tuple[float, float, float]
    goal_pos: tuple[float, float, float]
    command: tuple[int, ...]


def make_tasks(n: int, rng: np.random.Generator, commands: Sequence[Sequence[int]],
               lo: float = 0.2, hi: float = 0.8, min_dist: float = 0.25,
               max_dist: float = 0.55, z: float = 0.1) -> list[TaskSpec]:
    """Random object/goal layouts on a table plane ``z``."""
    tasks = []
    while len(tasks) < n:
        o = rng.uniform(lo, hi, size=2)
        g = rng.uniform(lo, hi, size=2)
        if not min_dist <= float(np.linalg.norm(o - g)) <= max_dist:
            continue
        cmd = as_command(commands[len(tasks) % len(commands)])
        tasks.append(TaskSpec((float(o[0]), float(o[1]), z), (float(g[0]), float(g[1]), z), cmd))
    return tasks


def sample_scene(task: TaskSpec, domain: str, style: VisualStyle, rng: np.random.Generator,
                 jitter: float = 0.01, actuator_yaw: float = 0.0) -> Scene:
    """Scene for ``task`` with small placement noise; the effector starts at the object."""
    obj = np.clip(np.array(task.object_pos) + rng.uniform(-jitter, jitter, 3) * [1, 1, 0], 0, 1)
    goal = np.clip(np.array(task.goal_pos) + rng.uniform(-jitter, jitter, 3) * [1, 1, 0], 0, 1)
    return Scene(obj, goal, obj.copy(), task.command, domain, style, int(rng.integers(2 ** 31)),
                 actuator_yaw)


def style_from_dict(d: dict) -> VisualStyle:
    known = VisualStyle.__dataclass_fields__
    extra = set(d) - set(known)
    if extra:
        raise ValueError(f"unknown style keys {sorted(extra)}")
    return VisualStyle(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def export_trajectories(trajs: Sequence[Trajectory], path) -> None:
    with open(path, "w") as f:
        for tr in trajs:
            f.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")
