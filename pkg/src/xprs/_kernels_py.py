"""Pure Python / numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
``run_chunk`` and ``paint_disk`` use the same floating point operation order
as the compiled versions so both backends agree bit for bit; ``dot_scores``
may differ in the last ulp because the summation order differs.
"""
from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # row-wise reduction so identical rows always give identical scores
    return (matrix * query).sum(axis=1)


def top_k_order(scores: np.ndarray, recency: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best rows: score desc, recency desc, index asc."""
    n = scores.shape[0]
    index = np.arange(n)
    order = np.lexsort((index, -recency, -scores))
    return order[:k].astype(np.int64)


def paint_disk(canvas: np.ndarray, cx: float, cy: float, radius: float,
               color: np.ndarray, ring: float = 0.0) -> None:
    """Alpha-blend an anti-aliased disk (or ring of width ``ring``) in place."""
    h, w, _ = canvas.shape
    r_out = radius + 1.0
    r0 = max(int(math.floor(cy - r_out)), 0)
    r1 = min(int(math.ceil(cy + r_out)) + 1, h)
    c0 = max(int(math.floor(cx - r_out)), 0)
    c1 = min(int(math.ceil(cx + r_out)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    rows = np.arange(r0, r1, dtype=np.float64)[:, None]
    cols = np.arange(c0, c1, dtype=np.float64)[None, :]
    dy = rows - cy
    dx = cols - cx
    dist = np.sqrt(dx * dx + dy * dy)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    if ring > 0.0:
        alpha = np.minimum(alpha, np.clip(dist - (radius - ring) + 0.5, 0.0, 1.0))
    patch = canvas[r0:r1, c0:c1, :]
    a = alpha[:, :, None]
    patch[...] = patch * (1.0 - a) + color[None, None, :] * a


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def run_chunk(eff, obj, goal, action, n_steps, t0, max_disp, grip_radius,
              f_expected, eps_force, eps_pos, t_max, lo, hi, stop_on_success):
    """Execute one constant action for up to ``n_steps`` point-mass steps.

    Returns ``(eff_hist, obj_hist, force_hist, steps_done, succeeded)``; the
    histories hold the state after each executed step.
    """
    ex, ey, ez = float(eff[0]), float(eff[1]), float(eff[2])
    ox, oy, oz = float(obj[0]), float(obj[1]), float(obj[2])
    gx, gy, gz = float(goal[0]), float(goal[1]), float(goal[2])
    mx, my, mz = float(action[0]), float(action[1]), float(action[2])
    mnorm = math.sqrt(mx * mx + my * my + mz * mz)
    if mnorm > max_disp:
        s = max_disp / mnorm
        mx = mx * s
        my = my * s
        mz = mz * s
    grip = f_expected * _sigmoid(float(action[6]))

    eff_hist = np.empty((n_steps, 3))
    obj_hist = np.empty((n_steps, 3))
    force_hist = np.empty(n_steps)
    done = 0
    succeeded = False
    for i in range(n_steps):
        dx = ex - ox
        dy = ey - oy
        dz = ez - oz
        d_pre = math.sqrt(dx * dx + dy * dy + dz * dz)
        force = grip if d_pre < grip_radius else 0.0
        gripped = d_pre < grip_radius and abs(force - f_expected) < eps_force
        ex = min(max(ex + mx, lo), hi)
        ey = min(max(ey + my, lo), hi)
        ez = min(max(ez + mz, lo), hi)
        if gripped:
            ox, oy, oz = ex, ey, ez
        eff_hist[i, 0] = ex
        eff_hist[i, 1] = ey
        eff_hist[i, 2] = ez
        obj_hist[i, 0] = ox
        obj_hist[i, 1] = oy
        obj_hist[i, 2] = oz
        force_hist[i] = force
        done = i + 1
        t = t0 + done
        qx = ox - gx
        qy = oy - gy
        qz = oz - gz
        dist = math.sqrt(qx * qx + qy * qy + qz * qz)
        if dist < eps_pos and abs(force - f_expected) < eps_force and t < t_max:
            succeeded = True
            if stop_on_success:
                break
        else:
            succeeded = False
    return eff_hist[:done], obj_hist[:done], force_hist[:done], done, succeeded
