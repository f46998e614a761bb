# cython: language_level=3
"""Compiled twins of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, floor, ceil, fabs

cnp.import_array()

BACKEND = "cython"


def dot_scores(const double[:, ::1] matrix, const double[::1] query):
    cdef Py_ssize_t n = matrix.shape[0], d = matrix.shape[1], i, j
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += matrix[i, j] * query[j]
        o[i] = acc
    return out


cdef inline bint _before(double s_a, long long r_a, Py_ssize_t i_a,
                         double s_b, long long r_b, Py_ssize_t i_b):
    if s_a != s_b:
        return s_a > s_b
    if r_a != r_b:
        return r_a > r_b
    return i_a < i_b


def top_k_order(const double[::1] scores, const long long[::1] recency, Py_ssize_t k):
    cdef Py_ssize_t n = scores.shape[0], i, j, m = 0, best
    out = np.empty(k, dtype=np.int64)
    cdef long long[::1] o = out
    taken = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] t = taken
    # partial selection; n is small (buffer capacity)
    for m in range(k):
        best = -1
        for i in range(n):
            if t[i]:
                continue
            if best < 0 or _before(scores[i], recency[i], i, scores[best], recency[best], best):
                best = i
        t[best] = 1
        o[m] = best
    return out


def paint_disk(double[:, :, ::1] canvas, double cx, double cy, double radius,
               const double[::1] color, double ring=0.0):
    cdef Py_ssize_t h = canvas.shape[0], w = canvas.shape[1]
    cdef double r_out = radius + 1.0
    cdef Py_ssize_t r0 = <Py_ssize_t>floor(cy - r_out)
    cdef Py_ssize_t r1 = <Py_ssize_t>ceil(cy + r_out) + 1
    cdef Py_ssize_t c0 = <Py_ssize_t>floor(cx - r_out)
    cdef Py_ssize_t c1 = <Py_ssize_t>ceil(cx + r_out) + 1
    cdef Py_ssize_t r, c, ch
    cdef double dx, dy, dist, alpha, a2
    if r0 < 0:
        r0 = 0
    if c0 < 0:
        c0 = 0
    if r1 > h:
        r1 = h
    if c1 > w:
        c1 = w
    for r in range(r0, r1):
        dy = <double>r - cy
        for c in range(c0, c1):
            dx = <double>c - cx
            dist = sqrt(dx * dx + dy * dy)
            alpha = radius + 0.5 - dist
            if alpha < 0.0:
                alpha = 0.0
            elif alpha > 1.0:
                alpha = 1.0
            if ring > 0.0:
                a2 = dist - (radius - ring) + 0.5
                if a2 < 0.0:
                    a2 = 0.0
                elif a2 > 1.0:
                    a2 = 1.0
                if a2 < alpha:
                    alpha = a2
            for ch in range(3):
                canvas[r, c, ch] = canvas[r, c, ch] * (1.0 - alpha) + color[ch] * alpha


cdef inline double _sigmoid(double x):
    cdef double z
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    z = exp(x)
    return z / (1.0 + z)


cdef inline double _clamp(double v, double lo, double hi):
    if v < lo:
        v = lo
    if v > hi:
        v = hi
    return v


def run_chunk(eff, obj, goal, action, Py_ssize_t n_steps, long long t0,
              double max_disp, double grip_radius, double f_expected,
              double eps_force, double eps_pos, long long t_max,
              double lo, double hi, bint stop_on_success):
    cdef double ex = eff[0], ey = eff[1], ez = eff[2]
    cdef double ox = obj[0], oy = obj[1], oz = obj[2]
    cdef double gx = goal[0], gy = goal[1], gz = goal[2]
    cdef double mx = action[0], my = action[1], mz = action[2]
    cdef double mnorm = sqrt(mx * mx + my * my + mz * mz)
    cdef double s, grip, dx, dy, dz, d_pre, force, qx, qy, qz, dist
    cdef bint gripped, succeeded = False
    cdef Py_ssize_t i, done = 0
    cdef long long t
    if mnorm > max_disp:
        s = max_disp / mnorm
        mx = mx * s
        my = my * s
        mz = mz * s
    grip = f_expected * _sigmoid(<double>action[6])

    eff_np = np.empty((n_steps, 3))
    obj_np = np.empty((n_steps, 3))
    force_np = np.empty(n_steps)
    cdef double[:, ::1] eh = eff_np
    cdef double[:, ::1] oh = obj_np
    cdef double[::1] fh = force_np
    for i in range(n_steps):
        dx = ex - ox
        dy = ey - oy
        dz = ez - oz
        d_pre = sqrt(dx * dx + dy * dy + dz * dz)
        force = grip if d_pre < grip_radius else 0.0
        gripped = d_pre < grip_radius and fabs(force - f_expected) < eps_force
        ex = _clamp(ex + mx, lo, hi)
        ey = _clamp(ey + my, lo, hi)
        ez = _clamp(ez + mz, lo, hi)
        if gripped:
            ox = ex
            oy = ey
            oz = ez
        eh[i, 0] = ex
        eh[i, 1] = ey
        eh[i, 2] = ez
        oh[i, 0] = ox
        oh[i, 1] = oy
        oh[i, 2] = oz
        fh[i] = force
        done = i + 1
        t = t0 + done
        qx = ox - gx
        qy = oy - gy
        qz = oz - gz
        dist = sqrt(qx * qx + qy * qy + qz * qz)
        if dist < eps_pos and fabs(force - f_expected) < eps_force and t < t_max:
            succeeded = True
            if stop_on_success:
                break
        else:
            succeeded = False
    return eff_np[:done], obj_np[:done], force_np[:done], done, succeeded
