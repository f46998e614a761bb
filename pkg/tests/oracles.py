"""Slow, independent reference implementations used only by the tests.

They follow the definitions directly (explicit loops, explicit norms,
exhaustive sorting) and share no code with the package.
"""
import math

import numpy as np


def pool_loop(pixels, grid):
    size = pixels.shape[0]
    b = size // grid
    feats = np.zeros((grid, grid, 3))
    for i in range(grid):
        for j in range(grid):
            block = pixels[i * b:(i + 1) * b, j * b:(j + 1) * b, :].astype(np.float64)
            for c in range(3):
                feats[i, j, c] = block[:, :, c].sum() / (b * b) / 255.0
    for c in range(3):
        feats[:, :, c] -= feats[:, :, c].sum() / (grid * grid)
    flat = feats.reshape(-1)
    mean = sum(flat) / len(flat)
    std = math.sqrt(sum((x - mean) ** 2 for x in flat) / len(flat))
    return flat / (std + 1e-6)


def encode_loop(pixels, params):
    out = []
    for w, b, g in ((params.w_sem, params.b_sem, params.grid_sem),
                    (params.w_spa, params.b_spa, params.grid_spa)):
        f = pool_loop(pixels, g)
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        out.extend(math.tanh(math.fsum(w[r] * f) + b[r]) for r in range(w.shape[0]))
    return np.array(out)


def cosine(a, b):
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    num = math.fsum(x * y for x, y in zip(a, b))
    return num / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))


def dot_exact(a, b):
    """Correctly rounded dot product."""
    return math.fsum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64))


def brute_top_k(embeddings, seqs, q, k):
    """Indices ranked by (q.e desc, insertion seq desc, position asc).

    For unit vectors q.e is the cosine; the stored float32 entries are unit
    to ~1e-7, so ranking uses the dot product the definition is stated in.
    """
    scored = [(dot_exact(e, q), int(s), i) for i, (e, s) in enumerate(zip(embeddings, seqs))]
    scored.sort(key=lambda t: (-t[0], -t[1], t[2]))
    return [i for _, _, i in scored[:k]]


def fifo_model(inserted, capacity):
    return inserted[-capacity:] if capacity else []


def central_diff(f, x, h=1e-6):
    """Gradient of scalar ``f`` at flat vector ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def cosine_schedule(step, total, lr):
    return lr * (1 + math.cos(math.pi * step / total)) / 2


def moving_average_loop(flags, window):
    out = []
    for i in range(len(flags)):
        chunk = flags[max(0, i - window + 1):i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def mlp_forward(weights, biases, lora, x):
    """Policy forward with explicit per-unit loops; returns (action, h)."""
    def layer(name, v, squash):
        w = np.asarray(weights[name], dtype=np.float64)
        if name in lora:
            b, a = lora[name]
            w = w + np.asarray(b) @ np.asarray(a)
        out = []
        for r in range(w.shape[0]):
            z = math.fsum(w[r] * v) + float(biases[name][r])
            out.append(math.tanh(z) if squash else z)
        return np.array(out)

    a0 = layer("input", np.asarray(x, dtype=np.float64), True)
    h = layer("hidden", a0, True)
    return layer("output", h, False), h
