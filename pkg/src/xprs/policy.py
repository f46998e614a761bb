"""Small tanh MLP policy with frozen base weights and low-rank adapters.

Layers: ``input`` (embedding + command feature -> hidden), ``hidden``
(hidden -> h) and ``output`` (h -> 7-d action). The network acts in a
normalized action space (physical action divided by ``action_scale``);
``act`` converts back to metres / gripper command for the simulator. ``h`` is the penultimate
representation used by the contrastive losses. An adapted layer computes
``(W + B @ A) x + b``; only ``B`` and ``A`` are trained after the base is
frozen.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import as_command

LAYERS = ("input", "hidden", "output")
ACTION_DIM = 7
CHECKPOINT_MAGIC = b"XPRSPOL1"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d_e: int = 1024
    d_c: int = 16
    hidden: int = 64
    d_h: int = 64
    rank: int = 4
    adapted: tuple[str, ...] = ("hidden",)
    lora_init_std: float = 0.01
    action_scale: tuple[float, ...] = (0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 4.0)

    def __post_init__(self):
        object.__setattr__(self, "adapted", tuple(self.adapted))
        object.__setattr__(self, "action_scale", tuple(float(v) for v in self.action_scale))
        if len(self.action_scale) != ACTION_DIM or min(self.action_scale) <= 0:
            raise ValueError("action_scale must be 7 positive numbers")
        bad = set(self.adapted) - set(LAYERS)
        if bad:
            raise ValueError(f"unknown adapted layers {sorted(bad)}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "input": (self.hidden, self.d_e + self.d_c),
            "hidden": (self.d_h, self.hidden),
            "output": (ACTION_DIM, self.d_h),
        }


def command_feature(tokens: Sequence[int], d_c: int = 16) -> np.ndarray:
    """Hashed bag-of-tokens feature in ``[-1, 1]^d_c``."""
    toks = as_command(tokens)
    acc = np.zeros(d_c)
    for t in toks:
        digest = hashlib.blake2b(struct.pack("<I", t), digest_size=d_c, person=b"xprs-cmd").digest()
        acc += np.frombuffer(digest, dtype=np.uint8) / 127.5 - 1.0
    return acc / len(toks)


def init_lora(shapes: dict[str, tuple[int, int]], rank: int, rng: np.random.Generator,
              std: float = 0.01) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``B`` zero, ``A`` Gaussian: the adapted policy starts equal to the base."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    out = {}
    for name, (d_out, d_in) in shapes.items():
        out[name] = (np.zeros((d_out, rank)), rng.normal(0.0, std, size=(rank, d_in)))
    return out


@dataclass
class ForwardCache:
    x: np.ndarray
    a0: np.ndarray
    h: np.ndarray
    action: np.ndarray


@dataclass
class Policy:
    config: PolicyConfig
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    lora: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def create(cls, config: PolicyConfig, rng: np.random.Generator) -> "Policy":
        weights, biases = {}, {}
        for name, (d_out, d_in) in config.layer_shapes().items():
            weights[name] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
            biases[name] = np.zeros(d_out)
        pol = cls(config, weights, biases)
        pol.reset_lora(rng)
        return pol

    # -- parameters ----------------------------------------------------------

    def reset_lora(self, rng: np.random.Generator) -> None:
        shapes = {k: v for k, v in self.config.layer_shapes().items() if k in self.config.adapted}
        self.lora = init_lora(shapes, self.config.rank, rng, self.config.lora_init_std)

    def freeze_base(self) -> None:
        """Round base parameters to float32 precision and make them read-only."""
        for d in (self.weights, self.biases):
            for k in d:
                a = np.array(d[k], dtype=np.float32).astype(np.float64)
                a.setflags(write=False)
                d[k] = a
        self.frozen = True

    def thaw(self) -> None:
        """Make base parameters trainable again (used by the naive baseline)."""
        self.weights = {k: np.array(w) for k, w in self.weights.items()}
        self.biases = {k: np.array(b) for k, b in self.biases.items()}
        self.frozen = False

    def get_base(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (self.weights[k].copy(), self.biases[k].copy()) for k in LAYERS}

    def set_base(self, params: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        if self.frozen:
            raise RuntimeError("base weights are frozen")
        for k, (w, b) in params.items():
            self.weights[k] = np.array(w, dtype=np.float64)
            self.biases[k] = np.array(b, dtype=np.float64)

    def base_checksum(self) -> str:
        h = hashlib.sha256()
        for name in LAYERS:
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
            h.update(np.ascontiguousarray(self.biases[name]).tobytes())
        return h.hexdigest()

    def trainable_count(self) -> int:
        return sum(b.size + a.size for b, a in self.lora.values())

    def base_count(self) -> int:
        return sum(w.size + self.biases[k].size for k, w in self.weights.items())

    def get_lora(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (b.copy(), a.copy()) for k, (b, a) in self.lora.items()}

    def set_lora(self, lora: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        self.lora = {k: (np.array(b, dtype=np.float64), np.array(a, dtype=np.float64))
                     for k, (b, a) in lora.items()}

    def effective_weight(self, name: str) -> np.ndarray:
        w = self.weights[name]
        if name in self.lora:
            b, a = self.lora[name]
            return w + b @ a
        return w

    # -- forward / backward --------------------------------------------------

    def inputs(self, embedding: np.ndarray, command: Sequence[int] | np.ndarray) -> np.ndarray:
        cfeat = command if isinstance(command, np.ndarray) else command_feature(command, self.config.d_c)
        # unit-norm embedding rescaled so its entries are O(1), like the command feature
        emb = np.asarray(embedding, dtype=np.float64) * np.sqrt(self.config.d_e)
        x = np.concatenate([emb, cfeat])
        if x.shape[0] != self.config.d_e + self.config.d_c:
            raise ValueError(f"input dim {x.shape[0]} != {self.config.d_e + self.config.d_c}")
        return x

    def forward_cache(self, x: np.ndarray) -> ForwardCache:
        """Forward pass on one input vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.d_e + self.config.d_c:
            raise ValueError(f"input dim {x.shape[-1]} != {self.config.d_e + self.config.d_c}")
        a0 = np.tanh(x @ self.effective_weight("input").T + self.biases["input"])
        h = np.tanh(a0 @ self.effective_weight("hidden").T + self.biases["hidden"])
        action = h @ self.effective_weight("output").T + self.biases["output"]
        return ForwardCache(x, a0, h, action)

    def forward(self, embedding: np.ndarray, command) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(normalized action, h)`` for one embedding and command."""
        c = self.forward_cache(self.inputs(embedding, command))
        return c.action, c.h

    def act(self, embedding: np.ndarray, command) -> np.ndarray:
        """Physical action for the simulator."""
        return self.to_physical(self.forward(embedding, command)[0])

    def to_physical(self, action: np.ndarray) -> np.ndarray:
        return np.asarray(action) * np.asarray(self.config.action_scale)

    def normalize_actions(self, actions: np.ndarray) -> np.ndarray:
        """Physical ``(7,)`` or ``(7, T)`` actions in the network's units."""
        scale = np.asarray(self.config.action_scale)
        a = np.asarray(actions, dtype=np.float64)
        return a / (scale if a.ndim == 1 else scale[:, None])

    def backward(self, cache: ForwardCache, d_action: np.ndarray,
                 d_h: Optional[np.ndarray] = None, base: bool = False):
        """Gradients from upstream ``dL/daction`` and extra ``dL/dh``.

        Returns ``{layer: (dB, dA)}`` for the adapters and, with
        ``base=True``, also ``{layer: (dW, db)}`` for the base parameters.
        Batched caches sum over rows.
        """
        x, a0, h = cache.x, cache.a0, cache.h
        d_action = np.asarray(d_action, dtype=np.float64)
        acts = {"input": x, "hidden": a0, "output": h}
        d_z = {"output": d_action}
        g_h = d_action @ self.effective_weight("output")
        if d_h is not None:
            g_h = g_h + d_h
        d_z["hidden"] = g_h * (1.0 - h * h)
        g_a0 = d_z["hidden"] @ self.effective_weight("hidden")
        d_z["input"] = g_a0 * (1.0 - a0 * a0)

        lora_grads = {}
        for name, (b, a) in self.lora.items():
            dz = np.atleast_2d(d_z[name])
            xin = np.atleast_2d(acts[name])
            lora_grads[name] = (dz.T @ (xin @ a.T), (dz @ b).T @ xin)
        if not base:
            return lora_grads
        base_grads = {}
        for name in LAYERS:
            dz = np.atleast_2d(d_z[name])
            xin = np.atleast_2d(acts[name])
            base_grads[name] = (dz.T @ xin, dz.sum(axis=0))
        return lora_grads, base_grads


def pretrain(policy: Policy, inputs: np.ndarray, targets: np.ndarray, epochs: int = 400,
             lr: float = 3e-3, batch_size: int = 64, rng: Optional[np.random.Generator] = None) -> float:
    """Fit base weights by behavioral cloning (squared error) with Adam.

    ``inputs`` holds policy input rows, ``targets`` the mean normalized
    expert action per row. Returns the final mean loss. Stands in for the pretrained model.
    """
    if policy.frozen:
        raise RuntimeError("base weights are frozen")
    rng = rng or np.random.default_rng(0)
    params = [(d, k) for k in LAYERS for d in (policy.weights, policy.biases)]
    m = [np.zeros_like(d[k]) for d, k in params]
    v = [np.zeros_like(d[k]) for d, k in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = inputs.shape[0]
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            cache = policy.forward_cache(inputs[idx])
            d_act = (cache.action - targets[idx]) / len(idx)
            _, base = policy.backward(cache, d_act, base=True)
            grads = [g for k in LAYERS for g in base[k]]
            step += 1
            for i, ((d, k), g) in enumerate(zip(params, grads)):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mh = m[i] / (1 - b1 ** step)
                vh = v[i] / (1 - b2 ** step)
                d[k] = d[k] - lr * mh / (np.sqrt(vh) + eps)
    cache = policy.forward_cache(inputs)
    return float(0.5 * np.mean(np.sum((cache.action - targets) ** 2, axis=1)))


# -- checkpoint --------------------------------------------------------------

def dump_checkpoint(policy: Policy) -> bytes:
    cfg = policy.config
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<6I", cfg.d_e, cfg.d_c, cfg.hidden, cfg.d_h, cfg.rank, len(LAYERS)),
        struct.pack("<d", cfg.lora_init_std),
        struct.pack("<7d", *cfg.action_scale),
    ]
    for name in LAYERS:
        w, b = policy.weights[name], policy.biases[name]
        parts.append(struct.pack("<II", *w.shape))
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    for name in LAYERS:
        if name in policy.lora:
            bm, am = policy.lora[name]
            parts.append(struct.pack("<BI", 1, bm.shape[1]))
            parts.append(bm.astype("<f4").tobytes())
            parts.append(am.astype("<f4").tobytes())
        else:
            parts.append(struct.pack("<BI", 0, 0))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(policy: Policy, path) -> None:
    Path(path).write_bytes(dump_checkpoint(policy))


def load_checkpoint_bytes(data: bytes) -> Policy:
    if len(data) < 12 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise CheckpointError("policy checkpoint CRC32 mismatch")
    off = 8
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    d_e, d_c, hidden, d_h, rank, n_layers = struct.unpack_from("<6I", data, off)
    off += 24
    (std,) = struct.unpack_from("<d", data, off)
    off += 8
    scale = struct.unpack_from("<7d", data, off)
    off += 56
    if n_layers != len(LAYERS):
        raise CheckpointError("unexpected layer count")

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 4 * n > len(data) - 4:
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
        return arr

    weights, biases, lora = {}, {}, {}
    for name in LAYERS:
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        weights[name] = take((rows, cols))
        biases[name] = take((rows,))
    for name in LAYERS:
        flag, r = struct.unpack_from("<BI", data, off)
        off += 5
        if flag:
            d_out, d_in = weights[name].shape
            lora[name] = (take((d_out, r)), take((r, d_in)))
    if off != len(data) - 4:
        raise CheckpointError("trailing bytes in checkpoint")
    cfg = PolicyConfig(d_e=d_e, d_c=d_c, hidden=hidden, d_h=d_h, rank=rank,
                       adapted=tuple(n for n in LAYERS if n in lora), lora_init_std=std,
                       action_scale=scale)
    pol = Policy(cfg, weights, biases, lora)
    pol.freeze_base()
    return pol


def load_checkpoint(path) -> Policy:
    return load_checkpoint_bytes(Path(path).read_bytes())
