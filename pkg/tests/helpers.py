"""Small builders shared by the test modules."""
import numpy as np

from xprs.memory import Experience
from xprs.policy import LAYERS, Policy, PolicyConfig


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit(rng, d):
    return unit(rng.standard_normal(d))


def make_experience(rng, d_e=8, success=True, cycle=0, horizon=3, command=(5, 9)):
    return Experience(random_unit(rng, d_e).astype(np.float32), command,
                      rng.normal(0.0, 0.05, size=(7, horizon)), success, cycle)


def small_policy(rng, d_e=8, adapted=LAYERS, rank=2, random_b=True, frozen=True):
    cfg = PolicyConfig(d_e=d_e, d_c=4, hidden=6, d_h=5, rank=rank, adapted=adapted,
                       action_scale=(0.05, 0.05, 0.05, 1.0, 1.0, 1.0, 4.0))
    pol = Policy.create(cfg, rng)
    if frozen:
        pol.freeze_base()
    if random_b:
        pol.set_lora({k: (rng.normal(0.0, 0.3, size=b.shape), a)
                      for k, (b, a) in pol.lora.items()})
    return pol
