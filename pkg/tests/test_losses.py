import math

import numpy as np
import pytest

import oracles
from helpers import make_experience, random_unit, small_policy
from xprs.losses import (
    ContrastivePath, NonFiniteLossError, ThclConfig, ThclResult, batch_loss, bc_grad, bc_loss,
    infonce_grad, infonce_loss, loss_gradients, thcl, total_loss, triplet_grad, triplet_loss,
)
from xprs.policy import LAYERS
from xprs.retrieval import CurrentItem, ScoredExperience, TrainBatch


def test_bc_examples():
    a = np.random.default_rng(0).standard_normal((7, 4))
    assert bc_loss(a, a) == 0.0
    d = np.zeros(7)
    d[0] = 1.0
    assert bc_loss(d, np.zeros(7)) == 0.5
    # a constant prediction is compared against every step
    assert bc_loss(np.ones(7), np.zeros((7, 3))) == 0.5 * 7 * 3
    with pytest.raises(ValueError):
        bc_loss(np.zeros((7, 2)), np.zeros((7, 3)))
    with pytest.raises(ValueError):
        bc_loss(np.zeros(6), np.zeros((7, 3)))


def test_triplet_examples():
    h = np.zeros(3)
    far = np.array([2.0, 0.0, 0.0])
    near = np.array([0.2, 0.0, 0.0])
    assert triplet_loss(h, h, far) == 0.0
    assert triplet_loss(h, h, near) == pytest.approx(0.3, abs=1e-15)
    v = np.array([0.3, -1.0, 2.0])
    assert triplet_loss(h, v, v) == 0.5
    assert triplet_loss(h, v, v, margin=0.25) == 0.25


def test_infonce_examples():
    rng = np.random.default_rng(4)
    for k in range(1, 17):
        h, hp = rng.standard_normal(6), rng.standard_normal(6)
        # negatives sharing the positive's logit
        negs = [hp.copy() for _ in range(k)]
        assert abs(infonce_loss(h, hp, negs) - math.log(k + 1)) < 1e-12
    h = np.array([1.0, 0.0])
    assert infonce_loss(h, h, [np.array([0.0, 1.0])], 0.1) == pytest.approx(
        -math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-12)
    assert infonce_loss(h, h, [np.array([0.0, 1.0])], 0.1) == pytest.approx(4.54e-5, rel=1e-3)
    # logit gap of 50 tau
    assert infonce_loss(np.array([1.0]), np.array([5.0]), [np.array([0.0])], 0.1) < 1e-20
    with pytest.raises(ValueError):
        infonce_loss(h, h, [])
    with pytest.raises(ValueError):
        infonce_loss(h, h, [h], tau=0.0)


def test_infonce_is_stable_for_huge_logits():
    h = np.array([1e3, 0.0])
    val = infonce_loss(h, h, [np.array([0.0, 1e3])], 0.01)
    assert math.isfinite(val) and val == 0.0
    val = infonce_loss(h, np.array([0.0, 1e3]), [h], 0.01)
    assert val == pytest.approx(1e8)


def trio(d_pos, d_neg):
    return np.zeros(2), np.array([d_pos, 0.0]), np.array([0.0, d_neg])


def test_thcl_switch():
    r = thcl(*trio(0.9, 1.0)[:2], [trio(0.9, 1.0)[2]])
    assert r.selected is ContrastivePath.TRIPLET and r.value == pytest.approx(0.4, abs=1e-15)
    h, hp, hn = trio(1.8, 1.0)
    r = thcl(h, hp, [hn])
    assert r.selected is ContrastivePath.INFONCE and r.triplet == pytest.approx(1.3)
    assert r.value == infonce_loss(h, hp, [hn], 0.1)
    h, hp, hn = trio(1.5, 1.0)
    assert triplet_loss(h, hp, hn) == 1.0
    assert thcl(h, hp, [hn]).selected is ContrastivePath.TRIPLET
    assert thcl(h, None, [hn]).selected is ContrastivePath.NONE
    assert thcl(h, hp, []).value == 0.0


def test_thcl_uses_first_negative_for_triplet():
    h, hp, hn = trio(0.9, 1.0)
    close = np.array([0.05, 0.0])
    assert thcl(h, hp, [hn, close]).triplet == pytest.approx(0.4)
    assert thcl(h, hp, [close, hn]).triplet == pytest.approx(0.9 - 0.05 + 0.5)


def test_total_loss():
    frag = ThclResult(ContrastivePath.TRIPLET, 0.4, None, 0.4)
    assert total_loss(2.0, frag).total == pytest.approx(2.12, abs=1e-15)
    none = ThclResult(ContrastivePath.NONE, None, None, 0.0)
    assert total_loss(2.0, none).total == 2.0
    assert total_loss(2.0, frag, ThclConfig(contrastive_weight=0.0)).total == 2.0
    with pytest.raises(ValueError):
        ThclConfig(temperature_tau=0.0)


def test_elementwise_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        h, hp = rng.standard_normal(5), rng.standard_normal(5)
        negs = [rng.standard_normal(5) for _ in range(3)]
        flat = np.concatenate([h, hp] + negs)

        def split(x):
            return x[:5], x[5:10], [x[10 + 5 * i:15 + 5 * i] for i in range(3)]

        fd = oracles.central_diff(lambda x: infonce_loss(*split(x), 0.7), flat)
        g0, gp, gn = infonce_grad(h, hp, negs, 0.7)
        np.testing.assert_allclose(np.concatenate([g0, gp] + gn), fd, atol=1e-7)

        if triplet_loss(h, hp, negs[0], 2.0) > 1e-3:
            fd = oracles.central_diff(lambda x: triplet_loss(x[:5], x[5:10], x[10:15], 2.0), flat[:15])
            np.testing.assert_allclose(np.concatenate(triplet_grad(h, hp, negs[0], 2.0)), fd, atol=1e-7)

        p, e = rng.standard_normal(7), rng.standard_normal((7, 4))
        fd = oracles.central_diff(lambda x: bc_loss(x, e), p)
        np.testing.assert_allclose(bc_grad(p, e), fd, atol=1e-6)


def test_triplet_flat_side_has_zero_gradient():
    h, hp, hn = trio(0.1, 3.0)
    assert triplet_loss(h, hp, hn) == 0.0
    assert all(not np.any(g) for g in triplet_grad(h, hp, hn))


def make_batch(rng, pol, n_pos=3, n_neg=2, d_e=8):
    cur = CurrentItem(random_unit(rng, d_e), (2, 7), rng.normal(0, 0.05, (7, 3)))
    pos = [ScoredExperience(make_experience(rng, d_e, True), 0.5, 1.0, 0.2) for _ in range(n_pos)]
    neg = [ScoredExperience(make_experience(rng, d_e, False), 0.5, 1.0, 0.2) for _ in range(n_neg)]
    return TrainBatch(cur, pos, neg)


def test_zero_weight_and_perfect_prediction_gives_zero_gradient(rng):
    pol = small_policy(rng)
    emb = random_unit(rng, 8)
    action, _ = pol.forward(emb, (2, 7))
    expert = np.repeat(pol.to_physical(action)[:, None], 4, axis=1)
    batch = TrainBatch(CurrentItem(emb, (2, 7), expert))
    bg = loss_gradients(batch, pol, ThclConfig(contrastive_weight=0.0))
    assert bg.report.total == pytest.approx(0.0, abs=1e-25)
    for b, a in bg.grads.values():
        assert np.max(np.abs(b)) < 1e-12 and np.max(np.abs(a)) < 1e-12


def test_bc_is_averaged_over_imitation_items(rng):
    pol = small_policy(rng)
    batch = make_batch(rng, pol, n_pos=2, n_neg=0)
    items = [(batch.current.embedding, batch.current.command, batch.current.expert_actions)]
    items += [(s.experience.embedding.astype(np.float64), s.experience.command, s.experience.actions)
              for s in batch.positives]
    want = np.mean([bc_loss(pol.forward(e, c)[0], pol.normalize_actions(a)) for e, c, a in items])
    assert batch_loss(batch, pol).bc == pytest.approx(want, rel=1e-12)


def test_base_gradients_match_finite_differences(rng):
    pol = small_policy(rng, random_b=True, frozen=False)
    batch = make_batch(rng, pol)
    cfg = ThclConfig(threshold_beta=10.0)
    bg = loss_gradients(batch, pol, cfg, base=True)
    base = pol.get_base()
    shapes = [(k, i, base[k][i].shape) for k in LAYERS for i in (0, 1)]
    flat = np.concatenate([base[k][i].ravel() for k, i, _ in shapes])

    def f(x):
        off, params = 0, {k: [None, None] for k in LAYERS}
        for k, i, s in shapes:
            n = int(np.prod(s))
            params[k][i] = x[off:off + n].reshape(s)
            off += n
        pol.set_base({k: tuple(v) for k, v in params.items()})
        return batch_loss(batch, pol, cfg).total

    fd = oracles.central_diff(f, flat)
    pol.set_base(base)
    got = np.concatenate([bg.grads[k][i].ravel() for k, i, _ in shapes])
    assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd)


def test_non_finite_inputs_name_the_term(rng):
    pol = small_policy(rng)
    batch = make_batch(rng, pol, n_pos=1, n_neg=1)
    batch.current.expert_actions = np.full((7, 3), np.inf)
    with pytest.raises(NonFiniteLossError, match="bc loss"):
        loss_gradients(batch, pol)
