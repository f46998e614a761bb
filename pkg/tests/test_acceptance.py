"""Acceptance criteria 1-10. Each test records one PASS/FAIL line that the
terminal summary prints at the end of the run."""
import copy
import itertools
import math
import time

import numpy as np

import oracles
from helpers import make_experience, random_unit, small_policy
from xprs.adapt import OnlineAdapter, TriggerState, lr_schedule, should_adapt
from xprs.cli import main
from xprs.config import bundled_config_path, load_config
from xprs.encoder import compression_ratio, embedding_nbytes, storage_reduction
from xprs.experiment import prepare_world, retrieval_config, run_variant
from xprs.losses import ContrastivePath, ThclConfig, batch_loss, infonce_loss, loss_gradients, thcl, triplet_loss
from xprs.memory import (
    Experience, ReplayBuffer, SnapshotError, buffer_from_experiences, dump_snapshot, load_snapshot,
)
from xprs.encoder import EncoderParams
from xprs.policy import LAYERS
from xprs.retrieval import CurrentItem, RetrievalConfig, ScoredExperience, TrainBatch, build_batch, k_policy, top_k
from xprs.simenv import expert_demo, rollout, sample_scene

SEEDS = (0, 1, 2, 3, 4)


# -- 1: gradient oracle ------------------------------------------------------

def _flat(lora):
    return np.concatenate([m.ravel() for k in LAYERS for m in lora[k]])


def _unflat(x, like):
    out, off = {}, 0
    for k in LAYERS:
        parts = []
        for m in like[k]:
            parts.append(x[off:off + m.size].reshape(m.shape))
            off += m.size
        out[k] = tuple(parts)
    return out


def _instance(rng, kind):
    pol = small_policy(rng)
    cur = CurrentItem(random_unit(rng, 8), (int(rng.integers(1, 50)), 3), rng.normal(0, 0.05, (7, 3)))
    n_pos = int(rng.integers(0 if kind == "bc_only" else 1, 4))
    n_neg = 0 if kind == "bc_only" else int(rng.integers(1, 3))
    pos = [ScoredExperience(make_experience(rng, 8, True, horizon=int(rng.integers(1, 4)),
                                            command=(int(rng.integers(1, 50)),)), 0.5, 1.0, 0.3)
           for _ in range(n_pos)]
    neg = [ScoredExperience(make_experience(rng, 8, False, horizon=2,
                                            command=(int(rng.integers(1, 50)),)), 0.5, 1.0, 0.2)
           for _ in range(n_neg)]
    cfg = ThclConfig(contrastive_weight=0.0) if kind == "weight_zero" else ThclConfig()
    return pol, TrainBatch(cur, pos, neg), cfg


def _safe(pol, batch, cfg, kind):
    """Away from the hinge kink and the branch switch, so FD sees one smooth piece."""
    rep = batch_loss(batch, pol, cfg)
    want = {"triplet": ContrastivePath.TRIPLET, "infonce": ContrastivePath.INFONCE,
            "bc_only": ContrastivePath.NONE, "weight_zero": None}[kind]
    if want is not None and rep.selected is not want:
        return False
    if rep.triplet is None:
        return True
    return abs(rep.triplet) > 1e-3 and abs(rep.triplet - cfg.threshold_beta) > 1e-3


def test_criterion_1_gradient_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    kinds = ("triplet", "infonce", "bc_only", "weight_zero")
    per_kind = 26
    worst, count, drawn = 0.0, {k: 0 for k in kinds}, 0
    for kind in kinds:
        while count[kind] < per_kind:
            drawn += 1
            pol, batch, cfg = _instance(rng, kind)
            if not _safe(pol, batch, cfg, kind):
                continue
            like = pol.get_lora()
            analytic = _flat(loss_gradients(batch, pol, cfg).grads)

            def f(x):
                pol.set_lora(_unflat(x, like))
                return batch_loss(batch, pol, cfg).total

            fd = oracles.central_diff(f, _flat(like), h=1e-6)
            pol.set_lora(like)
            denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-12)
            worst = max(worst, float(np.linalg.norm(analytic - fd) / denom))
            count[kind] += 1
    elapsed = time.perf_counter() - t0
    n = sum(count.values())
    ok = worst <= 1e-5 and n >= 100 and elapsed < 60
    acceptance(1, ok, f"{n} instances {count}, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2: retrieval oracle -----------------------------------------------------

def test_criterion_2_retrieval_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatches = 0
    ties = 0
    for _ in range(1000):
        d = int(rng.integers(8, 1025))
        size = int(rng.integers(1, 51))
        extra = int(rng.integers(0, 20))
        buf = ReplayBuffer(size)
        pool = []
        for i in range(size + extra):
            if pool and rng.random() < 0.2:
                emb = pool[int(rng.integers(len(pool)))]  # duplicate: forces a score tie
            else:
                emb = random_unit(rng, d).astype(np.float32)
                pool.append(emb)
            buf.insert(Experience(emb, (1,), np.zeros((7, 1)), True, 0))
        q = random_unit(rng, d)
        k = int(rng.integers(0, len(buf) + 1))
        got = [s.seq for s in top_k(buf, q, k, 0)]
        entries, seqs = buf.view()
        want_idx = oracles.brute_top_k([e.embedding for e in entries], seqs, q, k)
        want = [int(seqs[i]) for i in want_idx]
        mismatches += got != want
        ties += len({e.embedding.tobytes() for e in entries}) < len(entries)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    acceptance(2, ok, f"1000 buffers ({ties} with exact ties), {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# -- 3: compression arithmetic -----------------------------------------------

def test_criterion_3_compression(acceptance):
    rng = np.random.default_rng(0)
    e = Experience(random_unit(rng, 1024), (1,), np.zeros((7, 1)), True, 0)
    serialized = len(e.embedding.astype("<f4").tobytes())
    ratio = compression_ratio(1024)
    reduction = storage_reduction(1024)
    ok = (serialized == embedding_nbytes(1024) == 4096 and abs(ratio - 36.7) <= 0.1
          and ratio == 36.75 and reduction >= 0.97)
    acceptance(3, ok, f"{serialized} B per embedding, ratio {ratio}, reduction {reduction:.4f}")
    assert ok


# -- 4: loss closed forms ----------------------------------------------------

def test_criterion_4_closed_forms(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for k in range(1, 17):
        h, hp = rng.standard_normal(8), rng.standard_normal(8)
        worst = max(worst, abs(infonce_loss(h, hp, [hp.copy() for _ in range(k)], 0.1) - math.log(k + 1)))
    exact_alpha = all(triplet_loss(rng.standard_normal(6), v, v.copy(), 0.5) == 0.5
                      for v in (rng.standard_normal(6) for _ in range(50)))
    h, hp, hn = np.zeros(2), np.array([1.5, 0.0]), np.array([0.0, 1.0])
    boundary = triplet_loss(h, hp, hn) == 1.0 and thcl(h, hp, [hn]).selected is ContrastivePath.TRIPLET
    above = thcl(h, np.array([1.5 + 1e-9, 0.0]), [hn]).selected is ContrastivePath.INFONCE
    ok = worst <= 1e-12 and exact_alpha and boundary and above
    acceptance(4, ok, f"InfoNCE ln(K+1) max err {worst:.1e}, triplet=alpha exact {exact_alpha}, "
                      f"beta inclusive {boundary and above}")
    assert ok


# -- 5: buffer semantics -----------------------------------------------------

def test_criterion_5_buffers(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    inserts, fifo_ok = 0, True
    while inserts < 10_000:
        cap = int(rng.integers(1, 80))
        n = int(rng.integers(0, 4 * cap))
        buf = ReplayBuffer(cap)
        tags = []
        for _ in range(n):
            tag = int(rng.integers(0, 1 << 40))
            ev = buf.insert(make_experience(rng, 4, True, cycle=tag, horizon=1))
            tags.append(tag)
            inserts += 1
            expect_ev = tags[-cap - 1] if len(tags) > cap else None
            fifo_ok &= (ev.stored_cycle if ev else None) == expect_ev
        fifo_ok &= [e.stored_cycle for e in buf.entries()] == oracles.fifo_model(tags, cap)

    enc = EncoderParams.create(d_sem=12, d_spa=4, seed=5)
    sbuf = buffer_from_experiences([make_experience(rng, 16, True, i % 7, 1 + i % 9) for i in range(60)], 50, True)
    fbuf = buffer_from_experiences([make_experience(rng, 16, False, i % 5, 3) for i in range(50)], 50, False)
    blob = dump_snapshot(sbuf, fbuf, enc)
    s2, f2, e2 = load_snapshot(blob)
    round_trip = s2.same_state(sbuf) and f2.same_state(fbuf) and e2 == enc and dump_snapshot(s2, f2, e2) == blob

    rejected, trials = 0, 0
    for pos in list(rng.integers(0, len(blob), 300)) + [len(blob) - 1]:
        bad = bytearray(blob)
        bad[pos] ^= 1 << int(rng.integers(8))
        trials += 1
        try:
            load_snapshot(bytes(bad))
        except SnapshotError:
            rejected += 1
    for cut in rng.integers(0, len(blob), 100):
        trials += 1
        try:
            load_snapshot(blob[:cut])
        except SnapshotError:
            rejected += 1
    elapsed = time.perf_counter() - t0
    ok = fifo_ok and round_trip and rejected == trials and elapsed < 30
    acceptance(5, ok, f"{inserts} FIFO inserts ok={fifo_ok}, bit-exact round trip {round_trip}, "
                      f"{rejected}/{trials} corruptions rejected, {elapsed:.1f}s")
    assert ok


# -- 6: trigger and schedule -------------------------------------------------

def test_criterion_6_trigger_and_schedule(acceptance):
    t0 = time.perf_counter()
    wrong = 0
    for bits in itertools.product((False, True), repeat=10):
        ts = TriggerState(10, 0.8)
        for b in bits:
            ts.record(b)
        wrong += should_adapt(ts) != (sum(bits) / 10 < 0.8)
    for n in range(10):
        for bits in itertools.product((False, True), repeat=n):
            ts = TriggerState(10, 0.8)
            for b in bits:
                ts.record(b)
            wrong += should_adapt(ts)
    lr = 2e-5
    ends = lr_schedule(0, 64, lr) == lr and lr_schedule(64, 64, lr) == 0.0
    mid = abs(lr_schedule(32, 64, lr) - lr / 2) <= 1e-12 and abs(lr_schedule(5, 10, 0.1) - 0.05) <= 1e-12
    elapsed = time.perf_counter() - t0
    ok = wrong == 0 and ends and mid and elapsed < 10
    acceptance(6, ok, f"1024 full + 1023 partial windows, {wrong} wrong; endpoints exact {ends}, "
                      f"midpoint {mid}, {elapsed:.2f}s")
    assert ok


# -- 7: batch composition ----------------------------------------------------

def test_criterion_7_batch_composition(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cfg = RetrievalConfig()
    full_ok, dup, n_full = 0, 0, 300
    for _ in range(n_full):
        s = buffer_from_experiences([make_experience(rng, 16, True, int(rng.integers(0, 5))) for _ in range(50)], 50, True)
        f = buffer_from_experiences([make_experience(rng, 16, False, int(rng.integers(0, 5))) for _ in range(50)], 50, False)
        own = s.entries()[int(rng.integers(50))]
        cur = CurrentItem(own.embedding.astype(np.float64), own.command, own.actions)
        b = build_batch(cur, s, f, rng, 5, cfg, exclude=(own,))
        full_ok += b.sizes == (1, 3, 2)
        ids = [id(x.experience) for x in b.positives + b.negatives]
        dup += len(set(ids)) != len(ids) or id(own) in ids
    short_bad = 0
    for _ in range(300):
        n_s, n_f = int(rng.integers(0, 51)), int(rng.integers(0, 51))
        s = buffer_from_experiences([make_experience(rng, 16, True) for _ in range(n_s)], 50, True)
        f = buffer_from_experiences([make_experience(rng, 16, False) for _ in range(n_f)], 50, False)
        b = build_batch(CurrentItem(random_unit(rng, 16), (1,), np.zeros((7, 1))), s, f, rng, 0, cfg)
        want = (1, min(3, k_policy(n_s)), min(2, k_policy(n_f)))
        short_bad += b.sizes != want
    elapsed = time.perf_counter() - t0
    ok = full_ok == n_full and dup == 0 and short_bad == 0 and elapsed < 10
    acceptance(7, ok, f"{full_ok}/{n_full} full-buffer batches are (1,3,2), {dup} with duplicates, "
                      f"{short_bad} shortfall mismatches, {elapsed:.1f}s")
    assert ok


# -- 8: end-to-end forgetting experiment -------------------------------------

def test_criterion_8_forgetting_experiment(acceptance):
    t0 = time.perf_counter()
    cfg = load_config(bundled_config_path())
    rows = []
    for seed in SEEDS:
        world = prepare_world(cfg.replace(seed=seed))
        full = run_variant(world, "full")
        naive = run_variant(world, "naive")
        rows.append((seed, full, naive))
    elapsed = time.perf_counter() - t0

    a = all(f.pre_target < 0.5 for _, f, _ in rows)
    b = all(f.post_target >= 0.8 and f.cycles <= 10 for _, f, _ in rows)
    full_drop = [f.pre_source - f.post_source for _, f, _ in rows]
    naive_drop = [n.pre_source - n.post_source for _, _, n in rows]
    c_full = all(d < 0.10 for d in full_drop)
    c_gap = all(nd - fd >= 0.20 for fd, nd in zip(full_drop, naive_drop))
    ordering = all(f.post_source > n.post_source for _, f, n in rows)
    ok = a and b and c_full and c_gap and ordering and elapsed < 300
    per_seed = "; ".join(
        f"s{s}: tgt {f.pre_target:.2f}->{f.post_target:.2f} ({f.cycles}c), "
        f"src full {f.post_source:.2f} naive {n.post_source:.2f}" for s, f, n in rows)
    acceptance(8, ok, f"(a) {a} (b) {b} (c) full<10pp {c_full}, gap>=20pp {c_gap}, ordering {ordering}, "
                      f"{elapsed:.0f}s [{per_seed}]")
    assert ok


# -- 9: frozen-core checksums ------------------------------------------------

def test_criterion_9_frozen_core(acceptance):
    t0 = time.perf_counter()
    cfg = load_config(bundled_config_path())
    world = prepare_world(cfg)
    enc_before = world.encoder.checksum()
    enc_bytes = world.encoder.to_bytes()
    policy = copy.deepcopy(world.policy)
    base_before = policy.base_checksum()
    adapter = OnlineAdapter(policy, world.encoder, world.success_buf.copy(), world.failure_buf.copy(),
                            cfg.train, cfg.thcl, retrieval_config(cfg), "full")
    rng = np.random.default_rng(9)
    sc = cfg.scenario
    yaw = math.radians(sc.target_actuator_yaw_deg)
    for _ in range(20):
        collected = []
        for _ in range(10):
            task = world.target_tasks[int(rng.integers(len(world.target_tasks)))]
            scene = sample_scene(task, "target", world.target_style, rng, sc.jitter, yaw)
            demo = expert_demo(scene, cfg.sim, cfg.success)
            tr = rollout(policy, scene, world.encoder, sc.horizon, sc.chunk, cfg.sim, cfg.success,
                         demo.expert_actions)
            collected.append(tr)
            if not tr.success:
                collected.append(demo)
        adapter.run_adaptation_cycle(collected, rng)
    lora_moved = any(np.any(b) for b, _ in policy.lora.values())
    elapsed = time.perf_counter() - t0
    ok = (adapter.cycle == 20 and world.encoder.checksum() == enc_before
          and world.encoder.to_bytes() == enc_bytes and policy.base_checksum() == base_before
          and lora_moved and elapsed < 60)
    acceptance(9, ok, f"{adapter.cycle} cycles, encoder {enc_before[:12]} unchanged, "
                      f"base {base_before[:12]} unchanged, adapters trained {lora_moved}, {elapsed:.1f}s")
    assert ok


# -- 10: determinism ---------------------------------------------------------

def test_criterion_10_determinism(acceptance, tmp_path, capsys):
    t0 = time.perf_counter()
    outs = [tmp_path / "one", tmp_path / "two"]
    codes = [main(["run", "--config", str(bundled_config_path()), "--seed", "0", "--out", str(o)])
             for o in outs]
    capsys.readouterr()
    a, b = [(o / "metrics.jsonl").read_bytes() for o in outs]
    same_summary = (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and a == b and len(a) > 0 and same_summary and elapsed < 120
    acceptance(10, ok, f"metrics.jsonl {len(a)} B, identical {a == b}, summary identical {same_summary}, "
                       f"{elapsed:.1f}s")
    assert ok
