import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfl_backdoor.attack import (AttackerSet, AttackPlan, ClusterAssignment, assign_triggers, attack_success_rate,
                                 brute_force_medoids, build_distance_matrix, centralized_assignment,
                                 cluster_attackers, equal_budget_fraction, inject_distance_error, k_medoids,
                                 naive_dba_assignment, poisoned_batch, signature_step)
from dfl_backdoor.data import make_signature, make_signatures, make_synthetic, shard_iid, make_trigger, signature_probes, stamp_pixels
from dfl_backdoor.errors import InvalidArgument
from dfl_backdoor.nn import cross_entropy_grad, init_mlp, predict, sgd_step
from dfl_backdoor.simulator import SimConfig, measure_poison_accuracy, run_simulation
from dfl_backdoor.topology import build_ring

from .oracles import all_medoid_sets, medoid_cost


def _trigger(side=12, blocks=4):
    return make_trigger((side, side), 0, blocks=blocks, size=2, gap=1)


def test_degenerate_k_equals_attackers_is_centralized():
    t = _trigger()
    ids = (2, 5, 9, 14)
    single = ClusterAssignment(tuple((i,) for i in ids))
    for r in range(5):
        assert assign_triggers(single, t, r).stamp_sets() == centralized_assignment(ids, t).stamp_sets()


def test_degenerate_k_one_permutes_naive():
    t = _trigger()
    ids = (2, 5, 9, 14)
    naive = naive_dba_assignment(ids, t).stamp_sets()
    for r in range(30):
        got = assign_triggers(ClusterAssignment((ids,)), t, r).stamp_sets()
        assert set(got) == set(ids)
        assert sorted(map(sorted, got.values())) == sorted(map(sorted, naive.values()))


def test_cluster_parts_union_is_trigger():
    t = _trigger(side=18, blocks=6)
    a = ClusterAssignment(((0, 3, 4), (8, 11)))
    for r in range(10):
        s = assign_triggers(a, t, r).stamp_sets()
        for members in a.clusters:
            parts = [s[m] for m in members]
            assert frozenset().union(*parts) == frozenset(t.stamps)
            assert sum(len(p) for p in parts) == len(t.stamps)


def test_assignment_uniform_over_rounds():
    t = _trigger()
    ids = (1, 2, 3)
    parts = [frozenset(p.stamps) for p in naive_dba_assignment(ids, t).triggers.values()]
    counts = {(i, j): 0 for i in ids for j in range(3)}
    for r in range(60):  # ten full cycles of 3! permutations
        s = assign_triggers(ClusterAssignment((ids,)), t, r, seed=4).stamp_sets()
        for i in ids:
            counts[(i, parts.index(s[i]))] += 1
    assert set(counts.values()) == {20}
    again = [assign_triggers(ClusterAssignment((ids,)), t, r, seed=4).stamp_sets() for r in range(6)]
    assert again == [assign_triggers(ClusterAssignment((ids,)), t, r, seed=4).stamp_sets() for r in range(6)]


def test_equal_budget_fraction():
    assert equal_budget_fraction("cluster_dba", 0.1875, 6, 2) == 0.1875
    assert equal_budget_fraction("centralized", 0.1875, 6, 2) == pytest.approx(0.0625)
    assert equal_budget_fraction("naive_dba", 0.1875, 6, 2) == pytest.approx(0.375)
    with pytest.raises(InvalidArgument):
        equal_budget_fraction("other", 0.1, 2, 1)


def test_poisoned_batch():
    d = make_synthetic(4, 20, 12, 0)
    t = _trigger()
    x, y, mask = poisoned_batch(d, t, 3, 0.25, np.random.default_rng(0), 32)
    assert x.shape == (32, 144) and mask.sum() == 8
    assert np.all(y[mask] == 3)
    assert np.all(x[mask][:, t.flat_index] == 1.0)
    x2, y2, m2 = poisoned_batch(d, t, 3, 0.25, np.random.default_rng(0), 32)
    assert np.array_equal(x, x2) and np.array_equal(mask, m2)
    _, _, none = poisoned_batch(d, None, 3, 0.25, np.random.default_rng(0), 32)
    assert not none.any()


def test_plan_validation():
    sig = {1: make_signature(1, 12, 10, 0)}
    atk = AttackerSet((1,), sig, 0.1, 0)
    with pytest.raises(InvalidArgument):
        AttackPlan("bogus")
    with pytest.raises(InvalidArgument):
        AttackPlan("centralized", None, atk)
    with pytest.raises(InvalidArgument):
        AttackPlan("cluster_dba", _trigger(), atk, num_clusters=2)
    with pytest.raises(InvalidArgument):
        AttackerSet((1,), sig, 0.0, 0)
    with pytest.raises(InvalidArgument):
        AttackerSet((1, 2), sig, 0.1, 0)


def test_asr_untrained_near_chance():
    d = make_synthetic(10, 50, 12, 1)
    m = init_mlp(144, 32, 10, 0)
    zero = m.with_vector(np.zeros(m.size))
    # all-zero weights predict class 0 everywhere, so ASR for target 0 is 1 and for others 0
    assert attack_success_rate(zero, d, _trigger(), 0) == 1.0
    rates = [attack_success_rate(init_mlp(144, 32, 10, s), d, make_trigger((12, 12), c, blocks=4, size=2, gap=1), c)
             for s in range(5) for c in range(10)]
    assert np.mean(rates) == pytest.approx(0.1, abs=0.06)


def test_single_attacker_learns_backdoor():
    d = make_synthetic(10, 40, 12, 2)
    t = _trigger()
    m = init_mlp(144, 32, 10, 0)
    rng = np.random.default_rng(0)
    for _ in range(600):
        x, y, _ = poisoned_batch(d, t, 0, 0.3, rng, 32)
        _, g = cross_entropy_grad(m, x, y)
        m = sgd_step(m, g, 0.1)
    assert attack_success_rate(m, d, t, 0) >= 0.9
    assert np.mean(predict(m, d.pixels) == d.labels) >= 0.8


def test_signature_step_fits_pseudo_label():
    d = make_synthetic(10, 20, 12, 0)
    sig = make_signature(0, 12, 10, 0)
    m = init_mlp(144, 32, 10, 0)
    assert np.array_equal(signature_step(m, d, sig, 0.0, np.random.default_rng(0), 32)[0].vector, m.vector)
    rng = np.random.default_rng(1)
    for _ in range(50):
        m, _ = signature_step(m, d, sig, 0.05, rng, 32)
    probes = signature_probes(sig, 8, 0)
    assert measure_poison_accuracy(m, probes, sig.pseudo_label) >= 0.9


def test_signature_training_clean_accuracy():
    # paired detection-phase runs on ring(16): four signature-training attackers vs all honest
    data = make_synthetic(10, 100, 12, 0)
    train, test = data[np.arange(800)], data[np.arange(800, 1000)]
    shards = shard_iid(train, 16, 0)
    cfg = SimConfig(total_rounds=51, detection_rounds=50, eval_every=50, seed=0)
    accs = []
    for ids in ((), (0, 4, 8, 12)):
        plan = AttackPlan("none", attackers=AttackerSet(ids, make_signatures(ids, 12, 10, 0), 1.0, 0)) if ids \
            else AttackPlan("none")
        log = run_simulation(build_ring(16), shards, test, plan, cfg, detection_only=True, num_classes=10)
        last = np.array(log.rounds) == max(log.rounds)
        accs.append(float(np.mean(np.array(log.main_acc)[last])))
    assert accs[1] > accs[0] - 0.05, f"clean accuracy {accs[0]:.3f} honest vs {accs[1]:.3f} with signatures"


def test_poisoned_batch_degenerate_fractions():
    d = make_synthetic(4, 20, 12, 0)
    t = _trigger()
    x, y, mask = poisoned_batch(d, t, 3, 0.01, np.random.default_rng(0), 32)
    assert not mask.any()
    x, y, mask = poisoned_batch(d, t, 3, 1.0, np.random.default_rng(0), 32)
    assert mask.all() and np.all(y == 3) and np.all(x[:, t.flat_index] == 1.0)
    # clean rows are bit-identical to source images
    x, y, mask = poisoned_batch(d, t, 3, 0.5, np.random.default_rng(0), 32)
    src = {row.tobytes() for row in d.pixels}
    assert all(row.tobytes() in src for row in x[~mask])


def test_distance_matrix_from_oracle():
    topo = build_ring(10)
    ids = [0, 3, 7]

    class Lookup:
        # encodes the pair in the sequence and returns its hop distance
        def predict(self, diffs):
            return np.array([topo.hops[int(d[0]), int(d[1])] for d in diffs], dtype=float)

    # diff for pair (a, b) is [a, b, 0]
    seqs = {(a, b): np.array([0.0, -float(b), 0.0]) for a in ids for b in ids if a != b}
    seqs.update({(a, a): np.array([float(a), 0.0, 0.0]) for a in ids})
    m = build_distance_matrix(seqs, Lookup(), ids)
    assert np.array_equal(m, topo.hops[np.ix_(ids, ids)])
    with pytest.raises(InvalidArgument):
        build_distance_matrix({}, Lookup(), ids)


def test_inject_distance_error():
    m = build_ring(12).hops[np.ix_([0, 2, 5, 9], [0, 2, 5, 9])].astype(float)
    assert np.array_equal(inject_distance_error(m, 0.0, 1), m)
    noisy = inject_distance_error(m, 1.0, 1)
    assert np.array_equal(noisy, noisy.T) and not np.diag(noisy).any() and noisy.min() >= 0
    assert np.array_equal(noisy, inject_distance_error(m, 1.0, 1))
    assert not np.array_equal(noisy, m)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 10_000), data=st.data())
def test_k_medoids_matches_brute_force(n, seed, data):
    k = data.draw(st.integers(1, n))
    pts = np.random.default_rng(seed).normal(size=(n, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    _, _, cost = k_medoids(d, k, seed)
    best = min(medoid_cost(d, s) for s in all_medoid_sets(n, k))
    assert cost == pytest.approx(best, abs=1e-9)
    assert brute_force_medoids(d, k)[1] == pytest.approx(best, abs=1e-9)


def test_pam_path_reaches_swap_optimum():
    pts = np.random.default_rng(0).normal(size=(40, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    medoids, labels, cost = k_medoids(d, 5, 0)  # C(40, 5) is beyond enumeration
    assert cost == pytest.approx(medoid_cost(d, medoids))
    assert set(labels[medoids]) == set(range(5))
    for slot in range(5):
        for cand in set(range(40)) - set(medoids):
            trial = medoids[:slot] + [cand] + medoids[slot + 1:]
            assert medoid_cost(d, trial) >= cost - 1e-9


def test_cluster_attackers_recovers_groups():
    topo = build_ring(20)
    ids = [0, 1, 2, 10, 11, 12]
    m = topo.hops[np.ix_(ids, ids)].astype(float)
    a = cluster_attackers(m, 2, ids)
    assert a.clusters == ((0, 1, 2), (10, 11, 12))
    assert a.cluster_of(11) == 1 and "cluster 0: 0 1 2" in a.as_text()
    with pytest.raises(InvalidArgument):
        cluster_attackers(m, 7, ids)
    with pytest.raises(InvalidArgument):
        cluster_attackers(m[:5, :5], 2, ids)


def test_stamped_pixels_cover_trigger():
    t = _trigger()
    x = stamp_pixels(np.zeros((2, 144)), t)
    assert set(np.flatnonzero(x[0])) == set(t.flat_index)
