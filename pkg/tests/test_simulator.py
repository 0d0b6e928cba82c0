import numpy as np
import pytest

from dfl_backdoor.attack import AttackerSet, AttackPlan
from dfl_backdoor.data import make_signatures, make_synthetic, make_trigger, shard_iid, signature_probes
from dfl_backdoor.defense import DefenseSpec
from dfl_backdoor.errors import InvalidArgument, NumericalFailure
from dfl_backdoor.simulator import (SimConfig, init_clients, measure_poison_accuracy, run_round_async,
                                    run_round_dpsgd, run_simulation, write_sidecar)
from dfl_backdoor.topology import build_clique_ring, build_grid, build_ring, metropolis_weights


def _setup(n=8, seed=0):
    d = make_synthetic(10, 40, 12, seed)
    return d, shard_iid(d, n, seed)


@pytest.mark.parametrize("topo", [build_ring(16), build_grid(4, 4), build_clique_ring(4, 4)], ids=str)
def test_gossip_preserves_mean(topo):
    d, shards = _setup(16)
    cfg = SimConfig(local_steps=0, seed=1)
    clients = init_clients(topo, shards, cfg)
    rng = np.random.default_rng(0)
    for c in clients:
        c.params = c.params.with_vector(rng.normal(size=c.params.size))
    mean0 = np.mean([c.params.vector for c in clients], axis=0)
    w = metropolis_weights(topo)
    for r in range(100):
        run_round_dpsgd(clients, topo, w, cfg, r)
    mean = np.mean([c.params.vector for c in clients], axis=0)
    assert np.max(np.abs(mean - mean0)) < 1e-10
    spread = np.std([c.params.vector for c in clients], axis=0).max()
    assert spread < 0.5


def test_async_round_touches_fraction():
    topo = build_ring(8)
    _, shards = _setup(8)
    cfg = SimConfig(protocol="async_gossip", async_activation_fraction=0.25, seed=0)
    clients = init_clients(topo, shards, cfg)
    before = [c.params.vector.copy() for c in clients]
    run_round_async(clients, topo, metropolis_weights(topo), cfg, 0)
    changed = [not np.array_equal(b, c.params.vector) for b, c in zip(before, clients)]
    assert sum(changed) == 2


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SimConfig(protocol="flood")
    with pytest.raises(InvalidArgument):
        SimConfig(total_rounds=10, detection_rounds=10)
    with pytest.raises(InvalidArgument):
        init_clients(build_ring(4), _setup(3)[1], SimConfig())


def _plan(strategy, ids=(0, 4), k=1):
    sigs = make_signatures(ids, 12, 10, 0)
    t = make_trigger((12, 12), 0, blocks=2, size=2, gap=1)
    return AttackPlan(strategy, t, AttackerSet(ids, sigs, 0.25, 0), num_clusters=k)


def test_run_is_deterministic(tmp_path):
    d, shards = _setup(8)
    cfg = SimConfig(total_rounds=6, detection_rounds=3, eval_every=3, seed=2)
    logs = [run_simulation(build_ring(8), shards, d, _plan("cluster_dba", k=2), cfg, oracle_distances=True)
            for _ in range(2)]
    for i, log in enumerate(logs):
        log.write_csv(tmp_path / f"m{i}.csv")
        write_sidecar(log, tmp_path / f"s{i}.json")
    assert (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()
    assert (tmp_path / "s0.json").read_bytes() == (tmp_path / "s1.json").read_bytes()
    assert len(logs[0]) == 6 * 8
    assert logs[0].clusters.clusters == ((0,), (4,))
    header = (tmp_path / "m0.csv").read_text().splitlines()[0]
    assert header == "round,client,main_acc,loss,poison_acc_sig_0,poison_acc_sig_4,asr"


def test_detection_only_records_sequences():
    d, shards = _setup(8)
    cfg = SimConfig(total_rounds=6, detection_rounds=4, seed=0)
    log = run_simulation(build_ring(8), shards, d, _plan("cluster_dba"), cfg, detection_only=True)
    assert max(log.rounds) == 3
    assert set(log.sequences) == {(o, i) for o in (0, 4) for i in range(8)}
    assert all(len(s.values) == 4 for s in log.sequences.values())


def test_untrained_poison_accuracy_near_chance():
    d, shards = _setup(8)
    cfg = SimConfig(seed=3)
    sigs = make_signatures(range(10), 12, 10, 3)
    clients = init_clients(build_ring(8), shards, cfg, num_classes=10)
    vals = [measure_poison_accuracy(c, signature_probes(s, 8, 0), s.pseudo_label)
            for c in clients for s in sigs.values()]
    assert np.mean(vals) == pytest.approx(0.1, abs=0.08)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_reports_client():
    d, shards = _setup(8)
    cfg = SimConfig(total_rounds=4, detection_rounds=1, lr=1e300, seed=0)
    with pytest.raises(NumericalFailure) as e:
        run_simulation(build_ring(8), shards, d, AttackPlan("none"), cfg)
    assert e.value.client is not None and e.value.round_index == 0
    assert len(e.value.partial_log) == 0


def test_defended_run():
    d, shards = _setup(8)
    cfg = SimConfig(total_rounds=4, detection_rounds=1, eval_every=2, seed=0)
    for spec in (DefenseSpec("norm_clip", 0.5), DefenseSpec("neighbor_median")):
        log = run_simulation(build_ring(8), shards, d, _plan("centralized"), cfg, spec)
        assert 0 <= log.final_asr() <= 1 and log.metadata["defense"] == spec.describe()
