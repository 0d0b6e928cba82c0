"""Decentralized training over a communication graph.

One round = ``local_steps`` SGD steps per client followed by one exchange
with graph neighbors.  Two exchange protocols are available:

``dpsgd``
    synchronous; every client replaces its parameters with the mixing-weighted
    average of its own and its neighbors' post-training parameters.
``async_gossip``
    a seeded subset of clients wakes up, trains, averages with whatever copies
    of its neighbors' models it last received (possibly stale) and pushes its
    new model to them.  Active clients commit in a seeded order.

Every client draws randomness only from its own generator, so results do not
depend on the order in which independent client work is executed.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attack as atk
from .data import ImageSet, signature_probes
from .defense import DefenseSpec, clip_incoming, median_aggregate
from .errors import InvalidArgument, NumericalFailure
from .nn import ModelParams, init_mlp, predict
from .topology import Topology, metropolis_weights

PROTOCOLS = ("dpsgd", "async_gossip")


@dataclass
class SimConfig:
    protocol: str = "dpsgd"
    total_rounds: int = 150
    detection_rounds: int = 50
    local_steps: int = 2
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    async_activation_fraction: float = 0.5
    hidden_dim: int = 32
    eval_every: int = 10
    eval_samples: int = 500
    probe_jitter: int = 8
    probe_max_drop: float = 0.8
    signature_mass: float = 0.7

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InvalidArgument(f"unknown protocol {self.protocol!r}")
        if self.total_rounds < 1 or self.detection_rounds < 1:
            raise InvalidArgument("round counts must be positive")
        if self.detection_rounds >= self.total_rounds:
            raise InvalidArgument("detection_rounds must be smaller than total_rounds")
        if self.local_steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidArgument("local_steps >= 0, batch_size >= 1 and lr >= 0 required")
        if not 0.0 < self.async_activation_fraction <= 1.0:
            raise InvalidArgument("async_activation_fraction must lie in (0, 1]")
        if self.eval_every < 1:
            raise InvalidArgument("eval_every must be positive")


@dataclass
class ClientState:
    id: int
    params: ModelParams
    shard: ImageSet
    role: str = "honest"
    inbox: dict[int, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator | None = None
    last_loss: float = float("nan")

    @property
    def is_attacker(self) -> bool:
        return self.role == "attacker"


@dataclass
class SignalSequence:
    signature_owner: int
    observer: int
    values: np.ndarray


@dataclass
class MetricsLog:
    """Per-(round, client) measurements plus run metadata.

    Missing measurements (no evaluation that round, no signature recorded)
    are NaN and are written as empty CSV cells.
    """
    owners: tuple[int, ...] = ()
    rounds: list[int] = field(default_factory=list)
    clients: list[int] = field(default_factory=list)
    main_acc: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    poison_acc: list[tuple[float, ...]] = field(default_factory=list)
    asr: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    honest: tuple[int, ...] = ()
    sequences: dict[tuple[int, int], SignalSequence] = field(default_factory=dict)
    distance_matrix: np.ndarray | None = None
    clusters: atk.ClusterAssignment | None = None

    def append(self, round_index, client, main_acc, loss, poison, asr):
        self.rounds.append(round_index)
        self.clients.append(client)
        self.main_acc.append(main_acc)
        self.loss.append(loss)
        self.poison_acc.append(tuple(poison))
        self.asr.append(asr)

    def __len__(self):
        return len(self.rounds)

    @property
    def header(self) -> list[str]:
        return (["round", "client", "main_acc", "loss"]
                + [f"poison_acc_sig_{o}" for o in self.owners] + ["asr"])

    def rows(self):
        for i in range(len(self)):
            yield ([self.rounds[i], self.clients[i], self.main_acc[i], self.loss[i]]
                   + list(self.poison_acc[i]) + [self.asr[i]])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for row in self.rows():
                w.writerow([_fmt(v) for v in row])

    def column(self, name: str) -> np.ndarray:
        if name.startswith("poison_acc_sig_"):
            k = self.owners.index(int(name.rsplit("_", 1)[1]))
            return np.array([p[k] for p in self.poison_acc])
        return np.asarray(getattr(self, name), dtype=np.float64)

    def _final(self, values: list[float], honest_only: bool) -> float:
        vals = np.asarray(values, dtype=np.float64)
        rounds = np.asarray(self.rounds)
        clients = np.asarray(self.clients)
        have = ~np.isnan(vals)
        if honest_only and self.honest:
            have &= np.isin(clients, self.honest)
        if not have.any():
            return float("nan")
        last = rounds[have].max()
        return float(vals[have & (rounds == last)].mean())

    def final_asr(self) -> float:
        """Mean ASR over honest clients at the last evaluated round."""
        return self._final(self.asr, True)

    def final_acc(self) -> float:
        return self._final(self.main_acc, True)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or np.isnan(v):
        return ""
    return f"{float(v):.6f}"


# ---------------------------------------------------------------- pieces

def measure_poison_accuracy(client: ClientState | ModelParams, probes: np.ndarray, targets) -> float:
    """Fraction of probe images the client's model assigns to their target label."""
    params = client.params if isinstance(client, ClientState) else client
    probes = np.atleast_2d(probes)
    if probes.shape[0] == 0:
        raise InvalidArgument("no probes")
    targets = np.broadcast_to(np.asarray(targets), (probes.shape[0],))
    return float(np.mean(predict(params, probes) == targets))


def init_clients(topology: Topology, shards: list[ImageSet], config: SimConfig,
                 attackers=(), num_classes: int | None = None) -> list[ClientState]:
    """All clients start from one shared seeded model, as after a common initialization."""
    if len(shards) != topology.node_count:
        raise InvalidArgument(f"{len(shards)} shards for {topology.node_count} clients")
    num_classes = num_classes or max(s.num_classes for s in shards)
    base = init_mlp(shards[0].dim, config.hidden_dim, num_classes, config.seed)
    clients = []
    for i, shard in enumerate(shards):
        c = ClientState(i, base.copy(), shard, "attacker" if i in attackers else "honest",
                        rng=np.random.default_rng([config.seed, i, 0xC11E]))
        c.inbox = {j: base.vector.copy() for j in topology.neighbors[i]}
        clients.append(c)
    return clients


def _local_train(c: ClientState, config: SimConfig, job) -> None:
    """``job`` is None (honest), ("signature", sig) or ("trigger", trigger, tau, fraction)."""
    losses = []
    p = c.params
    for _ in range(config.local_steps):
        if job is None:
            p, loss = atk.honest_step(p, c.shard, config.lr, c.rng, config.batch_size)
        elif job[0] == "signature":
            p, loss = atk.signature_step(p, c.shard, job[1], config.lr, c.rng, config.batch_size,
                                         config.signature_mass)
        else:
            _, trig, tau, frac = job
            p, loss = atk.attacker_train_step(p, c.shard, trig, tau, frac, config.lr, c.rng, config.batch_size)
        losses.append(loss)
    c.params = p
    c.last_loss = float(np.mean(losses)) if losses else float("nan")


def _aggregate(own: np.ndarray, nbr_ids, nbr_vecs: np.ndarray, weights_row: np.ndarray,
               self_id: int, defense: DefenseSpec) -> np.ndarray:
    if defense.kind == "neighbor_median":
        return median_aggregate(own, nbr_vecs)
    if defense.kind == "norm_clip":
        nbr_vecs = clip_incoming(own, nbr_vecs, defense.threshold)
    out = weights_row[self_id] * own
    for j, v in zip(nbr_ids, nbr_vecs):
        out = out + weights_row[j] * v
    return out


def _check_finite(clients, round_index):
    for c in clients:
        if not np.all(np.isfinite(c.params.vector)):
            raise NumericalFailure(f"non-finite parameters at client {c.id} in round {round_index}",
                                   c.id, round_index)


def run_round_dpsgd(clients: list[ClientState], topology: Topology, mixing: np.ndarray,
                    config: SimConfig, round_index: int, jobs=None,
                    defense: DefenseSpec = DefenseSpec()) -> list[ClientState]:
    jobs = jobs or {}
    for c in clients:
        _local_train(c, config, jobs.get(c.id))
    snapshot = np.stack([c.params.vector for c in clients])
    if defense.kind == "none":
        mixed = mixing @ snapshot
    else:
        mixed = np.empty_like(snapshot)
        for c in clients:
            nb = topology.neighbors[c.id]
            mixed[c.id] = _aggregate(snapshot[c.id], nb, snapshot[list(nb)], mixing[c.id], c.id, defense)
    for c in clients:
        c.params = c.params.with_vector(mixed[c.id])
        for j in topology.neighbors[c.id]:
            c.inbox[j] = snapshot[j]
    _check_finite(clients, round_index)
    return clients


def run_round_async(clients: list[ClientState], topology: Topology, mixing: np.ndarray,
                    config: SimConfig, round_index: int, jobs=None,
                    defense: DefenseSpec = DefenseSpec()) -> list[ClientState]:
    jobs = jobs or {}
    n = len(clients)
    rng = np.random.default_rng([config.seed, round_index, 0xA5])
    n_active = max(1, int(round(config.async_activation_fraction * n)))
    commit_order = rng.permutation(n)[:n_active]
    for cid in commit_order:
        c = clients[cid]
        _local_train(c, config, jobs.get(c.id))
        nb = topology.neighbors[c.id]
        nbr_vecs = np.stack([c.inbox[j] for j in nb])
        new = _aggregate(c.params.vector, nb, nbr_vecs, mixing[c.id], c.id, defense)
        c.params = c.params.with_vector(new)
        for j in nb:
            clients[j].inbox[c.id] = new
    _check_finite(clients, round_index)
    return clients


# ---------------------------------------------------------------- full run

def _eval_subset(test: ImageSet, config: SimConfig) -> ImageSet:
    if len(test) <= config.eval_samples:
        return test
    idx = np.random.default_rng([config.seed, 0xE5A1]).permutation(len(test))[:config.eval_samples]
    return test[np.sort(idx)]


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def run_simulation(topology: Topology, shards: list[ImageSet], test: ImageSet, plan: atk.AttackPlan,
                   config: SimConfig, defense: DefenseSpec = DefenseSpec(),
                   detection_only: bool = False, oracle_distances: bool = False,
                   num_classes: int | None = None) -> MetricsLog:
    """Run detection, clustering and the trigger attack; return the metrics log.

    With ``detection_only`` the run stops after the detection phase.  With
    ``oracle_distances`` cluster DBA groups attackers using true hop
    distances instead of the regressor's predictions.
    """
    attackers = plan.attacker_ids
    for a in attackers:
        topology.check_node(a)
    num_classes = num_classes or max(max(s.num_classes for s in shards), test.num_classes)
    clients = init_clients(topology, shards, config, attackers, num_classes)
    mixing = metropolis_weights(topology)
    step = run_round_dpsgd if config.protocol == "dpsgd" else run_round_async
    eval_set = _eval_subset(test, config)
    trigger = plan.trigger

    sigs = plan.attackers.signatures if plan.attackers else {}
    probes = {o: signature_probes(sigs[o], config.probe_jitter, config.seed, config.probe_max_drop)
              for o in attackers}
    traces = {(o, i): [] for o in attackers for i in range(len(clients))}

    log = MetricsLog(owners=tuple(attackers),
                     honest=tuple(c.id for c in clients if not c.is_attacker))
    log.metadata = {
        "topology": topology.kind,
        "topology_hash": topology.content_hash(),
        "sim_config": asdict(config),
        "strategy": plan.strategy,
        "attackers": list(attackers),
        "num_clusters": plan.num_clusters,
        "poison_fraction": plan.attackers.poison_fraction if plan.attackers else 0.0,
        "defense": defense.describe(),
        "pseudo_labels": {str(o): sigs[o].pseudo_label for o in attackers},
    }
    if trigger is not None:
        log.metadata["trigger"] = {"stamps": len(trigger.pattern), "pixel_ratio": trigger.pixel_ratio(),
                                   "target_label": trigger.target_label, "size": trigger.size,
                                   "gap": trigger.gap, "shift": list(trigger.shift)}
    log.metadata["config_hash"] = _hash_json({k: v for k, v in log.metadata.items()})

    last = config.detection_rounds if detection_only else config.total_rounds
    fixed = None
    if plan.strategy == "centralized":
        fixed = atk.centralized_assignment(attackers, trigger)
    elif plan.strategy == "naive_dba":
        fixed = atk.naive_dba_assignment(attackers, trigger)

    try:
        for r in range(last):
            detecting = r < config.detection_rounds
            if r == config.detection_rounds and plan.strategy == "cluster_dba":
                _cluster(log, traces, topology, plan, config, oracle_distances)
            jobs = {}
            if detecting:
                jobs = {a: ("signature", sigs[a]) for a in attackers}
            elif plan.strategy != "none":
                if fixed is None:
                    fixed_round = atk.assign_triggers(log.clusters, trigger, r - config.detection_rounds, config.seed)
                else:
                    fixed_round = fixed
                frac = plan.attackers.poison_fraction
                jobs = {a: ("trigger", fixed_round[a], trigger.target_label, frac) for a in attackers}
            step(clients, topology, mixing, config, r, jobs, defense)

            evaluate = (r + 1) % config.eval_every == 0 or r == last - 1
            for c in clients:
                poison = []
                for o in attackers:
                    if detecting:
                        v = measure_poison_accuracy(c, probes[o], sigs[o].pseudo_label)
                        traces[(o, c.id)].append(v)
                    else:
                        v = float("nan")
                    poison.append(v)
                acc = asr = float("nan")
                if evaluate:
                    acc = atk.clean_accuracy(c.params, eval_set)
                    if trigger is not None:
                        asr = atk.attack_success_rate(c.params, eval_set, trigger, trigger.target_label)
                log.append(r, c.id, acc, c.last_loss, poison, asr)
    except NumericalFailure as exc:
        exc.partial_log = log
        raise
    finally:
        log.sequences = {(o, i): SignalSequence(o, i, np.array(v)) for (o, i), v in traces.items()}
    return log


def _cluster(log: MetricsLog, traces: dict, topology: Topology, plan: atk.AttackPlan,
             config: SimConfig, oracle: bool) -> None:
    ids = list(plan.attacker_ids)
    if oracle or plan.regressor is None:
        m = topology.hops[np.ix_(ids, ids)].astype(np.float64)
    else:
        seqs = {(o, i): np.array(traces[(o, i)]) for o in ids for i in ids}
        m = atk.build_distance_matrix(seqs, plan.regressor, ids)
    m = atk.inject_distance_error(m, plan.distance_noise, config.seed)
    log.distance_matrix = m
    log.clusters = atk.cluster_attackers(m, plan.num_clusters, ids, config.seed)
    log.metadata["clusters"] = [list(c) for c in log.clusters.clusters]
    log.metadata["medoids"] = list(log.clusters.medoids)
    log.metadata["distance_source"] = "oracle" if (oracle or plan.regressor is None) else "regressor"


def write_sidecar(log: MetricsLog, path, extra: dict | None = None) -> None:
    meta = dict(log.metadata)
    if extra:
        meta.update(extra)
    meta["final_asr"] = log.final_asr()
    meta["final_acc"] = log.final_acc()
    if log.distance_matrix is not None:
        meta["distance_matrix"] = [[round(float(v), 6) for v in row] for row in log.distance_matrix]
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)
