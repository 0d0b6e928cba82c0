"""Backdoor strategies: centralized trigger, naive DBA, and cluster-based DBA.

Cluster-based DBA runs in two phases.  While ``t < detection_rounds`` each
attacker trains a private signature image toward a pseudo-label and all
attackers record how strongly every signature is recognised by their own
models.  The per-pair sequences are turned into a distance matrix by a
pretrained regressor, attackers are grouped with k-medoids, and from then on
each cluster splits the global trigger among its members, reshuffling the
pieces every round.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .data import (ImageSet, LocalTrigger, SignatureImage, TriggerSpec, decompose_trigger,
                   stamp_pixels)
from .errors import InvalidArgument
from .nn import ModelParams, cross_entropy_grad, predict, sgd_step

STRATEGIES = ("none", "centralized", "naive_dba", "cluster_dba")
SIGNATURE_MASS = 0.7


@dataclass
class AttackerSet:
    ids: tuple[int, ...]
    signatures: dict[int, SignatureImage]
    poison_fraction: float
    target_label: int

    def __post_init__(self):
        self.ids = tuple(sorted(int(i) for i in self.ids))
        if len(set(self.ids)) != len(self.ids):
            raise InvalidArgument("duplicate attacker ids")
        if not 0.0 < self.poison_fraction <= 1.0:
            raise InvalidArgument("poison_fraction must lie in (0, 1]")
        if set(self.signatures) != set(self.ids):
            raise InvalidArgument("one signature per attacker required")


@dataclass
class AttackPlan:
    strategy: str
    trigger: TriggerSpec | None = None
    attackers: AttackerSet | None = None
    num_clusters: int = 1
    regressor: object | None = None  # anything with .predict(diffs) -> distances
    distance_noise: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"unknown strategy {self.strategy!r}")
        if self.strategy != "none" and (self.trigger is None or self.attackers is None):
            raise InvalidArgument(f"strategy {self.strategy} needs a trigger and attackers")
        if self.strategy == "cluster_dba" and not 1 <= self.num_clusters <= len(self.attackers.ids):
            raise InvalidArgument(f"num_clusters={self.num_clusters} must lie in 1..{len(self.attackers.ids)}")

    @property
    def attacker_ids(self) -> tuple[int, ...]:
        return self.attackers.ids if self.attackers is not None else ()


@dataclass
class ClusterAssignment:
    clusters: tuple[tuple[int, ...], ...]
    medoids: tuple[int, ...] = ()
    cost: float = 0.0

    def cluster_of(self, attacker: int) -> int:
        for k, members in enumerate(self.clusters):
            if attacker in members:
                return k
        raise KeyError(attacker)

    def as_text(self) -> str:
        lines = [f"medoids: {' '.join(map(str, self.medoids))}"]
        lines += [f"cluster {k}: {' '.join(map(str, c))}" for k, c in enumerate(self.clusters)]
        return "\n".join(lines)


@dataclass
class TriggerAssignment:
    triggers: dict[int, TriggerSpec | LocalTrigger] = field(default_factory=dict)

    def __getitem__(self, attacker: int):
        return self.triggers[attacker]

    def stamp_sets(self) -> dict[int, frozenset]:
        return {i: frozenset(t.stamps) for i, t in self.triggers.items()}


# ---------------------------------------------------------------- local training

def poisoned_batch(shard: ImageSet, trigger, target_label: int, poison_fraction: float,
                   rng: np.random.Generator, batch_size: int | None = None):
    """Minibatch whose first ``round(f * B)`` draws are stamped and relabelled.

    Returns ``(pixels, labels, poisoned_mask)`` in shuffled order.
    """
    if len(shard) == 0:
        raise InvalidArgument("empty shard")
    size = len(shard) if batch_size is None else min(batch_size, len(shard))
    idx = rng.choice(len(shard), size=size, replace=False)
    pixels = shard.pixels[idx].copy()
    labels = shard.labels[idx].copy()
    n_poison = int(round(poison_fraction * size))
    if n_poison and trigger is not None:
        pixels[:n_poison] = stamp_pixels(pixels[:n_poison], trigger)
        labels[:n_poison] = target_label
    mask = np.zeros(size, dtype=bool)
    mask[:n_poison] = trigger is not None
    order = rng.permutation(size)
    return pixels[order], labels[order], mask[order]


def honest_step(params: ModelParams, shard: ImageSet, lr: float, rng, batch_size: int):
    x, y, _ = poisoned_batch(shard, None, 0, 1.0, rng, batch_size)
    loss, grad = cross_entropy_grad(params, x, y)
    return sgd_step(params, grad, lr), loss


def attacker_train_step(params: ModelParams, shard: ImageSet, trigger, target_label: int,
                        poison_fraction: float, lr: float, rng, batch_size: int):
    """One SGD step on a partly poisoned minibatch."""
    x, y, _ = poisoned_batch(shard, trigger, target_label, poison_fraction, rng, batch_size)
    loss, grad = cross_entropy_grad(params, x, y)
    return sgd_step(params, grad, lr), loss


def signature_step(params: ModelParams, shard: ImageSet, signature: SignatureImage, lr: float,
                   rng, batch_size: int, mass: float = SIGNATURE_MASS):
    """One SGD step on a clean minibatch plus the signature image.

    The signature sample carries ``mass`` of the batch weight; the clean
    samples share the rest equally.
    """
    x, y, _ = poisoned_batch(shard, None, 0, 1.0, rng, batch_size)
    x = np.vstack([x, signature.pixels[None, :]])
    y = np.append(y, signature.pseudo_label)
    wts = np.full(y.size, (1.0 - mass) / (y.size - 1))
    wts[-1] = mass
    loss, grad = cross_entropy_grad(params, x, y, wts)
    return sgd_step(params, grad, lr), loss


# ---------------------------------------------------------------- evaluation

def attack_success_rate(model: ModelParams, test: ImageSet, trigger: TriggerSpec, target_label: int) -> float:
    """Share of non-target test images that the full trigger flips to the target."""
    keep = test.labels != target_label
    if not keep.any():
        raise InvalidArgument("every test image already carries the target label")
    stamped = stamp_pixels(test.pixels[keep], trigger)
    return float(np.mean(predict(model, stamped) == target_label))


def clean_accuracy(model: ModelParams, test: ImageSet) -> float:
    return float(np.mean(predict(model, test.pixels) == test.labels))


# ---------------------------------------------------------------- topology detection

def sequence_difference(sequences: dict, owner: int, observer: int) -> np.ndarray:
    """Owner-side trace of the owner's signature minus the observer-side trace."""
    try:
        own = sequences[(owner, owner)]
        seen = sequences[(owner, observer)]
    except KeyError as exc:
        raise InvalidArgument(f"missing signal sequence for pair {exc.args[0]}") from None
    own, seen = np.asarray(getattr(own, "values", own)), np.asarray(getattr(seen, "values", seen))
    if own.shape != seen.shape:
        raise InvalidArgument(f"sequence lengths differ for pair ({owner}, {observer})")
    return own - seen


def build_distance_matrix(sequences: dict, regressor, attackers) -> np.ndarray:
    """Predicted hop distances between attackers, indexed like ``sorted(attackers)``.

    ``sequences`` maps ``(owner, observer)`` to a poison-accuracy trace.
    """
    ids = sorted(attackers)
    n = len(ids)
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    m = np.zeros((n, n))
    if pairs:
        diffs = np.array([sequence_difference(sequences, ids[a], ids[b]) for a, b in pairs])
        preds = np.asarray(regressor.predict(diffs), dtype=np.float64)
        for (a, b), d in zip(pairs, preds):
            m[a, b] = d
    m = np.maximum(0.5 * (m + m.T), 0.0)
    np.fill_diagonal(m, 0.0)
    return m


def inject_distance_error(m: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Symmetric Gaussian perturbation of off-diagonal distances, clamped at zero."""
    if scale == 0:
        return m.copy()
    noise = np.random.default_rng([seed, 0xE77]).normal(0.0, scale, m.shape)
    noise = np.triu(noise, 1)
    out = np.maximum(m + noise + noise.T, 0.0)
    np.fill_diagonal(out, 0.0)
    return out


def _assign_to_medoids(d: np.ndarray, medoids: list[int]) -> np.ndarray:
    # argmin picks the first (lowest-index) medoid among ties
    labels = np.argmin(d[:, medoids], axis=1)
    labels[medoids] = np.arange(len(medoids))
    return labels


def _cost(d: np.ndarray, medoids: list[int]) -> float:
    return float(d[:, medoids].min(axis=1).sum())


def _pam_swap(d: np.ndarray, medoids: list[int]) -> list[int]:
    n = d.shape[0]
    medoids = sorted(medoids)
    best = _cost(d, medoids)
    improved = True
    while improved:
        improved = False
        for slot in range(len(medoids)):
            for cand in range(n):
                if cand in medoids:
                    continue
                trial = sorted(medoids[:slot] + [cand] + medoids[slot + 1:])
                c = _cost(d, trial)
                if c < best - 1e-12:
                    medoids, best, improved = trial, c, True
                    break
            if improved:
                break
    return medoids


def _pam_build(d: np.ndarray, k: int) -> list[int]:
    medoids = [int(np.argmin(d.sum(axis=1)))]
    while len(medoids) < k:
        nearest = d[:, medoids].min(axis=1)
        gains = [(-np.maximum(nearest - d[:, c], 0).sum(), c) for c in range(d.shape[0]) if c not in medoids]
        medoids.append(min(gains)[1])
    return medoids


_EXACT_LIMIT = 20000


def k_medoids(d: np.ndarray, k: int, seed: int = 0, n_init: int = 4) -> tuple[list[int], np.ndarray, float]:
    """k-medoids on a dissimilarity matrix.

    When there are at most ``_EXACT_LIMIT`` candidate medoid sets (always the
    case for attacker-sized inputs) the optimum is found by enumeration, the
    first set in lexicographic order winning ties.  Larger inputs use PAM:
    SWAP from the greedy BUILD start and from ``n_init - 1`` seeded random
    starts, keeping the cheapest result.
    Returns medoid indices, per-point cluster labels and total cost.
    """
    n = d.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgument(f"k={k} must lie in 1..{n}")
    if math.comb(n, k) <= _EXACT_LIMIT:
        best, best_cost = brute_force_medoids(d, k)
        return list(best), _assign_to_medoids(d, list(best)), best_cost
    rng = np.random.default_rng([seed, 0xC1])
    starts = [_pam_build(d, k)] + [list(rng.choice(n, size=k, replace=False)) for _ in range(n_init - 1)]
    best_medoids, best_cost = None, math.inf
    for start in starts:
        medoids = _pam_swap(d, [int(s) for s in start])
        c = _cost(d, medoids)
        if c < best_cost - 1e-12:
            best_medoids, best_cost = medoids, c
    return best_medoids, _assign_to_medoids(d, best_medoids), best_cost


def cluster_attackers(m: np.ndarray, k: int, attackers=None, seed: int = 0) -> ClusterAssignment:
    """Group attackers with k-medoids on a (predicted) distance matrix.

    Rows of ``m`` follow ``sorted(attackers)``; clusters come back ordered by
    their smallest member id.
    """
    m = np.asarray(m, dtype=np.float64)
    ids = sorted(attackers) if attackers is not None else list(range(m.shape[0]))
    if m.shape != (len(ids), len(ids)):
        raise InvalidArgument("distance matrix does not match the attacker list")
    if not 1 <= k <= len(ids):
        raise InvalidArgument(f"cannot form {k} clusters from {len(ids)} attackers")
    medoids, labels, cost = k_medoids(m, k, seed)
    groups = [tuple(ids[i] for i in np.flatnonzero(labels == c)) for c in range(k)]
    order = sorted(range(k), key=lambda c: groups[c][0])
    return ClusterAssignment(tuple(groups[c] for c in order), tuple(ids[medoids[c]] for c in order), cost)


def brute_force_medoids(m: np.ndarray, k: int) -> tuple[tuple[int, ...], float]:
    """Exhaustive optimum over all medoid sets."""
    best, best_cost = None, math.inf
    for combo in combinations(range(m.shape[0]), k):
        c = _cost(m, list(combo))
        if c < best_cost - 1e-12:
            best, best_cost = combo, c
    return best, best_cost


# ---------------------------------------------------------------- trigger distribution

_MAX_ENUMERATED = 6


def _unrank_permutation(rank: int, m: int) -> list[int]:
    items, out = list(range(m)), []
    for i in range(m, 0, -1):
        f = math.factorial(i - 1)
        out.append(items.pop(rank // f))
        rank %= f
    return out


def _round_permutation(m: int, cluster: int, attack_round: int, seed: int) -> list[int]:
    """Seeded permutation of ``m`` trigger parts for one cluster and round.

    For small clusters every block of ``m!`` rounds walks through all
    permutations in a freshly shuffled order, so each attacker holds each
    part equally often; larger clusters draw independent shuffles.
    """
    if m <= _MAX_ENUMERATED:
        total = math.factorial(m)
        block, pos = divmod(attack_round, total)
        order = np.random.default_rng([seed, cluster, block]).permutation(total)
        return _unrank_permutation(int(order[pos]), m)
    return list(np.random.default_rng([seed, cluster, attack_round, 1]).permutation(m))


def assign_triggers(assignment: ClusterAssignment, trigger: TriggerSpec, attack_round: int,
                    seed: int = 0) -> TriggerAssignment:
    out = {}
    for k, members in enumerate(assignment.clusters):
        members = sorted(members)
        parts = decompose_trigger(trigger, len(members))
        perm = _round_permutation(len(members), k, attack_round, seed)
        for attacker, p in zip(members, perm):
            out[attacker] = parts[p]
    return TriggerAssignment(out)


def centralized_assignment(attackers, trigger: TriggerSpec) -> TriggerAssignment:
    return TriggerAssignment({i: trigger for i in sorted(attackers)})


def naive_dba_assignment(attackers, trigger: TriggerSpec) -> TriggerAssignment:
    """Fixed split of the trigger: the j-th smallest attacker id always gets part j."""
    ids = sorted(attackers)
    parts = decompose_trigger(trigger, len(ids))
    return TriggerAssignment(dict(zip(ids, parts)))


def equal_budget_fraction(strategy: str, base_fraction: float, n_attackers: int, num_clusters: int) -> float:
    """Poison fraction giving the same stamped-pixel total as cluster DBA at ``base_fraction``.

    Per round cluster DBA stamps ``K`` full triggers' worth of pixels, the
    centralized attack ``|A|`` and naive DBA one.
    """
    if strategy == "cluster_dba" or strategy == "none":
        return base_fraction
    if strategy == "centralized":
        return base_fraction * num_clusters / n_attackers
    if strategy == "naive_dba":
        return base_fraction * num_clusters
    raise InvalidArgument(f"unknown strategy {strategy!r}")
