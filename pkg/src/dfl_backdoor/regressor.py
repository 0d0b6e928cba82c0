"""Training data, training, evaluation and persistence for the hop-distance regressor.

The regressor maps the difference between two poison-accuracy traces
(owner-side minus observer-side, one value per detection round) to the hop
distance between the two attackers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import attack as atk
from .data import make_signatures, make_synthetic, shard_iid
from .errors import FormatError, InvalidArgument, NumericalFailure
from .nn import ModelParams, init_lstm, lstm_mse_grad, lstm_predict, params_from_bytes, params_to_bytes, sgd_step
from .simulator import SimConfig, run_simulation
from .topology import build_topology

MODEL_MAGIC = b"DFLDIST1"
DEFAULT_CAP = 6


@dataclass
class DistanceSample:
    sequence_diff: np.ndarray
    true_distance: int
    run: int = 0
    pair: tuple[int, int] = (0, 0)


@dataclass
class DistanceModel:
    params: ModelParams
    family: str
    seq_len: int
    in_mean: float
    in_std: float
    target_mean: float
    target_std: float
    cap: int = DEFAULT_CAP
    train_mse: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        consts = (self.in_mean, self.in_std, self.target_mean, self.target_std)
        if not all(np.isfinite(c) for c in consts) or self.in_std <= 0 or self.target_std <= 0:
            raise InvalidArgument("normalization constants must be finite with positive spread")

    def _check(self, diffs) -> np.ndarray:
        x = np.atleast_2d(np.asarray(diffs, dtype=np.float64))
        if x.shape[1] != self.seq_len:
            raise InvalidArgument(f"model expects sequences of length {self.seq_len}, got {x.shape[1]}")
        return x

    def predict(self, diffs, clip: bool = True) -> np.ndarray:
        """Predicted hop distances; with ``clip`` results are limited to ``[0, cap]``."""
        x = (self._check(diffs) - self.in_mean) / self.in_std
        y = lstm_predict(self.params, x) * self.target_std + self.target_mean
        return np.clip(y, 0.0, self.cap) if clip else y

    def folded(self) -> ModelParams:
        """Parameters with both normalizations folded into the first layer and the head."""
        w, b, head, head_b = (a.copy() for a in self.params.unpack())
        in_dim = w.shape[1] - w.shape[0] // 4
        b = b - w[:, :in_dim].sum(axis=1) * self.in_mean / self.in_std
        w[:, :in_dim] /= self.in_std
        head = head * self.target_std
        head_b = head_b * self.target_std + self.target_mean
        return self.params.with_vector(np.concatenate([w.ravel(), b, head, head_b]))

    def predict_raw(self, diffs) -> np.ndarray:
        """Unclipped prediction through the folded parameters (no explicit normalization)."""
        return lstm_predict(self.folded(), self._check(diffs))

    def metadata(self) -> dict:
        return {"family": self.family, "seq_len": self.seq_len, "in_mean": self.in_mean,
                "in_std": self.in_std, "target_mean": self.target_mean, "target_std": self.target_std,
                "cap": self.cap, "train_mse": self.train_mse}


# ---------------------------------------------------------------- sample generation

def _run_detection(family: str, run_seed: int, attackers_per_run: int, config: SimConfig,
                   num_classes: int, per_client: int, side: int, density: float = 0.2):
    topo = build_topology(family.replace("{seed}", str(run_seed)))
    if attackers_per_run > topo.node_count:
        raise InvalidArgument("more attackers than nodes")
    rng = np.random.default_rng([run_seed, 0xD15])
    attackers = sorted(int(a) for a in rng.choice(topo.node_count, attackers_per_run, replace=False))
    train = make_synthetic(num_classes, per_client * topo.node_count // num_classes, side, run_seed)
    test = make_synthetic(num_classes, 10, side, run_seed)
    shards = shard_iid(train, topo.node_count, run_seed)
    sigs = make_signatures(attackers, side, num_classes, run_seed, density)
    plan = atk.AttackPlan("none", attackers=atk.AttackerSet(attackers, sigs, 1.0, 0))
    cfg = replace(config, seed=run_seed, eval_every=config.detection_rounds,
                  total_rounds=max(config.total_rounds, config.detection_rounds + 1))
    log = run_simulation(topo, shards, test, plan, cfg, detection_only=True, num_classes=num_classes)
    return topo, attackers, log


def generate_samples(family: str, n_runs: int, attackers_per_run: int, config: SimConfig, seed: int,
                     cap: int = DEFAULT_CAP, num_classes: int = 10, per_client: int = 50,
                     side: int = 12) -> list[DistanceSample]:
    """Detection-phase simulations on seeded topologies with seeded attacker placement.

    ``family`` is a topology string such as ``ring:16``; ``{seed}`` inside it
    is replaced by the run seed (for random graphs).  One sample per ordered
    attacker pair with hop distance at most ``cap``.
    """
    if attackers_per_run < 2:
        raise InvalidArgument("need at least two attackers per run")
    samples = []
    for run in range(n_runs):
        run_seed = int(np.random.default_rng([seed, run]).integers(2 ** 31))
        topo, attackers, log = _run_detection(family, run_seed, attackers_per_run, config,
                                              num_classes, per_client, side)
        seqs = {k: v.values for k, v in log.sequences.items()}
        for a in attackers:
            for b in attackers:
                d = int(topo.hops[a, b])
                if a == b or d > cap:
                    continue
                diff = atk.sequence_difference(seqs, a, b)
                samples.append(DistanceSample(diff, d, run, (a, b)))
    return samples


def split_by_run(samples: list[DistanceSample], held_out_fraction: float, seed: int):
    runs = sorted({s.run for s in samples})
    rng = np.random.default_rng([seed, 0x5B])
    n_hold = max(1, int(round(held_out_fraction * len(runs)))) if held_out_fraction > 0 else 0
    held = set(rng.permutation(runs)[:n_hold].tolist())
    return [s for s in samples if s.run not in held], [s for s in samples if s.run in held]


# ---------------------------------------------------------------- training

def _stack(samples):
    x = np.array([s.sequence_diff for s in samples], dtype=np.float64)
    y = np.array([s.true_distance for s in samples], dtype=np.float64)
    return x, y


def train_distance_model(samples: list[DistanceSample], epochs: int = 300, lr: float = 0.01, seed: int = 0,
                         hidden: int = 32, family: str = "", cap: int = DEFAULT_CAP,
                         clip_norm: float = 0.0, optimizer: str = "adam",
                         batch_size: int = 0) -> DistanceModel:
    """Gradient training on mean squared error.

    ``batch_size`` of 0 means full-batch; otherwise each epoch visits a seeded
    shuffle of the samples in mini-batches.

    Inputs and targets are standardized with constants stored in the model.
    ``optimizer`` is ``"adam"`` (per-coordinate step sizes from running
    gradient moments) or ``"gd"`` (plain steps).  A positive ``clip_norm``
    rescales any gradient longer than it before the update.
    """
    if optimizer not in ("adam", "gd"):
        raise InvalidArgument(f"unknown optimizer {optimizer!r}")
    if len(samples) < 10:
        raise InvalidArgument(f"need at least 10 samples, got {len(samples)}")
    x, y = _stack(samples)
    in_mean, in_std = float(x.mean()), float(x.std()) or 1.0
    t_mean, t_std = float(y.mean()), float(y.std()) or 1.0
    xn = (x - in_mean) / in_std
    yn = (y - t_mean) / t_std
    params = init_lstm(1, hidden, seed)
    history = []
    m1 = np.zeros(params.size)
    m2 = np.zeros(params.size)
    step = 0
    rng = np.random.default_rng([seed, 0xB47C])
    n = len(yn)
    bs = n if batch_size <= 0 else min(batch_size, n)
    for _ in range(epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grad = lstm_mse_grad(params, xn[idx], yn[idx])
            if not np.isfinite(loss):
                raise NumericalFailure("distance regressor diverged")
            losses.append(loss * len(idx))
            norm = np.linalg.norm(grad)
            if clip_norm and norm > clip_norm:
                grad = grad * (clip_norm / norm)
            if optimizer == "adam":
                step += 1
                m1 = 0.9 * m1 + 0.1 * grad
                m2 = 0.999 * m2 + 0.001 * grad ** 2
                grad = (m1 / (1 - 0.9 ** step)) / (np.sqrt(m2 / (1 - 0.999 ** step)) + 1e-8)
            params = sgd_step(params, grad, lr)
        history.append(sum(losses) / n * t_std ** 2)
    final = float(np.mean((lstm_predict(params, xn) * t_std + t_mean - y) ** 2))
    if not np.isfinite(final):
        raise NumericalFailure("distance regressor diverged")
    history.append(final)
    return DistanceModel(params, family, x.shape[1], in_mean, in_std, t_mean, t_std, cap, final, history)


def evaluate_distance_model(model, held_out: list[DistanceSample]) -> list[tuple[int, int, float]]:
    """Mean absolute error per true distance: rows of ``(true_distance, count, mae)``."""
    if not held_out:
        raise InvalidArgument("held-out set is empty")
    x, y = _stack(held_out)
    pred = model.predict(x)
    rows = []
    for d in sorted(set(y.astype(int).tolist())):
        sel = y == d
        rows.append((d, int(sel.sum()), float(np.mean(np.abs(pred[sel] - d)))))
    return rows


def write_mae_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("true_distance,count,mae\n")
        for d, n, mae in rows:
            fh.write(f"{d},{n},{mae:.6f}\n")


class ConstantPredictor:
    """Baseline that always answers the mean training distance."""

    def __init__(self, value: float):
        self.value = value

    def predict(self, diffs, clip: bool = True):
        return np.full(np.atleast_2d(diffs).shape[0], self.value)


class OraclePredictor:
    """Returns stored true distances keyed by sequence bytes; for checking the evaluation path."""

    def __init__(self, samples):
        self._table = {np.asarray(s.sequence_diff).tobytes(): s.true_distance for s in samples}

    def predict(self, diffs, clip: bool = True):
        return np.array([self._table[np.asarray(row, dtype=np.float64).tobytes()] for row in np.atleast_2d(diffs)],
                        dtype=np.float64)


# ---------------------------------------------------------------- persistence

def model_to_bytes(model: DistanceModel) -> bytes:
    meta = json.dumps(model.metadata(), sort_keys=True).encode()
    return MODEL_MAGIC + params_to_bytes(model.params) + struct.pack("<Q", len(meta)) + meta


def save_model(model: DistanceModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> DistanceModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MODEL_MAGIC:
        raise FormatError("not a distance-model file", 0)
    params, pos = params_from_bytes(buf, 8)
    if pos + 8 > len(buf):
        raise FormatError("missing metadata footer", pos)
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if pos + n != len(buf):
        raise FormatError(f"metadata footer length {n} does not match file size", pos)
    try:
        meta = json.loads(buf[pos:].decode())
        return DistanceModel(params, meta["family"], int(meta["seq_len"]), meta["in_mean"], meta["in_std"],
                             meta["target_mean"], meta["target_std"], int(meta["cap"]), meta["train_mse"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad metadata footer: {exc}", pos) from exc
