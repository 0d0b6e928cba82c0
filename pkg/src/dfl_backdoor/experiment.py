"""Experiment configuration and assembly.

A config file is INI text with these sections (every key optional except
``experiment.seed``)::

    [experiment]  seed, name
    [topology]    spec                      e.g. ring:20, grid:4x4, clique_ring:4x4, random:16:3:7
    [data]        source (mnist|synthetic), n_train, n_test, num_classes, side, idx_dir
    [sim]         any SimConfig field
    [attack]      strategy, placement, num_clusters, poison_fraction, equal_budget,
                  regressor (model path | oracle), distance_noise, signature_density
    [trigger]     target_label, blocks, size, gap, shift, origin, pixel_value
    [defense]     kind, threshold
    [variant:NAME] dotted overrides such as ``attack.placement = adjacent:4``
    [sweep]       axis, values
    [pretrain]    family, n_runs, attackers_per_run, epochs, lr, held_out_fraction, cap, ...

Placements: ``uniform:k`` (evenly spaced), ``adjacent:k`` (nodes 0..k-1),
``groups:GxS`` (G runs of S consecutive nodes spread around the node range),
``random:k`` (seeded) or an explicit comma-separated node list.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from .data import ImageSet, load_mnist_subset, make_signatures, make_synthetic, make_trigger, shard_iid
from .defense import DefenseSpec
from .errors import InvalidArgument
from .simulator import MetricsLog, SimConfig, run_simulation
from .topology import Topology, build_topology

SECTIONS = ("experiment", "topology", "data", "sim", "attack", "trigger", "defense")
SWEEP_AXES = ("size", "gap", "shift", "K", "distance_error")


class ConfigError(InvalidArgument):
    """Invalid experiment config; ``where`` names the section/key or line."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass
class DataSpec:
    source: str = "synthetic"
    n_train: int = 4000
    n_test: int = 1000
    num_classes: int = 10
    side: int = 12
    idx_dir: str = ""

    def __post_init__(self):
        if self.source not in ("mnist", "synthetic"):
            raise InvalidArgument(f"unknown data source {self.source!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise InvalidArgument("n_train and n_test must be positive")


@dataclass
class AttackSpec:
    strategy: str = "none"
    placement: str = "uniform:4"
    num_clusters: int = 2
    poison_fraction: float = 0.1
    equal_budget: bool = True
    regressor: str = "oracle"
    distance_noise: float = 0.0
    signature_density: float = 0.2

    def __post_init__(self):
        if self.strategy not in atk.STRATEGIES:
            raise InvalidArgument(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.poison_fraction <= 1.0:
            raise InvalidArgument("poison_fraction must lie in (0, 1]")
        if self.distance_noise < 0:
            raise InvalidArgument("distance_noise must be non-negative")


@dataclass
class TriggerConfig:
    target_label: int = 0
    blocks: int = 4
    size: int = 2
    gap: int = 2
    shift: tuple[int, int] = (0, 0)
    origin: tuple[int, int] = (0, 0)
    pixel_value: float = 1.0


@dataclass
class ExperimentConfig:
    seed: int
    name: str = "run"
    topology: str = "ring:16"
    data: DataSpec = field(default_factory=DataSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    defense: DefenseSpec = field(default_factory=DefenseSpec)

    def __post_init__(self):
        self.sim = replace(self.sim, seed=self.seed)

    def to_dict(self) -> dict:
        d = {"experiment": {"seed": self.seed, "name": self.name}, "topology": {"spec": self.topology}}
        for name in ("data", "sim", "attack", "trigger", "defense"):
            d[name] = asdict(getattr(self, name))
        d["sim"].pop("seed")
        return d

    def config_hash(self) -> str:
        """Hash of the canonical content; independent of key order in the source file."""
        d = self.to_dict()
        d["experiment"].pop("name")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, values in self.to_dict().items():
            cp[section] = {k: _format_value(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted ``section.key`` string overrides applied."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            if "." not in dotted:
                raise ConfigError("override keys look like section.key", dotted)
            section, key = dotted.split(".", 1)
            d.setdefault(section, {})[key] = value
        return from_dict(d)


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------- parsing

def _coerce(kind, raw, where: str):
    text = str(raw).strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in ("tuple[int, int]",):
            parts = [int(p) for p in text.replace(" ", "").split(",")]
            if len(parts) != 2:
                raise ValueError(text)
            return tuple(parts)
        return text
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {kind}", where) from None


def _build(cls, values: dict, section: str, skip=()):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {', '.join(sorted(known))})", f"{section}.{key}")
        kwargs[key] = raw if not isinstance(raw, str) else _coerce(known[key], raw, f"{section}.{key}")
    try:
        return cls(**kwargs)
    except InvalidArgument as exc:
        raise ConfigError(str(exc), section) from None


def from_dict(d: dict) -> ExperimentConfig:
    exp = dict(d.get("experiment", {}))
    if "seed" not in exp or str(exp["seed"]).strip() == "":
        raise ConfigError("missing required field", "experiment.seed")
    seed = _coerce(int, exp.pop("seed"), "experiment.seed")
    name = str(exp.pop("name", "run"))
    if exp:
        raise ConfigError("unknown key", f"experiment.{next(iter(exp))}")
    topo = dict(d.get("topology", {}))
    spec = str(topo.pop("spec", "ring:16"))
    if topo:
        raise ConfigError("unknown key", f"topology.{next(iter(topo))}")
    try:
        build_topology(spec)
    except (InvalidArgument, RuntimeError) as exc:
        raise ConfigError(str(exc), "topology.spec") from None
    sim_values = dict(d.get("sim", {}))
    if "seed" in sim_values:
        raise ConfigError("set the seed in [experiment]", "sim.seed")
    return ExperimentConfig(
        seed=seed, name=name, topology=spec,
        data=_build(DataSpec, d.get("data", {}), "data"),
        sim=_build(SimConfig, sim_values, "sim"),
        attack=_build(AttackSpec, d.get("attack", {}), "attack"),
        trigger=_build(TriggerConfig, d.get("trigger", {}), "trigger"),
        defense=_build(DefenseSpec, d.get("defense", {}), "defense"),
    )


def read_ini(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], f"line {line}" if line else "") from None
    return cp


def parse_config(text: str) -> tuple[ExperimentConfig, dict, configparser.ConfigParser]:
    """Parse config text into the base experiment, named variants and the raw parser."""
    cp = read_ini(text)
    known = set(SECTIONS) | {"sweep", "pretrain", "report"}
    base = {}
    variants = {}
    for section in cp.sections():
        if section.startswith("variant:"):
            variants[section.split(":", 1)[1].strip()] = dict(cp[section])
        elif section in known:
            if section in SECTIONS:
                base[section] = dict(cp[section])
        else:
            raise ConfigError("unknown section", f"[{section}]")
    cfg = from_dict(base)
    for name, overrides in variants.items():
        cfg.with_overrides(overrides)  # validate early
    return cfg, variants, cp


def load_config(path, seed: int | None = None):
    text = Path(path).read_text()
    if seed is not None:
        cp = read_ini(text)
        if not cp.has_section("experiment"):
            cp.add_section("experiment")
        cp["experiment"]["seed"] = str(seed)
        buf = io.StringIO()
        cp.write(buf)
        text = buf.getvalue()
    return parse_config(text)


# ---------------------------------------------------------------- assembly

def place_attackers(spec: str, n: int, seed: int) -> tuple[int, ...]:
    text = spec.strip()
    kind, _, arg = text.partition(":")
    try:
        if kind == "uniform":
            k = int(arg)
            ids = [int(round(i * n / k)) % n for i in range(k)]
        elif kind == "adjacent":
            ids = list(range(int(arg)))
        elif kind == "groups":
            g, s = (int(v) for v in arg.lower().split("x"))
            ids = [int(round(j * n / g)) + m for j in range(g) for m in range(s)]
        elif kind == "random":
            ids = np.random.default_rng([seed, 0xA77]).choice(n, int(arg), replace=False).tolist()
        else:
            ids = [int(v) for v in text.split(",")]
    except ValueError:
        raise InvalidArgument(f"bad placement {spec!r}") from None
    if not ids or len(set(ids)) != len(ids) or min(ids) < 0 or max(ids) >= n:
        raise InvalidArgument(f"placement {spec!r} does not give distinct nodes in [0, {n})")
    return tuple(sorted(ids))


def load_data(spec: DataSpec, seed: int) -> tuple[ImageSet, ImageSet]:
    if spec.source == "mnist":
        return load_mnist_subset(spec.n_train, spec.n_test, seed, spec.idx_dir or None)
    total = spec.n_train + spec.n_test
    per_class = -(-total // spec.num_classes)
    full = make_synthetic(spec.num_classes, per_class, spec.side, seed)
    return full[np.arange(spec.n_train)], full[np.arange(spec.n_train, total)]


def make_plan(cfg: ExperimentConfig, topology: Topology, image_shape, num_classes: int) -> atk.AttackPlan:
    a = cfg.attack
    ids = place_attackers(a.placement, topology.node_count, cfg.seed)
    t = cfg.trigger
    trigger = make_trigger(image_shape, t.target_label, blocks=t.blocks, size=t.size, gap=t.gap,
                           shift=t.shift, pixel_value=t.pixel_value, origin=t.origin)
    k = min(a.num_clusters, len(ids))
    frac = a.poison_fraction
    if a.equal_budget:
        frac = atk.equal_budget_fraction(a.strategy, a.poison_fraction, len(ids), k)
        if not 0.0 < frac <= 1.0:
            raise InvalidArgument(f"equal budget needs poison fraction {frac:.3f} for {a.strategy}")
    sigs = make_signatures(ids, image_shape[0], num_classes, cfg.seed, a.signature_density)
    attackers = atk.AttackerSet(ids, sigs, frac, t.target_label)
    regressor = None
    if a.strategy == "cluster_dba" and a.regressor != "oracle":
        from .regressor import load_model
        if not Path(a.regressor).is_file():
            raise ConfigError(f"regressor file {a.regressor!r} not found (run the pretrain verb first)",
                              "attack.regressor")
        regressor = load_model(a.regressor)
    return atk.AttackPlan(a.strategy, trigger, attackers, k, regressor, a.distance_noise)


def make_plan_check(cfg: ExperimentConfig) -> list[str]:
    """Validate the attack side of a config without loading any data; returns warnings."""
    topology = build_topology(cfg.topology)
    side = 28 if cfg.data.source == "mnist" else cfg.data.side
    a = cfg.attack
    warnings = []
    if a.strategy == "cluster_dba" and a.regressor != "oracle" and not Path(a.regressor).is_file():
        warnings.append(f"attack.regressor: {a.regressor} does not exist yet")
    try:
        make_plan(replace(cfg, attack=replace(a, regressor="oracle")), topology, (side, side),
                  cfg.data.num_classes)
    except InvalidArgument as exc:
        raise ConfigError(str(exc), "attack/trigger") from None
    return warnings


def run_experiment(cfg: ExperimentConfig) -> MetricsLog:
    topology = build_topology(cfg.topology)
    train, test = load_data(cfg.data, cfg.seed)
    if train.height != train.width:
        raise InvalidArgument("square images required")
    shards = shard_iid(train, topology.node_count, cfg.seed)
    num_classes = max(train.num_classes, test.num_classes)
    plan = make_plan(cfg, topology, (train.height, train.width), num_classes)
    log = run_simulation(topology, shards, test, plan, cfg.sim, cfg.defense,
                         oracle_distances=cfg.attack.regressor == "oracle", num_classes=num_classes)
    log.metadata["experiment_hash"] = cfg.config_hash()
    log.metadata["experiment_name"] = cfg.name
    log.metadata["data_source"] = cfg.data.source
    return log


# ---------------------------------------------------------------- pretraining and sweeps

@dataclass
class PretrainSpec:
    family: str = "ring:16"
    n_runs: int = 600
    attackers_per_run: int = 2
    epochs: int = 300
    lr: float = 0.01
    hidden: int = 32
    held_out_fraction: float = 0.25
    cap: int = 6
    num_classes: int = 10
    per_client: int = 50
    side: int = 12
    optimizer: str = "adam"

    def __post_init__(self):
        if self.n_runs < 1 or self.epochs < 1:
            raise InvalidArgument("n_runs and epochs must be positive")
        if not 0.0 <= self.held_out_fraction < 1.0:
            raise InvalidArgument("held_out_fraction must lie in [0, 1)")


def parse_pretrain(cp: configparser.ConfigParser, cfg: ExperimentConfig) -> PretrainSpec:
    values = dict(cp["pretrain"]) if cp.has_section("pretrain") else {}
    return _build(PretrainSpec, values, "pretrain")


def sweep_variants(cp: configparser.ConfigParser) -> tuple[str, list[tuple[str, dict]]]:
    """The sweep axis and one ``(label, overrides)`` pair per axis value."""
    if not cp.has_section("sweep"):
        raise ConfigError("missing [sweep] section", "[sweep]")
    sec = dict(cp["sweep"])
    extra = set(sec) - {"axis", "values"}
    if extra:
        raise ConfigError("unknown key", f"sweep.{sorted(extra)[0]}")
    axis = sec.get("axis", "").strip()
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep needs exactly one axis from {', '.join(SWEEP_AXES)}", "sweep.axis")
    raw = sec.get("values", "")
    sep = ";" if ";" in raw or axis == "shift" else ","
    values = [v.strip() for v in raw.split(sep) if v.strip()]
    if not values:
        raise ConfigError("no values", "sweep.values")
    key = {"size": "trigger.size", "gap": "trigger.gap", "shift": "trigger.shift",
           "K": "attack.num_clusters", "distance_error": "attack.distance_noise"}[axis]
    return axis, [(v.replace(",", "_").replace(" ", ""), {key: v}) for v in values]
