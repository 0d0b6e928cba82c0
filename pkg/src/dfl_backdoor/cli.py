"""Command line entry point: ``dfl-backdoor {run,pretrain,sweep,validate-config}``.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config or arguments,
3 output directory holds results of a different config, 4 simulation failure
(partial outputs are still written).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import experiment as ex
from .errors import InvalidArgument, NumericalFailure
from .simulator import write_sidecar
from .topology import build_topology

log = logging.getLogger("dfl_backdoor")

EXIT_CONFIG, EXIT_CONFLICT, EXIT_SIM = 2, 3, 4


class OutputConflict(Exception):
    pass


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("dfl_backdoor").joinpath("presets").iterdir()
                  if p.name.endswith(".ini"))


def preset_path(name: str) -> Path:
    path = resources.files("dfl_backdoor").joinpath("presets", f"{name}.ini")
    if not path.is_file():
        raise ex.ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}", "--preset")
    return Path(str(path))


def _config_source(args) -> Path:
    if bool(args.config) == bool(args.preset):
        raise ex.ConfigError("give exactly one of --config or --preset", "arguments")
    return Path(args.config) if args.config else preset_path(args.preset)


def _claim(out: Path, digest: str) -> None:
    """Refuse to write into ``out`` when it holds results of a different config."""
    stamp = out / "config.hash"
    if stamp.exists() and stamp.read_text().strip() != digest:
        raise OutputConflict(f"{out} holds results of config {stamp.read_text().strip()}, not {digest}")
    out.mkdir(parents=True, exist_ok=True)
    stamp.write_text(digest + "\n")


def _run_one(cfg: ex.ExperimentConfig, out: Path, plots: bool = True):
    _claim(out, cfg.config_hash())
    (out / "config.ini").write_text(cfg.to_ini())
    try:
        result = ex.run_experiment(cfg)
    except NumericalFailure as exc:
        partial = getattr(exc, "partial_log", None)
        if partial is not None:
            partial.write_csv(out / "metrics.csv")
            write_sidecar(partial, out / "metadata.json", {"failure": str(exc)})
        raise
    result.write_csv(out / "metrics.csv")
    write_sidecar(result, out / "metadata.json")
    if plots:
        from . import report
        report.asr_curves({cfg.name: result}, out / "asr.png")
        if result.owners:
            report.signal_decay(result, build_topology(cfg.topology), out / "signal_decay.png")
    return result


def _summary_row(name, cfg, result):
    return [name, cfg.attack.strategy, cfg.sim.protocol, cfg.data.source, cfg.attack.placement,
            cfg.defense.describe(), f"{result.final_asr():.6f}", f"{result.final_acc():.6f}"]


def _write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "strategy", "protocol", "data", "placement", "defense", "final_asr", "final_acc"])
        w.writerows(rows)


def cmd_run(args) -> int:
    cfg, variants, _ = ex.load_config(_config_source(args), args.seed)
    out = Path(args.out or f"runs/{cfg.name}")
    if not variants:
        result = _run_one(cfg, out)
        print(f"{cfg.name}: final_asr={result.final_asr():.4f} final_acc={result.final_acc():.4f}")
        return 0
    from . import report
    runs, logs = [], {}
    planned = [(name, cfg.with_overrides({**ov, "experiment.name": name})) for name, ov in variants.items()]
    for name, vcfg in planned:
        (out / name).mkdir(parents=True, exist_ok=True)
        stamp = out / name / "config.hash"
        if stamp.exists() and stamp.read_text().strip() != vcfg.config_hash():
            raise OutputConflict(f"{out / name} holds results of a different config")
    for name, vcfg in planned:
        log.info("run %s", name)
        result = _run_one(vcfg, out / name)
        logs[name] = result
        runs.append(_summary_row(name, vcfg, result))
        print(f"{name}: final_asr={result.final_asr():.4f} final_acc={result.final_acc():.4f}", flush=True)
    _write_summary(runs, out / "summary.csv")
    report.asr_curves(logs, out / "asr.png")
    report.summary_bars([(r[0], float(r[6]), float(r[7])) for r in runs], out / "summary.png")
    return 0


def cmd_sweep(args) -> int:
    from . import report
    cfg, _, cp = ex.load_config(_config_source(args), args.seed)
    axis, values = ex.sweep_variants(cp)
    out = Path(args.out or f"runs/{cfg.name}")
    rows = []
    for label, overrides in values:
        vcfg = cfg.with_overrides({**overrides, "experiment.name": f"{cfg.name}_{axis}_{label}"})
        result = _run_one(vcfg, out / f"{axis}_{label}", plots=False)
        value = next(iter(overrides.values()))
        rows.append((value, result.final_asr(), result.final_acc()))
        print(f"{axis}={value}: final_asr={rows[-1][1]:.4f} final_acc={rows[-1][2]:.4f}", flush=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "final_asr", "final_acc"])
        w.writerows([v, f"{a:.6f}", f"{c:.6f}"] for v, a, c in rows)
    report.sweep_plot(axis, rows, out / "sweep.png")
    return 0


def cmd_pretrain(args) -> int:
    from . import regressor as rg
    from . import report
    cfg, _, cp = ex.load_config(_config_source(args), args.seed)
    spec = ex.parse_pretrain(cp, cfg)
    out = Path(args.out or f"runs/{cfg.name}")
    digest = hashlib.sha256((cfg.config_hash() + json.dumps(asdict(spec), sort_keys=True))
                               .encode()).hexdigest()[:16]
    _claim(out, digest)
    samples = rg.generate_samples(spec.family, spec.n_runs, spec.attackers_per_run, cfg.sim, cfg.seed,
                                  spec.cap, spec.num_classes, spec.per_client, spec.side)
    train, held = rg.split_by_run(samples, spec.held_out_fraction, cfg.seed)
    if not held:
        raise ex.ConfigError("held-out set is empty; raise n_runs or held_out_fraction",
                             "pretrain.held_out_fraction")
    model = rg.train_distance_model(train, spec.epochs, spec.lr, cfg.seed, spec.hidden, spec.family,
                                    spec.cap, optimizer=spec.optimizer)
    rg.save_model(model, out / "distance_model.bin")
    rows = rg.evaluate_distance_model(model, held)
    mean = float(np.mean([s.true_distance for s in train]))
    base = rg.evaluate_distance_model(rg.ConstantPredictor(mean), held)
    rg.write_mae_csv(rows, out / "mae_by_distance.csv")
    rg.write_mae_csv(base, out / "mae_baseline.csv")
    with open(out / "training_curve.csv", "w") as fh:
        fh.write("epoch,mse\n")
        fh.writelines(f"{i},{v:.6f}\n" for i, v in enumerate(model.history))
    report.mae_by_distance(rows, out / "mae_by_distance.png", base)
    report.training_curve(model.history, out / "training_curve.png")
    overall = sum(n * m for _, n, m in rows) / sum(n for _, n, _ in rows)
    overall_base = sum(n * m for _, n, m in base) / sum(n for _, n, _ in base)
    print(f"{cfg.name}: samples={len(samples)} held_out={len(held)} mae={overall:.4f} "
          f"baseline_mae={overall_base:.4f} train_mse={model.train_mse:.4f}")
    return 0


def cmd_validate(args) -> int:
    cfg, variants, cp = ex.load_config(_config_source(args), args.seed)
    checks = [cfg.with_overrides(ov) for ov in variants.values()] or [cfg]
    if cp.has_section("sweep"):
        _, values = ex.sweep_variants(cp)
        checks = [cfg.with_overrides(ov) for _, ov in values]
    if cp.has_section("pretrain"):
        ex.parse_pretrain(cp, cfg)
        if not cp.has_section("attack"):
            checks = []
    for warning in sorted({w for c in checks for w in ex.make_plan_check(c)}):
        print(f"warning: {warning}", file=sys.stderr)
    print(f"ok {cfg.name} hash={cfg.config_hash()} runs={len(checks)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfl-backdoor", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    handlers = {"run": cmd_run, "pretrain": cmd_pretrain, "sweep": cmd_sweep, "validate-config": cmd_validate}
    for verb, fn in handlers.items():
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--preset", help=f"bundled config ({', '.join(preset_names())})")
        sp.add_argument("--out", help="output directory (default runs/<name>)")
        sp.add_argument("--seed", type=int, help="overrides experiment.seed")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidArgument, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputConflict as exc:
        print(f"refusing to overwrite: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except NumericalFailure as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
