"""Figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def asr_curves(logs: dict, path) -> None:
    """Mean honest-client ASR and clean accuracy against round, one line per run."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, log in logs.items():
        rounds = np.asarray(log.rounds)
        clients = np.asarray(log.clients)
        honest = np.isin(clients, log.honest) if log.honest else np.ones(len(rounds), bool)
        for ax, values in ((ax1, log.asr), (ax2, log.main_acc)):
            v = np.asarray(values, dtype=np.float64)
            keep = honest & ~np.isnan(v)
            xs = np.unique(rounds[keep])
            ax.plot(xs + 1, [v[keep & (rounds == x)].mean() for x in xs], marker="o", ms=3, label=name)
    ax1.set(xlabel="round", ylabel="attack success rate", ylim=(0, 1))
    ax2.set(xlabel="round", ylabel="clean accuracy", ylim=(0, 1))
    ax1.legend(fontsize=8)
    _save(fig, path)


def signal_decay(log, topology, path) -> None:
    """Per-observer mean poison accuracy for each signature owner, against hop distance."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for owner in log.owners:
        hops = [topology.hops[owner, i] for i in range(topology.node_count)]
        means = [log.sequences[(owner, i)].values.mean() for i in range(topology.node_count)]
        ax.scatter(hops, means, s=12, label=f"signature {owner}")
    ax.set(xlabel="hop distance from owner", ylabel="mean poison accuracy", ylim=(-0.05, 1.05))
    if len(log.owners) <= 8:
        ax.legend(fontsize=7)
    _save(fig, path)


def mae_by_distance(rows, path, baseline=None) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    d = [r[0] for r in rows]
    ax.bar(d, [r[2] for r in rows], color="tab:blue", label="regressor")
    if baseline is not None:
        ax.plot(d, [b[2] for b in baseline], "k--", marker="x", label="constant mean")
        ax.legend(fontsize=8)
    ax.set(xlabel="true hop distance", ylabel="mean absolute error")
    _save(fig, path)


def training_curve(history, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(np.arange(len(history)), history)
    ax.set(xlabel="epoch", ylabel="training MSE", yscale="log")
    _save(fig, path)


def sweep_plot(axis: str, rows, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    labels = [str(r[0]) for r in rows]
    x = np.arange(len(rows))
    ax.plot(x, [r[1] for r in rows], marker="o", label="ASR")
    ax.plot(x, [r[2] for r in rows], marker="s", label="clean accuracy")
    ax.set_xticks(x, labels)
    ax.set(xlabel=axis, ylim=(0, 1))
    ax.legend(fontsize=8)
    _save(fig, path)


def summary_bars(rows, path) -> None:
    """Final ASR per run from a summary table of ``(name, final_asr, final_acc)``."""
    fig, ax = plt.subplots(figsize=(max(4.5, 0.6 * len(rows)), 3.5))
    x = np.arange(len(rows))
    ax.bar(x, [r[1] for r in rows])
    ax.set_xticks(x, [r[0] for r in rows], rotation=45, ha="right", fontsize=7)
    ax.set(ylabel="final ASR", ylim=(0, 1))
    _save(fig, path)
