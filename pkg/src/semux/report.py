"""Metric CSVs and the figures rendered next to them."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

TRAIN_BASE = ("epoch", "loss", "kl_term", "nll_term")
ADAPT_COLUMNS = ("step", "channel_epoch", "acc_mean", "pilot_loss")
SCALABILITY_COLUMNS = ("n_comp", "seed", "acc_mean", "acc_min", "wallclock_s")
BETA_COLUMNS = ("beta", "seed", "kl_term", "nll_term", "acc_mean", "wallclock_s")
WALLCLOCK = "wallclock_s"


def train_columns(n_comp: int) -> tuple[str, ...]:
    return TRAIN_BASE + tuple(f"acc_task_{j}" for j in range(n_comp)) + (WALLCLOCK,)


def eval_columns(n_comp: int) -> tuple[str, ...]:
    return ("csi_mode",) + tuple(f"acc_task_{j}" for j in range(n_comp)) + ("acc_mean",)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics(path: str | Path, rows: list[dict], columns: tuple[str, ...]) -> Path:
    """Header plus one line per row, UTF-8 with LF endings; an empty run writes the header only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            missing = [c for c in columns if c not in row]
            if missing:
                raise KeyError(f"{path.name}: row lacks columns {missing}")
            w.writerow([_cell(row[c]) for c in columns])
    return path


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def without_wallclock(path: str | Path) -> list[list[str]]:
    """CSV content with the wallclock column dropped, for determinism comparisons."""
    with open(path, encoding="utf-8", newline="") as fh:
        table = list(csv.reader(fh))
    if not table:
        return table
    keep = [i for i, name in enumerate(table[0]) if name != WALLCLOCK]
    return [[r[i] for i in keep] for r in table]


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    _pyplot().close(fig)
    return path


def plot_train(rows: list[dict], path: str | Path) -> Path:
    plt = _pyplot()
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [r["epoch"] for r in rows]
    ax_l.plot(epochs, [r["loss"] for r in rows], label="loss")
    ax_l.plot(epochs, [r["nll_term"] for r in rows], "--", label="nll")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training objective")
    ax_l.legend()
    tasks = sorted(k for k in (rows[0] if rows else {}) if k.startswith("acc_task_"))
    for k in tasks:
        ax_a.plot(epochs, [r[k] for r in rows], marker="o", ms=3, label=k.replace("acc_task_", "task "))
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("test accuracy")
    ax_a.set_ylim(0, 1)
    if tasks:
        ax_a.legend()
    return _save(fig, Path(path))


def plot_eval(rows: list[dict], path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    tasks = sorted(k for k in (rows[0] if rows else {}) if k.startswith("acc_task_"))
    width = 0.8 / max(1, len(rows))
    x = np.arange(len(tasks))
    for i, r in enumerate(rows):
        ax.bar(x + i * width, [r[k] for k in tasks], width, label=f"{r['csi_mode']} CSI")
    ax.set_xticks(x + width * (len(rows) - 1) / 2, [k.replace("acc_task_", "task ") for k in tasks])
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, Path(path))


def plot_adapt(series: dict[str, list[dict]], path: str | Path, window: int = 10) -> Path:
    """Accuracy against inference step, one line per named run, redraws marked."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for label, rows in series.items():
        acc = np.array([r["acc_mean"] for r in rows], dtype=float)
        if len(acc) >= window:
            acc = np.convolve(acc, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(len(acc)) + (window - 1 if len(rows) >= window else 0), acc, label=label)
    first = next(iter(series.values()), [])
    for prev, cur in zip(first, first[1:]):
        if cur["channel_epoch"] != prev["channel_epoch"]:
            ax.axvline(cur["step"], color="0.7", lw=0.8, ls=":")
    ax.set_xlabel("inference step")
    ax.set_ylabel(f"mean accuracy ({window}-step average)")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, Path(path))


def _mean_std(rows, key, value):
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    xs = sorted(groups)
    return xs, [float(np.mean(groups[x])) for x in xs], [float(np.std(groups[x])) for x in xs]


def plot_scalability(rows: list[dict], path: str | Path, n_streams: int | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs, mean, std = _mean_std(rows, "n_comp", "acc_mean")
    ax.errorbar(xs, mean, yerr=std, marker="o", capsize=3)
    if n_streams:
        ax.axvline(n_streams, color="0.6", ls="--", lw=0.8, label="spatial streams")
        ax.legend()
    ax.set_xlabel("multiplexed tasks")
    ax.set_ylabel("mean task accuracy")
    ax.set_ylim(0, 1)
    return _save(fig, Path(path))


def plot_beta(rows: list[dict], path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax_k = plt.subplots(figsize=(5, 3.5))
    xs, kl, kl_sd = _mean_std(rows, "beta", "kl_term")
    _, acc, acc_sd = _mean_std(rows, "beta", "acc_mean")
    ax_k.errorbar(xs, kl, yerr=kl_sd, marker="o", capsize=3, color="C0")
    ax_k.set_xscale("log")
    ax_k.set_xlabel("beta")
    ax_k.set_ylabel("KL term per item", color="C0")
    ax_a = ax_k.twinx()
    ax_a.errorbar(xs, acc, yerr=acc_sd, marker="s", capsize=3, color="C1")
    ax_a.set_ylabel("mean task accuracy", color="C1")
    ax_a.set_ylim(0, 1)
    return _save(fig, Path(path))
