"""Command-line experiment harness.

    semux <command> --config <path> [--seed N] [--out DIR] [--force]

Commands write delimited metrics (UTF-8, LF) plus a PNG figure with the same
stem into the output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import report
from .config import ConfigError, ExperimentConfig, load, with_overrides
from .data import Dataset, DatasetError
from .model import SemanticMux
from .pipeline import (TrainingDiverged, accuracy_per_task, run_dynamic_experiment, evaluation_set, train)

log = logging.getLogger("semux")

COMMANDS = ("train", "eval", "adapt", "sweep-scalability", "sweep-beta", "selftest")
CHECKPOINT_NAME = "checkpoint.semux"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def build_model(cfg: ExperimentConfig, ds: Dataset, n_comp: int | None = None, seed: int | None = None) -> SemanticMux:
    c, h, _ = ds.image_shape
    arch = cfg.arch(n_comp=n_comp, in_channels=c, image_size=h, n_classes=ds.n_classes)
    return SemanticMux(arch, np.random.default_rng(cfg.seed if seed is None else seed), ofdm=cfg.ofdm())


def save_model(path: Path, model: SemanticMux, cfg: ExperimentConfig, epoch: int, rng: np.random.Generator) -> None:
    ck = ckpt.Checkpoint(blobs=model.params.state(), config_hash=cfg.model_hash(), epoch=epoch,
                         rng_state=ckpt.rng_state(rng))
    ckpt.save(path, ck)


def load_model(path: Path, cfg: ExperimentConfig, ds: Dataset, force: bool) -> tuple[SemanticMux, ckpt.Checkpoint]:
    if not path.exists():
        raise CliError(f"no checkpoint at {path}; run 'semux train' with the same --out first")
    ck = ckpt.load(path, expected_hash=cfg.model_hash(), force=force)
    model = build_model(cfg, ds)
    model.params.load_state(ck.blobs)
    return model, ck


def _threads(n_jobs: int) -> int:
    raw = os.environ.get("SEMUX_THREADS", "")
    if not raw:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise CliError(f"SEMUX_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def _fan_out(fn, jobs: list) -> list:
    """Run independent jobs, in parallel when SEMUX_THREADS allows; results keep job order."""
    workers = _threads(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _emit(out: Path, name: str, rows: list[dict], columns, plot) -> None:
    csv_path = report.write_metrics(out / f"{name}.csv", rows, columns)
    png = plot(rows, out / f"{name}.png") if rows else None
    log.info("wrote %s%s", csv_path, f" and {png}" if png else "")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    ds = cfg.dataset()
    model = build_model(cfg, ds)
    tc = cfg.train_config()
    rng = np.random.default_rng(tc.seed)
    rows = train(ds, model, cfg.channel(), tc, rng=rng, log=lambda r: log.info(
        "epoch %d loss %.4f acc %s", r["epoch"], r["loss"],
        " ".join(f"{r[k]:.3f}" for k in r if k.startswith("acc_task_"))))
    save_model(out / CHECKPOINT_NAME, model, cfg, tc.epochs, rng)
    _emit(out, "train", rows, report.train_columns(model.arch.n_comp), report.plot_train)
    return 0


def evaluate(model: SemanticMux, ds: Dataset, cfg: ExperimentConfig) -> list[dict]:
    """Test accuracy with genie and with estimated CSI.

    The genie row uses the same evaluation transmissions and channel seed as
    the per-epoch test accuracy logged by ``train``.
    """
    n_comp = model.arch.n_comp
    evalset = evaluation_set(ds, n_comp, cfg.eval_items, seed=cfg.seed + 1)
    rows = []
    for mode in ("genie", "estimated"):
        acc = accuracy_per_task(model, evalset, cfg.channel(), seed=cfg.seed + 2, csi_mode=mode)
        row = {"csi_mode": mode, "acc_mean": float(acc.mean())}
        row.update({f"acc_task_{j}": float(a) for j, a in enumerate(acc)})
        rows.append(row)
    return rows


def cmd_eval(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    ds = cfg.dataset()
    model, _ = load_model(out / CHECKPOINT_NAME, cfg, ds, force)
    rows = evaluate(model, ds, cfg)
    for r in rows:
        log.info("%s CSI: mean accuracy %.4f", r["csi_mode"], r["acc_mean"])
    _emit(out, "eval", rows, report.eval_columns(model.arch.n_comp), report.plot_eval)
    return 0


def cmd_adapt(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    ds = cfg.dataset()
    model, _ = load_model(out / CHECKPOINT_NAME, cfg, ds, force)
    ac = cfg.adapt_config()
    rows = run_dynamic_experiment(model, ds, cfg.channel(), ac, seed=cfg.seed, adapt=cfg.adapt_enabled,
                                  dynamic=cfg.adapt_dynamic)
    report.write_metrics(out / "adapt.csv", rows, report.ADAPT_COLUMNS)
    series = {"adaptation on" if cfg.adapt_enabled else "adaptation off": rows}
    if cfg.adapt_enabled:
        # the same channel sequence without adaptation, for the figure only
        series["adaptation off"] = run_dynamic_experiment(model, ds, cfg.channel(), ac, seed=cfg.seed,
                                                          adapt=False, dynamic=cfg.adapt_dynamic)
    report.plot_adapt(series, out / "adapt.png")
    log.info("adaptation %s: mean accuracy %.4f over %d steps", "on" if cfg.adapt_enabled else "off",
             float(np.mean([r["acc_mean"] for r in rows])), len(rows))
    return 0


def _train_job(cfg: ExperimentConfig, ds: Dataset, n_comp: int, seed: int, beta: float | None = None):
    model = build_model(cfg, ds, n_comp=n_comp, seed=seed)
    t0 = time.perf_counter()
    rows = train(ds, model, cfg.channel(), cfg.train_config(seed=seed, beta=beta))
    return rows[-1] if rows else None, time.perf_counter() - t0


def cmd_sweep_scalability(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    ds = cfg.dataset()
    jobs = [(n, s) for n in cfg.sweep_n_comp for s in cfg.sweep_seeds]
    results = _fan_out(lambda job: _train_job(cfg, ds, *job), jobs)
    rows = []
    for (n, s), (last, wall) in zip(jobs, results):
        acc = [last[f"acc_task_{j}"] for j in range(n)] if last else [float("nan")]
        rows.append({"n_comp": n, "seed": s, "acc_mean": float(np.mean(acc)), "acc_min": float(np.min(acc)),
                     "wallclock_s": wall})
        log.info("n_comp %d seed %d: mean accuracy %.4f", n, s, rows[-1]["acc_mean"])
    _emit(out, "sweep_scalability", rows, report.SCALABILITY_COLUMNS,
          lambda r, p: report.plot_scalability(r, p, n_streams=min(cfg.n_tx, cfg.n_rx)))
    return 0


def cmd_sweep_beta(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    ds = cfg.dataset()
    jobs = [(b, s) for b in cfg.sweep_betas for s in cfg.sweep_seeds]
    results = _fan_out(lambda job: _train_job(cfg, ds, cfg.n_comp, job[1], beta=job[0]), jobs)
    rows = []
    for (b, s), (last, wall) in zip(jobs, results):
        acc = [last[f"acc_task_{j}"] for j in range(cfg.n_comp)] if last else [float("nan")]
        rows.append({"beta": b, "seed": s, "kl_term": last["kl_term"] if last else float("nan"),
                     "nll_term": last["nll_term"] if last else float("nan"), "acc_mean": float(np.mean(acc)),
                     "wallclock_s": wall})
        log.info("beta %g seed %d: KL %.2f, mean accuracy %.4f", b, s, rows[-1]["kl_term"], rows[-1]["acc_mean"])
    _emit(out, "sweep_beta", rows, report.BETA_COLUMNS, report.plot_beta)
    return 0


def cmd_selftest(cfg: ExperimentConfig | None, out: Path, force: bool) -> int:
    from .selftest import run_all

    return 0 if run_all(log=print) else 1


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "adapt": cmd_adapt,
    "sweep-scalability": cmd_sweep_scalability,
    "sweep-beta": cmd_sweep_beta,
    "selftest": cmd_selftest,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semux", description="Multi-task semantic multiplexing over a MIMO-OFDM link.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat 'key = value' config file (optional for selftest)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--force", action="store_true", help="load checkpoints written for a different model config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "selftest" and not args.config:
            return cmd_selftest(None, Path("."), args.force)
        if not args.config:
            raise CliError(f"{args.command} needs --config")
        cfg = with_overrides(load(args.config), seed=args.seed, out_dir=args.out)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, out, args.force)
    except (CliError, ConfigError, DatasetError, ckpt.CheckpointError, TrainingDiverged) as exc:
        print(f"semux {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
