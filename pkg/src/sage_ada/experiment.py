"""Multi-seed, multi-strategy experiment runner and CSV aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .active import METRIC_COLUMNS, MetricsRow, RunResult, pretrain, pretrain_key, run_training
from .config import ExperimentConfig
from .data import DomainDataset, check_disjoint, generate_dataset
from .errors import ContractViolation
from .nn_core import save_checkpoint

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "SAGE_ADA_OUTPUT_DIR"
PLOT_COLUMNS = ("config_hash", "strategy", "variant", "round", "n_seeds", "mean_acc", "std_acc")
BOUND_COLUMNS = (
    "run_id", "round", "b", "purity", "eps_s_l2", "eps_s_01", "eps_t_h_l2", "eps_t_h_01",
    "eps_t_ha_l2", "eps_t_ha_01", "tau_hat", "eta_hat", "rhs_eq5", "slack_eq5", "holds_eq4",
    "beta", "beta_in_range",
)

PRESETS: dict[str, list[dict]] = {
    "strategies": [{"strategy": s} for s in ("sage", "entropy", "random", "aada")],
    "ablation": [{"strategy": "sage", "variant": v} for v in ("naive", "balance", "inductive")],
    "diversity": [{"strategy": s} for s in ("sage", "sage_norm_only")],
    "uda": [{"rounds": 0}],
}


def output_dir(config: ExperimentConfig, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(OUTPUT_DIR_ENV, config.output_dir))


@dataclass
class CellOutcome:
    config_index: int
    seed: int
    rows: list[MetricsRow] = field(default_factory=list)
    bounds: list[dict] = field(default_factory=list)
    error: str | None = None


def _atomic_write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _run_seed(
    configs: list[ExperimentConfig], seed: int, data: DomainDataset, checkpoint_dir: str | None
) -> list[CellOutcome]:
    """All configs for one seed; pretrained models are shared between configs that allow it."""
    cache = {}
    outcomes = []
    for k, cfg in enumerate(configs):
        outcome = CellOutcome(k, seed)
        try:
            key = pretrain_key(cfg, seed)
            if key not in cache:
                cache[key] = pretrain(cfg, data, seed)[0]
            result: RunResult = run_training(cfg, data, seed, pretrained=cache[key])
            outcome.rows = result.rows
            for round_, rep in result.bounds:
                outcome.bounds.append({"run_id": result.rows[0].run_id, "round": round_, **rep.as_row()})
            if checkpoint_dir is not None:
                save_checkpoint(result.bundle.nets(), Path(checkpoint_dir) / f"{result.rows[0].run_id}.ckpt")
        except Exception as exc:  # recorded per cell; the remaining cells continue
            log.exception("cell (config %d, seed %d) failed", k, seed)
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcomes.append(outcome)
    return outcomes


@dataclass
class ExperimentOutput:
    directory: Path
    rows: list[MetricsRow]
    bounds: list[dict]
    failures: list[tuple[int, int, str]]


def run_experiment(
    configs: ExperimentConfig | Sequence[ExperimentConfig],
    out_dir: str | Path | None = None,
    data: DomainDataset | None = None,
    jobs: int | None = None,
    save_checkpoints: bool = False,
) -> ExperimentOutput:
    """Run every (config, seed) cell and write ``metrics.csv``, ``summary.csv``,
    ``diagnostics.csv`` and ``metadata.json`` under the output directory.

    All configs must share one dataset and one seed list.
    """
    if isinstance(configs, ExperimentConfig):
        configs = [configs]
    configs = list(configs)
    base = configs[0]
    if any(c.dataset_spec() != base.dataset_spec() or c.seeds != base.seeds for c in configs):
        raise ContractViolation("all configs in one experiment must share dataset and seeds")
    directory = output_dir(base, out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = generate_dataset(base.dataset_spec())
    check_disjoint(data)
    ckpt = str(directory / "checkpoints") if save_checkpoints else None
    if ckpt:
        Path(ckpt).mkdir(exist_ok=True)

    jobs = base.jobs if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_seed, configs, s, data, ckpt) for s in base.seeds]
            per_seed = [f.result() for f in futures]
    else:
        per_seed = [_run_seed(configs, s, data, ckpt) for s in base.seeds]

    # Deterministic merge order: config, then seed.
    outcomes = sorted((o for group in per_seed for o in group), key=lambda o: (o.config_index, o.seed))
    for o in outcomes:
        if o.error is None:
            _atomic_write_csv(
                directory / "cells" / f"{o.rows[0].run_id}.csv", METRIC_COLUMNS, (r.as_csv() for r in o.rows)
            )
    rows = [r for o in outcomes for r in o.rows]
    bounds = [b for o in outcomes for b in o.bounds]
    failures = [(o.config_index, o.seed, o.error) for o in outcomes if o.error is not None]

    _atomic_write_csv(directory / "metrics.csv", METRIC_COLUMNS, (r.as_csv() for r in rows))
    _atomic_write_csv(directory / "summary.csv", PLOT_COLUMNS, _plot_rows_as_csv(aggregate(rows)))
    _atomic_write_csv(
        directory / "diagnostics.csv", BOUND_COLUMNS, ([str(b[c]) for c in BOUND_COLUMNS] for b in bounds)
    )
    if failures:
        _atomic_write_csv(
            directory / "failures.csv", ("config_index", "seed", "error"),
            ([str(k), str(s), e] for k, s, e in failures),
        )
    meta = {
        "configs": [{"hash": c.config_hash(), "text": c.to_text()} for c in configs],
        "eval_cadence": "after_round: each row is measured after the round's training iterations",
        "n_cells": len(outcomes),
        "n_failures": len(failures),
    }
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ExperimentOutput(directory, rows, bounds, failures)


@dataclass(frozen=True)
class PlotRow:
    config_hash: str
    strategy: str
    variant: str
    round: int
    n_seeds: int
    mean_acc: float
    std_acc: float


def aggregate(rows: Iterable[MetricsRow]) -> list[PlotRow]:
    """Mean and population std of target-test accuracy per (config, round) across seeds."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r.config_hash, r.strategy, r.variant, r.round)].append(r.acc_target_test)
    out = []
    for (chash, strat, var, rnd), accs in groups.items():
        a = np.array(accs)
        out.append(PlotRow(chash, strat, var, rnd, len(a), float(a.mean()), float(a.std())))
    return out


def _plot_rows_as_csv(rows: Iterable[PlotRow]) -> Iterable[list[str]]:
    for p in rows:
        yield [p.config_hash, p.strategy, p.variant, str(p.round), str(p.n_seeds), repr(p.mean_acc), repr(p.std_acc)]


def aada_plus_plus(plot: list[PlotRow]) -> list[PlotRow]:
    """Shift each AADA curve left until its first point reaches the UDA baseline.

    The baseline is the round-0 mean accuracy of the non-AADA curves (they all
    share the transferability-loss pretraining). Returns the shifted rows,
    tagged ``aada++``; nothing when there is no baseline or no AADA curve.
    """
    uda = [p.mean_acc for p in plot if p.round == 0 and p.strategy != "aada"]
    if not uda:
        return []
    baseline = max(uda)
    out = []
    for chash in sorted({p.config_hash for p in plot if p.strategy == "aada"}):
        curve = sorted((p for p in plot if p.config_hash == chash), key=lambda p: p.round)
        start = next((p.round for p in curve if p.mean_acc >= baseline), None)
        if start is None:
            continue
        for p in curve:
            if p.round >= start:
                out.append(PlotRow(p.config_hash, "aada++", p.variant, p.round - start, p.n_seeds, p.mean_acc, p.std_acc))
    return out


def read_metrics(path: str | Path) -> list[MetricsRow]:
    """Parse a metrics CSV; malformed rows raise with their line numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = list(csv.reader(fh))
    if not lines or tuple(lines[0]) != METRIC_COLUMNS:
        raise ContractViolation(f"{path}: header must be {','.join(METRIC_COLUMNS)}")
    rows, bad = [], []
    for lineno, rec in enumerate(lines[1:], start=2):
        try:
            if len(rec) != len(METRIC_COLUMNS):
                raise ValueError("wrong field count")
            acc = float(rec[8])
            if not 0.0 <= acc <= 1.0:
                raise ValueError("accuracy out of range")
            rows.append(
                MetricsRow(
                    run_id=rec[0], config_hash=rec[1], strategy=rec[2], variant=rec[3], seed=int(rec[4]),
                    round=int(rec[5]), annotated_count=int(rec[6]), purity_cum=float(rec[7]),
                    acc_target_test=acc, acc_source=float(rec[9]), sage_mean_norm=float(rec[10]),
                    selected=tuple(int(v) for v in rec[11].split()),
                )
            )
        except ValueError:
            bad.append(lineno)
    if bad:
        raise ContractViolation(f"{path}: malformed rows at lines {', '.join(map(str, bad))}")
    return rows


def emit_plotdata(metrics_csv: str | Path, out_csv: str | Path) -> list[PlotRow]:
    """Long-format per-round mean/std accuracy, plus AADA++ curves when applicable."""
    plot = aggregate(read_metrics(metrics_csv))
    plot = plot + aada_plus_plus(plot)
    _atomic_write_csv(Path(out_csv), PLOT_COLUMNS, _plot_rows_as_csv(plot))
    return plot


def expand_preset(base: ExperimentConfig, variations: Sequence[dict]) -> list[ExperimentConfig]:
    return [base.replace(**v) for v in variations]


def final_mean(plot: Iterable[PlotRow], **match) -> float:
    """Mean accuracy at the last round of the curve whose fields equal ``match``."""
    pts = [p for p in plot if all(getattr(p, k) == v for k, v in match.items())]
    if not pts:
        return math.nan
    return max(pts, key=lambda p: p.round).mean_acc
