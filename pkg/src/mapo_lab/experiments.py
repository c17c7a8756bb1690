"""End-to-end pipeline steps and the sweep driver.

Each step is a plain function of a resolved config so the CLI, the sweep
workers and the tests share one code path.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import IntegrityError
from .config import effective_beta, objective_config, pretrain_config, task_from_config, train_config
from .diffusion import (
    DenoiserParams,
    Schedule,
    denoise_predict,
    forward_sample,
    init_denoiser,
    make_schedule,
    optimal_gaussian_denoiser,
)
from .metrics import evaluate
from .plotting import line_plot
from .tasks import Dataset, TaskSpec, load_dataset, save_dataset, synthesize_preferences
from .train import TrainingDiverged, TrainResult, load_checkpoint, save_checkpoint, train, write_step_log

__all__ = [
    "RESULT_COLUMNS",
    "SweepCell",
    "denoising_mse",
    "expand_cells",
    "generate_preferences",
    "read_results",
    "render_plots",
    "run_alignment",
    "run_pretrain",
    "run_sweep",
    "summarize",
]


def schedule_from_config(cfg: dict) -> Schedule:
    return make_schedule(cfg["schedule"]["kind"], cfg["schedule"]["T"])


def denoising_mse(params: DenoiserParams, task: TaskSpec, schedule: Schedule, which: str = "base",
                  n: int = 20000, seed: int = 5) -> tuple[float, float]:
    """Held-out noise-prediction MSE of ``params`` and of the Bayes-optimal denoiser.

    Every condition selects a single Gaussian component, so the optimum is
    available in closed form.
    """
    rng = np.random.default_rng(seed)
    cls = rng.integers(task.cond_dim, size=n)
    mu, var = task.moments(which, cls)
    x0 = mu + np.sqrt(var)[:, None] * rng.standard_normal((n, task.dim))
    eps = rng.standard_normal((n, task.dim))
    t = rng.integers(1, schedule.T + 1, size=n)
    x_t = forward_sample(schedule, x0, t, eps)
    pred = denoise_predict(params, x_t, task.one_hot(cls), t, schedule).values
    opt = optimal_gaussian_denoiser(mu, var, schedule, x_t, t)
    return float(np.mean((pred - eps) ** 2)), float(np.mean((opt - eps) ** 2))


def run_pretrain(cfg: dict, seed: int | None = None) -> TrainResult:
    """SFT a fresh denoiser on draws from the task's base mixture."""
    seed = cfg["seed"] if seed is None else seed
    base_task = task_from_config(cfg).at_level(0.0)
    data = synthesize_preferences(base_task, None, cfg["pretrain"]["n"], seed, filter_margin=None)
    init = init_denoiser(base_task.dim, base_task.cond_dim, tuple(cfg["model"]["hidden"]),
                         cfg["model"]["emb_dim"], seed=seed)
    return train(pretrain_config(cfg, seed), data, init, base_task)


def generate_preferences(cfg: dict, base: DenoiserParams | None, task: TaskSpec | None = None,
                         n: int | None = None, seed: int | None = None) -> Dataset:
    task = task_from_config(cfg) if task is None else task
    seed = cfg["seed"] if seed is None else seed
    use_model = cfg["data"]["rejected"] == "model"
    if use_model and base is None:
        raise ValueError("data.rejected = 'model' needs a base checkpoint")
    return synthesize_preferences(
        task,
        base if use_model else None,
        cfg["data"]["n"] if n is None else n,
        seed + cfg["data"]["seed_offset"],
        schedule=schedule_from_config(cfg),
        filter_margin=cfg["data"]["filter_margin"],
    )


def run_alignment(cfg: dict, dataset: Dataset, init: DenoiserParams, task: TaskSpec | None = None,
                  objective: str | None = None, beta: float | None = None, seed: int | None = None,
                  reference: DenoiserParams | None = None) -> TrainResult:
    task = task_from_config(cfg) if task is None else task
    obj = objective_config(cfg, objective, beta)
    return train(train_config(cfg, obj, seed), dataset, init, task, reference=reference,
                 eval_seed=cfg["eval"]["seed"])


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

RESULT_COLUMNS = [
    "cell_id", "objective", "beta", "mismatch_level", "dataset_size", "seed",
    "mismatch", "mean_oracle_reward", "win_rate_vs_base", "target_mass", "n", "eval_seed",
    "status",
]
METRIC_COLUMNS = ["mismatch", "mean_oracle_reward", "win_rate_vs_base", "target_mass"]


@dataclass(frozen=True)
class SweepCell:
    objective: str
    beta: float | None  # only MaPO uses beta; other objectives carry None
    mismatch_level: float
    dataset_size: int
    seed: int

    @property
    def cell_id(self) -> str:
        beta = "na" if self.beta is None else repr(float(self.beta))
        return f"{self.objective}-b{beta}-m{self.mismatch_level!r}-n{self.dataset_size}-s{self.seed}"


def expand_cells(cfg: dict) -> list[SweepCell]:
    """Cartesian product of the sweep axes; unset axes take the config's value."""
    axes = cfg["sweep"]["axes"]
    task = task_from_config(cfg)
    objectives = axes.get("objective", [cfg["train"]["objective"]])
    betas = axes.get("beta", [effective_beta(cfg)])
    levels = axes.get("mismatch_level", [task.mismatch_level])
    sizes = axes.get("dataset_size", [cfg["data"]["n"]])
    seeds = axes.get("seed", [cfg["seed"]])
    cells, seen = [], set()
    for obj, beta, level, size, seed in itertools.product(objectives, betas, levels, sizes, seeds):
        cell = SweepCell(obj, float(beta) if obj == "mapo" else None, float(level), int(size), int(seed))
        if cell not in seen:
            seen.add(cell)
            cells.append(cell)
    return cells


def _config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:12]


def _base_path(cfg: dict, root: Path, seed: int) -> Path:
    key = _config_hash([cfg["task"]["preset"], cfg["model"], cfg["schedule"], cfg["pretrain"]])
    return root / "base" / f"{key}-s{seed}.ckpt"


def _data_path(cfg: dict, root: Path, level: float, size: int, seed: int) -> Path:
    key = _config_hash([cfg["task"]["preset"], cfg["model"], cfg["schedule"], cfg["pretrain"], cfg["data"]])
    return root / "data" / f"{key}-m{level!r}-n{size}-s{seed}.bin"


def _pretrain_job(cfg: dict, path: str, seed: int) -> None:
    save_checkpoint(run_pretrain(cfg, seed).checkpoint, path)


def _data_job(cfg: dict, base_path: str, path: str, level: float, size: int, seed: int) -> None:
    base = load_checkpoint(base_path).params
    task = task_from_config(cfg, level)
    save_dataset(generate_preferences(cfg, base, task, size, seed), path)


def _cell_job(cfg: dict, cell: SweepCell, base_path: str, data_path: str,
              cell_dir: str) -> tuple[list[str], float]:
    start = time.perf_counter()
    metrics = [""] * (len(METRIC_COLUMNS) + 2)
    try:
        base = load_checkpoint(base_path).params
        data = load_dataset(data_path)
        task = task_from_config(cfg, cell.mismatch_level)
        result = run_alignment(cfg, data, base, task, cell.objective, cell.beta, cell.seed)
        save_checkpoint(result.checkpoint, Path(cell_dir) / "model.ckpt")
        write_step_log(result.logs, Path(cell_dir) / "steps.csv")
        report = evaluate(result.params, task, cfg["eval"]["n"], cfg["eval"]["seed"],
                          schedule_from_config(cfg), base_params=base)
        metrics = [repr(float(getattr(report, k))) for k in METRIC_COLUMNS] + [str(report.n), str(report.seed)]
        status = "ok"
    except TrainingDiverged as exc:
        status = f"diverged at step {exc.step}"
    except (ValueError, RuntimeError, IntegrityError, OSError) as exc:
        status = f"error: {type(exc).__name__}: {exc}"
    beta = "" if cell.beta is None else repr(float(cell.beta))
    row = [cell.cell_id, cell.objective, beta, repr(cell.mismatch_level), str(cell.dataset_size),
           str(cell.seed)] + metrics + [status.replace("\n", " ")]
    return row, time.perf_counter() - start


def _run_jobs(fn, jobs: list[tuple], workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            futures = [pool.submit(fn, *args) for args in jobs]
            return [f.result() for f in futures]
    return [fn(*args) for args in jobs]


def run_sweep(cfg: dict, out_dir, jobs: int = 1) -> dict:
    """Run every sweep cell and write ``results.csv``, ``timings.csv`` and plots.

    Base models (one per seed) and datasets (one per level, size and seed)
    are built first and cached under ``out_dir``; cells then run
    independently. Cell failures are recorded in the status column.
    """
    root = Path(out_dir)
    cells = expand_cells(cfg)
    seeds = sorted({c.seed for c in cells})
    pre = [(cfg, str(_base_path(cfg, root, s)), s) for s in seeds if not _base_path(cfg, root, s).exists()]
    _run_jobs(_pretrain_job, pre, jobs)

    data_keys = sorted({(c.mismatch_level, c.dataset_size, c.seed) for c in cells})
    gen = [(cfg, str(_base_path(cfg, root, s)), str(_data_path(cfg, root, lv, n, s)), lv, n, s)
           for lv, n, s in data_keys if not _data_path(cfg, root, lv, n, s).exists()]
    _run_jobs(_data_job, gen, jobs)

    work = [(cfg, c, str(_base_path(cfg, root, c.seed)),
             str(_data_path(cfg, root, c.mismatch_level, c.dataset_size, c.seed)),
             str(root / "cells" / c.cell_id)) for c in cells]
    outcomes = _run_jobs(_cell_job, work, jobs)

    rows = [row for row, _ in outcomes]
    results = root / "results.csv"
    _write_csv(results, RESULT_COLUMNS, rows)
    _write_csv(root / "timings.csv", ["cell_id", "wall_time_s"],
               [[row[0], f"{secs:.3f}"] for row, secs in outcomes])
    plots = render_plots(read_results(results), root)
    return {"results": results, "plots": plots, "cells": len(cells),
            "failed": sum(r[-1] != "ok" for r in rows)}


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def read_results(path) -> list[dict]:
    """Parse a results CSV, rejecting missing or unknown columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        unknown = [c for c in header if c not in RESULT_COLUMNS]
        missing = [c for c in RESULT_COLUMNS if c not in header]
        if unknown or missing:
            raise ValueError(f"results columns do not match: unknown {unknown}, missing {missing}")
        rows = []
        for line in reader:
            if len(line) != len(header):
                raise ValueError(f"malformed row with {len(line)} fields")
            rows.append(dict(zip(header, line)))
    out = []
    for r in rows:
        rec = {
            "cell_id": r["cell_id"],
            "objective": r["objective"],
            "beta": float(r["beta"]) if r["beta"] else None,
            "mismatch_level": float(r["mismatch_level"]),
            "dataset_size": int(r["dataset_size"]),
            "seed": int(r["seed"]),
            "status": r["status"],
        }
        for k in METRIC_COLUMNS:
            rec[k] = float(r[k]) if r[k] else None
        out.append(rec)
    return out


def _ok(rows):
    return [r for r in rows if r["status"] == "ok"]


def summarize(rows: list[dict]) -> list[dict]:
    """Median of each metric over seeds per (objective, beta, level, size)."""
    groups: dict[tuple, list[dict]] = {}
    for r in _ok(rows):
        key = (r["objective"], r["beta"], r["mismatch_level"], r["dataset_size"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], -1.0 if k[1] is None else k[1], k[2], k[3])):
        g = groups[key]
        rec = dict(zip(["objective", "beta", "mismatch_level", "dataset_size"], key))
        rec["seeds"] = len(g)
        for k in METRIC_COLUMNS:
            rec[k] = statistics.median(r[k] for r in g)
        out.append(rec)
    return out


def gap_by_level(rows: list[dict]) -> dict[tuple, dict[float, float]]:
    """Median over seeds of MaPO minus DPO win rate, per (beta, size) series and level."""
    dpo = {(r["mismatch_level"], r["dataset_size"], r["seed"]): r["win_rate_vs_base"]
           for r in _ok(rows) if r["objective"] == "dpo"}
    series: dict[tuple, dict[float, list[float]]] = {}
    for r in _ok(rows):
        key = (r["mismatch_level"], r["dataset_size"], r["seed"])
        if r["objective"] == "mapo" and key in dpo:
            series.setdefault((r["beta"], r["dataset_size"]), {}).setdefault(r["mismatch_level"], []).append(
                r["win_rate_vs_base"] - dpo[key])
    return {k: {lv: statistics.median(v) for lv, v in sorted(s.items())} for k, s in sorted(series.items())}


def _label(objective: str, beta, level=None, size=None) -> str:
    parts = [objective if beta is None else f"{objective} beta={beta:g}"]
    if level is not None:
        parts.append(f"level={level:g}")
    if size is not None:
        parts.append(f"n={size}")
    return " ".join(parts)


def render_plots(rows: list[dict], out_dir) -> list[Path]:
    """Score vs dataset size per objective, and the MaPO - DPO gap vs mismatch level."""
    out_dir = Path(out_dir)
    summary = summarize(rows)
    written = []
    levels = sorted({s["mismatch_level"] for s in summary})
    series = {}
    for s in summary:
        label = _label(s["objective"], s["beta"], s["mismatch_level"] if len(levels) > 1 else None)
        series.setdefault(label, []).append((float(s["dataset_size"]), s["target_mass"]))
    if series:
        path = out_dir / "score_vs_dataset_size.svg"
        path.write_text(line_plot(series, "target mass vs dataset size", "dataset size", "target mass",
                                  log_x=True))
        written.append(path)
    gaps = gap_by_level(rows)
    sizes = sorted({size for _, size in gaps})
    gap_series = {
        _label("mapo - dpo", beta, size=size if len(sizes) > 1 else None): sorted(g.items())
        for (beta, size), g in gaps.items()
    }
    if gap_series:
        path = out_dir / "gap_vs_mismatch.svg"
        path.write_text(line_plot(gap_series, "win-rate gap vs mismatch level", "mismatch level",
                                  "win-rate gap"))
        written.append(path)
    return written


def format_summary(summary: list[dict]) -> str:
    header = ["objective", "beta", "mismatch_level", "dataset_size", "seeds"] + METRIC_COLUMNS
    lines = [header]
    for s in summary:
        lines.append([s["objective"], "" if s["beta"] is None else f"{s['beta']:g}", f"{s['mismatch_level']:g}",
                      str(s["dataset_size"]), str(s["seeds"])] + [f"{s[k]:.4f}" for k in METRIC_COLUMNS])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines) + "\n"


def write_summary(summary: list[dict], path) -> None:
    rows = [[s["objective"], "" if s["beta"] is None else repr(s["beta"]), repr(s["mismatch_level"]),
             str(s["dataset_size"]), str(s["seeds"])] + [repr(s[k]) for k in METRIC_COLUMNS] for s in summary]
    _write_csv(Path(path), ["objective", "beta", "mismatch_level", "dataset_size", "seeds"] + METRIC_COLUMNS, rows)
