"""``mapo-lab`` command line: pretrain, gen-data, align, eval, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 runtime abort (non-finite
loss or sampler divergence), 4 I/O or integrity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from ._io import IntegrityError, atomic_write, sha256_file
from .config import ConfigError, load_config, resolve_config, task_from_config
from .diffusion import SamplerDivergence, init_denoiser, make_schedule
from .experiments import (
    denoising_mse,
    format_summary,
    generate_preferences,
    read_results,
    render_plots,
    run_alignment,
    run_pretrain,
    run_sweep,
    schedule_from_config,
    summarize,
    write_summary,
)
from .metrics import CSV_COLUMNS, evaluate
from .tasks import export_json, load_dataset, save_dataset
from .train import FingerprintMismatch, TrainingDiverged, load_checkpoint, save_checkpoint, write_step_log

log = logging.getLogger("mapo_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Collects inputs and outputs of one command and writes ``manifest.json``."""

    def __init__(self, command: str, config: dict, out_dir: Path):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {}
        self.timings: dict[str, float] = {}
        self.started = _now()
        self._t0 = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def write(self) -> Path:
        self.timings.setdefault("total_s", round(time.perf_counter() - self._t0, 3))
        doc = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {str(p.relative_to(self.out_dir)) if p.is_relative_to(self.out_dir) else str(p):
                        sha256_file(p) for p in sorted(self.outputs)},
            "started_at": self.started,
            "finished_at": _now(),
            "timings": self.timings,
        }
        path = self.out_dir / "manifest.json"
        atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
        return path


def _resolved(args) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config, args.set)
    return resolve_config({"task": {"preset": "style"}}, args.set)


def _dry_run(args, cfg: dict) -> bool:
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return True
    return False


def _seeds(cfg: dict) -> dict[str, int]:
    return {"run": cfg["seed"], "data": cfg["seed"] + cfg["data"]["seed_offset"], "eval": cfg["eval"]["seed"]}


def cmd_pretrain(args) -> int:
    cfg = _resolved(args)
    if _dry_run(args, cfg):
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("pretrain", cfg, out)
    man.seeds = {"run": cfg["seed"]}
    result = run_pretrain(cfg)
    save_checkpoint(result.checkpoint, man.add_output(out / "base.ckpt"))
    write_step_log(result.logs, man.add_output(out / "steps.csv"), out / "timing.csv")
    task = task_from_config(cfg).at_level(0.0)
    model_mse, oracle_mse = denoising_mse(result.params, task, schedule_from_config(cfg))
    summary = {"model_mse": model_mse, "oracle_mse": oracle_mse, "ratio": model_mse / oracle_mse}
    atomic_write(man.add_output(out / "pretrain.json"), (json.dumps(summary, sort_keys=True) + "\n").encode())
    man.write()
    print(f"base model: test MSE {model_mse:.4f} vs optimal {oracle_mse:.4f} (ratio {summary['ratio']:.3f})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    if cfg["data"]["rejected"] == "model" and not args.init:
        raise ConfigError("rejected samples come from a model: pass --init or set data.rejected=mixture",
                          "data.rejected")
    if _dry_run(args, cfg):
        return EXIT_OK
    base = load_checkpoint(args.init).params if args.init else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("gen-data", cfg, out)
    man.seeds = _seeds(cfg)
    if args.init:
        man.add_input(args.init)
    data = generate_preferences(cfg, base)
    save_dataset(data, man.add_output(out / "data.bin"))
    if args.json:
        atomic_write(man.add_output(out / "data.json"), export_json(data).encode())
    man.write()
    print(f"wrote {len(data)} preference pairs to {out / 'data.bin'}")
    return EXIT_OK


def cmd_align(args) -> int:
    overrides = list(args.set)
    if args.objective:
        overrides.append(f"train.objective={json.dumps(args.objective)}")
    if args.beta is not None:
        overrides.append(f"train.beta={args.beta!r}")
    args.set = overrides
    cfg = _resolved(args)
    kind = cfg["train"]["objective"]
    if kind == "dpo" and not args.init:
        raise ConfigError("dpo needs a reference model: pass --init", "init")
    if kind != "dpo" and args.ref:
        log.warning("%s is reference-free; ignoring --ref %s", kind, args.ref)
    if _dry_run(args, cfg):
        return EXIT_OK
    data = load_dataset(args.dataset)
    task = task_from_config(cfg)
    if args.init:
        init = load_checkpoint(args.init).params
    else:
        init = init_denoiser(task.dim, task.cond_dim, tuple(cfg["model"]["hidden"]), cfg["model"]["emb_dim"],
                             seed=cfg["seed"])
    reference = load_checkpoint(args.ref).params if kind == "dpo" and args.ref else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("align", cfg, out)
    man.seeds = _seeds(cfg)
    for path in (args.dataset, args.init, reference is not None and args.ref):
        if path:
            man.add_input(path)
    try:
        result = run_alignment(cfg, data, init, task, reference=reference)
    except TrainingDiverged as exc:
        save_checkpoint(exc.checkpoint, man.add_output(out / "last_good.ckpt"))
        man.write()
        raise
    save_checkpoint(result.checkpoint, man.add_output(out / "model.ckpt"))
    write_step_log(result.logs, man.add_output(out / "steps.csv"), out / "timing.csv")
    man.timings["train_s"] = round(sum(entry.wall_time_s for entry in result.logs), 3)
    man.write()
    last = result.logs[-1]
    print(f"{kind}: {len(result.logs)} steps, final loss {last.total:.5f} (mse_w {last.mse_w:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.task:
        args.set = [f"task.preset={json.dumps(args.task)}"] + args.set
    if args.level is not None:
        args.set = args.set + [f"task.mismatch_level={args.level!r}"]
    cfg = _resolved(args)
    n = args.n if args.n is not None else cfg["eval"]["n"]
    seed = args.seed if args.seed is not None else cfg["eval"]["seed"]
    if n < 64:
        raise ConfigError("eval needs n >= 64", "n")
    if _dry_run(args, cfg):
        return EXIT_OK
    ckpt = load_checkpoint(args.checkpoint)
    base = load_checkpoint(args.base).params if args.base else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("eval", cfg, out)
    man.seeds = {"eval": seed}
    for path in (args.checkpoint, args.base):
        if path:
            man.add_input(path)
    task = task_from_config(cfg)
    schedule = make_schedule(ckpt.schedule["kind"], ckpt.schedule["T"])
    report = evaluate(ckpt.params, task, n, seed, schedule, base_params=base)
    man.timings["eval_s"] = round(report.wall_time_s, 3)
    csv_text = ",".join(CSV_COLUMNS) + "\n" + ",".join(report.csv_row()) + "\n"
    atomic_write(man.add_output(out / "metrics.csv"), csv_text.encode())
    atomic_write(man.add_output(out / "metrics.json"), (report.to_json(include_timing=False) + "\n").encode())
    man.write()
    print(csv_text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolved(args)
    if _dry_run(args, cfg):
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("sweep", cfg, out)
    man.seeds = _seeds(cfg)
    info = run_sweep(cfg, out, jobs=args.jobs)
    man.add_output(info["results"])
    for p in info["plots"]:
        man.add_output(p)
    man.write()
    print(f"{info['cells']} cells, {info['failed']} failed; results in {info['results']}")
    print(format_summary(summarize(read_results(info["results"]))), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = read_results(args.results)
    except ValueError as exc:
        raise IntegrityError(f"{args.results}: {exc}") from None
    out = Path(args.out) if args.out else Path(args.results).parent
    if args.dry_run:
        print(format_summary(summarize(rows)), end="")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("report", {"results": str(args.results)}, out)
    man.add_input(args.results)
    summary = summarize(rows)
    write_summary(summary, man.add_output(out / "summary.csv"))
    for p in render_plots(rows, out):
        man.add_output(p)
    man.write()
    print(format_summary(summary), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapo-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config document")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field, e.g. train.lr=5e-4 (repeatable)")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain", help="train the base model on the base mixture")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="synthesize a preference dataset")
    common(p)
    p.add_argument("--init", help="base checkpoint that generates rejected samples")
    p.add_argument("--json", action="store_true", help="also write a lossless JSON export")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("align", help="fine-tune on preference pairs")
    common(p)
    p.add_argument("--objective", choices=["mapo", "dpo", "sft"])
    p.add_argument("--beta", type=float, help="MaPO beta (default: per-preset value)")
    p.add_argument("--dataset", required=True, help="dataset file from gen-data")
    p.add_argument("--init", help="initial checkpoint; also the DPO reference")
    p.add_argument("--ref", help="separate DPO reference checkpoint")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="score a checkpoint on a task")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", help="task preset when no config is given")
    p.add_argument("--level", type=float, help="override the mismatch level")
    p.add_argument("--n", type=int, help="samples per condition (>= 64)")
    p.add_argument("--seed", type=int)
    p.add_argument("--base", help="base checkpoint for win rates")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a grid of alignment runs")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="concurrent cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summary table and plots from results.csv")
    p.add_argument("results")
    p.add_argument("--out", help="output directory (default: next to results.csv)")
    p.add_argument("--dry-run", action="store_true", help="print the summary and write nothing")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, SamplerDivergence) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (IntegrityError, FingerprintMismatch, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
