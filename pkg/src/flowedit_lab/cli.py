"""Command-line entry point: ``flowedit-lab {sample,edit,figure3,sweep,train,check}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import SWEEP_AXES, ConfigError, load_config

log = logging.getLogger("flowedit_lab")


def write_artifacts(out_dir, artifacts: dict):
    """Stage every artifact as a temp file, then rename all into place.

    If staging fails nothing is renamed and the temp files are removed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, content in artifacts.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out)
            staged.append((tmp, out / name))
            with os.fdopen(fd, "wb") as fh:
                fh.write(content if isinstance(content, bytes) else content.encode("utf-8"))
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return [final for _, final in staged]


def stanza(config) -> str:
    return (f"# flowedit-lab {__version__} | python {platform.python_version()} | "
            f"numpy {np.__version__} | scipy {scipy.__version__}\n"
            f"# seeds {config.seeds} | config hash {config.config_hash()}")


def _parser():
    p = argparse.ArgumentParser(prog="flowedit-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--preset", default="figure3", help="built-in defaults: figure3 or sd3")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    common.add_argument("--method", help="comma-separated method list")
    common.add_argument("--n-max", type=int, dest="n_max")
    common.add_argument("--n-min", type=int, dest="n_min")
    common.add_argument("--n-avg", type=int, dest="n_avg")
    common.add_argument("--T", type=int, dest="T", help="number of timesteps")
    common.add_argument("--step-scale", type=float, dest="step_scale")
    common.add_argument("--guidance", type=float, help="guidance scale (1 disables guidance)")
    common.add_argument("--samples", type=int)
    common.add_argument("--backend", choices=("analytic", "learned"))
    common.add_argument("--weights", help="learned-backend checkpoint (.npz)")
    common.add_argument("--jobs", type=int, help="worker processes across seeds")
    common.add_argument("--trajectories", action="store_true", help="dump per-step states")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("sample", parents=[common], help="draw source and target samples")
    sub.add_parser("edit", parents=[common], help="edit source samples with chosen methods")
    sub.add_parser("figure3", parents=[common], help="full mode-pairing comparison")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one editing parameter")
    sw.add_argument("--axis", choices=SWEEP_AXES)
    sw.add_argument("--values", help="comma-separated axis values")
    tr = sub.add_parser("train", parents=[common], help="train the velocity network")
    tr.add_argument("--iterations", type=int)
    ck = sub.add_parser("check", help="run the acceptance suite")
    ck.add_argument("--skip-learned", action="store_true", help="skip criteria that need training")
    ck.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    ov = {
        "schedule.n_max": args.n_max,
        "schedule.n_min": args.n_min,
        "schedule.n_avg": args.n_avg,
        "schedule.c": args.step_scale,
        "guidance.scale": args.guidance,
        "samples": args.samples,
        "backend": args.backend,
        "weights": args.weights,
        "jobs": args.jobs,
        "seeds": None if args.seed is None else [args.seed],
        "methods": args.method,
    }
    if args.T is not None:
        ov["schedule.T"] = args.T
        if args.n_max is None:
            ov["schedule.n_max"] = args.T
    if args.trajectories:
        ov["trajectories"] = True
    if getattr(args, "axis", None):
        ov["sweep.axis"] = args.axis
    if getattr(args, "values", None):
        ov["sweep.values"] = [float(v) if "." in v else int(v) for v in args.values.split(",")]
    if getattr(args, "iterations", None):
        ov["train.iterations"] = args.iterations
    return ov


def _cmd_sample(config, args):
    from .bench import reference_batch, source_batch, to_csv

    rows = []
    for seed in config.seeds:
        x, labels = source_batch(config, seed)
        rows += [("source", seed, i, int(k), *p) for i, (p, k) in enumerate(zip(x, labels))]
        y = reference_batch(config, seed)
        rows += [("target", seed, i, "", *p) for i, p in enumerate(y)]
    header = ("distribution", "seed", "row", "label") + tuple(f"x_{j}" for j in range(config.source.dim))
    return {"samples.csv": to_csv(header, rows)}


def _print_report(report):
    agg = report.aggregate()
    for method, vals in agg.items():
        parts = [f"{k}={vals[k]['mean']:.6g}±{vals[k]['std']:.3g}"
                 for k in ("transport_cost_msd", "pairing_accuracy", "energy_distance_to_target")]
        print(f"{method}: " + " ".join(parts)
              + f" threshold={report.threshold:.6g} aligned={vals['alignment_passes']}/"
              + f"{len(report.values(method, 'seed'))}")
    ratio = report.cost_ratio()
    if ratio is not None:
        print(f"transport cost ratio invert_edit/flowedit = {ratio:.4f}")


def _cmd_figure3(config, args):
    from .bench import run_figure3

    report, artifacts = run_figure3(config)
    _print_report(report)
    return artifacts


def _cmd_sweep(config, args):
    from .bench import run_sweep

    rows, text, summary = run_sweep(config)
    for name, ok in summary["checks"].items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return {"sweep.csv": text, "sweep_summary.json": json.dumps(summary, indent=2) + "\n"}


def _cmd_train(config, args):
    from .bench import mixtures, to_csv
    from .field import ConditionedModel
    from .learn import net_for, train

    mix = mixtures(config)
    result = train(net_for(mix, seed=config.train.seed), config.train, mix)
    print(f"parameters={result.net.n_params} initial_loss={result.initial_loss:.6g} "
          f"final_window_loss={result.loss_curve[-1]:.6g}")
    fd, tmp = tempfile.mkstemp(suffix=".npz")
    os.close(fd)
    try:
        result.net.save(tmp)
        blob = Path(tmp).read_bytes()
    finally:
        Path(tmp).unlink(missing_ok=True)
    step = config.train.log_every
    curve = to_csv(("iteration", "window_mean_loss", "window_std_error", "eval_loss"),
                   [((j + 1) * step, a, s, e) for j, (a, s, e) in
                    enumerate(zip(result.loss_curve, result.loss_stderr, result.eval_curve))])
    model_json = ConditionedModel.learned(result.net).to_json("weights.npz")
    return {"weights.npz": blob, "loss_curve.csv": curve, "model.json": model_json + "\n"}


COMMANDS = {
    "sample": _cmd_sample,
    "edit": _cmd_figure3,
    "figure3": _cmd_figure3,
    "sweep": _cmd_sweep,
    "train": _cmd_train,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "check":
        from .acceptance import run_all

        results = run_all(skip_learned=args.skip_learned, echo=True)
        return 0 if all(r.passed for r in results if not r.skipped) else 1
    try:
        config = load_config(args.config, _overrides(args), preset=args.preset)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(stanza(config))
    try:
        artifacts = COMMANDS[args.command](config, args)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in write_artifacts(args.out, artifacts):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
