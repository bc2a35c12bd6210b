"""Experiments: the 2-D mode-pairing comparison and parameter sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .editing import EditRequest, flowedit_expectation, flowedit_scaled, run_method
from .field import ConditionedModel, GuidedModel
from .gmm import sample
from .learn import VelocityNet, net_for, train
from .metrics import calibration_threshold, energy_distance, pairing_accuracy, transport_cost
from .ode import trajectories_to_csv

log = logging.getLogger(__name__)

SRC, TAR, UNCOND = "src", "tar", "uncond"

EDIT_HEADER_TAIL = ("method", "seed", "n_max", "n_min", "n_avg", "c")
METRIC_FIELDS = ("transport_cost_msd", "pairing_accuracy", "energy_distance_to_target",
                 "self_distance_threshold")
METRICS_HEADER = ("seed", "method") + METRIC_FIELDS + ("passes_alignment",)
SWEEP_HEADER = ("axis", "value", "seed", "method") + METRIC_FIELDS + ("rms_gap_to_expectation",)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def mixtures(config: ExperimentConfig) -> dict:
    return {
        SRC: config.source,
        TAR: config.target,
        UNCOND: config.source.mixed_with(config.target, 0.5),
    }


def build_model(config: ExperimentConfig, net: VelocityNet | None = None):
    """Analytic or learned model over ``src``/``tar``/``uncond``, guidance applied if enabled."""
    if config.backend == "analytic":
        model = ConditionedModel(mixtures(config))
    else:
        if net is None:
            if config.weights:
                net = VelocityNet.load(config.weights)
            else:
                net = train_default(config).net
        model = ConditionedModel.learned(net)
    if config.guidance_scale != 1.0:
        return GuidedModel(model, UNCOND, config.guidance_scale)
    return model


def train_default(config: ExperimentConfig):
    mix = mixtures(config)
    return train(net_for(mix, seed=config.train.seed), config.train, mix)


def source_batch(config, seed):
    return sample(config.source, config.samples, seed, stream="source", return_labels=True)


def reference_batch(config, seed):
    return sample(config.target, config.samples, seed, stream="reference")


def evaluate(x, labels, edited, reference, config, threshold) -> dict:
    ed = energy_distance(edited, reference)
    return {
        "transport_cost_msd": transport_cost(x, edited),
        "pairing_accuracy": pairing_accuracy(edited, labels, config.source.means, config.target.means),
        "energy_distance_to_target": ed,
        "self_distance_threshold": threshold,
        "passes_alignment": ed < threshold,
    }


@dataclass
class SeedRun:
    seed: int
    metrics: dict
    edits: list = field(default_factory=list)
    trajectory_csv: str = ""


def run_seed(config: ExperimentConfig, model, seed: int, threshold: float) -> SeedRun:
    x, labels = source_batch(config, seed)
    reference = reference_batch(config, seed)
    sch = config.schedule
    out = SeedRun(seed, {})
    trajs = []
    for method in config.methods:
        req = EditRequest(x, SRC, TAR, sch, seed=seed, record_trajectory=config.trajectories)
        res = run_method(method, model, req)
        out.metrics[method] = evaluate(x, labels, res.edited_points, reference, config, threshold)
        for i, (p, q) in enumerate(zip(x, res.edited_points)):
            out.edits.append((i, *p, *q, method, seed, sch.n_max, sch.n_min, sch.n_avg,
                              sch.step_scale_c))
        for tr in res.trajectories:
            tr.label = f"{method}/{tr.label}/seed{seed}"
            trajs.append(tr)
    if trajs:
        out.trajectory_csv = trajectories_to_csv(trajs)
    return out


def _map_seeds(fn, config, seeds, *args):
    if config.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(fn, *zip(*[(config, *args, s) for s in seeds])))
    return [fn(config, *args, s) for s in seeds]


def _seed_job(config, model, threshold, seed):
    return run_seed(config, model, seed, threshold)


@dataclass
class MetricsReport:
    methods: list
    per_seed: list
    threshold: float
    config_hash: str = ""

    def values(self, method, metric) -> np.ndarray:
        return np.array([row[metric] for row in self.per_seed if row["method"] == method], dtype=float)

    def aggregate(self) -> dict:
        agg = {}
        for m in self.methods:
            agg[m] = {}
            for metric in METRIC_FIELDS:
                vals = self.values(m, metric)
                agg[m][metric] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
            agg[m]["alignment_passes"] = int(self.values(m, "passes_alignment").sum())
        return agg

    def cost_ratio(self, a="invert_edit", b="flowedit"):
        if a not in self.methods or b not in self.methods:
            return None
        return float(self.values(a, "transport_cost_msd").mean()
                     / self.values(b, "transport_cost_msd").mean())

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "self_distance_threshold": self.threshold,
            "n_seeds": len({row["seed"] for row in self.per_seed}),
            "aggregate": self.aggregate(),
            "transport_cost_ratio_invert_over_flowedit": self.cost_ratio(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        return to_csv(METRICS_HEADER, [
            [row["seed"], row["method"], *(row[k] for k in METRIC_FIELDS), row["passes_alignment"]]
            for row in self.per_seed
        ])


def config_threshold(config: ExperimentConfig) -> float:
    return calibration_threshold(config.target, config.samples, config.calibration_resamples,
                                 config.calibration_quantile, config.calibration_seed)


def run_figure3(config: ExperimentConfig, model=None):
    """Run every configured method on every seed.

    Returns the report and a mapping of artifact name to file contents.
    """
    model = build_model(config) if model is None else model
    threshold = config_threshold(config)
    runs = _map_seeds(_seed_job, config, config.seeds, model, threshold)
    per_seed = []
    edits = []
    traj_parts = []
    for run in runs:
        for method in config.methods:
            per_seed.append({"seed": run.seed, "method": method, **run.metrics[method]})
        edits.extend(run.edits)
        if run.trajectory_csv:
            traj_parts.append(run.trajectory_csv)
    report = MetricsReport(list(config.methods), per_seed, threshold, config.config_hash())
    dim = config.source.dim
    header = (("row",) + tuple(f"x_src_{j}" for j in range(dim))
              + tuple(f"x_edit_{j}" for j in range(dim)) + EDIT_HEADER_TAIL)
    artifacts = {
        "edits.csv": to_csv(header, edits),
        "metrics.csv": report.to_csv(),
        "report.json": report.to_json(),
    }
    if traj_parts:
        head, *_ = traj_parts[0].split("\n", 1)
        body = "".join(p.split("\n", 1)[1] for p in traj_parts)
        artifacts["trajectories.csv"] = head + "\n" + body
    return report, artifacts


def default_sweep_values(config: ExperimentConfig, axis: str) -> list:
    T = config.schedule.T
    n_max = config.schedule.n_max
    return {
        "n_max": [0, T // 4, T // 2, (3 * T) // 4, T],
        "n_min": [0, n_max // 4, n_max // 2, (3 * n_max) // 4],
        "n_avg": [1, 4, 16, 64],
        "c": [0.6, 0.8, 1.0, 1.2, 1.4],
        "guidance_scale": [0.0, 1.0, 2.0, 4.0],
    }[axis]


def _sweep_seed(config, axis, values, base_model, threshold, seed):
    x, labels = source_batch(config, seed)
    reference = reference_batch(config, seed)
    rows = []
    expectation = None
    if axis == "n_avg":
        k = min(config.gap_points, config.samples)
        req = EditRequest(x[:k], SRC, TAR, config.schedule, seed=seed)
        expectation = flowedit_expectation(base_model, req, config.mc_samples).edited_points
    for value in values:
        sch = config.schedule
        model = base_model
        methods = ["flowedit"]
        c = sch.step_scale_c
        if axis == "n_max":
            sch = sch.replace(n_max=int(value), n_min=min(sch.n_min, int(value)))
            methods = config.methods
        elif axis == "n_min":
            sch = sch.replace(n_min=int(value))
        elif axis == "n_avg":
            sch = sch.replace(n_avg=int(value))
        elif axis == "c":
            c = float(value)
        elif axis == "guidance_scale":
            inner = base_model.model if isinstance(base_model, GuidedModel) else base_model
            model = GuidedModel(inner, UNCOND, float(value))
            methods = config.methods
        for method in methods:
            req = EditRequest(x, SRC, TAR, sch, seed=seed)
            if method == "flowedit" and axis == "c":
                edited = flowedit_scaled(model, req, c).edited_points
            else:
                edited = run_method(method, model, req).edited_points
            m = evaluate(x, labels, edited, reference, config, threshold)
            gap = None
            if expectation is not None:
                gap = float(np.sqrt(np.mean(np.sum((edited[:len(expectation)] - expectation) ** 2, axis=1))))
            rows.append([axis, value, seed, method, *(m[f] for f in METRIC_FIELDS), gap])
    return rows


def _mean_by(rows, col, method):
    by = {}
    for r in rows:
        if r[3] == method and r[col] is not None:
            by.setdefault(r[1], []).append(r[col])
    return {k: float(np.mean(v)) for k, v in by.items()}


def sweep_summary(axis, values, rows, methods) -> dict:
    """Seed-averaged metric per value and the declared shape checks."""
    cost_col = SWEEP_HEADER.index("transport_cost_msd")
    ed_col = SWEEP_HEADER.index("energy_distance_to_target")
    gap_col = SWEEP_HEADER.index("rms_gap_to_expectation")
    summary = {"axis": axis, "values": list(values), "checks": {}, "means": {}}
    for m in sorted({r[3] for r in rows}):
        cost = _mean_by(rows, cost_col, m)
        ed = _mean_by(rows, ed_col, m)
        summary["means"][m] = {"transport_cost_msd": [cost[v] for v in values],
                               "energy_distance_to_target": [ed[v] for v in values]}
        if axis == "n_max":
            seq = [cost[v] for v in values]
            summary["checks"][f"{m}: transport cost nondecreasing in n_max"] = bool(
                all(b >= a for a, b in zip(seq, seq[1:])))
        if axis == "c" and m == "flowedit":
            best = min(values, key=lambda v: ed[v])
            summary["checks"]["flowedit: energy distance minimized at c=1"] = bool(best == 1.0)
        if axis == "n_avg" and m == "flowedit":
            gap = _mean_by(rows, gap_col, m)
            seq = [gap[v] for v in values]
            summary["means"][m]["rms_gap_to_expectation"] = seq
            summary["checks"]["flowedit: gap to expectation decreasing in n_avg"] = bool(
                all(b < a for a, b in zip(seq, seq[1:])))
    return summary


def run_sweep(config: ExperimentConfig, axis: str | None = None, values=None, model=None):
    """One row per (value, seed, method); returns rows, CSV text and a summary."""
    axis = axis or config.sweep_axis
    values = values if values is not None else (config.sweep_values
                                                or default_sweep_values(config, axis))
    model = build_model(config) if model is None else model
    threshold = config_threshold(config)
    per_seed = _map_seeds(_sweep_seed, config, config.seeds, axis, values, model, threshold)
    rows = [r for seed_rows in per_seed for r in seed_rows]
    return rows, to_csv(SWEEP_HEADER, rows), sweep_summary(axis, values, rows, config.methods)
