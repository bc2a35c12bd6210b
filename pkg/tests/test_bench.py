import csv
import io
import json

import numpy as np
import pytest

from flowedit_lab.bench import (METRICS_HEADER, SWEEP_HEADER, build_model, mixtures, run_figure3,
                                run_sweep, source_batch)
from flowedit_lab.config import load_config
from flowedit_lab.field import GuidedModel
from flowedit_lab.gmm import GaussianMixture


@pytest.fixture(scope="module")
def small():
    return load_config(overrides={"samples": 120, "seeds": [0, 1], "schedule.T": 10,
                                  "schedule.n_max": 10, "schedule.n_avg": 2,
                                  "calibration.resamples": 20})


@pytest.fixture(scope="module")
def small_run(small):
    return run_figure3(small)


def test_report_invariants(small, small_run):
    report, _ = small_run
    assert report.methods == small.methods
    assert len(report.per_seed) == len(small.seeds) * len(small.methods)
    for row in report.per_seed:
        assert 0.0 <= row["pairing_accuracy"] <= 1.0
        assert row["transport_cost_msd"] >= 0.0
        assert row["self_distance_threshold"] == report.threshold
    agg = report.aggregate()
    assert set(agg) == set(small.methods)
    assert report.to_dict()["n_seeds"] == 2


def test_artifact_schemas(small_run):
    _, art = small_run
    edits = list(csv.reader(io.StringIO(art["edits.csv"])))
    assert edits[0] == ["row", "x_src_0", "x_src_1", "x_edit_0", "x_edit_1",
                        "method", "seed", "n_max", "n_min", "n_avg", "c"]
    assert len(edits) == 1 + 120 * 2 * 3
    metrics = list(csv.reader(io.StringIO(art["metrics.csv"])))
    assert tuple(metrics[0]) == METRICS_HEADER
    assert [r[:2] for r in metrics[1:4]] == [["0", "flowedit"], ["0", "invert_edit"], ["0", "sdedit"]]
    report = json.loads(art["report.json"])
    assert set(report) == {"aggregate", "config_hash", "n_seeds", "self_distance_threshold",
                           "transport_cost_ratio_invert_over_flowedit"}


def test_trajectory_artifact(small):
    cfg = load_config(overrides={"samples": 5, "seeds": [0], "schedule.T": 4, "schedule.n_max": 4,
                                 "trajectories": True, "methods": ["invert_edit"],
                                 "calibration.resamples": 5})
    _, art = run_figure3(cfg)
    lines = art["trajectories.csv"].splitlines()
    assert lines[0] == "path_label,step_index,t,point_index,z_0,z_1"
    assert len(lines) == 1 + 2 * 5 * 5
    assert lines[1].startswith("invert_edit/src-forward/seed0,0,0.0,0,")


def test_runs_are_deterministic_and_parallel_safe(small, small_run):
    _, art = small_run
    par = load_config(overrides={**{k: v for k, v in small.raw.items() if k != "jobs"}, "jobs": 2})
    _, art_par = run_figure3(par)
    assert art_par["edits.csv"] == art["edits.csv"]
    assert art_par["metrics.csv"] == art["metrics.csv"]


def test_unconditional_is_even_mixture(small):
    mix = mixtures(small)
    assert mix["uncond"].n_components == 4
    np.testing.assert_allclose(mix["uncond"].weights, 0.25)


def test_guidance_wraps_model(small):
    cfg = load_config(overrides={"guidance.scale": 2.0})
    assert isinstance(build_model(cfg), GuidedModel)
    assert not isinstance(build_model(small), GuidedModel)


def test_sweep_n_max(small):
    rows, text, summary = run_sweep(small, "n_max")
    assert text.splitlines()[0] == ",".join(SWEEP_HEADER)
    assert summary["values"] == [0, 2, 5, 7, 10]
    zero = [r for r in rows if r[1] == 0]
    assert all(r[SWEEP_HEADER.index("transport_cost_msd")] == 0.0 for r in zero)
    assert all(summary["checks"].values())


def test_sweep_guidance_and_n_min(small):
    rows, _, summary = run_sweep(small, "guidance_scale", [0.0, 1.0])
    assert {r[3] for r in rows} == set(small.methods)
    rows, _, _ = run_sweep(small, "n_min")
    assert {r[3] for r in rows} == {"flowedit"}
    assert sorted({r[1] for r in rows}) == [0, 2, 5, 7]


def test_sweep_n_avg_reports_gap(small):
    cfg = load_config(overrides={**small.raw, "samples": 6, "gap_points": 6, "mc_samples": 256})
    rows, _, summary = run_sweep(cfg, "n_avg", [1, 16])
    gaps = [r[-1] for r in rows]
    assert all(g is not None and g >= 0 for g in gaps)
    assert "flowedit: gap to expectation decreasing in n_avg" in summary["checks"]


def test_source_batch_labels_match_modes(small):
    x, labels = source_batch(small, 0)
    d = np.linalg.norm(x[:, None] - small.source.means[None], axis=-1)
    assert np.mean(np.argmin(d, axis=1) == labels) > 0.99


def test_custom_mixtures_flow_through():
    cfg = load_config(overrides={
        "source": GaussianMixture.isotropic([[-3.0, 0.0]]).to_dict(),
        "target": GaussianMixture.isotropic([[3.0, 0.0]]).to_dict(),
        "samples": 50, "seeds": [0], "schedule.T": 10, "schedule.n_max": 10,
        "calibration.resamples": 10})
    report, _ = run_figure3(cfg)
    fe = report.values("flowedit", "transport_cost_msd")[0]
    assert 30 < fe < 42
