"""The acceptance criteria as callable checks, shared by the test suite and ``flowedit-lab check``.

Each ``criterion_N`` returns a :class:`CriterionResult` carrying the measured
values, so a failure reports what was observed rather than just ``False``.
"""

from __future__ import annotations

import filecmp
import io
import tempfile
import time
from contextlib import redirect_stdout
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import SRC, TAR, build_model, mixtures, run_figure3, run_sweep, train_default
from .config import figure3_mixtures, load_config
from .editing import EditRequest, direct_path_edit, flowedit, invert_edit, run_method
from .field import ConditionedModel, noise_pred_to_velocity, velocity, velocity_to_noise_pred
from .gmm import GaussianMixture, sample
from .learn import VelocityNet, flow_matching_batch, net_for
from .ode import Schedule

GAP_POINTS = 20
# T=50 is pre-asymptotic: a few points near the basin boundary flip modes
ROUND_TRIP_T = (100, 200, 400)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    skipped: bool = False
    seconds: float = 0.0

    def line(self) -> str:
        tag = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        return f"[{tag}] criterion {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


@dataclass
class Context:
    """Lazily computed artifacts shared between criteria."""

    config: object = None
    _report: object = None
    _train: object = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.config is None:
            self.config = load_config()

    @property
    def report(self):
        if self._report is None:
            self._report, _ = run_figure3(self.config)
        return self._report

    @property
    def trained(self):
        if self._train is None:
            self._train = train_default(self.config)
        return self._train


def random_mixture(rng: np.random.Generator, dim=2) -> GaussianMixture:
    k = int(rng.integers(1, 5))
    means = rng.uniform(-10.0, 10.0, size=(k, dim))
    covs = []
    for _ in range(k):
        a = rng.normal(size=(dim, dim))
        covs.append(a @ a.T + 0.2 * np.eye(dim))
    return GaussianMixture(rng.dirichlet(np.ones(k)), means, np.array(covs))


def random_learned_model(conditions, dim=2, seed=0) -> ConditionedModel:
    """Untrained net with a nonzero output layer, so the field is not trivially zero."""
    net = VelocityNet(dim, conditions, seed=seed)
    rng = np.random.default_rng(seed)
    net.params[-2] = rng.normal(scale=0.3, size=net.params[-2].shape)
    net.params[-1] = rng.normal(scale=0.3, size=net.params[-1].shape)
    return ConditionedModel.learned(net)


def max_relative_gap(a, b) -> float:
    num = np.linalg.norm(a - b, axis=1)
    den = np.maximum(np.linalg.norm(b, axis=1), 1e-300)
    return float(np.max(num / den)) if len(a) else 0.0


def criterion_1(ctx: Context) -> CriterionResult:
    src, tar = figure3_mixtures()
    setups = [(src, tar)]
    rng = np.random.default_rng(2024)
    setups += [(random_mixture(rng), random_mixture(rng)) for _ in range(5)]
    worst = 0.0
    for j, (a, b) in enumerate(setups):
        x = sample(a, 200, j, stream="acceptance/direct")
        models = [ConditionedModel({SRC: a, TAR: b}), random_learned_model((SRC, TAR), seed=j)]
        for model in models:
            for T in (10, 50):
                req = EditRequest(x, SRC, TAR, Schedule(T=T))
                gap = max_relative_gap(direct_path_edit(model, req).edited_points,
                                       invert_edit(model, req).edited_points)
                worst = max(worst, gap)
    return CriterionResult(1, "direct-path equivalence", worst < 1e-9,
                           f"max relative gap {worst:.3g} over 6 setups x T{{10,50}} x analytic/learned")


def criterion_2(ctx: Context) -> CriterionResult:
    rep = ctx.report
    fe = rep.values("flowedit", "pairing_accuracy")
    inv = rep.values("invert_edit", "pairing_accuracy")
    lower = int(np.sum(inv < fe))
    ok = fe.mean() >= 0.95 and lower >= 18
    return CriterionResult(2, "mode pairing", bool(ok),
                           f"flowedit mean accuracy {fe.mean():.4f}, invert_edit mean {inv.mean():.4f}, "
                           f"invert lower on {lower}/{len(fe)} seeds")


def criterion_3(ctx: Context) -> CriterionResult:
    rep = ctx.report
    fe = rep.values("flowedit", "transport_cost_msd")
    inv = rep.values("invert_edit", "transport_cost_msd")
    ok = bool(np.all(fe < inv))
    return CriterionResult(3, "transport-cost ordering", ok,
                           f"flowedit < invert_edit on {int(np.sum(fe < inv))}/{len(fe)} seeds; "
                           f"ratio invert/flowedit {rep.cost_ratio():.4f}")


def criterion_4(ctx: Context) -> CriterionResult:
    """Each method must pass the calibrated test on at least 18 of 20 seeds.

    The threshold is a 99th percentile, so a correct method still fails on
    about 1% of seeds by chance; 18/20 keeps that false-failure rate small.
    """
    rep = ctx.report
    parts = []
    ok = True
    n = len(rep.values("flowedit", "seed"))
    need = int(np.ceil(0.9 * n))
    for m in ("flowedit", "invert_edit", "sdedit"):
        passes = int(rep.values(m, "passes_alignment").sum())
        ok &= passes >= need
        parts.append(f"{m} {passes}/{n} (mean ED {rep.values(m, 'energy_distance_to_target').mean():.4f})")
    return CriterionResult(4, "target alignment", bool(ok),
                           f"threshold {rep.threshold:.4f}; " + ", ".join(parts))


def criterion_5(ctx: Context) -> CriterionResult:
    src, _ = figure3_mixtures()
    x = sample(src, 1000, 0, stream="acceptance/identity")
    model = ConditionedModel({SRC: src, TAR: src})
    fe = flowedit(model, EditRequest(x, SRC, TAR, Schedule(T=50), seed=0)).edited_points
    identical = bool(np.array_equal(fe, x))
    errs = []
    for T in ROUND_TRIP_T:
        out = invert_edit(model, EditRequest(x, SRC, TAR, Schedule(T=T))).edited_points
        errs.append(float(np.sqrt(np.mean(np.sum((out - x) ** 2, axis=1)))))
    orders = [float(np.log2(errs[0] / errs[1])), float(np.log2(errs[1] / errs[2]))]
    ok = identical and all(0.8 <= p <= 1.2 for p in orders)
    return CriterionResult(5, "identity-edit fixpoint", ok,
                           f"flowedit bit-identical={identical}; round-trip RMS {errs[0]:.3g}/"
                           f"{errs[1]:.3g}/{errs[2]:.3g} at T={'/'.join(map(str, ROUND_TRIP_T))}, orders "
                           f"{orders[0]:.3f}, {orders[1]:.3f}")


def criterion_6(ctx: Context) -> CriterionResult:
    """Gap to the 4096-draw expectation, on ``GAP_POINTS`` points per seed (Monte Carlo is costly)."""
    cfg = load_config(overrides={"samples": GAP_POINTS, "gap_points": GAP_POINTS,
                                 "seeds": ctx.config.seeds, "mc_samples": 4096})
    _, _, summary = run_sweep(cfg, "n_avg", [1, 4, 16, 64])
    seq = summary["means"]["flowedit"]["rms_gap_to_expectation"]
    ok = summary["checks"]["flowedit: gap to expectation decreasing in n_avg"]
    return CriterionResult(6, "n_avg convergence", ok,
                           "RMS gap " + ", ".join(f"m={m}: {g:.4f}" for m, g in zip((1, 4, 16, 64), seq))
                           + f" ({len(cfg.seeds)} seeds x {GAP_POINTS} points)")


def criterion_7(ctx: Context) -> CriterionResult:
    values = [0.6, 0.8, 1.0, 1.2, 1.4]
    _, _, summary = run_sweep(ctx.config, "c", values)
    ed = summary["means"]["flowedit"]["energy_distance_to_target"]
    ok = summary["checks"]["flowedit: energy distance minimized at c=1"]
    return CriterionResult(7, "step-scale extremum", ok,
                           "energy distance " + ", ".join(f"c={c}: {e:.4f}" for c, e in zip(values, ed)))


def criterion_8(ctx: Context) -> CriterionResult:
    cfg = ctx.config
    model = build_model(cfg)
    x, _ = sample(cfg.source, cfg.samples, 0, stream="source", return_labels=True)
    zero = Schedule(T=cfg.schedule.T, n_max=0, n_avg=cfg.schedule.n_avg)
    exact = all(np.array_equal(run_method(m, model, EditRequest(x, SRC, TAR, zero)).edited_points, x)
                for m in ("flowedit", "invert_edit", "direct_path_edit", "sdedit"))
    _, _, summary = run_sweep(cfg, "n_max")
    mono = all(v for k, v in summary["checks"].items() if "nondecreasing" in k)
    costs = "; ".join(f"{m}: " + "/".join(f"{c:.1f}" for c in vals["transport_cost_msd"])
                      for m, vals in summary["means"].items())
    return CriterionResult(8, "n_max boundary and monotonicity", bool(exact and mono),
                           f"n_max=0 exact={exact}; cost over {summary['values']}: {costs}")


def criterion_9(ctx: Context) -> CriterionResult:
    gauss = GaussianMixture.isotropic([[0.0, 0.0]])
    model = ConditionedModel({SRC: gauss})
    rng = np.random.default_rng(9)
    ts = np.linspace(0.0, 0.9, 10)
    worst_id = 0.0
    worst_rt = 0.0
    for t in ts:
        z = rng.normal(scale=1.5, size=(10, 2))
        v = velocity(model, SRC, t, z)
        eps = velocity_to_noise_pred(v, z, t)
        closed = t / ((1.0 - t) ** 2 + t**2) * z
        worst_id = max(worst_id, max_relative_gap(eps, closed))
        back = noise_pred_to_velocity(eps, z, t)
        worst_rt = max(worst_rt, max_relative_gap(back, v))
    ok = worst_id < 1e-8 and worst_rt < 1e-12
    return CriterionResult(9, "velocity/noise-prediction identity", ok,
                           f"max relative error vs posterior mean {worst_id:.3g}; round trip {worst_rt:.3g}")


def gradient_check(net: VelocityNet, feats, target, n_weights=50, h=1e-5, seed=0):
    """Worst relative error between backprop and central differences on sampled weights."""
    _, grad = net.loss_and_grad(feats, target)
    theta = net.get_flat()
    idx = np.random.default_rng(seed).choice(theta.size, n_weights, replace=False)
    probe = net.copy()
    worst = 0.0
    for i in idx:
        up = theta.copy()
        up[i] += h
        dn = theta.copy()
        dn[i] -= h
        probe.set_flat(up)
        lp = probe.loss_and_grad(feats, target)[0]
        probe.set_flat(dn)
        lm = probe.loss_and_grad(feats, target)[0]
        fd = (lp - lm) / (2.0 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-12))
    return worst


def criterion_10(ctx: Context) -> CriterionResult:
    cfg = ctx.config
    result = ctx.trained
    net = result.net
    model = ConditionedModel.learned(net)
    fe_cfg = load_config(overrides={"methods": ["flowedit", "invert_edit"], "seeds": cfg.seeds})
    rep, _ = run_figure3(fe_cfg, model=model)
    fe_acc = rep.values("flowedit", "pairing_accuracy")
    fe_cost = rep.values("flowedit", "transport_cost_msd")
    inv_cost = rep.values("invert_edit", "transport_cost_msd")
    z, t, cond, target = flow_matching_batch(mixtures(cfg), 64, 99, 0)
    feats = net.features(z, t, cond)
    grad_err = gradient_check(net, feats, target)
    ctx.extra["learned_report"] = rep
    ok = fe_acc.mean() >= 0.85 and bool(np.all(fe_cost < inv_cost)) and grad_err < 1e-4
    return CriterionResult(10, "learned-field parity", bool(ok),
                           f"flowedit accuracy {fe_acc.mean():.4f}; cost flowedit {fe_cost.mean():.2f} < "
                           f"invert {inv_cost.mean():.2f} on {int(np.sum(fe_cost < inv_cost))}/{len(fe_cost)} "
                           f"seeds; gradient max rel error {grad_err:.3g}; final loss "
                           f"{result.loss_curve[-1]:.3f}")


CLI_RUNS = (
    ["figure3", "--seed", "7", "--samples", "200", "--trajectories", "--T", "10"],
    ["edit", "--method", "flowedit,direct_path_edit", "--seed", "3", "--samples", "150", "--n-avg", "4"],
    ["sweep", "--axis", "c", "--values", "0.8,1.0", "--seed", "1", "--samples", "100", "--T", "10"],
    ["sample", "--seed", "5", "--samples", "100"],
)


def criterion_11(ctx: Context) -> CriterionResult:
    from .cli import main

    compared = 0
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for j, argv in enumerate(CLI_RUNS):
            dirs = [Path(tmp) / f"run{j}" / tag for tag in ("a", "b")]
            for d in dirs:
                with redirect_stdout(io.StringIO()):
                    code = main([*argv, "--out", str(d)])
                if code != 0:
                    return CriterionResult(11, "determinism", False, f"{argv[0]} exited {code}")
            for f in sorted(dirs[0].glob("*.csv")):
                compared += 1
                if not filecmp.cmp(f, dirs[1] / f.name, shallow=False):
                    mismatched.append(f"{argv[0]}/{f.name}")
    ok = compared > 0 and not mismatched
    return CriterionResult(11, "determinism", ok,
                           f"{compared} CSV artifacts compared across {len(CLI_RUNS)} subcommands; "
                           f"mismatches: {mismatched or 'none'}")


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 12)}
NEEDS_TRAINING = {10}


def run_criterion(number: int, ctx: Context) -> CriterionResult:
    start = time.perf_counter()
    result = CRITERIA[number](ctx)
    result.seconds = time.perf_counter() - start
    return result


def run_all(skip_learned=False, echo=False, ctx: Context | None = None) -> list:
    ctx = ctx or Context()
    results = []
    for number in CRITERIA:
        if skip_learned and number in NEEDS_TRAINING:
            res = CriterionResult(number, "learned-field parity", False, "skipped on request", skipped=True)
        else:
            res = run_criterion(number, ctx)
        results.append(res)
        if echo:
            print(res.line(), flush=True)
    return results
