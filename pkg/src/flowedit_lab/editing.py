"""Editing procedures: inversion, its direct-path form, FlowEdit and SDEdit.

All randomness is drawn from counter-based substreams keyed by
``(seed, row, step, draw)``, so any row can be replayed in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .ode import Schedule, Trajectory, _check_finite, integrate_forward, integrate_reverse

FLOWEDIT_STREAM = "flowedit"
FLOWEDIT_TARGET_STREAM = "flowedit/independent-target"
EXPECTATION_STREAM = "flowedit/expectation"
SDEDIT_STREAM = "sdedit"
_MC_CHUNK = 512


@dataclass
class EditRequest:
    source_points: np.ndarray
    src_condition: str
    tar_condition: str
    schedule: Schedule
    seed: int = 0
    record_trajectory: bool = False
    shared_noise: bool = True
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.source_points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.ndim != 2:
            raise ValueError("source_points must be an (n, d) batch")
        if not np.all(np.isfinite(pts)):
            raise ValueError("source_points must be finite")
        self.source_points = pts
        if self.row_ids is None:
            self.row_ids = np.arange(pts.shape[0])
        else:
            self.row_ids = np.asarray(self.row_ids, dtype=np.int64).reshape(-1)
            if self.row_ids.size != pts.shape[0]:
                raise ValueError("row_ids must have one entry per source point")


@dataclass
class EditResult:
    edited_points: np.ndarray
    method: str
    trajectories: list = field(default_factory=list)
    noise_log: dict = field(default_factory=dict)


def _noise_log(req, stream, steps, draws):
    return {
        "seed": int(req.seed),
        "stream": stream,
        "steps": [int(s) for s in steps],
        "draws_per_step": int(draws),
        "row_ids": [int(r) for r in req.row_ids],
    }


def _empty(req, method):
    return EditResult(req.source_points.copy(), method)


def invert_edit(model, req: EditRequest) -> EditResult:
    """Invert with the source condition up to ``t_{n_max}``, then sample down with the target."""
    if req.source_points.shape[0] == 0:
        return _empty(req, "invert_edit")
    sch = req.schedule
    fwd = integrate_forward(model, req.src_condition, sch, req.source_points,
                            stop_index=sch.n_max, record=req.record_trajectory)
    rev = integrate_reverse(model, req.tar_condition, sch, fwd.final,
                            start_index=sch.n_max, record=req.record_trajectory)
    trajs = [fwd, rev] if req.record_trajectory else []
    return EditResult(rev.final, "invert_edit", trajs)


def direct_path_edit(model, req: EditRequest) -> EditResult:
    """Inversion editing re-expressed as a path that starts at the source sample.

    Runs the forward and reverse integrations of :func:`invert_edit`, then
    integrates ``Z^inv`` from ``X^src`` at ``t_{n_max}``.  The target state is
    reconstructed from the parallelogram ``Z^tar = Z^inv + Z^src - X^src`` and
    the source term is the recorded forward increment of the same interval, so
    the discrete path ends exactly where inversion does (up to rounding).
    """
    if req.source_points.shape[0] == 0:
        return _empty(req, "direct_path_edit")
    sch = req.schedule
    x = req.source_points
    fwd = integrate_forward(model, req.src_condition, sch, x, stop_index=sch.n_max)
    rev = integrate_reverse(model, req.tar_condition, sch, fwd.final, start_index=sch.n_max)
    direct = Trajectory("direct")
    z = x.copy()
    direct.record(sch.n_max, sch.t(sch.n_max), z)
    for i in range(sch.n_max, 0, -1):
        dt = sch.t(i - 1) - sch.t(i)
        z_src = fwd.states[i]
        z_tar = z + (z_src - x)
        v_tar = model.velocity(req.tar_condition, sch.t(i), z_tar)
        # forward Euler moved Z^src over [t_{i-1}, t_i] with the velocity at t_{i-1}
        v_delta = v_tar - fwd.velocities[i - 1]
        z = z + dt * v_delta
        _check_finite(z, i - 1, sch.t(i - 1))
        direct.velocities.append(v_delta)
        direct.record(i - 1, sch.t(i - 1), z)
    trajs = [fwd, rev, direct] if req.record_trajectory else []
    return EditResult(z, "direct_path_edit", trajs)


def _delta_average(model, req, x, z, t, step, draws, stream):
    """Mean of V^tar(Z^tar) - V^src(Z^src) over the given noise draws at one step."""
    n, d = x.shape
    total = np.zeros_like(x)
    offset = z - x
    for lo in range(0, len(draws), _MC_CHUNK):
        chunk = draws[lo:lo + _MC_CHUNK]
        noise = rng.normals(req.seed, stream, req.row_ids, step, chunk, d)
        z_src = (1.0 - t) * x + t * noise
        if req.shared_noise:
            z_tar = z_src + offset
        else:
            other = rng.normals(req.seed, FLOWEDIT_TARGET_STREAM, req.row_ids, step, chunk, d)
            z_tar = ((1.0 - t) * x + t * other) + offset
        m = len(chunk)
        v_tar = model.velocity(req.tar_condition, t, z_tar.reshape(m * n, d)).reshape(m, n, d)
        v_src = model.velocity(req.src_condition, t, z_src.reshape(m * n, d)).reshape(m, n, d)
        delta = v_tar - v_src
        for j in range(m):
            total += delta[j]
    return total / len(draws)


def _flowedit(model, req, n_avg, c, stream, method):
    if req.source_points.shape[0] == 0:
        return _empty(req, method)
    sch = req.schedule
    x = req.source_points
    draws = np.arange(n_avg)
    z = x.copy()
    path = Trajectory("flowedit")
    if req.record_trajectory:
        path.record(sch.n_max, sch.t(sch.n_max), z)
    for i in range(sch.n_max, sch.n_min, -1):
        t = sch.t(i)
        v_delta = _delta_average(model, req, x, z, t, i, draws, stream)
        z = z + (c * (sch.t(i - 1) - t)) * v_delta
        _check_finite(z, i - 1, sch.t(i - 1))
        if req.record_trajectory:
            path.velocities.append(v_delta)
            path.record(i - 1, sch.t(i - 1), z)
    steps = list(range(sch.n_max, sch.n_min, -1))
    trajs = [path] if req.record_trajectory else []
    if sch.n_min > 0:
        # hand over to plain target sampling below n_min
        t = sch.t(sch.n_min)
        noise = rng.normals(req.seed, stream, req.row_ids, sch.n_min, (0,), x.shape[1])[0]
        z_tar = ((1.0 - t) * x + t * noise) + (z - x)
        tail = integrate_reverse(model, req.tar_condition, sch, z_tar, start_index=sch.n_min,
                                 record=req.record_trajectory, step_scale=c)
        z = tail.final
        steps.append(sch.n_min)
        if req.record_trajectory:
            trajs.append(tail)
    log = _noise_log(req, stream, steps, n_avg)
    return EditResult(z, method, trajs, log)


def flowedit(model, req: EditRequest) -> EditResult:
    """FlowEdit with ``n_avg`` noise draws per step and the schedule's step scale."""
    return _flowedit(model, req, req.schedule.n_avg, req.schedule.step_scale_c,
                     FLOWEDIT_STREAM, "flowedit")


def flowedit_scaled(model, req: EditRequest, c: float) -> EditResult:
    """FlowEdit with every Euler increment multiplied by ``c``."""
    if c < 0:
        raise ValueError("c must be non-negative")
    return _flowedit(model, req, req.schedule.n_avg, float(c), FLOWEDIT_STREAM, "flowedit_scaled")


def flowedit_expectation(model, req: EditRequest, mc_samples: int = 4096) -> EditResult:
    """High-sample estimate of the FlowEdit ODE, on a stream independent of :func:`flowedit`."""
    if mc_samples < 256:
        raise ValueError("mc_samples must be at least 256")
    return _flowedit(model, req, mc_samples, req.schedule.step_scale_c,
                     EXPECTATION_STREAM, "flowedit_expectation")


def sdedit(model, req: EditRequest) -> EditResult:
    """Noise the source to ``t_{n_max}`` with one draw, then sample with the target."""
    if req.source_points.shape[0] == 0:
        return _empty(req, "sdedit")
    sch = req.schedule
    x = req.source_points
    if sch.n_max == 0:
        return EditResult(x.copy(), "sdedit", noise_log=_noise_log(req, SDEDIT_STREAM, [], 0))
    t = sch.t(sch.n_max)
    noise = rng.normals(req.seed, SDEDIT_STREAM, req.row_ids, sch.n_max, (0,), x.shape[1])[0]
    z = (1.0 - t) * x + t * noise
    rev = integrate_reverse(model, req.tar_condition, sch, z, start_index=sch.n_max,
                            record=req.record_trajectory)
    trajs = [rev] if req.record_trajectory else []
    return EditResult(rev.final, "sdedit", trajs, _noise_log(req, SDEDIT_STREAM, [sch.n_max], 1))


METHODS = {
    "flowedit": flowedit,
    "invert_edit": invert_edit,
    "direct_path_edit": direct_path_edit,
    "sdedit": sdedit,
}


def run_method(name, model, req, **kwargs) -> EditResult:
    if name == "flowedit_scaled":
        return flowedit_scaled(model, req, kwargs.get("c", req.schedule.step_scale_c))
    if name == "flowedit_expectation":
        return flowedit_expectation(model, req, kwargs.get("mc_samples", 4096))
    try:
        fn = METHODS[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}") from None
    return fn(model, req)
