"""Timestep schedules and explicit-Euler flow integration."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .gmm import as_batch


class NumericalError(ArithmeticError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, step, t):
        super().__init__(f"non-finite state after step {step} (t={t:.6g})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class Schedule:
    """Discretization grid ``0 = t_0 < t_1 < ... < t_T = 1`` plus edit knobs.

    ``timesteps[i]`` is ``t_i``; editing runs from index ``n_max`` down.
    """

    T: int = 50
    n_max: int | None = None
    n_min: int = 0
    n_avg: int = 1
    step_scale_c: float = 1.0
    timesteps: np.ndarray | None = None

    def __post_init__(self):
        if self.timesteps is None:
            if self.T < 1:
                raise ValueError("T must be at least 1")
            grid = np.arange(self.T + 1, dtype=np.float64) / self.T
        else:
            grid = np.array(self.timesteps, dtype=np.float64)
            if grid.ndim != 1 or grid.size < 2:
                raise ValueError("timesteps must be a 1-D grid with at least two points")
            if grid[0] != 0.0 or grid[-1] != 1.0:
                raise ValueError("timesteps must start at exactly 0 and end at exactly 1")
            if np.any(np.diff(grid) <= 0):
                raise ValueError("timesteps must be strictly increasing")
            object.__setattr__(self, "T", grid.size - 1)
        grid.setflags(write=False)
        object.__setattr__(self, "timesteps", grid)
        if self.n_max is None:
            object.__setattr__(self, "n_max", self.T)
        if not 0 <= self.n_min <= self.n_max <= self.T:
            raise ValueError(f"need 0 <= n_min <= n_max <= T, got n_min={self.n_min}, "
                             f"n_max={self.n_max}, T={self.T}")
        if self.n_avg < 1:
            raise ValueError("n_avg must be at least 1")
        if not self.step_scale_c >= 0:
            raise ValueError("step_scale_c must be non-negative")

    def t(self, i: int) -> float:
        return float(self.timesteps[i])

    def replace(self, **changes) -> "Schedule":
        fields = dict(T=self.T, n_max=self.n_max, n_min=self.n_min, n_avg=self.n_avg,
                      step_scale_c=self.step_scale_c, timesteps=self.timesteps)
        if "T" in changes:
            fields["timesteps"] = None
            if "n_max" not in changes and self.n_max == self.T:
                fields["n_max"] = None
        fields.update(changes)
        return Schedule(**fields)


@dataclass
class Trajectory:
    """Recorded states of one path; ``velocities[j]`` drove ``states[j] -> states[j + 1]``."""

    label: str
    times: list = field(default_factory=list)
    step_indices: list = field(default_factory=list)
    states: list = field(default_factory=list)
    velocities: list = field(default_factory=list)

    def record(self, step_index, t, state):
        self.step_indices.append(step_index)
        self.times.append(float(t))
        self.states.append(np.array(state, copy=True))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


TRAJECTORY_HEADER = ("path_label", "step_index", "t", "point_index")


def trajectory_rows(traj: Trajectory, row_ids=None):
    for step, t, state in zip(traj.step_indices, traj.times, traj.states):
        ids = range(state.shape[0]) if row_ids is None else row_ids
        for i, p in zip(ids, state):
            yield (traj.label, step, repr(t), int(i), *(repr(float(v)) for v in p))


def trajectories_to_csv(trajs, row_ids=None) -> str:
    """CSV text with header ``path_label,step_index,t,point_index,z_0..z_{d-1}``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    dim = next((tr.states[0].shape[1] for tr in trajs if tr.states), 0)
    writer.writerow(TRAJECTORY_HEADER + tuple(f"z_{j}" for j in range(dim)))
    for tr in trajs:
        writer.writerows(trajectory_rows(tr, row_ids))
    return buf.getvalue()


def euler_step(z, v, dt):
    """``z + dt * v``."""
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if z.shape != v.shape:
        raise ValueError("state and velocity shapes differ")
    return z + dt * v


def _check_finite(z, step, t):
    if not np.all(np.isfinite(z)):
        raise NumericalError(step, t)


def integrate_forward(model, condition, schedule: Schedule, x0, stop_index=None,
                      label="src-forward", record=True) -> Trajectory:
    """Euler-integrate data -> noise from ``t_0`` up to ``t_stop`` (default ``t_T``).

    With ``record=False`` only the final state is kept.
    """
    z = as_batch(x0) if np.size(x0) else np.asarray(x0, dtype=np.float64).reshape(0, model.dim)
    stop = schedule.T if stop_index is None else stop_index
    if not 0 <= stop <= schedule.T:
        raise ValueError("stop_index out of range")
    traj = Trajectory(label)
    if record:
        traj.record(0, schedule.t(0), z)
    for i in range(stop):
        t = schedule.t(i)
        v = model.velocity(condition, t, z)
        z = euler_step(z, v, schedule.t(i + 1) - t)
        _check_finite(z, i + 1, schedule.t(i + 1))
        if record:
            traj.velocities.append(v)
            traj.record(i + 1, schedule.t(i + 1), z)
    if not record:
        traj.record(stop, schedule.t(stop), z)
    return traj


def integrate_reverse(model, condition, schedule: Schedule, z1, start_index=None,
                      label="tar-reverse", record=True, step_scale=1.0) -> Trajectory:
    """Euler-integrate noise -> data from ``t_start`` (default ``t_T``) down to ``t_0``.

    Each step's velocity is evaluated where the step starts, ``(Z_{t_i}, t_i)``.
    ``step_scale`` multiplies every increment.
    """
    z = as_batch(z1) if np.size(z1) else np.asarray(z1, dtype=np.float64).reshape(0, model.dim)
    start = schedule.T if start_index is None else start_index
    if not 0 <= start <= schedule.T:
        raise ValueError("start_index out of range")
    traj = Trajectory(label)
    if record:
        traj.record(start, schedule.t(start), z)
    for i in range(start, 0, -1):
        t = schedule.t(i)
        v = model.velocity(condition, t, z)
        z = euler_step(z, v, step_scale * (schedule.t(i - 1) - t))
        _check_finite(z, i - 1, schedule.t(i - 1))
        if record:
            traj.velocities.append(v)
            traj.record(i - 1, schedule.t(i - 1), z)
    if not record:
        traj.record(0, schedule.t(0), z)
    return traj
