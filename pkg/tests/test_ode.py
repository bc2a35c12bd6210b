import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowedit_lab.field import ConditionedModel
from flowedit_lab.gmm import GaussianMixture
from flowedit_lab.ode import (TRAJECTORY_HEADER, NumericalError, Schedule, euler_step,
                              integrate_forward, integrate_reverse, trajectories_to_csv)


class LinearField:
    """``v(z, t) = a z``; one Euler step multiplies by ``1 + a dt``."""

    dim = 2

    def __init__(self, a):
        self.a = a

    def velocity(self, condition, t, z):
        return self.a * z


class BlowUp:
    dim = 2

    def velocity(self, condition, t, z):
        return np.full_like(z, np.inf)


def test_schedule_defaults_and_grid():
    s = Schedule()
    assert (s.T, s.n_max, s.n_min, s.n_avg, s.step_scale_c) == (50, 50, 0, 1, 1.0)
    assert s.t(0) == 0.0 and s.t(50) == 1.0 and s.t(25) == 0.5


@pytest.mark.parametrize("kwargs", [
    dict(T=0), dict(T=10, n_max=11), dict(T=10, n_max=4, n_min=5), dict(n_avg=0),
    dict(step_scale_c=-1.0), dict(timesteps=[0.0, 0.5, 0.5, 1.0]), dict(timesteps=[0.1, 1.0]),
])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        Schedule(**kwargs)


def test_custom_grid_sets_T_and_replace_resets():
    s = Schedule(timesteps=[0.0, 0.1, 0.5, 1.0])
    assert s.T == 3 and s.n_max == 3
    r = s.replace(T=8)
    assert r.T == 8 and r.n_max == 8 and r.t(4) == 0.5
    assert Schedule(T=10, n_max=5).replace(T=20).n_max == 5


def test_euler_step_shape_check():
    with pytest.raises(ValueError):
        euler_step(np.zeros((2, 2)), np.zeros((3, 2)), 0.1)


@given(st.floats(-2, 2), st.integers(1, 30))
def test_forward_euler_on_linear_field_is_exact_product(a, T):
    x = np.array([[1.0, -2.0]])
    out = integrate_forward(LinearField(a), None, Schedule(T=T), x).final
    np.testing.assert_allclose(out, x * (1 + a / T) ** T, rtol=1e-10)


def test_reverse_uses_velocity_at_step_start():
    class TimeField:
        dim = 1

        def velocity(self, condition, t, z):
            return np.full_like(z, t)

    s = Schedule(T=4)
    out = integrate_reverse(TimeField(), None, s, np.zeros((1, 1))).final
    # sum over i = 4..1 of t_i * (-1/4)
    np.testing.assert_allclose(out, [[-(1.0 + 0.75 + 0.5 + 0.25) / 4]], rtol=1e-15)


def test_trajectory_recording_invariants(fig3_model):
    x = np.array([[10.0, 10.0], [-10.0, -11.0]])
    s = Schedule(T=6)
    fwd = integrate_forward(fig3_model, "src", s, x, stop_index=4)
    assert fwd.step_indices == [0, 1, 2, 3, 4]
    assert len(fwd.velocities) == len(fwd.states) - 1
    for j, v in enumerate(fwd.velocities):
        np.testing.assert_array_equal(fwd.states[j + 1], fwd.states[j] + (fwd.times[j + 1] - fwd.times[j]) * v)
    quiet = integrate_forward(fig3_model, "src", s, x, stop_index=4, record=False)
    assert len(quiet.states) == 1
    np.testing.assert_array_equal(quiet.final, fwd.final)


def test_zero_length_integrations_return_input(fig3_model):
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(integrate_forward(fig3_model, "src", Schedule(), x, stop_index=0).final, x)
    np.testing.assert_array_equal(integrate_reverse(fig3_model, "tar", Schedule(), x, start_index=0).final, x)


def test_non_finite_state_raises_with_step():
    with pytest.raises(NumericalError) as info:
        integrate_forward(BlowUp(), None, Schedule(T=5), np.zeros((1, 2)))
    assert info.value.step == 1


def test_single_gaussian_reverse_approaches_data_distribution():
    gmm = GaussianMixture.isotropic([[3.0, -1.0]], var=0.25)
    model = ConditionedModel({"g": gmm})
    noise = np.random.default_rng(0).normal(size=(20000, 2))
    out = integrate_reverse(model, "g", Schedule(T=200), noise, record=False).final
    np.testing.assert_allclose(out.mean(axis=0), [3.0, -1.0], atol=0.02)
    np.testing.assert_allclose(out.std(axis=0), [0.5, 0.5], atol=0.02)


def test_trajectory_csv_schema(fig3_model):
    tr = integrate_forward(fig3_model, "src", Schedule(T=2), np.array([[1.0, 2.0]]))
    lines = trajectories_to_csv([tr]).splitlines()
    assert lines[0] == ",".join(TRAJECTORY_HEADER + ("z_0", "z_1"))
    assert lines[1] == "src-forward,0,0.0,0,1.0,2.0"
    assert len(lines) == 4
