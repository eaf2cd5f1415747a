"""Tests for the Runge-Kutta integrators and the NODE block."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from orthonode.layers import GroupSort, KernelWeights, OrthoConv2d, PlainConv2d, Scale, Sequential, Sine
from orthonode.odeint import (
    TABLEAUS,
    DynamicsField,
    MaxStepsExceeded,
    NodeBlock,
    NonFiniteState,
    SolverConfig,
    _rk_step,
    export_trajectory_csv,
    integrate,
    integrate_jointly,
    node_backward,
    node_forward,
    non_intersection_check,
)
from orthonode.numerics import ShapeMismatch
from orthonode.selftest import convergence_order, directional_gradient_error, layer_gradient_errors


def test_solver_config_validation():
    """Bad methods, intervals and step counts are rejected."""
    with pytest.raises(ValueError):
        SolverConfig(method="midpoint")
    with pytest.raises(ValueError):
        SolverConfig(t0=1.0, t1=1.0)
    with pytest.raises(ValueError):
        SolverConfig(fixed_steps=0)
    with pytest.raises(ValueError):
        SolverConfig(method="dopri5", rtol=0.0)
    assert SolverConfig(method="dopri5").is_adaptive
    assert not SolverConfig().is_adaptive


def test_zero_field_keeps_state():
    """f = 0 leaves the state unchanged for every method."""
    z0 = np.array([[1.0, -2.0]])
    for method in ("euler", "rk4", "dopri5"):
        trajectory = integrate(DynamicsField(Scale(0.0)), z0, SolverConfig(method=method))
        assert_allclose(trajectory.final, z0)
        assert trajectory.times[0] == 0.0
        assert trajectory.times[-1] == 1.0


def test_linear_growth_accuracy():
    """z' = z over [0, 1] gives e * z0."""
    z0 = np.array([[1.0], [0.5]])
    f = DynamicsField(Scale(1.0))
    rk4 = integrate(f, z0, SolverConfig(method="rk4", fixed_steps=10)).final
    assert_allclose(rk4, np.e * z0, rtol=1e-5)
    euler = integrate(f, z0, SolverConfig(method="euler", fixed_steps=1)).final
    assert_allclose(euler, 2 * z0)
    cfg = SolverConfig(method="dopri5", rtol=1e-3, atol=1e-6)
    dopri = integrate(f, z0, cfg).final
    assert np.abs(dopri - np.e * z0).max() <= 10 * (cfg.rtol * np.e + cfg.atol)


@pytest.mark.parametrize("layer", [Scale(1.0), Sine()])
def test_convergence_orders(layer):
    """Observed orders of Euler and RK4."""
    assert 0.8 <= convergence_order("euler", layer) <= 1.2
    assert 3.5 <= convergence_order("rk4", layer, steps=(8, 16)) <= 4.5


def test_solver_statistics():
    """Function evaluations and step counts are recorded."""
    z0 = np.ones((1, 2))
    trajectory = integrate(DynamicsField(Sine()), z0, SolverConfig(method="rk4", fixed_steps=10))
    assert trajectory.function_evaluations == 40
    assert trajectory.accepted_steps == 10
    assert trajectory.rejected_steps == 0
    assert len(trajectory.states) == 11

    adaptive = integrate(DynamicsField(Scale(-3.0)), z0, SolverConfig(method="dopri5"))
    assert adaptive.accepted_steps >= 1
    assert adaptive.times == sorted(adaptive.times)


def test_max_steps_and_non_finite_state():
    """The adaptive solver gives up after max_steps; NaNs are reported."""
    with pytest.raises(MaxStepsExceeded):
        integrate(
            DynamicsField(Scale(50.0)),
            np.ones((1, 1)),
            SolverConfig(method="dopri5", rtol=1e-8, atol=1e-10, max_steps=3),
        )
    with pytest.raises(NonFiniteState):
        integrate(DynamicsField(Scale(1.0)), np.array([[np.nan]]), SolverConfig())


def test_dynamics_must_preserve_shape(rng):
    """A field mapping to a different shape is rejected."""
    conv = PlainConv2d(KernelWeights(rng.standard_normal((3, 2, 3, 3))), (4, 4))
    with pytest.raises(ShapeMismatch):
        integrate(DynamicsField(conv), rng.standard_normal((1, 2, 4, 4)), SolverConfig())


def test_time_as_channel_appends_time_plane(rng):
    """The first layer sees c + 1 channels, the last of which equals t."""
    conv = OrthoConv2d(KernelWeights(rng.standard_normal((2, 3, 3, 3))), (4, 4))
    f = DynamicsField(Sequential([conv, GroupSort()]), time_mode="time-as-channel")
    z = rng.standard_normal((2, 2, 4, 4))
    assert f.evaluate(z, 0.3).shape == z.shape
    assert not np.allclose(f.evaluate(z, 0.0), f.evaluate(z, 0.9))
    with pytest.raises(ValueError):
        DynamicsField(conv, time_mode="sometimes")


@pytest.mark.parametrize("method", ["euler", "rk4"])
@pytest.mark.parametrize("time_mode", ["autonomous", "time-as-channel"])
def test_node_block_gradients(rng, method, time_mode):
    """Discretize-then-optimize gradients agree with central differences."""
    c_in = 3 if time_mode == "time-as-channel" else 2
    dynamics = Sequential(
        [
            OrthoConv2d(KernelWeights(0.3 * rng.standard_normal((2, c_in, 3, 3))), (4, 3)),
            GroupSort(),
        ]
    )
    block = NodeBlock(DynamicsField(dynamics, time_mode), SolverConfig(method=method, fixed_steps=3))
    for _ in range(3):
        errors = layer_gradient_errors(block, rng.standard_normal((2, 2, 4, 3)), rng)
        assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("ortho", [False, True])
def test_dopri5_gradients_replay_accepted_steps(rng, ortho):
    """Adaptive gradients differentiate the accepted step sequence, held fixed."""
    if ortho:
        dims = (3, 3)
        kernel = KernelWeights(0.3 * rng.standard_normal((2, 2, 3, 3)))
        layers = Sequential([OrthoConv2d(kernel, dims), GroupSort()])
        z0 = rng.standard_normal((2, 2) + dims)
    else:
        layers, z0 = Sequential([Sine()]), rng.standard_normal((3, 4))
    f = DynamicsField(layers)
    cfg = SolverConfig(method="dopri5", rtol=1e-6, atol=1e-8)
    z_out, tape = node_forward(f, z0, cfg)
    grid = [(record.t, record.h) for record in tape.payload["trajectory"].records]
    assert len(grid) > 1
    weights = rng.standard_normal(z_out.shape)
    grad_z, grads = node_backward(tape, weights)

    def replay(z: np.ndarray) -> np.ndarray:
        for t, h in grid:
            z, _, _ = _rk_step(f, TABLEAUS["dopri5"], z, t, h)
        return z

    def loss() -> float:
        return float(np.sum(replay(z0) * weights))

    assert_allclose(replay(z0), z_out, atol=1e-12)
    assert directional_gradient_error(loss, z0, grad_z, rng) < 1e-6
    for name, param in f.parameters().items():
        assert directional_gradient_error(loss, param, grads[name], rng) < 1e-6, name


def test_node_backward_on_scalar_field():
    """For z' = c z with Euler, dz_T/dz_0 = (1 + c h)^n."""
    c, n = 0.5, 4
    f = DynamicsField(Scale(c))
    z_out, tape = node_forward(f, np.array([[2.0]]), SolverConfig(method="euler", fixed_steps=n))
    grad_z, grads = node_backward(tape, np.ones_like(z_out))
    assert grad_z[0, 0] == pytest.approx((1 + c / n) ** n)
    assert "scale" in grads


def test_node_block_bound():
    """The flow-map bound is exp(L (t1 - t0))."""
    block = NodeBlock(DynamicsField(Scale(0.5)), SolverConfig(t1=2.0))
    assert block.lipschitz_bound() == pytest.approx(np.e)
    assert block.describe()["method"] == "rk4"


def test_integrate_jointly_splits_batches(rng):
    """Stacked integration returns per-input states on one time grid."""
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    times, (states_a, states_b) = integrate_jointly(DynamicsField(Sine()), [a, b], SolverConfig(method="dopri5"))
    assert len(times) == len(states_a) == len(states_b)
    assert states_a[-1].shape == a.shape and states_b[-1].shape == b.shape
    alone = integrate(DynamicsField(Sine()), a, SolverConfig(method="rk4")).final
    jointly = integrate_jointly(DynamicsField(Sine()), [a, b], SolverConfig(method="rk4"))[1][0][-1]
    assert_allclose(jointly, alone)


def test_non_intersection_check():
    """Distinct trajectories of a linear contraction never merge."""
    f = DynamicsField(Scale(-1.0))
    report = non_intersection_check(f, np.array([[1.0]]), np.array([[2.0]]), SolverConfig())
    assert not report.merged
    assert report.initial_distance == pytest.approx(1.0)
    assert report.min_distance == pytest.approx(np.exp(-1.0), rel=1e-4)
    assert report.min_time == pytest.approx(1.0)
    with pytest.raises(ValueError):
        non_intersection_check(f, np.ones((1, 1)), np.ones((1, 1)), SolverConfig())


def test_export_trajectory_csv(tmp_path: Path):
    """Trajectories export time, norm and optionally the flattened state."""
    trajectory = integrate(DynamicsField(Scale(1.0)), np.array([[3.0, 4.0]]), SolverConfig(fixed_steps=5))
    path = export_trajectory_csv(trajectory, tmp_path / "traj" / "a.csv", full_state=True)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["time", "state_norm", "z0", "z1"]
    assert len(frame) == 6
    assert frame["state_norm"].iloc[0] == pytest.approx(5.0)
