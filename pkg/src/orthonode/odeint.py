"""Explicit Runge-Kutta integrators and the NODE block.

Gradients are obtained by exact reverse-mode differentiation through the
discrete solver steps (discretize-then-optimize). For the adaptive
Dormand-Prince solver the accepted step sequence of the forward pass is
frozen and replayed backwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from orthonode.layers import Grads, Layer, LayerTape
from orthonode.numerics import ShapeMismatch, Tensor

logger = logging.getLogger(__name__)

METHODS = ("euler", "rk4", "dopri5")
TIME_MODES = ("autonomous", "time-as-channel")

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
PI_ALPHA = 0.17
PI_BETA = 0.04


class MaxStepsExceeded(RuntimeError):
    """Raised when the adaptive solver cannot reach t1 within max_steps."""


class NonFiniteState(FloatingPointError):
    """Raised when a NaN or Inf shows up in the integrated state."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    t0: float = 0.0
    t1: float = 1.0
    fixed_steps: int = 10
    rtol: float = 1e-3
    atol: float = 1e-6
    max_steps: int = 10000

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"Unknown solver method {self.method!r}, expected one of {METHODS}")
        if not self.t1 > self.t0:
            raise ValueError(f"t1 ({self.t1}) must be greater than t0 ({self.t0})")
        if self.fixed_steps < 1:
            raise ValueError(f"fixed_steps must be >= 1, got {self.fixed_steps}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"rtol and atol must be positive, got {self.rtol}, {self.atol}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    @property
    def is_adaptive(self) -> bool:
        return self.method == "dopri5"


@dataclass(frozen=True)
class ButcherTableau:
    c: Tuple[float, ...]
    a: Tuple[Tuple[float, ...], ...]
    b: Tuple[float, ...]
    b_low: Optional[Tuple[float, ...]] = None
    fsal: bool = False

    @property
    def stages(self) -> int:
        return len(self.c)

    @property
    def solution_stages(self) -> int:
        """Stages that feed the propagated solution (the FSAL stage does not)."""
        return self.stages - 1 if self.fsal else self.stages


TABLEAUS: Dict[str, ButcherTableau] = {
    "euler": ButcherTableau(c=(0.0,), a=((),), b=(1.0,)),
    "rk4": ButcherTableau(
        c=(0.0, 0.5, 0.5, 1.0),
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    ),
    "dopri5": ButcherTableau(
        c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
        a=(
            (),
            (1 / 5,),
            (3 / 40, 9 / 40),
            (44 / 45, -56 / 15, 32 / 9),
            (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
            (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
            (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
        ),
        b=(35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0),
        b_low=(
            5179 / 57600,
            0.0,
            7571 / 16695,
            393 / 640,
            -92097 / 339200,
            187 / 2100,
            1 / 40,
        ),
        fsal=True,
    ),
}


@dataclass
class StepRecord:
    """One accepted step: start time, step size and the solution-stage tapes."""

    t: float
    h: float
    tapes: List[LayerTape]


@dataclass
class Trajectory:
    """Ordered (time, state) samples of one integration."""

    times: List[float]
    states: List[Tensor]
    function_evaluations: int = 0
    rejected_steps: int = 0
    records: List[StepRecord] = field(default_factory=list, repr=False)

    @property
    def final(self) -> Tensor:
        return self.states[-1]

    @property
    def accepted_steps(self) -> int:
        return len(self.times) - 1

    def to_frame(self, full_state: bool = False) -> pd.DataFrame:
        """Tabulate time and state norm (and optionally the flattened state)."""
        frame = pd.DataFrame(
            {
                "time": self.times,
                "state_norm": [float(np.linalg.norm(s)) for s in self.states],
            }
        )
        if full_state:
            flat = np.stack([np.ravel(s) for s in self.states])
            columns = [f"z{i}" for i in range(flat.shape[1])]
            frame = pd.concat([frame, pd.DataFrame(flat, columns=columns)], axis=1)
        return frame


def export_trajectory_csv(
    trajectory: Trajectory, path: Union[str, Path], full_state: bool = False
) -> Path:
    """Write a trajectory as CSV (time, state norm, optional full state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory.to_frame(full_state=full_state).to_csv(path, index=False)
    return path


class DynamicsField:
    """Trainable vector field f(z, t) built from a layer stack.

    In ``time-as-channel`` mode a constant plane of value t is appended to the
    channel axis before the layers run, so the first layer takes one extra
    input channel.
    """

    def __init__(self, layers: Layer, time_mode: str = "autonomous") -> None:
        if time_mode not in TIME_MODES:
            raise ValueError(f"Unknown time mode {time_mode!r}, expected one of {TIME_MODES}")
        self.layers = layers
        self.time_mode = time_mode

    def _with_time(self, z: Tensor, t: float) -> Tensor:
        if self.time_mode == "autonomous":
            return z
        if z.ndim != 4:
            raise ShapeMismatch(f"time-as-channel needs b x c x h x w states, got {z.shape}")
        plane = np.full((z.shape[0], 1) + z.shape[2:], t, dtype=z.dtype)
        return np.concatenate([z, plane], axis=1)

    def forward(self, z: Tensor, t: float) -> Tuple[Tensor, LayerTape]:
        dz, tape = self.layers.forward(self._with_time(z, t))
        if dz.shape != z.shape:
            raise ShapeMismatch(f"Dynamics map {z.shape} to {dz.shape}; shapes must agree")
        return dz, tape

    def backward(self, tape: LayerTape, grad_dz: Tensor) -> Tuple[Tensor, Grads]:
        grad_in, grads = self.layers.backward(tape, grad_dz)
        if self.time_mode == "time-as-channel":
            grad_in = grad_in[:, :-1]
        return grad_in, grads

    def evaluate(self, z: Tensor, t: float = 0.0) -> Tensor:
        return self.forward(z, t)[0]

    def __call__(self, z: Tensor) -> Tensor:
        return self.evaluate(z)

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.layers.parameters()

    def lipschitz_bound(self) -> float:
        return self.layers.lipschitz_bound()


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


def _check_finite(z: Tensor, t: float) -> None:
    if not np.all(np.isfinite(z)):
        raise NonFiniteState(f"Non-finite state encountered at t = {t:.6g}")


def _rk_step(
    f: DynamicsField,
    tableau: ButcherTableau,
    z: Tensor,
    t: float,
    h: float,
    first: Optional[Tuple[Tensor, LayerTape]] = None,
) -> Tuple[Tensor, List[Tensor], List[LayerTape]]:
    ks: List[Tensor] = []
    tapes: List[LayerTape] = []
    for i in range(tableau.stages):
        if i == 0 and first is not None:
            k, tape = first
        else:
            u = z
            for j, a_ij in enumerate(tableau.a[i]):
                if a_ij != 0.0:
                    u = u + (h * a_ij) * ks[j]
            k, tape = f.forward(u, t + tableau.c[i] * h)
        ks.append(k)
        tapes.append(tape)
    z_next = z
    for b_i, k in zip(tableau.b, ks):
        if b_i != 0.0:
            z_next = z_next + (h * b_i) * k
    return z_next.astype(z.dtype, copy=False), ks, tapes


def _initial_step(
    f: DynamicsField, z0: Tensor, f0: Tensor, cfg: SolverConfig, order: int
) -> float:
    scale = cfg.atol + np.abs(z0) * cfg.rtol
    d0, d1 = _rms(z0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f.evaluate(z0 + h0 * f0, cfg.t0 + h0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return float(min(100 * h0, h1, cfg.t1 - cfg.t0))


def _integrate_fixed(
    f: DynamicsField, z0: Tensor, cfg: SolverConfig, keep_tapes: bool
) -> Trajectory:
    tableau = TABLEAUS[cfg.method]
    n = cfg.fixed_steps
    h = (cfg.t1 - cfg.t0) / n
    z = z0
    trajectory = Trajectory(times=[cfg.t0], states=[z0])
    for i in range(n):
        t = cfg.t0 + i * h
        z, _, tapes = _rk_step(f, tableau, z, t, h)
        trajectory.function_evaluations += tableau.stages
        t_next = cfg.t1 if i == n - 1 else cfg.t0 + (i + 1) * h
        _check_finite(z, t_next)
        trajectory.times.append(t_next)
        trajectory.states.append(z)
        if keep_tapes:
            trajectory.records.append(StepRecord(t=t, h=h, tapes=tapes))
    return trajectory


def _integrate_adaptive(
    f: DynamicsField, z0: Tensor, cfg: SolverConfig, keep_tapes: bool
) -> Trajectory:
    tableau = TABLEAUS[cfg.method]
    assert tableau.b_low is not None
    err_weights = [b - bl for b, bl in zip(tableau.b, tableau.b_low)]

    t, z = cfg.t0, z0
    first = f.forward(z, t)
    trajectory = Trajectory(times=[t], states=[z0], function_evaluations=2)
    h = _initial_step(f, z, first[0], cfg, order=4)
    previous_error = 1e-4

    while t < cfg.t1:
        if trajectory.accepted_steps + trajectory.rejected_steps >= cfg.max_steps:
            raise MaxStepsExceeded(
                f"dopri5 did not reach t1 = {cfg.t1} within {cfg.max_steps} steps "
                f"(stopped at t = {t:.6g}, h = {h:.3e})"
            )
        last = h >= cfg.t1 - t
        if last:
            h = cfg.t1 - t
        z_new, ks, tapes = _rk_step(f, tableau, z, t, h, first=first)
        trajectory.function_evaluations += tableau.stages - 1

        error = sum((h * e) * k for e, k in zip(err_weights, ks) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z_new))
        error_norm = _rms(error / scale) if np.all(np.isfinite(z_new)) else np.inf

        if error_norm <= 1.0:
            t_next = cfg.t1 if last else t + h
            _check_finite(z_new, t_next)
            if keep_tapes:
                trajectory.records.append(
                    StepRecord(t=t, h=h, tapes=tapes[: tableau.solution_stages])
                )
            t, z = t_next, z_new
            trajectory.times.append(t)
            trajectory.states.append(z)
            first = (ks[-1], tapes[-1])
            if error_norm == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * error_norm ** (-PI_ALPHA) * previous_error**PI_BETA
            previous_error = max(error_norm, 1e-4)
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            logger.debug(f"dopri5 accepted t={t:.6g} err={error_norm:.3e}")
        else:
            trajectory.rejected_steps += 1
            if not np.isfinite(error_norm):
                factor = MIN_FACTOR
            else:
                factor = min(1.0, max(MIN_FACTOR, SAFETY * error_norm ** (-PI_ALPHA)))
            logger.debug(f"dopri5 rejected t={t:.6g} err={error_norm:.3e}")
        h *= factor
    return trajectory


def integrate(
    f: DynamicsField, z0: Tensor, cfg: SolverConfig, keep_tapes: bool = False
) -> Trajectory:
    """Integrate ``dz/dt = f(z, t)`` from ``cfg.t0`` to ``cfg.t1``.

    Args:
        f: The dynamics field
        z0: Initial state
        cfg: Solver configuration
        keep_tapes: Keep the stage tapes for a later backward pass

    Returns:
        Trajectory with the initial state, every accepted step and the final
        state at exactly ``cfg.t1``
    """
    _check_finite(z0, cfg.t0)
    if cfg.is_adaptive:
        return _integrate_adaptive(f, z0, cfg, keep_tapes)
    return _integrate_fixed(f, z0, cfg, keep_tapes)


def node_forward(
    model_block: DynamicsField, z_in: Tensor, cfg: SolverConfig
) -> Tuple[Tensor, LayerTape]:
    """Solution map ``z_in -> z(T)`` keeping everything needed for backprop."""
    trajectory = integrate(model_block, z_in, cfg, keep_tapes=True)
    return trajectory.final, LayerTape(
        "node", {"field": model_block, "method": cfg.method, "trajectory": trajectory}
    )


def _accumulate(total: Grads, grads: Grads) -> None:
    for name, g in grads.items():
        total[name] = total[name] + g if name in total else g


def node_backward(tape: LayerTape, grad_out: Tensor) -> Tuple[Tensor, Grads]:
    """Reverse-mode differentiation through the recorded solver steps."""
    payload = tape.consume("node")
    f: DynamicsField = payload["field"]
    tableau = TABLEAUS[payload["method"]]
    trajectory: Trajectory = payload["trajectory"]

    grads: Grads = {}
    grad_z = grad_out
    for record in reversed(trajectory.records):
        h = record.h
        stages = len(record.tapes)
        grad_k = [(h * tableau.b[i]) * grad_z for i in range(stages)]
        grad_z = grad_z.copy()
        for i in reversed(range(stages)):
            grad_u, stage_grads = f.backward(record.tapes[i], grad_k[i])
            _accumulate(grads, stage_grads)
            grad_z = grad_z + grad_u
            for j, a_ij in enumerate(tableau.a[i]):
                if a_ij != 0.0:
                    grad_k[j] = grad_k[j] + (h * a_ij) * grad_u
    for name, p in f.parameters().items():
        grads.setdefault(name, np.zeros_like(p))
    return grad_z.astype(grad_out.dtype, copy=False), grads


class NodeBlock(Layer):
    """The NODE block as a layer: ``z_out = phi_T(z_in)``."""

    kind = "node"

    def __init__(self, dynamics: DynamicsField, cfg: SolverConfig) -> None:
        super().__init__()
        self.field = dynamics
        self.cfg = cfg

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return node_forward(self.field, x, self.cfg)

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return node_backward(tape, grad_y)

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.field.parameters()

    def lipschitz_bound(self) -> float:
        """Grönwall bound ``exp(L_f (t1 - t0))`` on the flow map."""
        return float(np.exp(self.field.lipschitz_bound() * (self.cfg.t1 - self.cfg.t0)))

    def describe(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "time_mode": self.field.time_mode,
            "method": self.cfg.method,
            "dynamics": self.field.layers.describe(),
        }


@dataclass(frozen=True)
class NonIntersectionReport:
    min_distance: float
    min_time: float
    initial_distance: float
    merged: bool
    threshold: float


def integrate_jointly(
    f: DynamicsField, states: Sequence[Tensor], cfg: SolverConfig
) -> Tuple[List[float], List[List[Tensor]]]:
    """Integrate several batches on a common time grid.

    The batches are stacked along the leading axis so that the adaptive
    solver picks one step sequence for all of them.

    Returns:
        (times, per-input lists of states)
    """
    sizes = [s.shape[0] for s in states]
    trajectory = integrate(f, np.concatenate(states, axis=0), cfg)
    bounds = np.cumsum([0] + sizes)
    split = [
        [s[bounds[i] : bounds[i + 1]] for s in trajectory.states] for i in range(len(states))
    ]
    return trajectory.times, split


def non_intersection_check(
    f: DynamicsField,
    z0_a: Tensor,
    z0_b: Tensor,
    cfg: SolverConfig,
    threshold: float = 1e-10,
) -> NonIntersectionReport:
    """Minimum distance between two integral curves over the recorded times."""
    if z0_a.shape != z0_b.shape:
        raise ShapeMismatch(f"Initial states differ in shape: {z0_a.shape} vs {z0_b.shape}")
    if np.array_equal(z0_a, z0_b):
        raise ValueError("Initial states must differ")
    times, (states_a, states_b) = integrate_jointly(f, [z0_a, z0_b], cfg)
    distances = np.array([np.linalg.norm(a - b) for a, b in zip(states_a, states_b)])
    i = int(np.argmin(distances))
    report = NonIntersectionReport(
        min_distance=float(distances[i]),
        min_time=float(times[i]),
        initial_distance=float(distances[0]),
        merged=bool(distances[i] < threshold),
        threshold=threshold,
    )
    if report.merged:
        logger.warning(
            f"Trajectories merged numerically at t = {report.min_time:.6g} "
            f"(distance {report.min_distance:.3e})"
        )
    return report
