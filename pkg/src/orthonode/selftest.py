"""Property suites run by ``orthonode selftest``.

Each property is a callable raising ``AssertionError`` on failure. The suites
check the FFT round trip on every grid up to 16x16, dense oracles for the
convolutions and their spectral norms, orthogonality of the Cayley layer,
finite-difference gradients of layers, NODE blocks and whole classifiers,
solver convergence orders, the Grönwall equality case and contraction
rates of linear fields.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from numpy.testing import assert_allclose

from orthonode import layers as layer_ops
from orthonode.layers import (
    Dense,
    GroupSort,
    KernelWeights,
    Layer,
    OrthoConv2d,
    PlainConv2d,
    Scale,
    Sequential,
    Sine,
)
from orthonode.lipschitz import contraction_rate, gronwall_certify, spectral_norm_conv
from orthonode.numerics import (
    circular_conv,
    conv_matrix,
    direct_circular_conv,
    fft2,
    ifft2,
    operator_matrix,
)
from orthonode.odeint import TIME_MODES, DynamicsField, NodeBlock, SolverConfig, integrate
from orthonode.trainer import ARCH_KINDS, ModelConfig, build_model
from orthonode.utils import rng_stream

logger = logging.getLogger(__name__)

Property = Callable[[int], None]


@dataclass
class SelftestResult:
    passed: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failed


def _random_kernel_case(rng: np.random.Generator) -> Tuple[np.ndarray, Tuple[int, int]]:
    k = int(rng.choice([1, 3]))
    h, w = (int(v) for v in rng.integers(max(k, 2), 9, size=2))
    c_out, c_in = (int(v) for v in rng.integers(1, 5, size=2))
    return rng.standard_normal((c_out, c_in, k, k)), (h, w)


def check_fft_round_trip(seed: int) -> None:
    rng = rng_stream(seed, "selftest", 0)
    for h in range(1, 17):
        for w in range(1, 17):
            x = rng.standard_normal((1, 2, h, w))
            assert_allclose(ifft2(fft2(x)).real, x, atol=1e-10, err_msg=f"grid {h}x{w}")


def check_conv_oracles(seed: int, trials: int = 100) -> None:
    rng = rng_stream(seed, "selftest", 1)
    for _ in range(trials):
        w, dims = _random_kernel_case(rng)
        x = rng.standard_normal((2, w.shape[1]) + dims)
        assert_allclose(circular_conv(x, w), direct_circular_conv(x, w), atol=1e-9)
        dense = conv_matrix(w, dims)
        assert_allclose(circular_conv(x, w).reshape(2, -1), x.reshape(2, -1) @ dense.T, atol=1e-9)


def check_spectral_norm(seed: int, trials: int = 100) -> None:
    """The Fourier-block operator norm matches the SVD of the dense convolution."""
    rng = rng_stream(seed, "selftest", 4)
    for _ in range(trials):
        k = int(rng.choice([1, 3]))
        dims = tuple(int(v) for v in rng.integers(k, 7, size=2))
        c_out, c_in = (int(v) for v in rng.integers(1, 4, size=2))
        w = rng.standard_normal((c_out, c_in, k, k))
        dense = np.linalg.svd(conv_matrix(w, dims), compute_uv=False)[0]
        norm = spectral_norm_conv(w, dims)
        assert abs(norm - dense) <= 1e-8 * max(1.0, dense), (
            f"spectral norm {norm:.12f} vs dense {dense:.12f} on grid {dims}"
        )


def check_orthogonality(seed: int, cases: int = 100) -> None:
    """Cayley-transformed convolutions preserve norms and have unit singular values."""
    rng = rng_stream(seed, "selftest", 2)
    for _ in range(cases):
        w, dims = _random_kernel_case(rng)
        op = layer_ops.cayley_orthogonalize(KernelWeights(w), dims)
        sv = np.linalg.svd(operator_matrix(op.freq_op), compute_uv=False)
        c_out, c_in = w.shape[:2]
        expected = np.ones(min(c_out, c_in) * dims[0] * dims[1])
        assert_allclose(np.sort(sv)[::-1][: expected.size], expected, atol=1e-5)
        if c_out >= c_in:
            x = rng.standard_normal((3, c_in) + dims)
            norms_in = np.linalg.norm(x.reshape(3, -1), axis=1)
            norms_out = np.linalg.norm(op.apply(x).reshape(3, -1), axis=1)
            assert_allclose(norms_out, norms_in, rtol=1e-5)


def directional_gradient_error(
    loss: Callable[[], float],
    target: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    steps: Sequence[float] = (1e-6, 1e-7, 1e-8),
) -> float:
    """Relative error between ``<grad, d>`` and a central difference along d.

    The smallest error over ``steps`` is returned, so a single step size
    straddling a kink of a piecewise-linear activation does not count.
    """
    direction = rng.standard_normal(target.shape)
    exact = float(np.sum(analytic * direction))
    original = target.copy()
    errors = []
    for eps in steps:
        target[...] = original + eps * direction
        plus = loss()
        target[...] = original - eps * direction
        minus = loss()
        target[...] = original
        numeric = (plus - minus) / (2 * eps)
        errors.append(abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8))
    return min(errors)


def layer_gradient_errors(layer: Layer, x: np.ndarray, rng: np.random.Generator) -> Dict[str, float]:
    """Finite-difference errors for the input and every parameter of a layer."""
    y, tape = layer.forward(x)
    weights = rng.standard_normal(y.shape)
    grad_x, grads = layer.backward(tape, weights)

    def loss() -> float:
        return float(np.sum(layer(x) * weights))

    errors = {"input": directional_gradient_error(loss, x, grad_x, rng)}
    for name, param in layer.parameters().items():
        errors[name] = directional_gradient_error(loss, param, grads[name], rng)
    return errors


def _random_gradient_case(kind: str, rng: np.random.Generator) -> Tuple[Layer, np.ndarray]:
    """A random layer of the given kind with grids up to 8x8 and channels up to 4."""
    dims = tuple(int(v) for v in rng.integers(3, 9, size=2))
    even = int(rng.choice([2, 4]))
    c_out, c_in = (int(v) for v in rng.integers(1, 5, size=2))
    batch = int(rng.integers(1, 4))

    def kernel(rows: int, cols: int, scale: float = 1.0) -> KernelWeights:
        return KernelWeights(scale * rng.standard_normal((rows, cols, 3, 3)))

    if kind == "ortho_conv":
        return OrthoConv2d(kernel(c_out, c_in), dims), rng.standard_normal((batch, c_in) + dims)
    if kind == "plain_conv":
        return PlainConv2d(kernel(c_out, c_in), dims), rng.standard_normal((batch, c_in) + dims)
    if kind == "dense":
        n_in, n_out = (int(v) for v in rng.integers(1, 17, size=2))
        layer = Dense(rng.standard_normal((n_out, n_in)))
        layer.params["bias"][...] = rng.standard_normal(n_out)
        return layer, rng.standard_normal((batch, n_in))
    if kind == "groupsort":
        return GroupSort(), rng.standard_normal((batch, even) + dims)
    dynamics = Sequential([OrthoConv2d(kernel(even, even, 0.3), dims), GroupSort()])
    cfg = SolverConfig(method=str(rng.choice(["euler", "rk4"])), fixed_steps=int(rng.integers(1, 5)))
    return NodeBlock(DynamicsField(dynamics), cfg), rng.standard_normal((batch, even) + dims)


GRADIENT_KINDS = ("ortho_conv", "plain_conv", "dense", "groupsort", "node_block")


def _check_error(what: str, error: float) -> None:
    assert error < 1e-4, f"{what}: relative error {error:.2e}"


def check_gradients(seed: int, cases: int = 50) -> None:
    rng = rng_stream(seed, "selftest", 3)
    for kind in GRADIENT_KINDS:
        for _ in range(cases):
            layer, x = _random_gradient_case(kind, rng)
            for name, error in layer_gradient_errors(layer, x, rng).items():
                _check_error(f"{kind} gradient w.r.t. {name}", error)


def check_model_gradients(seed: int, cases: int = 50) -> None:
    """Loss gradients of small random classifiers of every architecture."""
    rng = rng_stream(seed, "selftest", 7)
    for i in range(cases):
        arch_kind = ARCH_KINDS[i % len(ARCH_KINDS)]
        size = 8
        model_cfg = ModelConfig(
            arch_kind=arch_kind,
            pre_channels=int(rng.integers(1, 5)),
            hidden_channels=int(rng.choice([2, 4])),
            pools=int(rng.integers(0, 2)),
            time_mode=str(rng.choice(TIME_MODES)),
            precision="float64",
        )
        model = build_model(
            arch_kind, model_cfg, SolverConfig(method="rk4", fixed_steps=2), (1, size, size), 3, rng
        )
        x = rng.uniform(0, 1, (2, 1, size, size))
        labels = rng.integers(0, 3, size=2)
        _, grads = model.loss_and_grads(x, labels)

        def loss() -> float:
            return model.loss_and_grads(x, labels)[0]

        for name, param in model.parameters().items():
            _check_error(
                f"{arch_kind} gradient w.r.t. {name}",
                directional_gradient_error(loss, param, grads[name], rng),
            )


def convergence_order(method: str, layer: Layer, steps: Tuple[int, int] = (16, 32)) -> float:
    """Observed order from errors at two step counts against a fine RK4 reference."""
    z0 = np.array([[0.5], [1.0]])
    f = DynamicsField(layer)
    reference = integrate(f, z0, SolverConfig(method="rk4", fixed_steps=2048)).final
    errors = [
        np.abs(integrate(f, z0, SolverConfig(method=method, fixed_steps=n)).final - reference).max()
        for n in steps
    ]
    return float(np.log(errors[0] / errors[1]) / np.log(steps[1] / steps[0]))


def check_solver_orders(seed: int) -> None:
    for layer in (Scale(1.0), Sine()):
        euler = convergence_order("euler", layer)
        assert 0.8 <= euler <= 1.2, f"euler order {euler:.3f} on {layer.kind}"
        rk4 = convergence_order("rk4", layer, steps=(8, 16))
        assert 3.5 <= rk4 <= 4.5, f"rk4 order {rk4:.3f} on {layer.kind}"
    z0 = np.array([[0.5], [1.0]])
    f = DynamicsField(Scale(1.0))
    cfg = SolverConfig(method="dopri5", rtol=1e-3, atol=1e-6)
    final = integrate(f, z0, cfg).final
    error = np.abs(final - z0 * np.e).max()
    assert error <= 10 * (cfg.rtol * np.abs(final).max() + cfg.atol), f"dopri5 error {error:.2e}"


def check_gronwall_equality(seed: int) -> None:
    rng = rng_stream(seed, "selftest", 5)
    c = 0.7
    x1 = rng.standard_normal((10, 3))
    pairs = (x1, x1 + 0.1 * rng.standard_normal(x1.shape))
    report = gronwall_certify(DynamicsField(Scale(c)), SolverConfig(fixed_steps=50), pairs, abs(c))
    assert abs(report.max_ratio - 1.0) < 1e-4, f"equality-case ratio {report.max_ratio:.6f}"
    assert not report.violated


def check_contraction_rates(seed: int) -> None:
    rng = rng_stream(seed, "selftest", 6)
    x1 = rng.standard_normal((10, 3))
    pairs = (x1, x1 + 0.1 * rng.standard_normal(x1.shape))
    for c in (-1.0, 1.0):
        report = contraction_rate(DynamicsField(Scale(c)), SolverConfig(fixed_steps=20), pairs)
        assert abs(report.rho_estimate + c) <= 0.05, f"rho {report.rho_estimate:.4f} for c = {c}"
        assert report.contractive == (c < 0)


PROPERTIES: Dict[str, Property] = {
    "fft_round_trip": check_fft_round_trip,
    "conv_dense_oracle": check_conv_oracles,
    "spectral_norm": check_spectral_norm,
    "orthogonality": check_orthogonality,
    "gradients": check_gradients,
    "model_gradients": check_model_gradients,
    "solver_orders": check_solver_orders,
    "gronwall_equality": check_gronwall_equality,
    "contraction_rates": check_contraction_rates,
}


def run_selftest(seed: int = 0) -> SelftestResult:
    """Run every property; failures are collected, not raised."""
    result = SelftestResult()
    start = time.perf_counter()
    for name, check in PROPERTIES.items():
        try:
            check(seed)
        except Exception as e:
            result.failed[name] = f"{type(e).__name__}: {e}"
            logger.error(f"Property {name} failed: {result.failed[name]}")
        else:
            result.passed.append(name)
            logger.info(f"Property {name} passed")
    result.seconds = time.perf_counter() - start
    return result
