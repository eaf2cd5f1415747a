"""Lipschitz bounds, Grönwall certificates and contraction-rate estimates."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Tuple, Union

import numpy as np

from orthonode.layers import KernelWeights, Layer, UnboundedLayer
from orthonode.numerics import Tensor, kernel_spectrum, max_singular_value
from orthonode.odeint import DynamicsField, NodeBlock, SolverConfig, integrate_jointly

logger = logging.getLogger(__name__)

__all__ = [
    "ContractionReport",
    "DegeneratePair",
    "GronwallReport",
    "LipschitzEstimate",
    "UnboundedLayer",
    "contraction_rate",
    "empirical_lipschitz",
    "estimate_lipschitz",
    "flow_lipschitz",
    "gronwall_certify",
    "lipschitz_upper_bound",
    "random_pairs",
    "representation_gap",
    "spectral_norm_conv",
]

GRONWALL_TOLERANCE = 1e-6
SANDWICH_SLACK = 1e-6
DEGENERATE_DISTANCE = 1e-12

Pairs = Tuple[Tensor, Tensor]
Mapping = Union[Layer, DynamicsField, Callable[[Tensor], Tensor]]


class DegeneratePair(ValueError):
    """Raised when a sample pair is too close to give a meaningful ratio."""


@dataclass(frozen=True)
class LipschitzEstimate:
    upper: float
    lower: float
    samples_used: int

    @property
    def consistent(self) -> bool:
        if not (np.isfinite(self.upper) and np.isfinite(self.lower)):
            return True
        return self.lower <= self.upper * (1 + SANDWICH_SLACK)

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "consistent": self.consistent}


@dataclass(frozen=True)
class GronwallReport:
    pairs_tested: int
    max_ratio: float
    violated: bool
    c_used: float
    tolerance: float
    worst_time: float
    c_below_empirical: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ContractionReport:
    rho_estimate: float
    contractive: bool
    residual: float
    pairs_tested: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def spectral_norm_conv(
    w: Union[KernelWeights, np.ndarray], spatial_dims: Tuple[int, int]
) -> float:
    """Operator 2-norm of a circular convolution: max over f of sigma_max(Ŵ[f])."""
    values = w.values if isinstance(w, KernelWeights) else np.asarray(w)
    return max_singular_value(kernel_spectrum(values, spatial_dims).blocks)


def lipschitz_upper_bound(f: Union[Layer, DynamicsField]) -> float:
    """Product of the per-layer bounds (raises UnboundedLayer when unknown)."""
    return float(f.lipschitz_bound())


def _apply(f: Mapping, x: Tensor) -> Tensor:
    if isinstance(f, DynamicsField):
        return f.evaluate(x)
    return f(x)


def _sample_norms(x: Tensor) -> np.ndarray:
    return np.linalg.norm(x.reshape(x.shape[0], -1), axis=1)


def random_pairs(
    shape: Tuple[int, ...],
    count: int,
    rng: np.random.Generator,
    radius: float = 0.1,
    low: float = 0.0,
    high: float = 1.0,
) -> Pairs:
    """Random pairs ``(x, x + radius * n)`` with x uniform and n standard normal."""
    x = rng.uniform(low, high, size=(count,) + tuple(shape))
    return x, x + radius * rng.standard_normal(x.shape)


def empirical_lipschitz(f: Mapping, sample_pairs: Pairs) -> float:
    """Largest observed ``|f(x) - f(x')| / |x - x'|`` over the sample pairs."""
    x, x_prime = sample_pairs
    gaps = _sample_norms(x - x_prime)
    if np.any(gaps < DEGENERATE_DISTANCE):
        raise DegeneratePair(
            f"{int(np.sum(gaps < DEGENERATE_DISTANCE))} pair(s) closer than "
            f"{DEGENERATE_DISTANCE}"
        )
    ratios = _sample_norms(_apply(f, x) - _apply(f, x_prime)) / gaps
    return float(ratios.max())


def estimate_lipschitz(f: Union[Layer, DynamicsField], sample_pairs: Pairs) -> LipschitzEstimate:
    """Sandwich the Lipschitz constant between sampled and product bounds."""
    estimate = LipschitzEstimate(
        upper=lipschitz_upper_bound(f),
        lower=empirical_lipschitz(f, sample_pairs),
        samples_used=int(sample_pairs[0].shape[0]),
    )
    if not estimate.consistent:
        logger.error(
            f"Empirical Lipschitz {estimate.lower:.6g} exceeds upper bound {estimate.upper:.6g}"
        )
    return estimate


def gronwall_certify(
    f: DynamicsField,
    cfg: SolverConfig,
    pairs: Pairs,
    C: float,
    tolerance: float = GRONWALL_TOLERANCE,
) -> GronwallReport:
    """Check ``|z2(t) - z1(t)| <= |x2 - x1| exp(C (t - t0))`` along solutions.

    Both members of every pair are integrated on a shared time grid and the
    ratio is evaluated at every recorded time.
    """
    x1, x2 = pairs
    initial = _sample_norms(x2 - x1)
    if np.any(initial < DEGENERATE_DISTANCE):
        raise DegeneratePair("Gronwall pairs must have distinct initial states")
    lower = empirical_lipschitz(f, pairs)
    c_below = bool(C < lower * (1 - SANDWICH_SLACK))
    if c_below:
        logger.warning(
            f"C = {C:.6g} is below the empirical Lipschitz lower bound {lower:.6g}; "
            "the certificate is not meaningful"
        )

    times, (states_1, states_2) = integrate_jointly(f, [x1, x2], cfg)
    max_ratio, worst_time = 0.0, times[0]
    for t, s1, s2 in zip(times, states_1, states_2):
        bound = initial * np.exp(C * (t - cfg.t0))
        ratio = float((_sample_norms(s2 - s1) / bound).max())
        if ratio > max_ratio:
            max_ratio, worst_time = ratio, t

    report = GronwallReport(
        pairs_tested=int(x1.shape[0]),
        max_ratio=max_ratio,
        violated=max_ratio > 1 + tolerance,
        c_used=float(C),
        tolerance=tolerance,
        worst_time=float(worst_time),
        c_below_empirical=c_below,
    )
    logger.info(
        f"Gronwall check over {report.pairs_tested} pairs: max ratio "
        f"{report.max_ratio:.6f} (C = {C:.4g}), violated = {report.violated}"
    )
    return report


def contraction_rate(
    f: DynamicsField,
    cfg: SolverConfig,
    pairs: Pairs,
    residual_threshold: float = 0.05,
) -> ContractionReport:
    """Fit ``log|dz(t)| = log|dz(0)| - rho t`` by least squares over all pairs."""
    x1, x2 = pairs
    times, (states_1, states_2) = integrate_jointly(f, [x1, x2], cfg)
    if len(times) < 2:
        raise ValueError("Contraction fit needs at least two recorded times")
    initial = _sample_norms(x2 - x1)
    if np.any(initial < DEGENERATE_DISTANCE):
        raise DegeneratePair("Contraction pairs must have distinct initial states")

    t_all, log_all = [], []
    for t, s1, s2 in zip(times, states_1, states_2):
        gaps = _sample_norms(s2 - s1)
        t_all.append(np.full(gaps.shape, t - cfg.t0))
        log_all.append(np.log(np.maximum(gaps, np.finfo(float).tiny) / initial))
    t_vec, log_vec = np.concatenate(t_all), np.concatenate(log_all)

    slope, intercept = np.polyfit(t_vec, log_vec, 1)
    residual = float(np.sqrt(np.mean((log_vec - (slope * t_vec + intercept)) ** 2)))
    rho = float(-slope) + 0.0
    return ContractionReport(
        rho_estimate=rho,
        contractive=bool(slope < 0 and residual < residual_threshold),
        residual=residual,
        pairs_tested=int(x1.shape[0]),
    )


def flow_lipschitz(block: NodeBlock, sample_pairs: Pairs) -> float:
    """Empirical Lipschitz constant of the solution map ``z_in -> z(T)``."""
    x, x_prime = sample_pairs
    gaps = _sample_norms(x - x_prime)
    if np.any(gaps < DEGENERATE_DISTANCE):
        raise DegeneratePair("Flow Lipschitz pairs must be distinct")
    _, (states_x, states_p) = integrate_jointly(block.field, [x, x_prime], block.cfg)
    return float((_sample_norms(states_x[-1] - states_p[-1]) / gaps).max())


def representation_gap(model: Any, x: Tensor, x_adv: Tensor) -> Dict[str, float]:
    """Distance between clean and perturbed representations around the body.

    ``model.representations(x)`` must return ``(z_in, z_out)``, the features
    entering and leaving the NODE (or residual) body.
    """
    z_in, z_out = model.representations(x)
    z_in_adv, z_out_adv = model.representations(x_adv)
    gap_in = _sample_norms(z_in - z_in_adv)
    gap_out = _sample_norms(z_out - z_out_adv)
    return {
        "input_gap_mean": float(gap_in.mean()),
        "input_gap_max": float(gap_in.max()),
        "output_gap_mean": float(gap_out.mean()),
        "output_gap_max": float(gap_out.max()),
    }
