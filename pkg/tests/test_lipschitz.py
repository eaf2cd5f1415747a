"""Tests for Lipschitz estimates, Grönwall certificates and contraction fits."""

import numpy as np
import pytest

from orthonode.layers import (
    GroupSort,
    KernelWeights,
    Layer,
    OrthoConv2d,
    PlainConv2d,
    Scale,
    Sequential,
    Sine,
)
from orthonode.lipschitz import (
    DegeneratePair,
    UnboundedLayer,
    contraction_rate,
    empirical_lipschitz,
    estimate_lipschitz,
    flow_lipschitz,
    gronwall_certify,
    lipschitz_upper_bound,
    random_pairs,
    representation_gap,
    spectral_norm_conv,
)
from orthonode.odeint import DynamicsField, NodeBlock, SolverConfig
from orthonode.selftest import check_spectral_norm


def _ortho_field(rng, channels=2, dims=(4, 4)) -> DynamicsField:
    conv = OrthoConv2d(KernelWeights(rng.standard_normal((channels, channels, 3, 3))), dims)
    return DynamicsField(Sequential([conv, GroupSort()]))


def test_lower_bound_never_exceeds_upper_bound(rng):
    """Sampled ratios stay below the product of per-layer bounds."""
    for _ in range(5):
        f = _ortho_field(rng)
        estimate = estimate_lipschitz(f, random_pairs((2, 4, 4), 50, rng))
        assert estimate.consistent
        assert estimate.upper == pytest.approx(1.0, abs=1e-6)
        assert 0.0 < estimate.lower <= 1.0 + 1e-6
        assert estimate.samples_used == 50

    plain = PlainConv2d(KernelWeights(rng.standard_normal((2, 2, 3, 3))), (4, 4))
    estimate = estimate_lipschitz(plain, random_pairs((2, 4, 4), 50, rng))
    assert estimate.consistent
    assert estimate.to_dict()["consistent"] is True


def test_vanilla_conv_bound_exceeds_one(rng):
    """An unconstrained kernel is generically expansive."""
    w = 2.0 * rng.standard_normal((2, 2, 3, 3))
    assert spectral_norm_conv(w, (4, 4)) > 1.0
    assert spectral_norm_conv(KernelWeights(w), (4, 4)) == pytest.approx(
        PlainConv2d(KernelWeights(w), (4, 4)).lipschitz_bound()
    )


def test_zero_ortho_kernel_has_unit_bound():
    """A zero kernel yields the identity convolution with bound 1."""
    conv = OrthoConv2d(KernelWeights(np.zeros((2, 2, 3, 3))), (4, 4))
    assert lipschitz_upper_bound(conv) == pytest.approx(1.0)


def test_upper_bound_needs_known_layers():
    """Layers without an analytic bound raise UnboundedLayer."""
    with pytest.raises(UnboundedLayer):
        lipschitz_upper_bound(Sequential([Scale(1.0), Layer()]))


def test_degenerate_pairs_are_rejected(rng):
    """Identical pairs do not give a ratio."""
    x = rng.standard_normal((3, 2))
    with pytest.raises(DegeneratePair):
        empirical_lipschitz(Sine(), (x, x.copy()))
    with pytest.raises(DegeneratePair):
        gronwall_certify(DynamicsField(Sine()), SolverConfig(), (x, x.copy()), C=1.0)


def test_empirical_lipschitz_of_linear_map(rng):
    """For f(x) = a x every ratio is |a|."""
    pairs = random_pairs((3,), 10, rng)
    assert empirical_lipschitz(Scale(-2.5), pairs) == pytest.approx(2.5)
    assert empirical_lipschitz(lambda x: 0.5 * x, pairs) == pytest.approx(0.5)


def test_gronwall_equality_case(rng):
    """z' = a z meets the bound with equality when C = a and violates it for smaller C."""
    f = DynamicsField(Scale(0.7))
    pairs = random_pairs((3,), 8, rng)
    cfg = SolverConfig(method="rk4", fixed_steps=20)
    report = gronwall_certify(f, cfg, pairs, C=0.7)
    assert not report.violated
    assert report.max_ratio == pytest.approx(1.0, abs=1e-6)
    assert not report.c_below_empirical
    assert report.pairs_tested == 8

    tight = gronwall_certify(f, cfg, pairs, C=0.5)
    assert tight.violated
    assert tight.c_below_empirical
    assert tight.worst_time == pytest.approx(1.0)


def test_gronwall_holds_for_ortho_field(rng):
    """With C set to the layer bound the certificate holds."""
    f = _ortho_field(rng)
    pairs = random_pairs((2, 4, 4), 10, rng)
    report = gronwall_certify(f, SolverConfig(method="dopri5"), pairs, C=f.lipschitz_bound())
    assert not report.violated
    assert report.to_dict()["c_used"] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("a,contractive", [(-1.0, True), (1.0, False)])
def test_contraction_rate_of_linear_fields(rng, a, contractive):
    """z' = a z separates pairs at rate exp(a t), so rho = -a."""
    report = contraction_rate(
        DynamicsField(Scale(a)), SolverConfig(method="rk4", fixed_steps=20), random_pairs((4,), 6, rng)
    )
    assert report.rho_estimate == pytest.approx(-a, abs=1e-3)
    assert report.contractive is contractive
    assert report.residual < 1e-3


def test_contraction_of_zero_field(rng):
    """f = 0 gives rho = 0 and is not contractive."""
    report = contraction_rate(DynamicsField(Scale(0.0)), SolverConfig(), random_pairs((2,), 4, rng))
    assert report.rho_estimate == pytest.approx(0.0, abs=1e-12)
    assert not report.contractive


def test_flow_lipschitz_respects_exponential_bound(rng):
    """The solution map of an orthogonal field expands by at most e^T."""
    block = NodeBlock(_ortho_field(rng), SolverConfig(method="rk4", fixed_steps=8))
    value = flow_lipschitz(block, random_pairs((2, 4, 4), 10, rng))
    assert 0.0 < value <= block.lipschitz_bound() + 1e-6


def test_representation_gap(small_model_factory, blobs):
    """Gaps are zero for identical inputs and positive otherwise."""
    model = small_model_factory()
    x = blobs.images[:4]
    same = representation_gap(model, x, x.copy())
    assert same["input_gap_max"] == 0.0
    assert same["output_gap_max"] == 0.0
    moved = representation_gap(model, x, np.clip(x + 0.05, 0.0, 1.0))
    assert moved["input_gap_mean"] > 0.0
    assert set(moved) == {"input_gap_mean", "input_gap_max", "output_gap_mean", "output_gap_max"}


@pytest.mark.parametrize("alpha", [0.5, -2.0, 3.0])
def test_plain_conv_bound_scales_with_kernels(rng, alpha):
    """Scaling every kernel by alpha scales the bound by |alpha| per conv layer."""
    dims = (5, 4)
    kernels = [rng.standard_normal((2, 2, 3, 3)) for _ in range(2)]

    def field(scale: float) -> DynamicsField:
        convs = [PlainConv2d(KernelWeights(scale * k), dims, bias=False) for k in kernels]
        return DynamicsField(Sequential([convs[0], GroupSort(), convs[1]]))

    expected = abs(alpha) ** 2 * lipschitz_upper_bound(field(1.0))
    assert lipschitz_upper_bound(field(alpha)) == pytest.approx(expected, rel=1e-10)


def test_spectral_norm_matches_dense_svd_on_random_grids():
    """Randomized grids up to 6x6 with up to 3 channels, 100 trials."""
    check_spectral_norm(seed=1)
