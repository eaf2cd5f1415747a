"""Tests for FFTs, small linear algebra and circular convolutions."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from orthonode.numerics import (
    ShapeMismatch,
    SingularMatrix,
    circular_conv,
    complex_inverse,
    conv_matrix,
    conv_transpose,
    direct_circular_conv,
    fft2,
    hermitian_pairs,
    ifft2,
    kernel_spectrum,
    matrix_spectral_norm,
    max_singular_value,
    power_iteration_norm,
)


def naive_dft2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            for i in range(h):
                for j in range(w):
                    out[u, v] += x[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
    return out


def test_fft2_zero_and_constant_planes():
    """Zeros stay zero; a constant plane has a single DC coefficient."""
    assert_allclose(fft2(np.zeros((4, 4))), np.zeros((4, 4)))
    spectrum = fft2(np.full((3, 5), 2.5))
    assert spectrum[0, 0] == pytest.approx(2.5 * 15)
    rest = spectrum.copy()
    rest[0, 0] = 0
    assert_allclose(rest, 0, atol=1e-12)


def test_fft2_matches_naive_dft(rng):
    """Random 5x7 plane against the double-loop DFT."""
    x = rng.standard_normal((5, 7))
    assert_allclose(fft2(x), naive_dft2(x), atol=1e-9)
    assert_allclose(ifft2(fft2(x)).real, x, atol=1e-12)


def test_complex_inverse_examples(rng):
    """Identity, diagonal and multiply-back checks."""
    assert_allclose(complex_inverse(np.eye(3)), np.eye(3))
    assert_allclose(
        complex_inverse(np.diag([2.0, 4.0j])), np.diag([0.5, -0.25j]), atol=1e-15
    )
    m = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6)) + 6 * np.eye(6)
    assert_allclose(m @ complex_inverse(m), np.eye(6), atol=1e-10)


def test_complex_inverse_errors():
    """Singular and non-square inputs are rejected."""
    with pytest.raises(SingularMatrix):
        complex_inverse(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(ShapeMismatch):
        complex_inverse(np.ones((2, 3)))


def test_identity_and_shift_kernels():
    """A 1x1 unit kernel is the identity; a one-tap 2x2 kernel shifts cyclically."""
    x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    assert_allclose(circular_conv(x, np.ones((1, 1, 1, 1))), x, atol=1e-12)

    plane = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    shift = np.array([[0.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
    expected = np.array([[2.0, 1.0], [4.0, 3.0]]).reshape(1, 1, 2, 2)
    assert_allclose(circular_conv(plane, shift), expected, atol=1e-12)
    assert_allclose(direct_circular_conv(plane, shift), expected, atol=1e-12)


def test_circular_conv_matches_direct_summation(rng):
    """FFT path against direct wrap-around summation."""
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    assert_allclose(circular_conv(x, w), direct_circular_conv(x, w), atol=1e-9)


def test_circular_conv_non_square_grid(rng):
    """Rectangular planes use the same wrap-around convention."""
    x = rng.standard_normal((1, 2, 5, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    assert_allclose(circular_conv(x, w), direct_circular_conv(x, w), atol=1e-9)


def test_conv_transpose_is_adjoint(rng):
    """<C x, y> == <x, C^T y> and the dense form is the transpose."""
    x = rng.standard_normal((2, 2, 4, 4))
    y = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    assert np.sum(circular_conv(x, w) * y) == pytest.approx(
        np.sum(x * conv_transpose(y, w)), rel=1e-9
    )
    dense = conv_matrix(w, (4, 4))
    assert_allclose(
        conv_transpose(y, w).reshape(2, -1), y.reshape(2, -1) @ dense, atol=1e-9
    )
    identity = np.ones((1, 1, 1, 1))
    assert_allclose(conv_transpose(x[:, :1], identity), x[:, :1], atol=1e-12)


def test_conv_shape_errors(rng):
    """Channel mismatches and oversized kernels raise ShapeMismatch."""
    with pytest.raises(ShapeMismatch):
        circular_conv(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)))
    with pytest.raises(ShapeMismatch):
        circular_conv(rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 3, 3)))


def test_kernel_spectrum_is_conjugate_symmetric(rng):
    """Real kernels give blocks with W[-f] = conj(W[f])."""
    spectrum = kernel_spectrum(rng.standard_normal((2, 3, 3, 3)), (5, 6))
    assert spectrum.blocks.shape == (5, 6, 2, 3)
    assert spectrum.is_conjugate_symmetric()


def test_hermitian_pairs_cover_every_frequency():
    """Canonical frequencies plus their mirrors cover the grid exactly once."""
    for dims in [(1, 1), (4, 4), (5, 6), (3, 7)]:
        canonical, negated = hermitian_pairs(dims)
        flat_canonical = np.flatnonzero(canonical)
        covered = set(flat_canonical) | set(negated.reshape(-1)[flat_canonical])
        assert covered == set(range(dims[0] * dims[1]))
        assert np.all(negated.reshape(-1)[negated.reshape(-1)] == np.arange(dims[0] * dims[1]))


def test_spectral_norms_agree(rng):
    """Per-frequency max singular value equals the dense operator norm."""
    w = rng.standard_normal((2, 2, 3, 3))
    dense_norm = np.linalg.svd(conv_matrix(w, (4, 4)), compute_uv=False).max()
    assert max_singular_value(kernel_spectrum(w, (4, 4)).blocks) == pytest.approx(
        dense_norm, rel=1e-9
    )
    big = rng.standard_normal((80, 70))
    exact = np.linalg.svd(big, compute_uv=False).max()
    assert power_iteration_norm(big, iterations=5000) == pytest.approx(exact, rel=1e-6)
    assert matrix_spectral_norm(big) == pytest.approx(exact, rel=1e-6)
