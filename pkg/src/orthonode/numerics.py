"""Dense tensor arithmetic, 2-D FFTs and small complex linear algebra.

Tensors are plain ``numpy.ndarray`` objects laid out row-major with the batch
as leading dimension (``b x c x h x w`` for images). Per-frequency operators
are stored as complex arrays of shape ``(h, w, c_out, c_in)`` so that the
batched matrix-vector products of a circular convolution in the Fourier
domain are contiguous.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

Tensor = np.ndarray
ComplexMatrix = np.ndarray

PIVOT_TOLERANCE = 1e-12


class ShapeMismatch(ValueError):
    """Raised when tensor shapes do not agree."""


class SingularMatrix(ArithmeticError):
    """Raised when an LU pivot falls below the pivot tolerance."""


def _check_spatial(x: Tensor) -> None:
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ShapeMismatch(f"Expected at least a 2-D plane, got shape {x.shape}")


def fft2(x: Tensor) -> Tensor:
    """2-D discrete Fourier transform over the last two axes.

    numpy's pocketfft backend is mixed-radix with a Bluestein fallback, so
    every plane size is supported (28x28 MNIST included).
    """
    _check_spatial(x)
    return np.fft.fft2(x, axes=(-2, -1))


def ifft2(x: Tensor) -> Tensor:
    """Inverse of :func:`fft2`."""
    _check_spatial(x)
    return np.fft.ifft2(x, axes=(-2, -1))


def complex_inverse(m: ComplexMatrix) -> ComplexMatrix:
    """Invert a square matrix by LU factorization with partial pivoting.

    Args:
        m: Square real or complex matrix

    Returns:
        The inverse matrix

    Raises:
        ShapeMismatch: If m is not square
        SingularMatrix: If a pivot magnitude falls below PIVOT_TOLERANCE
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"complex_inverse needs a square matrix, got {m.shape}")
    lu, piv = scipy.linalg.lu_factor(m, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() < PIVOT_TOLERANCE:
        raise SingularMatrix(
            f"Pivot magnitude {pivots.min():.3e} below tolerance {PIVOT_TOLERANCE}"
        )
    identity = np.eye(m.shape[0], dtype=lu.dtype)
    return scipy.linalg.lu_solve((lu, piv), identity)


def batched_inverse(blocks: ComplexMatrix) -> ComplexMatrix:
    """Apply :func:`complex_inverse` to every matrix of an ``(..., n, n)`` stack."""
    flat = blocks.reshape(-1, *blocks.shape[-2:])
    inverses = np.stack([complex_inverse(b) for b in flat]) if len(flat) else flat
    return inverses.reshape(blocks.shape)


def conjugate_transpose(m: ComplexMatrix) -> ComplexMatrix:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(m, -1, -2))


def hermitian_pairs(spatial_dims: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Pair every frequency f of an ``h x w`` grid with -f.

    Returns:
        (canonical, negated): ``canonical`` is a boolean ``(h, w)`` mask that
        is true on one member of every {f, -f} pair (and on self-paired
        frequencies); ``negated`` is an ``(h, w)`` array holding the flat
        index of -f.
    """
    h, w = spatial_dims
    kx, ky = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    nkx, nky = (-kx) % h, (-ky) % w
    canonical = (ky < nky) | ((ky == nky) & (kx <= nkx))
    negated = nkx * w + nky
    return canonical, negated


def mirror_blocks(blocks: ComplexMatrix) -> ComplexMatrix:
    """Enforce conjugate symmetry Q[-f] = conj(Q[f]) from the canonical half.

    Blocks of self-paired frequencies are made real.
    """
    h, w = blocks.shape[:2]
    canonical, negated = hermitian_pairs((h, w))
    flat = blocks.reshape(h * w, *blocks.shape[2:])
    mirrored = np.where(
        canonical.reshape(-1, 1, 1), flat, np.conj(flat[negated.reshape(-1)])
    )
    self_paired = (negated.reshape(-1) == np.arange(h * w))
    mirrored[self_paired] = mirrored[self_paired].real
    return mirrored.reshape(blocks.shape)


@dataclass(frozen=True)
class FreqBlockOperator:
    """Per-frequency complex blocks of a multi-channel circular convolution."""

    blocks: ComplexMatrix
    spatial_dims: Tuple[int, int]

    @property
    def freq_count(self) -> int:
        return self.spatial_dims[0] * self.spatial_dims[1]

    @property
    def c_out(self) -> int:
        return int(self.blocks.shape[2])

    @property
    def c_in(self) -> int:
        return int(self.blocks.shape[3])

    def is_conjugate_symmetric(self, atol: float = 1e-10) -> bool:
        _, negated = hermitian_pairs(self.spatial_dims)
        flat = self.blocks.reshape(self.freq_count, self.c_out, self.c_in)
        return bool(np.allclose(flat, np.conj(flat[negated.reshape(-1)]), atol=atol))

    def apply(self, x: Tensor) -> Tensor:
        """Apply the operator to a real ``b x c_in x h x w`` tensor."""
        _check_operator_input(x, self.c_in, self.spatial_dims)
        y_hat = apply_blocks(self.blocks, fft2(x))
        return ifft2(y_hat).real.astype(x.dtype, copy=False)

    def apply_adjoint(self, y: Tensor) -> Tensor:
        """Apply the adjoint (per-frequency conjugate transpose)."""
        _check_operator_input(y, self.c_out, self.spatial_dims)
        x_hat = apply_blocks(conjugate_transpose(self.blocks), fft2(y))
        return ifft2(x_hat).real.astype(y.dtype, copy=False)


def _check_operator_input(x: Tensor, channels: int, spatial_dims: Tuple[int, int]) -> None:
    if x.ndim != 4 or x.shape[1] != channels or tuple(x.shape[2:]) != tuple(spatial_dims):
        raise ShapeMismatch(
            f"Expected b x {channels} x {spatial_dims[0]} x {spatial_dims[1]}, "
            f"got {x.shape}"
        )


def apply_blocks(blocks: ComplexMatrix, x_hat: Tensor) -> Tensor:
    """Per-frequency matrix-vector products: ``y[f] = blocks[f] @ x[f]``."""
    return np.einsum("hwoc,bchw->bohw", blocks, x_hat)


def _kernel_center(k: int) -> int:
    return (k - 1) // 2


def _check_kernel(w: Tensor, spatial_dims: Tuple[int, int]) -> None:
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"Kernel must be c_out x c_in x k x k, got {w.shape}")
    if w.shape[2] > min(spatial_dims):
        raise ShapeMismatch(
            f"Kernel size {w.shape[2]} exceeds spatial dims {tuple(spatial_dims)}"
        )


def pad_kernel(w: Tensor, spatial_dims: Tuple[int, int]) -> Tensor:
    """Embed a ``k x k`` centred kernel into an ``h x w`` convolution plane.

    The plane K satisfies ``K[(s - p) % h, (s - q) % w] = w[p, q]`` with
    ``s = (k - 1) // 2``, so circularly convolving with K equals the centred
    cross-correlation used throughout the package.
    """
    _check_kernel(w, spatial_dims)
    k = w.shape[2]
    shift = _kernel_center(k) - k + 1
    padded = np.zeros(w.shape[:2] + tuple(spatial_dims), dtype=w.dtype)
    padded[..., :k, :k] = w[..., ::-1, ::-1]
    return np.roll(padded, shift=(shift, shift), axis=(-2, -1))


def unpad_kernel(plane: Tensor, k: int) -> Tensor:
    """Adjoint of :func:`pad_kernel` (gathers a plane back into ``k x k`` taps)."""
    shift = _kernel_center(k) - k + 1
    unrolled = np.roll(plane, shift=(-shift, -shift), axis=(-2, -1))
    return unrolled[..., :k, :k][..., ::-1, ::-1].copy()


def kernel_spectrum(w: Tensor, spatial_dims: Tuple[int, int]) -> FreqBlockOperator:
    """Fourier-domain blocks Ŵ[f] (``c_out x c_in``) of a circular convolution."""
    w_hat = fft2(pad_kernel(np.asarray(w, dtype=np.float64), spatial_dims))
    return FreqBlockOperator(
        blocks=np.ascontiguousarray(w_hat.transpose(2, 3, 0, 1)),
        spatial_dims=(int(spatial_dims[0]), int(spatial_dims[1])),
    )


def kernel_spectrum_grad(grad_blocks: ComplexMatrix, k: int) -> Tensor:
    """Pull a gradient on Ŵ[f] back to the real ``k x k`` kernel taps.

    ``grad_blocks`` uses the convention ``dL = Re sum_f tr(G[f]^H dŴ[f])``.
    """
    h, w = grad_blocks.shape[:2]
    g = grad_blocks.transpose(2, 3, 0, 1)
    plane = (h * w) * ifft2(g).real
    return unpad_kernel(plane, k)


def spectrum_outer_grad(x_hat: Tensor, g_hat: Tensor) -> ComplexMatrix:
    """Gradient on per-frequency blocks of ``y = ifft2(B[f] fft2(x))``.

    Returns ``G[f] = sum_b ĝ_b[f] x̂_b[f]^H / (h w)``.
    """
    h, w = x_hat.shape[-2:]
    return np.einsum("bohw,bchw->hwoc", g_hat, np.conj(x_hat)) / (h * w)


def circular_conv(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 circular convolution (centred cross-correlation, wrap-around).

    Args:
        x: Input tensor ``b x c_in x h x w``
        w: Kernel tensor ``c_out x c_in x k x k``

    Returns:
        Output tensor ``b x c_out x h x w``
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"Cannot convolve input {x.shape} with kernel {w.shape}")
    return kernel_spectrum(w, x.shape[2:]).apply(x)


def conv_transpose(y: Tensor, w: Tensor) -> Tensor:
    """Transpose (adjoint) of :func:`circular_conv` with the same kernel."""
    if y.ndim != 4 or w.ndim != 4 or y.shape[1] != w.shape[0]:
        raise ShapeMismatch(
            f"Cannot transpose-convolve input {y.shape} with kernel {w.shape}"
        )
    return kernel_spectrum(w, y.shape[2:]).apply_adjoint(y)


def direct_circular_conv(x: Tensor, w: Tensor) -> Tensor:
    """Circular convolution by direct summation over kernel taps."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"Cannot convolve input {x.shape} with kernel {w.shape}")
    _check_kernel(w, x.shape[2:])
    k = w.shape[2]
    s = _kernel_center(k)
    y = np.zeros((x.shape[0], w.shape[0]) + x.shape[2:], dtype=np.result_type(x, w))
    for p in range(k):
        for q in range(k):
            shifted = np.roll(x, shift=(s - p, s - q), axis=(-2, -1))
            y += np.einsum("oc,bchw->bohw", w[:, :, p, q], shifted)
    return y


def conv_matrix(w: Tensor, spatial_dims: Tuple[int, int]) -> np.ndarray:
    """Materialize the dense doubly block-circulant matrix of a convolution.

    Rows/columns follow the row-major flattening of ``c x h x w``.
    """
    c_in = w.shape[1]
    n = c_in * spatial_dims[0] * spatial_dims[1]
    basis = np.eye(n, dtype=np.float64).reshape(n, c_in, *spatial_dims)
    return direct_circular_conv(basis, np.asarray(w, dtype=np.float64)).reshape(n, -1).T


def operator_matrix(op: FreqBlockOperator) -> np.ndarray:
    """Materialize a FreqBlockOperator as a dense real matrix."""
    n = op.c_in * op.freq_count
    basis = np.eye(n, dtype=np.float64).reshape(n, op.c_in, *op.spatial_dims)
    return op.apply(basis).reshape(n, -1).T


def max_singular_value(blocks: ComplexMatrix) -> float:
    """Largest singular value over a stack of per-frequency blocks."""
    if blocks.size == 0:
        return 0.0
    return float(np.linalg.svd(blocks, compute_uv=False).max())


def power_iteration_norm(
    m: np.ndarray, iterations: int = 500, tol: float = 1e-12, seed: int = 0
) -> float:
    """Spectral norm of a dense matrix by power iteration on ``m^T m``."""
    rng = np.random.Generator(np.random.Philox(seed))
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        u = m @ v
        v_next = m.T @ u
        norm = np.linalg.norm(v_next)
        if norm == 0.0:
            return 0.0
        v = v_next / norm
        sigma_next = float(np.sqrt(norm))
        if abs(sigma_next - sigma) <= tol * max(sigma_next, 1.0):
            return sigma_next
        sigma = sigma_next
    logger.debug(f"Power iteration stopped after {iterations} iterations")
    return sigma


def matrix_spectral_norm(m: np.ndarray, svd_limit: int = 64) -> float:
    """Spectral norm: exact SVD up to ``svd_limit`` per side, power iteration above."""
    m = np.asarray(m, dtype=np.float64)
    if max(m.shape) <= svd_limit:
        return float(np.linalg.svd(m, compute_uv=False).max()) if m.size else 0.0
    return power_iteration_norm(m)
