"""Differentiable layer primitives with hand-written backward passes.

Every layer exposes ``forward(x) -> (y, tape)`` and
``backward(tape, grad_y) -> (grad_x, grads)`` where ``grads`` maps parameter
names to gradients of the same shape. A tape is consumed exactly once.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from orthonode.numerics import (
    FreqBlockOperator,
    ShapeMismatch,
    SingularMatrix,
    Tensor,
    apply_blocks,
    batched_inverse,
    circular_conv,
    conjugate_transpose,
    conv_transpose,
    fft2,
    hermitian_pairs,
    ifft2,
    kernel_spectrum,
    kernel_spectrum_grad,
    matrix_spectral_norm,
    max_singular_value,
    mirror_blocks,
    spectrum_outer_grad,
)

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]

KERNEL_INIT_STD = 0.05


class TapeReuseError(RuntimeError):
    """Raised when a tape is handed to a backward pass a second time."""


class NumericalHealthError(RuntimeError):
    """Raised when an operation that cannot fail mathematically fails numerically."""


class UnboundedLayer(ValueError):
    """Raised when a layer kind has no known Lipschitz bound."""


@dataclass
class LayerTape:
    """Forward intermediates needed by the matching backward pass."""

    kind: str
    payload: Dict[str, Any]
    consumed: bool = False

    def consume(self, kind: str) -> Dict[str, Any]:
        if self.kind != kind:
            raise ValueError(f"Tape of kind {self.kind!r} passed to {kind!r} backward")
        if self.consumed:
            raise TapeReuseError(f"Tape of kind {self.kind!r} was already consumed")
        self.consumed = True
        payload, self.payload = self.payload, {}
        return payload


@dataclass
class KernelWeights:
    """Convolution kernel ``c_out x c_in x k x k``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 4 or self.values.shape[2] != self.values.shape[3]:
            raise ShapeMismatch(f"Kernel must be c_out x c_in x k x k, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Kernel weights contain non-finite entries")

    @property
    def c_out(self) -> int:
        return int(self.values.shape[0])

    @property
    def c_in(self) -> int:
        return int(self.values.shape[1])

    @property
    def k(self) -> int:
        return int(self.values.shape[2])

    @classmethod
    def gaussian(
        cls,
        c_out: int,
        c_in: int,
        k: int,
        rng: np.random.Generator,
        std: float = KERNEL_INIT_STD,
        dtype: Any = np.float64,
    ) -> "KernelWeights":
        return cls((std * rng.standard_normal((c_out, c_in, k, k))).astype(dtype))


###############################################################
# Cayley-orthogonalized circular convolution
###############################################################


@dataclass(frozen=True)
class OrthoConvOperator:
    """Per-frequency unitary (or semi-orthogonal) blocks Q[f] of a kernel.

    ``square_blocks``, ``skew_blocks`` and ``inverse_blocks`` hold the square
    ``n x n`` Cayley quantities (n = max(c_out, c_in)) needed by the backward
    pass; ``freq_op`` holds the projected ``c_out x c_in`` blocks.
    """

    source: KernelWeights
    freq_op: FreqBlockOperator
    square_blocks: np.ndarray
    skew_blocks: np.ndarray
    inverse_blocks: np.ndarray

    @property
    def spatial_dims(self) -> Tuple[int, int]:
        return self.freq_op.spatial_dims

    def apply(self, x: Tensor) -> Tensor:
        return self.freq_op.apply(x)

    def orthogonality_defect(self) -> float:
        """Largest deviation of a singular value of any Q[f] from 1."""
        sv = np.linalg.svd(self.freq_op.blocks, compute_uv=False)
        return float(np.abs(sv - 1.0).max())


def cayley_blocks(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cayley transform ``Q = (I - A)(I + A)^{-1}`` of a stack of matrices.

    Returns:
        (Q, (I + A)^{-1})
    """
    eye = np.eye(a.shape[-1], dtype=a.dtype)
    inverse = batched_inverse(eye + a)
    return (eye - a) @ inverse, inverse


def cayley_orthogonalize(w: KernelWeights, spatial_dims: Tuple[int, int]) -> OrthoConvOperator:
    """Orthogonalize a circular convolution in the Fourier domain.

    The kernel spectrum Ŵ[f] is embedded into a square ``n x n`` block,
    skew-Hermitianized as ``A[f] = Ŵ[f] - Ŵ[f]^H`` and mapped through the
    Cayley transform. Only the canonical half of the frequencies is
    transformed; the rest is mirrored so the spatial operator is real.
    Rectangular kernels keep the leading ``c_out x c_in`` corner, which is
    semi-orthogonal.
    """
    h, wd = int(spatial_dims[0]), int(spatial_dims[1])
    spectrum = kernel_spectrum(w.values, (h, wd))
    n = max(w.c_out, w.c_in)
    embedded = np.zeros((h * wd, n, n), dtype=np.complex128)
    embedded[:, : w.c_out, : w.c_in] = spectrum.blocks.reshape(h * wd, w.c_out, w.c_in)
    skew = embedded - conjugate_transpose(embedded)

    canonical, _ = hermitian_pairs((h, wd))
    index = np.flatnonzero(canonical)
    square = np.zeros_like(skew)
    inverse = np.zeros_like(skew)
    try:
        square[index], inverse[index] = cayley_blocks(skew[index])
    except SingularMatrix as e:
        raise NumericalHealthError(
            f"Cayley inversion failed for a skew-Hermitian operator "
            f"(max |A| = {np.abs(skew).max():.3e}, grid {h}x{wd}, "
            f"channels {w.c_out}x{w.c_in}): {e}"
        ) from e

    square = mirror_blocks(square.reshape(h, wd, n, n))
    inverse = mirror_blocks(inverse.reshape(h, wd, n, n))
    skew = mirror_blocks(skew.reshape(h, wd, n, n))
    if not np.all(np.isfinite(square)):
        raise NumericalHealthError("Cayley transform produced non-finite blocks")

    return OrthoConvOperator(
        source=w,
        freq_op=FreqBlockOperator(
            blocks=np.ascontiguousarray(square[..., : w.c_out, : w.c_in]),
            spatial_dims=(h, wd),
        ),
        square_blocks=square,
        skew_blocks=skew,
        inverse_blocks=inverse,
    )


def ortho_conv_forward(op: OrthoConvOperator, x: Tensor) -> Tuple[Tensor, LayerTape]:
    """``y[f] = Q[f] x̂[f]`` followed by the inverse FFT."""
    if x.ndim != 4 or tuple(x.shape[2:]) != tuple(op.spatial_dims):
        raise ShapeMismatch(
            f"Input spatial dims {x.shape[2:]} do not match operator {op.spatial_dims}"
        )
    x_hat = fft2(x)
    y = ifft2(apply_blocks(op.freq_op.blocks, x_hat)).real.astype(x.dtype, copy=False)
    return y, LayerTape("ortho_conv", {"op": op, "x_hat": x_hat})


def ortho_conv_backward(tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Tensor]:
    """Gradients with respect to the input and the kernel taps.

    Uses ``dQ = -(I + Q) dA (I + A)^{-1}`` and the adjoints of the
    skew-Hermitianization, the square embedding and the kernel FFT.
    """
    payload = tape.consume("ortho_conv")
    op: OrthoConvOperator = payload["op"]
    x_hat: np.ndarray = payload["x_hat"]
    source = op.source

    g_hat = fft2(grad_y)
    q = op.freq_op.blocks
    grad_x = ifft2(apply_blocks(conjugate_transpose(q), g_hat)).real

    n = op.square_blocks.shape[-1]
    grad_q = np.zeros(op.square_blocks.shape, dtype=np.complex128)
    grad_q[..., : source.c_out, : source.c_in] = spectrum_outer_grad(x_hat, g_hat)
    eye = np.eye(n)
    grad_a = -conjugate_transpose(eye + op.square_blocks) @ grad_q @ conjugate_transpose(
        op.inverse_blocks
    )
    grad_m = grad_a - conjugate_transpose(grad_a)
    grad_w = kernel_spectrum_grad(grad_m[..., : source.c_out, : source.c_in], source.k)
    return grad_x.astype(grad_y.dtype, copy=False), grad_w.astype(source.values.dtype)


###############################################################
# Plain circular convolution, dense layer and activations
###############################################################


def plain_conv_forward(
    weight: Tensor, bias: Optional[Tensor], x: Tensor
) -> Tuple[Tensor, LayerTape]:
    y = circular_conv(x, weight)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y.astype(x.dtype, copy=False), LayerTape(
        "plain_conv", {"x": x, "weight": weight, "has_bias": bias is not None}
    )


def plain_conv_backward(tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
    payload = tape.consume("plain_conv")
    x, weight = payload["x"], payload["weight"]
    grad_x = conv_transpose(grad_y, weight)
    grad_blocks = spectrum_outer_grad(fft2(x), fft2(grad_y))
    grads = {"weight": kernel_spectrum_grad(grad_blocks, weight.shape[2]).astype(weight.dtype)}
    if payload["has_bias"]:
        grads["bias"] = grad_y.sum(axis=(0, 2, 3))
    return grad_x.astype(grad_y.dtype, copy=False), grads


def dense_forward(weight: Tensor, bias: Optional[Tensor], x: Tensor) -> Tuple[Tensor, LayerTape]:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"Dense layer expects N x {weight.shape[1]}, got {x.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y, LayerTape("dense", {"x": x, "weight": weight, "has_bias": bias is not None})


def dense_backward(tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
    payload = tape.consume("dense")
    x, weight = payload["x"], payload["weight"]
    grads = {"weight": grad_y.T @ x}
    if payload["has_bias"]:
        grads["bias"] = grad_y.sum(axis=0)
    return grad_y @ weight, grads


def relu_forward(x: Tensor) -> Tuple[Tensor, LayerTape]:
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), LayerTape("relu", {"mask": mask})


def relu_backward(tape: LayerTape, grad_y: Tensor) -> Tensor:
    return np.where(tape.consume("relu")["mask"], grad_y, 0).astype(grad_y.dtype, copy=False)


def _pairs(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[1] % 2:
        raise ShapeMismatch(f"GroupSort needs an even channel axis, got shape {x.shape}")
    return x.reshape(x.shape[0], x.shape[1] // 2, 2, *x.shape[2:])


def groupsort_forward(x: Tensor) -> Tuple[Tensor, LayerTape]:
    """Sort channel pairs (group size 2): ``(a, b) -> (min, max)``."""
    pairs = _pairs(x)
    swap = pairs[:, :, 0] > pairs[:, :, 1]
    low = np.where(swap, pairs[:, :, 1], pairs[:, :, 0])
    high = np.where(swap, pairs[:, :, 0], pairs[:, :, 1])
    y = np.stack([low, high], axis=2).reshape(x.shape)
    return y, LayerTape("groupsort", {"swap": swap})


def groupsort_backward(tape: LayerTape, grad_y: Tensor) -> Tensor:
    swap = tape.consume("groupsort")["swap"]
    pairs = _pairs(grad_y)
    first = np.where(swap, pairs[:, :, 1], pairs[:, :, 0])
    second = np.where(swap, pairs[:, :, 0], pairs[:, :, 1])
    return np.stack([first, second], axis=2).reshape(grad_y.shape)


###############################################################
# Layer objects
###############################################################


class Layer:
    """Base class: parameters, forward/backward and a Lipschitz bound."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        raise NotImplementedError

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        return dict(self.params)

    def lipschitz_bound(self) -> float:
        raise UnboundedLayer(f"No Lipschitz bound known for layer kind {self.kind!r}")

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind}


class OrthoConv2d(Layer):
    """Cayley-orthogonalized circular convolution without bias."""

    kind = "ortho_conv"

    def __init__(self, weights: KernelWeights, spatial_dims: Tuple[int, int]) -> None:
        super().__init__()
        self.params["weight"] = weights.values
        self.spatial_dims = (int(spatial_dims[0]), int(spatial_dims[1]))
        self._cached: Optional[Tuple[np.ndarray, OrthoConvOperator]] = None

    def operator(self) -> OrthoConvOperator:
        """Cayley operator for the current weights, recomputed after updates."""
        weight = self.params["weight"]
        if self._cached is None or not np.array_equal(self._cached[0], weight):
            op = cayley_orthogonalize(KernelWeights(weight), self.spatial_dims)
            self._cached = (weight.copy(), op)
        return self._cached[1]

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return ortho_conv_forward(self.operator(), x)

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        grad_x, grad_w = ortho_conv_backward(tape, grad_y)
        return grad_x, {"weight": grad_w}

    def lipschitz_bound(self) -> float:
        return max_singular_value(self.operator().freq_op.blocks)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "shape": list(self.params["weight"].shape)}


class PlainConv2d(Layer):
    """Ordinary circular convolution with optional bias."""

    kind = "plain_conv"

    def __init__(
        self,
        weights: KernelWeights,
        spatial_dims: Tuple[int, int],
        bias: bool = True,
    ) -> None:
        super().__init__()
        self.params["weight"] = weights.values
        if bias:
            self.params["bias"] = np.zeros(weights.c_out, dtype=weights.values.dtype)
        self.spatial_dims = (int(spatial_dims[0]), int(spatial_dims[1]))

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return plain_conv_forward(self.params["weight"], self.params.get("bias"), x)

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return plain_conv_backward(tape, grad_y)

    def lipschitz_bound(self) -> float:
        return max_singular_value(kernel_spectrum(self.params["weight"], self.spatial_dims).blocks)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "shape": list(self.params["weight"].shape)}


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: bool = True) -> None:
        super().__init__()
        self.params["weight"] = weight
        if bias:
            self.params["bias"] = np.zeros(weight.shape[0], dtype=weight.dtype)

    @classmethod
    def initialize(
        cls, n_in: int, n_out: int, rng: np.random.Generator, dtype: Any = np.float64
    ) -> "Dense":
        weight = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        return cls(weight.astype(dtype))

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return dense_forward(self.params["weight"], self.params.get("bias"), x)

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return dense_backward(tape, grad_y)

    def lipschitz_bound(self) -> float:
        return matrix_spectral_norm(self.params["weight"])

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "shape": list(self.params["weight"].shape)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return relu_forward(x)

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return relu_backward(tape, grad_y), {}

    def lipschitz_bound(self) -> float:
        return 1.0


class GroupSort(Layer):
    kind = "groupsort"

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return groupsort_forward(x)

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return groupsort_backward(tape, grad_y), {}

    def lipschitz_bound(self) -> float:
        return 1.0


class Sine(Layer):
    kind = "sine"

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return np.sin(x), LayerTape(self.kind, {"cos": np.cos(x)})

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return tape.consume(self.kind)["cos"] * grad_y, {}

    def lipschitz_bound(self) -> float:
        return 1.0


class Scale(Layer):
    """Multiplication by a trainable scalar."""

    kind = "scale"

    def __init__(self, value: float, dtype: Any = np.float64) -> None:
        super().__init__()
        self.params["scale"] = np.array(value, dtype=dtype)

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return self.params["scale"] * x, LayerTape(self.kind, {"x": x})

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        x = tape.consume(self.kind)["x"]
        scale = self.params["scale"]
        return scale * grad_y, {"scale": np.array(np.sum(grad_y * x), dtype=scale.dtype)}

    def lipschitz_bound(self) -> float:
        return float(abs(self.params["scale"]))

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "scale": float(self.params["scale"])}


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, factor: int = 2) -> None:
        super().__init__()
        self.factor = factor

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        b, c, h, w = x.shape
        f = self.factor
        if h % f or w % f:
            raise ShapeMismatch(f"Cannot pool {h}x{w} by factor {f}")
        y = x.reshape(b, c, h // f, f, w // f, f).mean(axis=(3, 5))
        return y, LayerTape(self.kind, {})

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        tape.consume(self.kind)
        f = self.factor
        grad_x = np.repeat(np.repeat(grad_y, f, axis=2), f, axis=3) / (f * f)
        return grad_x.astype(grad_y.dtype, copy=False), {}

    def lipschitz_bound(self) -> float:
        return 1.0 / self.factor

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "factor": self.factor}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return x.reshape(x.shape[0], -1), LayerTape(self.kind, {"shape": x.shape})

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        return grad_y.reshape(tape.consume(self.kind)["shape"]), {}

    def lipschitz_bound(self) -> float:
        return 1.0


class Sequential(Layer):
    """Composition of layers; parameter names are prefixed by position."""

    kind = "sequential"

    def __init__(self, layers: Iterable[Layer]) -> None:
        super().__init__()
        self.layers: List[Layer] = list(layers)

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        tapes = []
        for layer in self.layers:
            x, tape = layer.forward(x)
            tapes.append(tape)
        return x, LayerTape(self.kind, {"tapes": tapes})

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        tapes = tape.consume(self.kind)["tapes"]
        grads: Grads = {}
        for i in reversed(range(len(self.layers))):
            grad_y, layer_grads = self.layers[i].backward(tapes[i], grad_y)
            grads.update({f"{i}.{name}": g for name, g in layer_grads.items()})
        return grad_y, grads

    def parameters(self) -> Dict[str, np.ndarray]:
        return {
            f"{i}.{name}": p
            for i, layer in enumerate(self.layers)
            for name, p in layer.parameters().items()
        }

    def lipschitz_bound(self) -> float:
        return float(np.prod([layer.lipschitz_bound() for layer in self.layers]))

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "layers": [layer.describe() for layer in self.layers]}


class ResidualBlock(Layer):
    """``y = x + g(x)``."""

    kind = "residual"

    def __init__(self, inner: Layer) -> None:
        super().__init__()
        self.inner = inner

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        y, tape = self.inner.forward(x)
        return x + y, LayerTape(self.kind, {"tape": tape})

    def backward(self, tape: LayerTape, grad_y: Tensor) -> Tuple[Tensor, Grads]:
        grad_x, grads = self.inner.backward(tape.consume(self.kind)["tape"], grad_y)
        return grad_y + grad_x, {f"inner.{k}": g for k, g in grads.items()}

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"inner.{k}": p for k, p in self.inner.parameters().items()}

    def lipschitz_bound(self) -> float:
        return 1.0 + self.inner.lipschitz_bound()

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "inner": self.inner.describe()}


###############################################################
# Weight serialization
###############################################################

CHECKPOINT_MAGIC = b"ONODECK1"
_PRECISIONS = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(
    path: Union[str, Path],
    params: Dict[str, np.ndarray],
    precision: str = "float32",
    header: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write parameters to a flat binary container with a JSON header.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then the little-endian scalars of every tensor in header order.
    """
    if precision not in _PRECISIONS:
        raise ValueError(f"Unknown precision {precision!r}")
    dtype = np.dtype(_PRECISIONS[precision])
    tensors, offset, chunks = [], 0, []
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype=dtype)
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += data.nbytes
        chunks.append(data.tobytes())
    meta = dict(header or {})
    meta.update({"precision": precision, "tensors": tensors})
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for chunk in chunks:
            fh.write(chunk)
    logger.debug(f"Wrote {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a container written by :func:`save_checkpoint`.

    Returns:
        (params, header)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an orthonode checkpoint")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length].decode("utf-8"))
    dtype = np.dtype(_PRECISIONS[header["precision"]])
    payload = raw[16 + length :]
    params = {}
    for tensor in header["tensors"]:
        count = int(np.prod(tensor["shape"], dtype=np.int64))
        start = tensor["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(payload):
            raise ValueError(f"Checkpoint {path} is truncated at tensor {tensor['name']}")
        params[tensor["name"]] = (
            np.frombuffer(payload[start:stop], dtype=dtype)
            .reshape(tensor["shape"])
            .astype(dtype.newbyteorder("="))
        )
    return params, header


def assign_parameters(layer: Layer, values: Dict[str, np.ndarray]) -> None:
    """Copy values into a layer's parameters in place (names must match)."""
    params = layer.parameters()
    missing = set(params) - set(values)
    unexpected = set(values) - set(params)
    if missing or unexpected:
        raise ValueError(
            f"Parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )
    for name, target in params.items():
        if target.shape != values[name].shape:
            raise ShapeMismatch(
                f"Parameter {name} has shape {target.shape}, got {values[name].shape}"
            )
        target[...] = values[name]
