"""Model assembly, SGD-with-momentum training and robustness evaluation."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from orthonode.adversary import AttackSpec, run_attack
from orthonode.dataio import Dataset, augment_batch
from orthonode.layers import (
    AvgPool2d,
    Dense,
    Flatten,
    Grads,
    GroupSort,
    KernelWeights,
    Layer,
    LayerTape,
    NumericalHealthError,
    OrthoConv2d,
    PlainConv2d,
    ReLU,
    ResidualBlock,
    Sequential,
    assign_parameters,
    load_checkpoint,
    save_checkpoint,
)
from orthonode.numerics import Tensor
from orthonode.odeint import DynamicsField, NodeBlock, NonFiniteState, SolverConfig
from orthonode.utils import rng_stream

logger = logging.getLogger(__name__)

ARCH_KINDS = ("resnet_baseline", "vanilla_ode", "ortho_ode")
PRECISIONS = {"float32": np.float32, "float64": np.float64}
ORTHO_BOUND_TOLERANCE = 1e-5
PARITY_TOLERANCE = 0.10


class NonFiniteLoss(FloatingPointError):
    """Raised when a training loss or gradient becomes NaN or Inf."""


@dataclass(frozen=True)
class ModelConfig:
    arch_kind: str = "ortho_ode"
    pre_channels: int = 16
    hidden_channels: int = 32
    kernel_size: int = 3
    pools: int = 2
    time_mode: str = "autonomous"
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.arch_kind not in ARCH_KINDS:
            raise ValueError(f"Unknown arch_kind {self.arch_kind!r}, expected one of {ARCH_KINDS}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"Unknown precision {self.precision!r}")
        if self.hidden_channels % 2:
            raise ValueError(f"hidden_channels must be even for GroupSort, got {self.hidden_channels}")
        if not 0 <= self.pools <= 2:
            raise ValueError(f"pools must be 0, 1 or 2, got {self.pools}")
        if self.kernel_size < 1 or self.pre_channels < 1:
            raise ValueError("kernel_size and pre_channels must be positive")

    @property
    def dtype(self) -> Any:
        return PRECISIONS[self.precision]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay != 0:
            raise ValueError("weight_decay is fixed at 0")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"Invalid epochs={self.epochs} / batch_size={self.batch_size}")


@dataclass
class MetricsReport:
    """Everything an experiment reports; serialised as metrics.json."""

    accuracies: Dict[str, float] = field(default_factory=dict)
    loss_curve: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    initial_loss: Optional[float] = None
    lipschitz: Dict[str, Any] = field(default_factory=dict)
    certificates: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        self.accuracies.update(other.accuracies)
        self.lipschitz.update(other.lipschitz)
        self.certificates.update(other.certificates)
        self.timings.update(other.timings)
        return self

    def to_dict(self, with_timings: bool = True) -> Dict[str, Any]:
        data = asdict(self)
        if not with_timings:
            data.pop("timings")
        return data


###############################################################
# Loss
###############################################################


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype, copy=False)


###############################################################
# Model
###############################################################


class NodeModel:
    """``f_post(body(f_pre(x)))`` where the body is a NODE block or residual stack."""

    def __init__(
        self,
        pre: Sequential,
        body: Layer,
        post: Sequential,
        model_cfg: ModelConfig,
        input_shape: Tuple[int, int, int],
        classes: int,
    ) -> None:
        self.pre = pre
        self.body = body
        self.post = post
        self.model_cfg = model_cfg
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.network = Sequential([pre, body, post])

    @property
    def arch_kind(self) -> str:
        return self.model_cfg.arch_kind

    @property
    def dtype(self) -> Any:
        return self.model_cfg.dtype

    @property
    def node_block(self) -> Optional[NodeBlock]:
        return self.body if isinstance(self.body, NodeBlock) else None

    def cast(self, x: Tensor) -> Tensor:
        return np.asarray(x, dtype=self.dtype)

    def forward(self, x: Tensor) -> Tuple[Tensor, LayerTape]:
        return self.network.forward(self.cast(x))

    def logits(self, x: Tensor) -> Tensor:
        return self.network(self.cast(x))

    def predict(self, x: Tensor) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def representations(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        z_in = self.pre(self.cast(x))
        return z_in, self.body(z_in)

    def loss_and_grads(self, x: Tensor, labels: np.ndarray) -> Tuple[float, Grads]:
        logits, tape = self.forward(x)
        loss, grad_logits = cross_entropy(logits, labels)
        _, grads = self.network.backward(tape, grad_logits)
        return loss, grads

    def loss_and_input_grad(self, x: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
        logits, tape = self.forward(x)
        loss, grad_logits = cross_entropy(logits, labels)
        grad_x, _ = self.network.backward(tape, grad_logits)
        return loss, grad_x

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.network.parameters()

    def prepare(self) -> None:
        """Materialize cached orthogonal operators before concurrent use."""
        for layer in _walk(self.network):
            if isinstance(layer, OrthoConv2d):
                layer.operator()

    def dynamics_bound(self) -> Optional[float]:
        block = self.node_block
        return None if block is None else block.field.lipschitz_bound()

    def with_solver(self, cfg: SolverConfig) -> "NodeModel":
        """Same weights, different solver (parameters are shared, not copied)."""
        block = self.node_block
        if block is None:
            raise ValueError(f"{self.arch_kind} has no ODE solver to swap")
        clone = copy.copy(self)
        clone.body = NodeBlock(block.field, cfg)
        clone.network = Sequential([self.pre, clone.body, self.post])
        return clone

    def describe(self) -> Dict[str, Any]:
        return {
            "arch_kind": self.arch_kind,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "parameters": parameter_count(self),
            "network": self.network.describe(),
        }


def _walk(layer: Layer) -> List[Layer]:
    found = [layer]
    if isinstance(layer, Sequential):
        for inner in layer.layers:
            found.extend(_walk(inner))
    elif isinstance(layer, ResidualBlock):
        found.extend(_walk(layer.inner))
    elif isinstance(layer, NodeBlock):
        found.extend(_walk(layer.field.layers))
    return found


def _he_kernel(
    c_out: int, c_in: int, k: int, rng: np.random.Generator, dtype: Any
) -> KernelWeights:
    std = np.sqrt(2.0 / (c_in * k * k))
    return KernelWeights.gaussian(c_out, c_in, k, rng, std=std, dtype=dtype)


def build_model(
    arch_kind: str,
    model_cfg: ModelConfig,
    solver_cfg: SolverConfig,
    input_shape: Tuple[int, int, int],
    classes: int,
    rng: np.random.Generator,
) -> NodeModel:
    """Assemble one of the three architectures.

    f_pre: conv(c -> pre) + ReLU [+ pool], conv(pre -> hidden) + ReLU [+ pool];
    body: two orthogonal or plain convs with GroupSort inside a NODE block, or
    two residual conv blocks; f_post: flatten + dense.
    """
    cfg = ModelConfig(**{**asdict(model_cfg), "arch_kind": arch_kind})
    dtype, k, hidden = cfg.dtype, cfg.kernel_size, cfg.hidden_channels
    c, h, w = input_shape

    pre_layers: List[Layer] = []
    for pool, (c_out, c_in) in enumerate([(cfg.pre_channels, c), (hidden, cfg.pre_channels)]):
        pre_layers += [PlainConv2d(_he_kernel(c_out, c_in, k, rng, dtype), (h, w)), ReLU()]
        if cfg.pools > pool:
            pre_layers.append(AvgPool2d(2))
            h, w = h // 2, w // 2
    dims = (h, w)

    body: Layer
    if arch_kind == "resnet_baseline":
        blocks: List[Layer] = []
        for _ in range(2):
            kernel = KernelWeights.gaussian(hidden, hidden, k, rng, dtype=dtype)
            blocks.append(ResidualBlock(Sequential([PlainConv2d(kernel, dims), ReLU()])))
        body = Sequential(blocks)
    else:
        first_in = hidden + 1 if cfg.time_mode == "time-as-channel" else hidden
        dynamics: List[Layer] = []
        for c_in in (first_in, hidden):
            kernel = KernelWeights.gaussian(hidden, c_in, k, rng, dtype=dtype)
            if arch_kind == "ortho_ode":
                dynamics.append(OrthoConv2d(kernel, dims))
            else:
                dynamics.append(PlainConv2d(kernel, dims, bias=False))
            dynamics.append(GroupSort())
        body = NodeBlock(DynamicsField(Sequential(dynamics), cfg.time_mode), solver_cfg)

    head = Dense.initialize(hidden * h * w, classes, rng, dtype=dtype)
    model = NodeModel(
        Sequential(pre_layers), body, Sequential([Flatten(), head]), cfg, input_shape, classes
    )
    logger.info(
        f"Built {arch_kind} with {parameter_count(model)} parameters "
        f"(features {hidden}x{h}x{w})"
    )
    return model


def parameter_count(model: Union[NodeModel, Layer]) -> int:
    return int(sum(p.size for p in model.parameters().values()))


def parameter_parity(counts: Dict[str, int]) -> float:
    """Largest relative difference ``|a - b| / max(a, b)`` between parameter counts."""
    values = list(counts.values())
    return max(abs(a - b) / max(a, b) for a in values for b in values)


###############################################################
# Checkpoints
###############################################################


def save_model(
    model: NodeModel,
    path: Union[str, Path],
    solver_cfg: Optional[SolverConfig] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    block = model.node_block
    solver = solver_cfg or (block.cfg if block is not None else SolverConfig())
    header = {
        "model": asdict(model.model_cfg),
        "solver": asdict(solver),
        "input_shape": list(model.input_shape),
        "classes": model.classes,
        "layers": model.network.describe(),
        "config": config or {},
    }
    return save_checkpoint(path, model.parameters(), model.model_cfg.precision, header)


def load_model(path: Union[str, Path]) -> Tuple[NodeModel, Dict[str, Any]]:
    """Rebuild a model from a checkpoint written by :func:`save_model`."""
    params, header = load_checkpoint(path)
    model_cfg = ModelConfig(**header["model"])
    model = build_model(
        model_cfg.arch_kind,
        model_cfg,
        SolverConfig(**header["solver"]),
        tuple(header["input_shape"]),
        int(header["classes"]),
        rng_stream(0, "init"),
    )
    assign_parameters(model.network, params)
    return model, header


###############################################################
# Training and evaluation
###############################################################


def _batches(n: int, batch_size: int) -> List[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _check_ortho_bound(model: NodeModel, where: str) -> float:
    bound = model.dynamics_bound()
    if model.arch_kind != "ortho_ode" or bound is None:
        return float("nan")
    if abs(bound - 1.0) > ORTHO_BOUND_TOLERANCE:
        raise NumericalHealthError(
            f"Orthogonal dynamics lost their unit Lipschitz bound {where}: {bound:.8f}"
        )
    return bound


def batch_accuracy(model: NodeModel, x: Tensor, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return 0.0
    correct = sum(
        int(np.sum(model.predict(x[s]) == labels[s])) for s in _batches(len(labels), batch_size)
    )
    return 100.0 * correct / len(labels)


def dataset_loss(model: NodeModel, dataset: Dataset, batch_size: int = 256) -> float:
    total = 0.0
    for s in _batches(len(dataset), batch_size):
        loss, _ = cross_entropy(model.logits(dataset.images[s]), dataset.labels[s])
        total += loss * (s.stop - s.start)
    return total / max(len(dataset), 1)


def train(
    model: NodeModel, dataset: Dataset, cfg: TrainConfig, seed: int = 0
) -> Tuple[NodeModel, MetricsReport]:
    """Minibatch SGD with momentum: ``v = mu v + g``, ``p -= lr v``.

    Shuffling and augmentation draw from the ``shuffle`` and ``augment``
    streams of ``seed`` so repeated runs are bit-identical.
    """
    report = MetricsReport()
    params = model.parameters()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    report.initial_loss = dataset_loss(model, dataset, cfg.batch_size)
    logger.info(
        f"Training {model.arch_kind} on {len(dataset)} samples for {cfg.epochs} epochs "
        f"(initial loss {report.initial_loss:.4f})"
    )

    bounds = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng_stream(seed, "shuffle", epoch).permutation(len(dataset))
        augment_rng = rng_stream(seed, "augment", epoch)
        epoch_loss, correct = 0.0, 0
        for batch, s in enumerate(_batches(len(dataset), cfg.batch_size)):
            index = order[s]
            x, labels = dataset.images[index], dataset.labels[index]
            if cfg.augment:
                x = augment_batch(x, augment_rng)
            try:
                logits, tape = model.forward(x)
            except NonFiniteState as e:
                raise NonFiniteLoss(f"Dynamics diverged at epoch {epoch}, batch {batch}: {e}") from e
            loss, grad_logits = cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"Loss became {loss} at epoch {epoch}, batch {batch} "
                    f"(max |logit| = {np.nanmax(np.abs(logits)):.3e})"
                )
            _, grads = model.network.backward(tape, grad_logits)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteLoss(f"Non-finite gradient for {name} at epoch {epoch}, batch {batch}")
                velocity[name] = cfg.momentum * velocity[name] + g
                params[name] -= (cfg.learning_rate * velocity[name]).astype(params[name].dtype)
            _check_ortho_bound(model, f"after epoch {epoch} batch {batch}")
            epoch_loss += loss * len(index)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            logger.debug(f"epoch {epoch} batch {batch}: loss {loss:.5f}")

        report.loss_curve.append(epoch_loss / max(len(dataset), 1))
        report.train_accuracy.append(100.0 * correct / max(len(dataset), 1))
        report.timings[f"epoch_{epoch}"] = time.perf_counter() - start
        bound = model.dynamics_bound()
        bounds.append(bound)
        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs}: loss {report.loss_curve[-1]:.4f}, "
            f"train accuracy {report.train_accuracy[-1]:.2f}%"
            + (f", dynamics bound {bound:.6f}" if bound is not None else "")
        )

    report.lipschitz["dynamics_bound_per_epoch"] = bounds
    report.timings["train_total"] = float(sum(report.timings.values()))
    return model, report


def _attack_batch(
    model: NodeModel,
    dataset: Dataset,
    spec: AttackSpec,
    seed: int,
    attack_index: int,
    batch: Tuple[int, slice],
) -> int:
    index, s = batch
    x, labels = dataset.images[s].astype(model.dtype), dataset.labels[s]
    rng = rng_stream(seed, "attack", attack_index, index)
    x_adv = run_attack(model, x, labels, spec, rng)
    return int(np.sum(model.predict(x_adv) == labels))


def evaluate(
    model: NodeModel,
    dataset: Dataset,
    attacks: Sequence[AttackSpec],
    seed: int = 0,
    batch_size: int = 256,
    threads: int = 1,
) -> MetricsReport:
    """Accuracy (in percent) under every attack; the clean row always comes first."""
    report = MetricsReport()
    specs = [AttackSpec()] + [a for a in attacks if a.kind != "none"]
    model.prepare()
    slices = _batches(len(dataset), batch_size)
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
        for attack_index, spec in enumerate(specs):
            start = time.perf_counter()
            run = partial(_attack_batch, model, dataset, spec, seed, attack_index)
            correct = list(executor.map(run, enumerate(slices)))
            accuracy = 100.0 * sum(correct) / max(len(dataset), 1)
            report.accuracies[spec.label] = accuracy
            report.timings[f"eval_{spec.label}"] = time.perf_counter() - start
            logger.info(f"{model.arch_kind} | {spec.label}: {accuracy:.2f}%")
    return report


def compare_solvers(
    model: NodeModel,
    dataset: Dataset,
    attacks: Sequence[AttackSpec],
    solvers: Dict[str, SolverConfig],
    seed: int = 0,
    threads: int = 1,
) -> Dict[str, Any]:
    """Evaluate one trained model under several solvers and report accuracy deltas.

    Deltas are taken relative to the first solver in ``solvers``.
    """
    if not solvers:
        raise ValueError("compare_solvers needs at least one solver")
    results: Dict[str, Dict[str, float]] = {}
    timings: Dict[str, float] = {}
    for name, cfg in solvers.items():
        start = time.perf_counter()
        results[name] = evaluate(model.with_solver(cfg), dataset, attacks, seed, threads=threads).accuracies
        timings[name] = time.perf_counter() - start
    reference = next(iter(results))
    deltas = {
        name: {label: acc - results[reference][label] for label, acc in accuracies.items()}
        for name, accuracies in results.items()
        if name != reference
    }
    return {"reference": reference, "accuracies": results, "deltas": deltas, "timings": timings}
