"""FGSM, PGD (l-infinity) and Gaussian-noise perturbations.

Attacks work against any target exposing
``loss_and_input_grad(x, labels) -> (loss, grad_x)``; the trainer's
``NodeModel`` differentiates through the full f_pre -> body -> f_post
pipeline (white-box).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Any, Dict, Optional, Protocol, Tuple, Union

import numpy as np

from orthonode.numerics import Tensor

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "gaussian", "fgsm", "pgd")
PIXEL_SCALE = 255.0


class AttackTarget(Protocol):
    def loss_and_input_grad(self, x: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
        ...


def parse_epsilon(value: Union[str, float, int]) -> float:
    """Accept numbers or fraction strings such as ``"5/255"``."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"Cannot parse epsilon value {value!r}") from e
    return float(value)


def _format_number(value: float) -> str:
    # short decimals win; otherwise whole pixel levels print as n/255
    if abs(round(value, 3) - value) < 1e-12:
        return f"{value:g}"
    pixels = value * PIXEL_SCALE
    if abs(pixels - round(pixels)) < 1e-9:
        return f"{round(pixels)}/255"
    return f"{value:g}"


@dataclass(frozen=True)
class AttackSpec:
    """Attack parameters on the [0, 1] input scale."""

    kind: str = "none"
    epsilon: float = 0.0
    steps: int = 20
    step_size: Optional[float] = None
    sigma: float = 0.0
    random_start: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"Unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "pgd" and self.alpha <= 0 and self.epsilon > 0:
            raise ValueError(f"PGD step size must be positive, got {self.alpha}")

    @property
    def alpha(self) -> float:
        """PGD step size (defaults to epsilon / 4)."""
        return self.step_size if self.step_size is not None else self.epsilon / 4

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "clean"
        if self.kind == "gaussian":
            return f"gaussian-{_format_number(self.sigma)}"
        return f"{self.kind}-{_format_number(self.epsilon)}"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackSpec":
        allowed = {"kind", "epsilon", "steps", "step_size", "sigma", "sigma_pixels", "random_start"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"Unknown attack keys: {sorted(unknown)}")
        kind = data.get("kind", "none")
        if kind in ("fgsm", "pgd") and "epsilon" not in data:
            raise ValueError(f"Attack {kind!r} needs an explicit epsilon")
        if kind == "gaussian" and not ({"sigma", "sigma_pixels"} & set(data)):
            raise ValueError("Gaussian attack needs sigma or sigma_pixels")
        sigma = (
            parse_epsilon(data["sigma_pixels"]) / PIXEL_SCALE
            if "sigma_pixels" in data
            else parse_epsilon(data.get("sigma", 0.0))
        )
        step_size = data.get("step_size")
        return cls(
            kind=kind,
            epsilon=parse_epsilon(data.get("epsilon", 0.0)),
            steps=int(data.get("steps", 20)),
            step_size=None if step_size is None else parse_epsilon(step_size),
            sigma=sigma,
            random_start=bool(data.get("random_start", True)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def fgsm(model: AttackTarget, x: Tensor, y: np.ndarray, epsilon: float) -> Tensor:
    """Single signed-gradient step of size epsilon, clipped to [0, 1]."""
    if epsilon == 0:
        return x.copy()
    _, grad = model.loss_and_input_grad(x, y)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0).astype(x.dtype, copy=False)


def _project(x: Tensor, x0: Tensor, epsilon: float) -> Tensor:
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def pgd(
    model: AttackTarget,
    x: Tensor,
    y: np.ndarray,
    spec: AttackSpec,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Projected gradient ascent inside the l-infinity ball intersected with [0, 1]."""
    if spec.kind != "pgd":
        raise ValueError(f"pgd called with attack kind {spec.kind!r}")
    if spec.epsilon == 0:
        return x.copy()
    x_adv = x
    if spec.random_start:
        if rng is None:
            raise ValueError("PGD random start needs a random generator")
        x_adv = _project(x + rng.uniform(-spec.epsilon, spec.epsilon, x.shape), x, spec.epsilon)
    for _ in range(spec.steps):
        _, grad = model.loss_and_input_grad(x_adv.astype(x.dtype, copy=False), y)
        x_adv = _project(x_adv + spec.alpha * np.sign(grad), x, spec.epsilon)
    return x_adv.astype(x.dtype, copy=False)


def gaussian_perturb(x: Tensor, sigma: float, seed: Union[int, np.random.Generator]) -> Tensor:
    """Add N(0, sigma^2) noise elementwise and clip to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    noisy = x + sigma * rng.standard_normal(x.shape)
    return np.clip(noisy, 0.0, 1.0).astype(x.dtype, copy=False)


def run_attack(
    target: AttackTarget,
    x: Tensor,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator,
) -> Tensor:
    """Dispatch on ``spec.kind`` and return the perturbed inputs."""
    if spec.kind == "none":
        return x
    if spec.kind == "gaussian":
        return gaussian_perturb(x, spec.sigma, rng)
    if spec.kind == "fgsm":
        return fgsm(target, x, y, spec.epsilon)
    return pgd(target, x, y, spec, rng)


def within_budget(x: Tensor, x_adv: Tensor, epsilon: float, slack: float = 1e-6) -> bool:
    """True when x_adv lies in the epsilon ball around x and inside [0, 1]."""
    return bool(
        np.all(np.abs(x_adv - x) <= epsilon + slack)
        and np.all(x_adv >= -slack)
        and np.all(x_adv <= 1 + slack)
    )
