"""Test fixtures for orthonode."""

import gzip
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from orthonode.dataio import Dataset, synthetic_blobs, write_idx_images, write_idx_labels
from orthonode.odeint import SolverConfig
from orthonode.trainer import ModelConfig, NodeModel, build_model
from orthonode.utils import rng_stream


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator shared by randomized property tests."""
    return rng_stream(1234, "tests")


@pytest.fixture
def blobs() -> Dataset:
    """Two well-separated classes on 8x8 planes."""
    return synthetic_blobs(n_per_class=20, classes=2, spread=0.05, seed=0)


@pytest.fixture
def small_model_factory() -> Callable[..., NodeModel]:
    """Build tiny models on 8x8 inputs (one pooling stage, 4x4 features)."""

    def factory(
        arch_kind: str = "ortho_ode",
        precision: str = "float64",
        solver: SolverConfig = SolverConfig(method="rk4", fixed_steps=2),
        classes: int = 2,
        seed: int = 0,
        **overrides,
    ) -> NodeModel:
        cfg = ModelConfig(
            arch_kind=arch_kind,
            pre_channels=2,
            hidden_channels=4,
            pools=1,
            precision=precision,
            **overrides,
        )
        return build_model(
            arch_kind, cfg, solver, (1, 8, 8), classes, rng_stream(seed, "init")
        )

    return factory


@pytest.fixture
def idx_fixture(tmp_path: Path) -> Callable[..., Dataset]:
    """Write a small IDX image/label pair and return the data that went in."""

    def write(n: int = 100, size: int = 28, gz: bool = False) -> Dataset:
        generator = rng_stream(7, "idx-fixture")
        pixels = generator.integers(0, 256, size=(n, 1, size, size)).astype(np.float64)
        labels = generator.integers(0, 10, size=n)
        suffix = ".gz" if gz else ""
        images_path = tmp_path / f"images-idx3-ubyte{suffix}"
        labels_path = tmp_path / f"labels-idx1-ubyte{suffix}"
        if gz:
            raw_images = tmp_path / "raw-images"
            raw_labels = tmp_path / "raw-labels"
            write_idx_images(pixels / 255.0, raw_images)
            write_idx_labels(labels, raw_labels)
            images_path.write_bytes(gzip.compress(raw_images.read_bytes()))
            labels_path.write_bytes(gzip.compress(raw_labels.read_bytes()))
        else:
            write_idx_images(pixels / 255.0, images_path)
            write_idx_labels(labels, labels_path)
        return Dataset(images=pixels / 255.0, labels=labels, class_count=10)

    return write
