"""Dataset ingestion: MNIST IDX files, downscaling, synthetic blobs and augmentation."""

from __future__ import annotations

import gzip
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from orthonode.numerics import Tensor
from orthonode.utils import rng_stream

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
PIXEL_SCALE = 255.0
MANIFEST_NAME = "MANIFEST.sha256"

CROP_SHIFT = 2
ROTATION_DEGREES = 10.0


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class IndivisibleShape(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images ``N x c x h x w`` in [0, 1] with integer labels in ``[0, class_count)``."""

    images: Tensor
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x c x h x w, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatch(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as handle:
            return handle.read()
    return path.read_bytes()


def _parse_header(raw: bytes, magic: int, dims: int, path: Union[str, Path]) -> Tuple[int, ...]:
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is too short for an IDX magic")
    found = int(np.frombuffer(raw[:4], dtype=">u4")[0])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header_size = 4 * (1 + dims)
    if len(raw) < header_size:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is shorter than the IDX header")
    fields = np.frombuffer(raw[:header_size], dtype=">u4")
    shape = tuple(int(v) for v in fields[1:])
    expected = header_size + int(np.prod(shape))
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, header announces {expected}")
    return shape


def read_idx_images(path: Union[str, Path]) -> Tensor:
    raw = _read_bytes(path)
    n, rows, cols = _parse_header(raw, IMAGES_MAGIC, 3, path)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return (pixels.reshape(n, 1, rows, cols) / PIXEL_SCALE).astype(np.float64)


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _parse_header(raw, LABELS_MAGIC, 1, path)
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_mnist_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    class_count: int = 10,
) -> Dataset:
    """Load an IDX image/label file pair (optionally gzip-compressed)."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    logger.info(f"Loaded {images.shape[0]} samples of shape {images.shape[1:]} from {images_path}")
    return Dataset(images=images, labels=labels, class_count=class_count)


def write_idx_images(images: Tensor, path: Union[str, Path]) -> Path:
    """Write ``N x 1 x h x w`` images in [0, 1] as IDX bytes (rounded to 0..255)."""
    path = Path(path)
    n, c, rows, cols = images.shape
    if c != 1:
        raise ValueError(f"IDX images are single-channel, got {c} channels")
    header = np.array([IMAGES_MAGIC, n, rows, cols], dtype=">u4").tobytes()
    pixels = np.clip(np.rint(images * PIXEL_SCALE), 0, 255).astype(np.uint8)
    path.write_bytes(header + pixels.tobytes())
    return path


def write_idx_labels(labels: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    header = np.array([LABELS_MAGIC, len(labels)], dtype=">u4").tobytes()
    path.write_bytes(header + np.asarray(labels, dtype=np.uint8).tobytes())
    return path


def downscale(ds: Dataset, factor: int) -> Dataset:
    """Average-pool every image by ``factor`` in both spatial directions."""
    n, c, h, w = ds.images.shape
    if factor < 1 or h % factor or w % factor:
        raise IndivisibleShape(f"Image size {h}x{w} is not divisible by factor {factor}")
    pooled = ds.images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return Dataset(images=pooled, labels=ds.labels, class_count=ds.class_count)


def subset(ds: Dataset, n: Optional[int]) -> Dataset:
    """First ``n`` samples (the whole dataset when n is None or too large)."""
    if n is None or n >= len(ds):
        return ds
    if n < 0:
        raise ValueError(f"subset size must be >= 0, got {n}")
    return Dataset(images=ds.images[:n], labels=ds.labels[:n], class_count=ds.class_count)


def synthetic_blobs(
    n_per_class: int,
    classes: int,
    spread: float,
    seed: int,
    image_size: int = 8,
) -> Dataset:
    """Gaussian clusters around fixed class centers, shaped as 1 x h x w planes.

    Centers come from a fixed stream so every seed shares them; the seed only
    drives the noise. Samples are grouped by class.
    """
    if classes < 1 or n_per_class < 0:
        raise ValueError(f"Invalid blob sizes: classes={classes}, n_per_class={n_per_class}")
    shape = (1, image_size, image_size)
    centers = rng_stream(0, "blob-centers", classes).uniform(0.2, 0.8, size=(classes,) + shape)
    noise = rng_stream(seed, "data").standard_normal((classes, n_per_class) + shape)
    images = np.clip(centers[:, None] + spread * noise, 0.0, 1.0)
    labels = np.repeat(np.arange(classes, dtype=np.int64), n_per_class)
    return Dataset(
        images=images.reshape((classes * n_per_class,) + shape),
        labels=labels,
        class_count=classes,
    )


def augment_batch(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Random circular-pad crop (up to ±2 px) and rotation (up to ±10°) per sample."""
    out = np.empty_like(x)
    for i, sample in enumerate(x):
        dy, dx = rng.integers(-CROP_SHIFT, CROP_SHIFT + 1, size=2)
        shifted = np.roll(sample, shift=(int(dy), int(dx)), axis=(1, 2))
        angle = rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES)
        rotated = ndimage.rotate(shifted, angle, axes=(2, 1), reshape=False, order=1, mode="wrap")
        out[i] = np.clip(rotated, 0.0, 1.0)
    return out


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(data_dir: Union[str, Path]) -> Path:
    """Write ``<sha256>  <name>`` lines for every file in data_dir."""
    data_dir = Path(data_dir)
    lines = [
        f"{_sha256(path)}  {path.name}"
        for path in sorted(data_dir.iterdir())
        if path.is_file() and path.name != MANIFEST_NAME
    ]
    manifest = data_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def verify_manifest(data_dir: Union[str, Path]) -> Dict[str, bool]:
    """Check every manifest entry; returns a file name -> matches map."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"No manifest found at {manifest}")
    results = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        digest, name = line.split(maxsplit=1)
        path = data_dir / name
        results[name] = path.is_file() and _sha256(path) == digest
        if not results[name]:
            logger.warning(f"Checksum mismatch or missing file: {path}")
    return results


@dataclass(frozen=True)
class DatasetConfig:
    """Where the train/test data come from.

    ``kind`` is ``mnist`` (IDX files, plain or gzip) or ``synthetic`` (blobs).
    """

    kind: str = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_size: Optional[int] = 2000
    test_size: Optional[int] = 1000
    downscale: int = 1
    classes: int = 2
    n_per_class: int = 50
    test_per_class: int = 25
    spread: float = 0.05
    image_size: int = 8

    def __post_init__(self) -> None:
        if self.kind not in ("mnist", "synthetic"):
            raise ValueError(f"Unknown dataset kind {self.kind!r}")
        if self.kind == "mnist":
            missing = [
                name
                for name in ("train_images", "train_labels", "test_images", "test_labels")
                if getattr(self, name) is None
            ]
            if missing:
                raise ValueError(f"MNIST dataset needs paths for {missing}")
        if self.downscale < 1:
            raise ValueError(f"downscale must be >= 1, got {self.downscale}")


def load_datasets(cfg: DatasetConfig, seed: int) -> Tuple[Dataset, Dataset]:
    """Build the (train, test) pair described by ``cfg``."""
    if cfg.kind == "synthetic":
        train = synthetic_blobs(cfg.n_per_class, cfg.classes, cfg.spread, seed, cfg.image_size)
        test = synthetic_blobs(
            cfg.test_per_class, cfg.classes, cfg.spread, seed + 1, cfg.image_size
        )
    else:
        train = subset(load_mnist_idx(cfg.train_images, cfg.train_labels), cfg.train_size)
        test = subset(load_mnist_idx(cfg.test_images, cfg.test_labels), cfg.test_size)
    if cfg.downscale > 1:
        train, test = downscale(train, cfg.downscale), downscale(test, cfg.downscale)
    return train, test
