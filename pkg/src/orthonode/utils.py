"""Utility functions and classes for the orthonode package."""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Any, Union

import numpy as np


def rng_stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return a named, reproducible random stream.

    Every random draw in the package comes from a counter-based Philox
    generator keyed by ``(seed, crc32(name), *index)``. Two calls with the same
    arguments return generators producing identical sequences, independent of
    call order or thread scheduling.

    Args:
        seed: Experiment-wide integer seed
        name: Stream name, e.g. "init", "shuffle", "attack"
        index: Optional integers splitting the stream further (epoch, batch...)

    Returns:
        A numpy Generator backed by Philox
    """
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    entropy = [int(seed), zlib.crc32(name.encode("utf-8")), *map(int, index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays and nested containers into JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(data: Any, path: Union[str, Path]) -> Path:
    """Write data as indented JSON (keys in insertion order) and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(data), indent=2) + "\n")
    return path
