"""Tests for utility functions."""

import json
from pathlib import Path

import numpy as np
import pytest

from orthonode.utils import rng_stream, to_jsonable, write_json


def test_rng_stream_is_reproducible():
    """Same seed, name and index give the same draws."""
    a = rng_stream(3, "shuffle", 1).standard_normal(5)
    b = rng_stream(3, "shuffle", 1).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_rng_streams_are_independent():
    """Changing any key component changes the stream."""
    base = rng_stream(3, "shuffle", 1).standard_normal(5)
    for other in (rng_stream(4, "shuffle", 1), rng_stream(3, "augment", 1), rng_stream(3, "shuffle", 2)):
        assert not np.array_equal(base, other.standard_normal(5))
    with pytest.raises(ValueError):
        rng_stream(-1, "init")


def test_write_json(tmp_path: Path):
    """Numpy values are converted and key order is kept."""
    data = {"b": np.float32(0.5), "a": np.arange(3), "flag": np.bool_(True), "n": np.int64(4)}
    path = write_json(data, tmp_path / "nested" / "out.json")
    loaded = json.loads(path.read_text())
    assert list(loaded) == ["b", "a", "flag", "n"]
    assert loaded == {"b": 0.5, "a": [0, 1, 2], "flag": True, "n": 4}
    assert to_jsonable((1, np.float64(2.0))) == [1, 2.0]
