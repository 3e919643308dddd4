"""Shared test helpers."""

import numpy as np
import pytest

from flowforge import Grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, shape) -> Grid:
    return Grid(rng.standard_normal(shape))


def direct_blur_2d(data: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Direct 2-D windowed sum with edge replication.

    Independent of the separable production path: applies the full 2-D
    weight table in one pass via shifted slices of the padded array.
    """
    k = weights.shape[0]
    r = (k - 1) // 2
    c, h, w = data.shape
    padded = np.pad(data, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(data)
    for i in range(k):
        for j in range(k):
            out += weights[i, j] * padded[:, i : i + h, j : j + w]
    return out
