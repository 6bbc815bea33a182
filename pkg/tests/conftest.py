from __future__ import annotations

import numpy as np
import pytest
import torch

from protogrid.data import DigitPool, generate_synthetic_mnist, render_digit_pool

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def digit_pool() -> DigitPool:
    return render_digit_pool(12, seed=101)


@pytest.fixture(scope="session")
def tiny_dataset(digit_pool):
    """Small synthetic split shared by unit tests (420/90/90 samples)."""
    return generate_synthetic_mnist(digit_pool, n_total=600, fractions=(0.7, 0.15, 0.15), seed=7)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
