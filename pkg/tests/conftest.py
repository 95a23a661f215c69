"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import os

import numpy as np
import pytest

from mecal.dataset import MEDataset, OutcomeSpec, make_dataset


def workers() -> int:
    """Worker processes for the heavy acceptance runs (env MECAL_TEST_WORKERS)."""
    try:
        return max(int(os.environ.get("MECAL_TEST_WORKERS", "2")), 1)
    except ValueError:
        return 2


def simple_linear_dataset(n: int = 60, seed: int = 0, replicated: float = 0.3) -> MEDataset:
    """Small valid linear dataset with one error-free covariate."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    x = 0.4 * z + rng.standard_normal(n)
    w1 = x + rng.standard_normal(n) * 0.5
    w2 = np.full(n, np.nan)
    k = max(int(round(replicated * n)), 3)
    idx = rng.choice(n, size=k, replace=False)
    w2[idx] = x[idx] + rng.standard_normal(k) * 0.5
    y = 1.0 + x + 0.5 * z + rng.standard_normal(n)
    return make_dataset(w1=w1, w2=w2, z=z, y=y)


def survival_dataset(n: int = 80, seed: int = 3, kind: str = "cox") -> MEDataset:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    x = 0.25 * z + rng.standard_normal(n)
    w1 = x + rng.standard_normal(n) * 0.4
    w2 = np.full(n, np.nan)
    idx = rng.choice(n, size=max(n // 5, 3), replace=False)
    w2[idx] = x[idx] + rng.standard_normal(len(idx)) * 0.4
    lp = 0.5 * x + 0.3 * z
    t_event = rng.exponential(1.0) ** 0.5 * np.exp(-lp / 2)
    t_event = (-np.log(rng.random(n)) / (0.05 * np.exp(lp))) ** 0.5
    event = (t_event <= 10.0).astype(float)
    time = np.minimum(t_event, 10.0)
    return make_dataset(w1=w1, w2=w2, z=z, time=time, event=event)


@pytest.fixture
def linear_data() -> MEDataset:
    return simple_linear_dataset()


@pytest.fixture
def linear_spec() -> OutcomeSpec:
    return OutcomeSpec(kind="linear")
