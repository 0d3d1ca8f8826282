"""Shared synthetic-data builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from instill.core import InstructionSample


def unit(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def clusterable_corpus(
    n_points: int,
    num_labels: int = 6,
    dim: int = 16,
    noise: float = 0.05,
    transition: np.ndarray | None = None,
    prior: np.ndarray | None = None,
    seed: int = 42,
):
    """Points in tight per-class blobs with labels flipped through T.

    Nearby points share true labels (the neighborhood-agreement regime),
    so consensus statistics identify (T, p). Returns (embeddings,
    true_labels, noisy_labels).
    """
    rng = np.random.default_rng(seed)
    centers = unit(rng.normal(size=(num_labels, dim)))
    prior = np.full(num_labels, 1.0 / num_labels) if prior is None else prior
    true = rng.choice(num_labels, size=n_points, p=prior)
    points = unit(centers[true] + noise * rng.normal(size=(n_points, dim)))
    if transition is None:
        noisy = true.copy()
    else:
        noisy = np.array([rng.choice(num_labels, p=transition[t]) for t in true])
    return points, true, noisy


def diag_transition(num_labels: int = 6, diag: float = 0.7) -> np.ndarray:
    off = (1.0 - diag) / (num_labels - 1)
    T = np.full((num_labels, num_labels), off)
    np.fill_diagonal(T, diag)
    return T


def make_sample(i: int, task_type: str = "qa", **kwargs) -> InstructionSample:
    defaults = dict(
        id=f"s{i:04d}",
        instruction=f"question {i}",
        output=f"answer {i}",
        task_type=task_type,
        variant="normal",
    )
    defaults.update(kwargs)
    return InstructionSample(**defaults)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
