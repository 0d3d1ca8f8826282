"""Long-tail scoring and ratio-mixed training-set assembly.

Rarity is the mean cosine distance to a point's k nearest neighbors; the
final dataset takes the top-ranked samples from the distilled (mixup) pool
and the original high-quality pool at a configured ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InstructionSample, ValidationError


class QuotaError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    budget: int
    mix_ratio: float
    k_longtail: int = 10

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValidationError(f"budget must be >= 1, got {self.budget}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValidationError(f"mix_ratio must be in [0, 1], got {self.mix_ratio}")
        if self.k_longtail < 1:
            raise ValidationError("k_longtail must be >= 1")


def longtail_score(embeddings: np.ndarray, k: int = 10) -> np.ndarray:
    """Mean cosine distance from each point to its k nearest neighbors.

    The point itself is excluded by index (exact duplicates still count as
    zero-distance neighbors). Higher scores mean rarer points.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    if not 1 <= k < n:
        raise ValidationError(f"k_longtail must be in [1, N), got k={k}, N={n}")
    dists = 1.0 - embeddings @ embeddings.T
    np.fill_diagonal(dists, np.inf)
    nearest = np.partition(dists, k - 1, axis=1)[:, :k]
    return np.maximum(nearest, 0.0).mean(axis=1)


def _rank(pool: list[InstructionSample], scores: np.ndarray) -> list[int]:
    # descending score, ties by ascending id
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].id))
    return order


def _take(
    pool: list[InstructionSample],
    order: list[int],
    quota: int,
    taken_texts: set[tuple[str, str]],
    pool_name: str,
) -> list[InstructionSample]:
    chosen: list[InstructionSample] = []
    for idx in order:
        if len(chosen) == quota:
            break
        sample = pool[idx]
        key = (sample.instruction, sample.output)
        if key in taken_texts:
            continue
        taken_texts.add(key)
        chosen.append(sample)
    if len(chosen) < quota:
        raise QuotaError(
            f"{pool_name} pool cannot fill its quota of {quota} "
            f"({len(chosen)} available after deduplication)"
        )
    return chosen


def mix_select(
    mixup_pool: list[InstructionSample],
    mixup_scores: np.ndarray,
    original_pool: list[InstructionSample],
    original_scores: np.ndarray,
    cfg: SelectionConfig,
) -> list[InstructionSample]:
    """Assemble the ratio-mixed dataset from the two scored pools.

    The mixup quota is round-half-up(budget * mix_ratio); the remainder
    comes from the original pool. Pools are ranked independently by
    descending long-tail score (ties by id); exact (instruction, output)
    duplicates are dropped with the lowest-id survivor and the gap is
    backfilled from the same pool's next ranks.
    """
    if len(mixup_scores) != len(mixup_pool) or len(original_scores) != len(original_pool):
        raise ValidationError("scores must align with their pools")
    mixup_quota = int(math.floor(cfg.budget * cfg.mix_ratio + 0.5))
    original_quota = cfg.budget - mixup_quota
    taken: set[tuple[str, str]] = set()
    selected = _take(mixup_pool, _rank(mixup_pool, np.asarray(mixup_scores)), mixup_quota, taken, "mixup")
    selected += _take(
        original_pool, _rank(original_pool, np.asarray(original_scores)), original_quota, taken, "original"
    )
    return selected
