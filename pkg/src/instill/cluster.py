"""Capacity-constrained clustering of low-quality samples.

Cluster sizes are fixed up front by a truncated-normal capacity draw, then
points are greedily assigned to their most similar centers under those
capacities, followed by capacity-preserving swap refinement. Similarity is
cosine over unit-norm embeddings throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .core import ValidationError
from . import kernels

SWAP_MIN_GAIN = 1e-12
DEFAULT_REFINE_STEPS = 10
SWAP_CAP_FACTOR = 10


class InfeasibleCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class CapacityVector:
    c: np.ndarray
    c_min: int
    c_max: int
    n_points: int

    def __post_init__(self) -> None:
        c = np.asarray(self.c, dtype=np.int64)
        if c.min() < max(1, self.c_min) or c.max() > self.c_max:
            raise ValidationError(f"capacities must lie in [{self.c_min}, {self.c_max}]")
        if int(c.sum()) != self.n_points:
            raise ValidationError(f"capacities sum to {int(c.sum())}, expected {self.n_points}")
        object.__setattr__(self, "c", c)

    @property
    def k(self) -> int:
        return int(self.c.shape[0])


@dataclass(frozen=True)
class ClusterPlan:
    assignment: np.ndarray
    centers: np.ndarray
    capacities: CapacityVector
    objective: float

    def __post_init__(self) -> None:
        assignment = np.asarray(self.assignment, dtype=np.int64)
        sizes = np.bincount(assignment, minlength=self.capacities.k)
        if not np.array_equal(sizes, self.capacities.c):
            raise ValidationError("cluster sizes do not match the capacity vector")
        object.__setattr__(self, "assignment", assignment)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)

    def save(self, path, seed: int | None = None, params: dict | None = None) -> None:
        record = {
            "assignment": self.assignment.tolist(),
            "capacities": self.capacities.c.tolist(),
            "c_min": self.capacities.c_min,
            "c_max": self.capacities.c_max,
            "centers": [float(x) for x in self.centers.reshape(-1)],
            "dim": int(self.centers.shape[1]),
            "objective": self.objective,
            "seed": seed,
            "params": params or {},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ClusterPlan":
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        capacities = np.asarray(record["capacities"], dtype=np.int64)
        assignment = np.asarray(record["assignment"], dtype=np.int64)
        return cls(
            assignment=assignment,
            centers=np.asarray(record["centers"], dtype=np.float64).reshape(-1, record["dim"]),
            capacities=CapacityVector(
                c=capacities,
                c_min=record["c_min"],
                c_max=record["c_max"],
                n_points=int(assignment.shape[0]),
            ),
            objective=record["objective"],
        )


def draw_capacities(
    n_points: int,
    k: int,
    c_min: int,
    c_max: int,
    mean: float | None = None,
    std: float | None = None,
    seed: int = 0,
) -> CapacityVector:
    """Draw K cluster capacities from a truncated normal and fix their sum.

    Defaults: mean = N/K, std = (c_max - c_min)/4. Rounded draws are nudged
    by +-1 steps (largest slack first, then largest fractional remainder)
    until they sum to N; bounds are never violated. Deterministic per seed.
    """
    if k < 1 or c_min < 1 or c_max < c_min:
        raise ValidationError(f"bad capacity bounds: k={k}, c_min={c_min}, c_max={c_max}")
    if not k * c_min <= n_points <= k * c_max:
        raise InfeasibleCapacityError(
            f"N={n_points} outside feasible range [{k * c_min}, {k * c_max}]"
        )
    mean = n_points / k if mean is None else mean
    std = (c_max - c_min) / 4 if std is None else std
    rng = np.random.default_rng(seed)
    if std <= 0:
        draws = np.full(k, float(mean))
    else:
        lo = ndtr((c_min - mean) / std)
        hi = ndtr((c_max - mean) / std)
        draws = mean + std * ndtri(lo + rng.random(k) * (hi - lo))
    c = np.clip(np.rint(draws).astype(np.int64), c_min, c_max)
    frac = draws - np.floor(draws)

    diff = n_points - int(c.sum())
    while diff != 0:
        if diff > 0:
            eligible = np.flatnonzero(c < c_max)
            slack = c_max - c[eligible]
        else:
            eligible = np.flatnonzero(c > c_min)
            slack = c[eligible] - c_min
        # most slack first, then largest remainder, then lowest index
        pick = eligible[np.lexsort((eligible, -frac[eligible], -slack))[0]]
        c[pick] += 1 if diff > 0 else -1
        diff += -1 if diff > 0 else 1
    return CapacityVector(c=c, c_min=c_min, c_max=c_max, n_points=n_points)


def init_centers(
    embeddings: np.ndarray,
    k: int,
    batch_size: int = 256,
    iters: int = 50,
    seed: int = 0,
) -> np.ndarray:
    """Mini-batch k-means centers, unit-normalized, deterministic per seed.

    Random-sample initialization, per-batch nearest-center assignment, and
    per-center running-mean updates.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    if k > n:
        raise ValidationError(f"k = {k} exceeds point count {n}")
    if k == n:
        return _unit_rows(embeddings.copy())
    rng = np.random.default_rng(seed)
    centers = embeddings[rng.choice(n, size=k, replace=False)].copy()
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(iters):
        batch_idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = embeddings[batch_idx]
        nearest = np.argmax(batch @ centers.T, axis=1)
        for x, c in zip(batch, nearest):
            counts[c] += 1
            eta = 1.0 / counts[c]
            centers[c] = (1.0 - eta) * centers[c] + eta * x
    return _unit_rows(centers, fallback=embeddings[: k])


def _unit_rows(matrix: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-12
    if degenerate.any():
        if fallback is None:
            raise ValidationError("cannot normalize zero-norm rows")
        matrix = matrix.copy()
        matrix[degenerate] = fallback[degenerate]
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / norms


def assign_with_capacity(
    embeddings: np.ndarray,
    centers: np.ndarray,
    capacities: CapacityVector,
    backend: str | None = None,
) -> ClusterPlan:
    """Greedy capacity-respecting assignment over descending-similarity pairs.

    All (point, cluster) pairs are ranked by similarity (ties by lower
    point-major pair index) and granted in order while the cluster has
    remaining capacity. Completion is guaranteed because capacities sum to
    the point count.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    if capacities.n_points != n:
        raise ValidationError(f"capacities target {capacities.n_points} points, got {n}")
    sim = embeddings @ centers.T
    order = np.argsort(-sim, axis=None, kind="stable")
    greedy, _ = kernels.get_backend(backend)
    assignment = greedy(order, capacities.c, n, capacities.k)
    objective = float(np.mean(sim[np.arange(n), assignment]))
    return ClusterPlan(assignment=assignment, centers=centers, capacities=capacities, objective=objective)


def _round_candidates(sim: np.ndarray, assignment: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Swap candidates, worst-assigned points first.

    Each unhappy point is paired with the members of the cluster it most
    prefers, weakest members first, until the global pair cap is reached.
    """
    n = sim.shape[0]
    own = sim[np.arange(n), assignment]
    best_cluster = np.argmax(sim, axis=1)
    regret = sim[np.arange(n), best_cluster] - own
    point_order = np.argsort(-regret, kind="stable")
    members: dict[int, np.ndarray] = {}
    cand_i: list[np.ndarray] = []
    cand_j: list[np.ndarray] = []
    total = 0
    for i in point_order:
        if total >= cap or regret[i] <= 0.0:
            break
        target = int(best_cluster[i])
        if target == assignment[i]:
            continue
        if target not in members:
            rows = np.flatnonzero(assignment == target)
            members[target] = rows[np.argsort(sim[rows, target], kind="stable")]
        partners = members[target]
        take = min(partners.shape[0], cap - total)
        if take <= 0:
            break
        cand_i.append(np.full(take, i, dtype=np.int64))
        cand_j.append(partners[:take].astype(np.int64))
        total += take
    if not cand_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(cand_i), np.concatenate(cand_j)


def refine(
    plan: ClusterPlan,
    embeddings: np.ndarray,
    steps: int = DEFAULT_REFINE_STEPS,
    backend: str | None = None,
) -> ClusterPlan:
    """Capacity-preserving swap refinement; objective never decreases.

    Each round recomputes centers as normalized cluster means, proposes up
    to 10N swap pairs (worst-assigned-first), and applies the strictly
    improving ones. Cluster sizes never change. steps = 0 is the identity.
    """
    if steps <= 0:
        return plan
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    assignment = plan.assignment.copy()
    centers = plan.centers.copy()
    _, swap_round = kernels.get_backend(backend)
    cap = SWAP_CAP_FACTOR * n
    for _ in range(steps):
        sim = embeddings @ centers.T
        cand_i, cand_j = _round_candidates(sim, assignment, cap)
        accepted = 0
        if cand_i.shape[0]:
            accepted, _ = swap_round(sim, assignment, cand_i, cand_j, SWAP_MIN_GAIN)
        centers = _recompute_centers(embeddings, assignment, centers)
        if accepted == 0:
            break
    objective = float(np.mean((embeddings @ centers.T)[np.arange(n), assignment]))
    return ClusterPlan(
        assignment=assignment, centers=centers, capacities=plan.capacities, objective=objective
    )


def _recompute_centers(embeddings: np.ndarray, assignment: np.ndarray, previous: np.ndarray) -> np.ndarray:
    k = previous.shape[0]
    sums = np.zeros_like(previous)
    np.add.at(sums, assignment, embeddings)
    counts = np.bincount(assignment, minlength=k).astype(np.float64)
    means = sums / np.maximum(counts, 1.0)[:, None]
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    keep_previous = (norms[:, 0] < 1e-12) | (counts == 0)
    centers = np.where(keep_previous[:, None], previous, means / np.maximum(norms, 1e-300))
    return centers


def random_assignment_objective(
    embeddings: np.ndarray,
    centers: np.ndarray,
    capacities: CapacityVector,
    trials: int = 100,
    seed: int = 0,
) -> float:
    """Mean objective of random capacity-respecting assignments (baseline)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    slots = np.repeat(np.arange(capacities.k), capacities.c)
    rng = np.random.default_rng(seed)
    sim = embeddings @ centers.T
    totals = []
    for _ in range(trials):
        shuffled = slots[rng.permutation(n)]
        totals.append(float(np.mean(sim[np.arange(n), shuffled])))
    return float(np.mean(totals))
