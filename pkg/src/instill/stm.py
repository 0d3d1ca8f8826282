"""Label-noise transition model estimated from neighbor consensus statistics.

The model is a row-stochastic matrix T (T[i][j] = probability that true
label i is observed as j) plus a prior p over true labels. Under the
neighborhood-agreement assumption (nearby points share true labels), the
first/second/third-order label co-occurrence frequencies have closed forms
in (T, p); we fit both by constrained least squares on those frequencies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import NUM_QUALITY_LABELS, ValidationError

ROW_SUM_TOL = 1e-9
DEFAULT_SMOOTHING_ALPHA = 0.02
SOLVER_MAX_ITER = 5000
# squared-residual target; tight enough that analytic statistics pin every
# parameter to ~1e-4 even in the flatter directions of the system
SOLVER_RESIDUAL_TOL = 1e-12


class InsufficientNeighborsError(ValueError):
    pass


class SolverNonconvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConsensusStats:
    """Empirical label-agreement frequencies.

    v1[j]        fraction of points observed with label j
    v2[l][j]     fraction of (point, 1st-neighbor) pairs with labels (j, j+l mod C)
    v3[l][s][j]  fraction of (point, 1st, 2nd) triples with labels (j, j+l, j+s mod C)
    """

    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray | None
    sample_count: int

    def __post_init__(self) -> None:
        if abs(float(self.v1.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"v1 must sum to 1, got {self.v1.sum()}")
        for name, arr in (("v1", self.v1), ("v2", self.v2), ("v3", self.v3)):
            if arr is not None and (arr.min() < -1e-12 or arr.max() > 1 + 1e-12):
                raise ValidationError(f"{name} entries must lie in [0, 1]")

    @property
    def num_labels(self) -> int:
        return int(self.v1.shape[0])

    @property
    def order(self) -> int:
        return 3 if self.v3 is not None else 2


@dataclass(frozen=True)
class ScoreTransitionModel:
    """Row-stochastic transition matrix T with prior p over C labels."""

    T: np.ndarray
    p: np.ndarray
    smoothing_alpha: float = 0.0
    residual: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        T = np.asarray(self.T, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValidationError(f"T must be square, got shape {T.shape}")
        if p.shape != (T.shape[0],):
            raise ValidationError(f"p shape {p.shape} incompatible with T {T.shape}")
        if T.min() < -1e-12 or p.min() < -1e-12:
            raise ValidationError("T and p must be nonnegative")
        if np.max(np.abs(T.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValidationError("rows of T must sum to 1")
        if abs(float(p.sum()) - 1.0) > ROW_SUM_TOL:
            raise ValidationError("p must sum to 1")
        if not 0.0 <= self.smoothing_alpha <= 0.5:
            raise ValidationError(f"smoothing_alpha must be in [0, 0.5], got {self.smoothing_alpha}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "p", p)

    @property
    def num_labels(self) -> int:
        return int(self.T.shape[0])

    def save(self, path) -> None:
        record = {
            "C": self.num_labels,
            "T": [float(x) for x in self.T.reshape(-1)],
            "p": [float(x) for x in self.p],
            "smoothing_alpha": self.smoothing_alpha,
            "residual": self.residual,
            "solver_meta": self.meta,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ScoreTransitionModel":
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        C = int(record["C"])
        return cls(
            T=np.asarray(record["T"], dtype=np.float64).reshape(C, C),
            p=np.asarray(record["p"], dtype=np.float64),
            smoothing_alpha=float(record["smoothing_alpha"]),
            residual=record.get("residual"),
            meta=record.get("solver_meta", {}),
        )


def _shift_index(C: int) -> np.ndarray:
    # IDX[l, j] = (j + l) mod C
    j = np.arange(C)
    return (j[None, :] + j[:, None]) % C


def _model_stats(
    T: np.ndarray, p: np.ndarray, order: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    C = T.shape[0]
    idx = _shift_index(C)
    R = np.transpose(T[:, idx], (1, 0, 2))  # R[l, i, j] = T[i, (j+l)%C]
    v1 = T.T @ p
    v2 = np.einsum("i,lij->lj", p, T[None] * R)
    v3 = None
    if order >= 3:
        v3 = np.einsum("i,lsij->lsj", p, T[None, None] * R[:, None] * R[None, :])
    return v1, v2, v3


def analytic_stats(T: np.ndarray, p: np.ndarray, order: int = 3) -> ConsensusStats:
    """Model-implied consensus frequencies for given (T, p).

    v1 = T'p; v2[l] = (T * T_l)'p; v3[l,s] = (T * T_l * T_s)'p, where T_l
    shifts columns of T cyclically by l.
    """
    v1, v2, v3 = _model_stats(np.asarray(T, dtype=np.float64), np.asarray(p, dtype=np.float64), order)
    return ConsensusStats(v1=v1, v2=v2, v3=v3, sample_count=0)


def consensus_stats(
    labels: Sequence[int],
    knn: Sequence[Sequence[int]],
    order: int = 3,
    num_labels: int = NUM_QUALITY_LABELS,
) -> ConsensusStats:
    """Empirical consensus frequencies from observed labels and neighbor lists.

    ``knn[i]`` lists point i's neighbors by ascending distance (ties broken
    by lower index upstream); pairs use the first neighbor, triples the
    first two. Points need order-1 neighbors to contribute.
    """
    if order not in (2, 3):
        raise ValueError(f"order must be 2 or 3, got {order}")
    labels_arr = np.asarray(labels, dtype=np.int64)
    n = labels_arr.shape[0]
    if n == 0:
        raise InsufficientNeighborsError("no points to accumulate consensus over")
    if labels_arr.min() < 0 or labels_arr.max() >= num_labels:
        raise ValidationError(f"labels must lie in [0, {num_labels - 1}]")
    if len(knn) != n:
        raise ValidationError("knn neighbor lists must align with labels by index")
    needed = order - 1
    short = [i for i in range(n) if len(knn[i]) < needed]
    if short:
        raise InsufficientNeighborsError(
            f"{len(short)} points have fewer than {needed} neighbors (first: {short[0]})"
        )

    C = num_labels
    v1 = np.bincount(labels_arr, minlength=C).astype(np.float64) / n

    first = np.fromiter((knn[i][0] for i in range(n)), dtype=np.int64, count=n)
    lab_first = labels_arr[first]
    shift1 = (lab_first - labels_arr) % C
    v2 = np.zeros((C, C), dtype=np.float64)
    np.add.at(v2, (shift1, labels_arr), 1.0)
    v2 /= n

    v3 = None
    if order == 3:
        second = np.fromiter((knn[i][1] for i in range(n)), dtype=np.int64, count=n)
        lab_second = labels_arr[second]
        shift2 = (lab_second - labels_arr) % C
        v3 = np.zeros((C, C, C), dtype=np.float64)
        np.add.at(v3, (shift1, shift2, labels_arr), 1.0)
        v3 /= n
    return ConsensusStats(v1=v1, v2=v2, v3=v3, sample_count=n)


def _objective(T: np.ndarray, p: np.ndarray, stats: ConsensusStats) -> float:
    v1, v2, v3 = _model_stats(T, p, stats.order)
    f = float(np.sum((v1 - stats.v1) ** 2)) + float(np.sum((v2 - stats.v2) ** 2))
    if stats.v3 is not None:
        f += float(np.sum((v3 - stats.v3) ** 2))
    return f


def _objective_grad(
    T: np.ndarray, p: np.ndarray, stats: ConsensusStats
) -> tuple[float, np.ndarray, np.ndarray]:
    """Objective value and analytic gradients w.r.t. T and p."""
    C = T.shape[0]
    idx = _shift_index(C)
    jdx = (np.arange(C)[None, :] - np.arange(C)[:, None]) % C  # JDX[l, j] = (j-l)%C
    R = np.transpose(T[:, idx], (1, 0, 2))

    a1 = T.T @ p - stats.v1
    M2 = T[None] * R
    a2 = np.einsum("i,lij->lj", p, M2) - stats.v2
    f = float(np.sum(a1**2)) + float(np.sum(a2**2))

    grad_p = T @ a1 + np.einsum("lij,lj->i", M2, a2)
    B2 = p[None, :, None] * a2[:, None, :]
    grad_T = np.outer(p, a1)
    grad_T += np.sum(B2 * R, axis=0)
    rolled2 = np.take_along_axis(B2 * T[None], np.broadcast_to(jdx[:, None, :], B2.shape), axis=2)
    grad_T += np.sum(rolled2, axis=0)

    if stats.v3 is not None:
        M3 = T[None, None] * R[:, None] * R[None, :]
        a3 = np.einsum("i,lsij->lsj", p, M3) - stats.v3
        f += float(np.sum(a3**2))
        grad_p = grad_p + np.einsum("lsij,lsj->i", M3, a3)
        B3 = p[None, None, :, None] * a3[:, :, None, :]
        shape3 = B3.shape
        grad_T += np.sum(B3 * R[:, None] * R[None, :], axis=(0, 1))
        roll_l = np.take_along_axis(
            B3 * T[None, None] * R[None, :],
            np.broadcast_to(jdx[:, None, None, :], shape3),
            axis=3,
        )
        roll_s = np.take_along_axis(
            B3 * T[None, None] * R[:, None],
            np.broadcast_to(jdx[None, :, None, :], shape3),
            axis=3,
        )
        grad_T += np.sum(roll_l + roll_s, axis=(0, 1))

    return f, 2.0 * grad_T, 2.0 * grad_p


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    arr = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = arr.shape[1]
    sorted_desc = -np.sort(-arr, axis=1)
    cumsum = np.cumsum(sorted_desc, axis=1)
    ks = np.arange(1, n + 1)
    candidates = sorted_desc - (cumsum - 1.0) / ks
    rho = np.sum(candidates > 0, axis=1)
    theta = (cumsum[np.arange(arr.shape[0]), rho - 1] - 1.0) / rho
    projected = np.maximum(arr - theta[:, None], 0.0)
    return projected[0] if np.ndim(v) == 1 else projected


def _canonicalize(T: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Relabel latent classes so each row's maximum sits on the diagonal.

    The consensus system only identifies (T, p) up to a relabeling of the
    true classes; when the row-argmax map is a bijection we pick the
    diagonally dominant representative.
    """
    sigma = np.argmax(T, axis=1)
    if len(set(sigma.tolist())) != T.shape[0]:
        return T, p
    T_new = np.empty_like(T)
    p_new = np.empty_like(p)
    for i, target in enumerate(sigma):
        T_new[target] = T[i]
        p_new[target] = p[i]
    return T_new, p_new


def _solve_from(
    T0: np.ndarray,
    p0: np.ndarray,
    stats: ConsensusStats,
    max_iter: int,
    residual_tol: float,
) -> tuple[np.ndarray, np.ndarray, float, int, str]:
    T, p = T0.copy(), p0.copy()
    f, grad_T, grad_p = _objective_grad(T, p, stats)
    step = 1.0
    status = "iteration_cap"
    iters = 0
    stall = 0
    for iters in range(1, max_iter + 1):
        if f <= residual_tol:
            status = "residual_tol"
            break
        accepted = False
        while step >= 1e-13:
            T_new = project_simplex(T - step * grad_T)
            p_new = project_simplex(p - step * grad_p)
            move = float(np.sum((T_new - T) ** 2) + np.sum((p_new - p) ** 2))
            if move == 0.0:
                status = "stationary"
                break
            f_new = _objective(T_new, p_new, stats)
            if f_new <= f - 1e-4 * move / step:
                accepted = True
                break
            step *= 0.5
        if status == "stationary" or not accepted:
            if not accepted and status != "stationary":
                status = "stationary"
            break
        improvement = f - f_new
        T, p = T_new, p_new
        f, grad_T, grad_p = _objective_grad(T, p, stats)
        step = min(step * 1.3, 1e3)
        if improvement <= 1e-16 * max(f, 1.0):
            stall += 1
            if stall >= 25:
                status = "stalled"
                break
        else:
            stall = 0
    return T, p, f, iters, status


def solve_stm(
    stats: ConsensusStats,
    max_iter: int = SOLVER_MAX_ITER,
    residual_tol: float = SOLVER_RESIDUAL_TOL,
    require_convergence: bool = False,
) -> ScoreTransitionModel:
    """Fit (T, p) to consensus statistics by projected-gradient least squares.

    Runs three deterministic starts (identity, uniform, empirical-marginal)
    and keeps the best; the result is relabeled to the diagonally dominant
    representative. ``require_convergence`` escalates an iteration-cap halt
    with residual above tolerance into an error.
    """
    C = stats.num_labels
    uniform = np.full(C, 1.0 / C)
    v1 = stats.v1.copy()
    starts = [
        (np.eye(C), uniform.copy()),
        (np.full((C, C), 1.0 / C), uniform.copy()),
        (project_simplex(0.5 * np.eye(C) + 0.5 * np.tile(v1, (C, 1))), project_simplex(v1)),
    ]
    best: tuple[np.ndarray, np.ndarray, float, int, str] | None = None
    tried = []
    for T0, p0 in starts:
        result = _solve_from(T0, p0, stats, max_iter, residual_tol)
        tried.append({"residual": result[2], "iterations": result[3], "status": result[4]})
        if best is None or result[2] < best[2]:
            best = result
    T, p, residual, iters, status = best
    if require_convergence and status == "iteration_cap" and residual > residual_tol:
        raise SolverNonconvergenceError(
            f"residual {residual:.3e} above tolerance {residual_tol:.1e} after {iters} iterations"
        )
    T, p = _canonicalize(T, p)
    # Clean up projection dust so the model validates exactly.
    T = np.maximum(T, 0.0)
    T /= T.sum(axis=1, keepdims=True)
    p = np.maximum(p, 0.0)
    p /= p.sum()
    return ScoreTransitionModel(
        T=T,
        p=p,
        smoothing_alpha=0.0,
        residual=residual,
        meta={"status": status, "iterations": iters, "starts": tried, "order": stats.order},
    )


def smooth_stm(model: ScoreTransitionModel, alpha: float = DEFAULT_SMOOTHING_ALPHA) -> ScoreTransitionModel:
    """Blend T toward the uniform matrix: T <- (1-a)T + a/C, rows renormalized.

    alpha = 0 returns the model unchanged; any alpha > 0 makes every entry
    strictly positive so log-domain posteriors are finite.
    """
    if not 0.0 <= alpha <= 0.5:
        raise ValidationError(f"smoothing alpha must be in [0, 0.5], got {alpha}")
    if alpha == 0.0:
        return model
    C = model.num_labels
    T = (1.0 - alpha) * model.T + alpha / C
    T /= T.sum(axis=1, keepdims=True)
    return ScoreTransitionModel(
        T=T,
        p=model.p,
        smoothing_alpha=alpha,
        residual=model.residual,
        meta=dict(model.meta),
    )
