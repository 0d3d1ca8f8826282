"""Agreement metrics between calibrated and raw scores, plus the
stratified reference/evaluation split used for offline consistency checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import ValidationError

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class MetricsReport:
    js: float
    mae: float
    residual_hist: dict[int, int]
    n: int

    def to_dict(self) -> dict:
        return {
            "js": self.js,
            "mae": self.mae,
            "residual_hist": {str(k): v for k, v in sorted(self.residual_hist.items())},
            "n": self.n,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def stratified_split(
    labels, eval_fraction: float, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (reference, evaluation), preserving label shares.

    Per-class evaluation counts use largest-remainder rounding toward a
    total of round(eval_fraction * N); within a class, membership is a
    seeded shuffle. Deterministic per seed. Classes with fewer than two
    members cannot be stratified.
    """
    labels = np.asarray(labels)
    if not 0.0 < eval_fraction < 1.0:
        raise ValidationError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    classes, counts = np.unique(labels, return_counts=True)
    tiny = classes[counts < 2]
    if tiny.size:
        raise ValidationError(f"classes with < 2 members cannot be stratified: {tiny.tolist()}")
    n = labels.shape[0]
    target_total = int(round(eval_fraction * n))
    ideals = counts * eval_fraction
    base = np.floor(ideals).astype(np.int64)
    deficit = target_total - int(base.sum())
    # largest remainder first (ties by class), at most +1 per class
    frac_order = np.lexsort((np.arange(classes.size), -(ideals - base)))
    for pos in frac_order:
        if deficit == 0:
            break
        if base[pos] < counts[pos]:
            base[pos] += 1
            deficit -= 1
    rng = np.random.default_rng(seed)
    eval_idx = []
    ref_idx = []
    for cls, quota in zip(classes, base):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.shape[0])]
        eval_idx.append(members[:quota])
        ref_idx.append(members[quota:])
    reference = np.sort(np.concatenate(ref_idx))
    evaluation = np.sort(np.concatenate(eval_idx))
    return reference, evaluation


def _check_distribution(name: str, dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.min() < -1e-12:
        raise ValidationError(f"{name} has negative entries")
    if abs(float(dist.sum()) - 1.0) > 1e-9:
        raise ValidationError(f"{name} must sum to 1, got {dist.sum()}")
    return dist


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats (0 log 0 taken as 0); range [0, ln 2]."""
    p = _check_distribution("P", p)
    q = _check_distribution("Q", q)
    if p.shape != q.shape:
        raise ValidationError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a: np.ndarray, b: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def mae(predicted, labels) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predicted.shape != labels.shape:
        raise ValidationError(f"length mismatch: {predicted.shape} vs {labels.shape}")
    if predicted.size == 0:
        raise ValidationError("mae needs at least one pair")
    return float(np.mean(np.abs(predicted - labels)))


def residual_histogram(predicted_labels, raw_labels) -> dict[int, int]:
    """Counts of integer residuals (predicted - raw)."""
    predicted = np.asarray(predicted_labels, dtype=np.int64)
    raw = np.asarray(raw_labels, dtype=np.int64)
    if predicted.shape != raw.shape:
        raise ValidationError(f"length mismatch: {predicted.shape} vs {raw.shape}")
    residuals, counts = np.unique(predicted - raw, return_counts=True)
    return {int(r): int(c) for r, c in zip(residuals, counts)}


def label_distribution(labels, num_labels: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.bincount(labels, minlength=num_labels).astype(np.float64) / labels.shape[0]


def consistency_report(predicted_scores, raw_labels, num_labels: int) -> MetricsReport:
    """JS + MAE + residual histogram between calibrated scores and raw labels.

    Predicted scores are rounded to the nearest integer label for the
    distributional comparison; MAE uses the unrounded scores.
    """
    predicted_scores = np.asarray(predicted_scores, dtype=np.float64)
    raw = np.asarray(raw_labels, dtype=np.int64)
    rounded = np.clip(np.rint(predicted_scores).astype(np.int64), 0, num_labels - 1)
    return MetricsReport(
        js=js_divergence(label_distribution(rounded, num_labels), label_distribution(raw, num_labels)),
        mae=mae(predicted_scores, raw),
        residual_hist=residual_histogram(rounded, raw),
        n=int(raw.shape[0]),
    )


def residual_chart_text(hist: dict[int, int], width: int = 40) -> str:
    """Plain-text bar chart of a residual histogram."""
    if not hist:
        return "(empty)\n"
    peak = max(hist.values())
    lines = []
    for residual in sorted(hist):
        count = hist[residual]
        bar = "#" * max(1, round(width * count / peak)) if count else ""
        lines.append(f"{residual:+3d} | {bar} {count}")
    return "\n".join(lines) + "\n"


def residual_chart_svg(hist: dict[int, int]) -> str:
    """Minimal standalone SVG bar chart of a residual histogram."""
    residuals = sorted(hist) if hist else [0]
    counts = [hist.get(r, 0) for r in residuals]
    peak = max(counts) or 1
    bar_w, gap, height, base = 36, 10, 160, 200
    width = gap + len(residuals) * (bar_w + gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{base + 40}">',
        f'<line x1="0" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>',
    ]
    for i, (residual, count) in enumerate(zip(residuals, counts)):
        h = round(height * count / peak)
        x = gap + i * (bar_w + gap)
        parts.append(
            f'<rect x="{x}" y="{base - h}" width="{bar_w}" height="{h}" fill="steelblue"/>'
        )
        parts.append(
            f'<text x="{x + bar_w // 2}" y="{base + 16}" font-size="12" '
            f'text-anchor="middle">{residual:+d}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w // 2}" y="{base - h - 4}" font-size="11" '
            f'text-anchor="middle">{count}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
