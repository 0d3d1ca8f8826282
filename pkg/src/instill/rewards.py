"""Multi-component rewards: quality, semantic alignment, format compliance.

The total reward is the weighted sum of a neighbor-calibrated quality step
reward, a cosine-threshold alignment indicator, and a template-match
indicator. Also houses the linearization of a variant cluster into the
conditional input text handed to a distillation generator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .core import UNIT_NORM_TOL, InstructionSample, ValidationError
from .embed import EmbeddingProvider
from .scoring import QualityRewardParams, ReferenceIndex, score_query
from .stm import ScoreTransitionModel

_TAG_RE = re.compile(r"</?(?:think|answer)>")
_FORMAT_RE = re.compile(
    r"\A<think>((?:(?!</?think>)(?!</?answer>).)+)</think>\s*"
    r"<answer>((?:(?!</?think>)(?!</?answer>).)+)</answer>\Z",
    re.DOTALL,
)


@dataclass(frozen=True)
class RewardWeights:
    w_quality: float = 0.5
    w_align: float = 0.4
    w_format: float = 0.1

    def __post_init__(self) -> None:
        if min(self.w_quality, self.w_align, self.w_format) < 0:
            raise ValidationError("reward weights must be nonnegative")
        total = self.w_quality + self.w_align + self.w_format
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"reward weights must sum to 1, got {total}")


@dataclass(frozen=True)
class AlignmentParams:
    tau: float = 0.7

    def __post_init__(self) -> None:
        if not -1.0 < self.tau <= 1.0:
            raise ValidationError(f"tau must be in (-1, 1], got {self.tau}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_quality: float
    r_align: int
    r_format: int
    total: float
    s_hat: float


def _check_unit(name: str, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ValidationError(f"{name} must be a vector")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValidationError(f"{name} norm {norm:.6g} not within {UNIT_NORM_TOL} of 1")
    return vec


def alignment_reward(e_gen: np.ndarray, e_ref: np.ndarray, params: AlignmentParams = AlignmentParams()) -> int:
    """1 iff cosine(e_gen, e_ref) >= tau (inclusive), else 0."""
    e_gen = _check_unit("e_gen", e_gen)
    e_ref = _check_unit("e_ref", e_ref)
    if e_gen.shape != e_ref.shape:
        raise ValidationError(f"dimension mismatch: {e_gen.shape} vs {e_ref.shape}")
    return 1 if float(e_gen @ e_ref) >= params.tau else 0


def format_reward(text: str) -> int:
    """1 iff the whole (trimmed) text is <think>body</think><answer>body</answer>.

    Bodies must be nonempty and free of nested think/answer tags; only
    whitespace may separate the two blocks.
    """
    return 1 if _FORMAT_RE.match(text.strip()) else 0


def render_formatted(think: str, answer: str) -> str:
    return f"<think>{think}</think><answer>{answer}</answer>"


def extract_answer(text: str) -> str | None:
    """The answer body when the text matches the template, else None."""
    match = _FORMAT_RE.match(text.strip())
    return match.group(2) if match else None


def total_reward(
    r_quality: float,
    r_align: int,
    r_format: int,
    weights: RewardWeights = RewardWeights(),
    s_hat: float = 0.0,
) -> RewardBreakdown:
    """Weighted combination of the three components."""
    if r_align not in (0, 1) or r_format not in (0, 1):
        raise ValidationError("alignment and format components must be 0 or 1")
    if r_quality < 0:
        raise ValidationError("quality component must be nonnegative")
    total = weights.w_quality * r_quality + weights.w_align * r_align + weights.w_format * r_format
    return RewardBreakdown(
        r_quality=r_quality, r_align=r_align, r_format=r_format, total=total, s_hat=s_hat
    )


LINEARIZE_HEADER = (
    "You are given {k} related {task_type} drafts of varying quality. "
    "Fuse them into a single high-quality {task_type} instance that preserves "
    "their salient information, resolves conflicts, and stays on topic. "
    "Respond with your reasoning inside <think>...</think> followed by the "
    "final instance inside <answer>...</answer>."
)


def linearize_cluster(variants: list[InstructionSample], header: str = LINEARIZE_HEADER) -> str:
    """Render 2..20 variants as the conditional input for distillation.

    Deterministic and order-sensitive: drafts are numbered in input order.
    """
    if not 2 <= len(variants) <= 20:
        raise ValidationError(f"linearize needs 2..20 variants, got {len(variants)}")
    task_type = variants[0].task_type
    parts = [header.format(k=len(variants), task_type=task_type)]
    for i, variant in enumerate(variants, start=1):
        parts.append(f"Draft {i}:\nInstruction: {variant.instruction}\nOutput: {variant.output}")
    return "\n\n".join(parts)


class RewardScorer:
    """Batch scorer over loaded artifacts (index + transition model).

    Pure given its artifacts: identical requests produce identical
    responses. Per-item failures surface as inline ``{"id", "error"}``
    records without failing the batch.
    """

    def __init__(
        self,
        index: ReferenceIndex,
        model: ScoreTransitionModel,
        embedder: EmbeddingProvider | None = None,
        weights: RewardWeights = RewardWeights(),
        alignment: AlignmentParams = AlignmentParams(),
        quality: QualityRewardParams = QualityRewardParams(),
        k: int = 5,
        weighting: str = "none",
    ):
        self.index = index
        self.model = model
        self.embedder = embedder
        self.weights = weights
        self.alignment = alignment
        self.quality = quality
        self.k = k
        self.weighting = weighting

    def _embedding(self, request: dict, key: str, text_key: str) -> np.ndarray:
        if request.get(key) is not None:
            return np.asarray(request[key], dtype=np.float64)
        text = request.get(text_key)
        if text is not None and self.embedder is not None:
            return self.embedder.embed(text)
        if key == "e_ref" and request.get("e_variants"):
            variants = np.asarray(request["e_variants"], dtype=np.float64)
            centroid = variants.mean(axis=0)
            norm = float(np.linalg.norm(centroid))
            if norm == 0.0:
                raise ValidationError("variant centroid has zero norm")
            return centroid / norm
        raise ValidationError(f"request needs {key} or {text_key}" + (
            " or e_variants" if key == "e_ref" else ""))

    def score_one(self, request: dict) -> dict:
        if "id" not in request:
            raise ValidationError("request missing id")
        generated = request.get("generated_text")
        if generated is None:
            raise ValidationError("request missing generated_text")
        e_gen = _check_unit("e_gen", self._embedding(request, "e_gen", "generated_text"))
        e_ref = _check_unit("e_ref", self._embedding(request, "e_ref", "reference_text"))
        _, s_hat, r_q = score_query(
            self.index, self.model, e_gen, k=self.k, weighting=self.weighting, params=self.quality
        )
        r_a = alignment_reward(e_gen, e_ref, self.alignment)
        r_f = format_reward(generated)
        breakdown = total_reward(r_q, r_a, r_f, self.weights, s_hat=s_hat)
        return {
            "id": request["id"],
            "r_q": breakdown.r_quality,
            "r_a": breakdown.r_align,
            "r_f": breakdown.r_format,
            "total": breakdown.total,
            "s_hat": breakdown.s_hat,
        }

    def score_batch(self, requests: list[dict]) -> list[dict]:
        responses = []
        for request in requests:
            try:
                responses.append(self.score_one(request))
            except Exception as exc:
                responses.append({"id": request.get("id"), "error": str(exc)})
        return responses
