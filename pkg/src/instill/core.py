"""Domain types, rating-scale conventions, and JSONL serialization.

Quality labels live on the integer scale 0..5 (six classes). Labels 1..5
come from discretizing a judge's 1..10 overall rating; label 0 is reserved
for samples whose rating response could not be parsed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

NUM_QUALITY_LABELS = 6
HIGH_QUALITY_THRESHOLD = 4
UNIT_NORM_TOL = 1e-6

TASK_TYPES = ("qa", "mcq", "cs", "tfq", "para")
VARIANT_KINDS = ("normal", "cross_topic", "noisy", "unknown")

_SAMPLE_FIELDS = (
    "id",
    "instruction",
    "output",
    "task_type",
    "variant",
    "rating_raw",
    "rating",
    "embedding",
    "source",
)


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


@dataclass(frozen=True)
class RatingVector:
    """The four 1..10 sub-scores produced by a judge rating response."""

    rarity: int
    complexity: int
    informativeness: int
    overall: int

    def __post_init__(self) -> None:
        for name in ("rarity", "complexity", "informativeness", "overall"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError(f"rating field {name!r} must be an integer, got {value!r}")
            if not 1 <= value <= 10:
                raise ValidationError(f"rating field {name!r} out of range [1, 10]: {value}")


@dataclass(frozen=True)
class InstructionSample:
    """One instruction/output pair plus rating and embedding bookkeeping.

    ``extra`` holds unknown JSON fields so files written by other tools
    survive a read/write round trip untouched.
    """

    id: str
    instruction: str
    output: str
    task_type: str
    variant: str = "unknown"
    rating_raw: int | None = None
    rating: int | None = None
    # derived data, excluded from equality (and ndarray == is elementwise)
    embedding: np.ndarray | None = field(default=None, compare=False)
    source: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def with_rating(self, rating_raw: int | None, rating: int) -> "InstructionSample":
        return InstructionSample(
            id=self.id,
            instruction=self.instruction,
            output=self.output,
            task_type=self.task_type,
            variant=self.variant,
            rating_raw=rating_raw,
            rating=rating,
            embedding=self.embedding,
            source=self.source,
            extra=dict(self.extra),
        )

    def with_embedding(self, embedding: np.ndarray) -> "InstructionSample":
        return InstructionSample(
            id=self.id,
            instruction=self.instruction,
            output=self.output,
            task_type=self.task_type,
            variant=self.variant,
            rating_raw=self.rating_raw,
            rating=self.rating,
            embedding=np.asarray(embedding, dtype=np.float64),
            source=self.source,
            extra=dict(self.extra),
        )


@dataclass(frozen=True)
class DistillationInstance:
    """A high-quality target paired with the 2..20 variants it distills."""

    target: InstructionSample
    variants: tuple[InstructionSample, ...]

    def __post_init__(self) -> None:
        if not 2 <= len(self.variants) <= 20:
            raise ValidationError(
                f"distillation instance needs 2..20 variants, got {len(self.variants)}"
            )
        for v in self.variants:
            if v.task_type != self.target.task_type:
                raise ValidationError(
                    f"variant {v.id!r} task_type {v.task_type!r} differs from "
                    f"target {self.target.task_type!r}"
                )

    @property
    def k(self) -> int:
        return len(self.variants)


def validate_sample(sample: InstructionSample, dim: int | None = None) -> InstructionSample:
    """Check every sample invariant and return the sample unchanged.

    ``dim`` pins the corpus embedding dimension; pass None to accept any
    dimension (the unit-norm check still applies).
    """
    if not sample.id:
        raise ValidationError("sample id must be nonempty")
    if sample.task_type not in TASK_TYPES:
        raise ValidationError(f"unknown task_type {sample.task_type!r}, expected one of {TASK_TYPES}")
    if sample.variant not in VARIANT_KINDS:
        raise ValidationError(f"unknown variant {sample.variant!r}, expected one of {VARIANT_KINDS}")
    if sample.rating_raw is not None and not 1 <= sample.rating_raw <= 10:
        raise ValidationError(f"rating_raw out of range [1, 10]: {sample.rating_raw}")
    if sample.rating is not None and not 0 <= sample.rating < NUM_QUALITY_LABELS:
        raise ValidationError(f"rating out of range [0, {NUM_QUALITY_LABELS - 1}]: {sample.rating}")
    if sample.embedding is not None:
        emb = np.asarray(sample.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise ValidationError(f"embedding must be a vector, got shape {emb.shape}")
        if dim is not None and emb.shape[0] != dim:
            raise ValidationError(f"embedding dimension {emb.shape[0]} != corpus dimension {dim}")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embedding contains non-finite values")
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValidationError(f"embedding norm {norm:.6g} not within {UNIT_NORM_TOL} of 1")
    return sample


def discretize_rating(overall: int) -> int:
    """Map a 1..10 judge overall rating onto the 1..5 label scale.

    Uses uniform 2-wide bins (ceil(overall / 2)), so the high-quality gate
    at label 4 corresponds to a judge overall of 7 or above. Label 0 is
    never produced here; it is reserved for unparseable ratings.
    """
    if not isinstance(overall, int) or isinstance(overall, bool):
        raise ValidationError(f"overall rating must be an integer, got {overall!r}")
    if not 1 <= overall <= 10:
        raise ValidationError(f"overall rating out of range [1, 10]: {overall}")
    return (overall + 1) // 2


def is_high_quality(label: int) -> bool:
    """True for labels 4 and 5, false for 0..3."""
    return label >= HIGH_QUALITY_THRESHOLD


def _reject_special_float(token: str) -> float:
    raise ValidationError(f"non-finite number {token!r} in sample record")


def sample_to_dict(sample: InstructionSample) -> dict:
    """Canonical JSON object for one sample (embedding as a plain list)."""
    record = {
        "id": sample.id,
        "instruction": sample.instruction,
        "output": sample.output,
        "task_type": sample.task_type,
        "variant": sample.variant,
        "rating_raw": sample.rating_raw,
        "rating": sample.rating,
        "embedding": None if sample.embedding is None else [float(x) for x in sample.embedding],
        "source": sample.source,
    }
    for key, value in sample.extra.items():
        if key not in record:
            record[key] = value
    return record


def sample_from_dict(record: dict) -> InstructionSample:
    embedding = record.get("embedding")
    if embedding is not None:
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.size and not np.all(np.isfinite(embedding)):
            raise ValidationError("embedding contains non-finite values")
    extra = {k: v for k, v in record.items() if k not in _SAMPLE_FIELDS}
    return InstructionSample(
        id=record["id"],
        instruction=record["instruction"],
        output=record["output"],
        task_type=record["task_type"],
        variant=record.get("variant", "unknown"),
        rating_raw=record.get("rating_raw"),
        rating=record.get("rating"),
        embedding=embedding,
        source=record.get("source"),
        extra=extra,
    )


def dumps_sample(sample: InstructionSample) -> str:
    return json.dumps(sample_to_dict(sample), ensure_ascii=False, separators=(", ", ": "))


def loads_sample(line: str) -> InstructionSample:
    record = json.loads(line, parse_constant=_reject_special_float)
    return sample_from_dict(record)


def write_samples(path, samples: Iterable[InstructionSample]) -> int:
    """Write samples as JSON lines (UTF-8, no BOM). Returns the count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(dumps_sample(sample))
            fh.write("\n")
            n += 1
    return n


def read_samples(path, dim: int | None = None, check_unique: bool = True) -> list[InstructionSample]:
    """Read a JSONL sample file, validating each record.

    Duplicate ids are an error when ``check_unique`` is set (the default),
    matching the corpus-level uniqueness invariant.
    """
    samples = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sample = validate_sample(loads_sample(line), dim)
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed sample record: {exc}") from exc
            if check_unique:
                if sample.id in seen:
                    raise ValidationError(f"{path}:{lineno}: duplicate sample id {sample.id!r}")
                seen.add(sample.id)
            samples.append(sample)
    return samples


def iter_jsonl(path) -> Iterator[dict]:
    """Yield raw JSON objects from a JSONL file (used for non-sample records)."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n


def unit_normalize(vec: Sequence[float] | np.ndarray) -> np.ndarray:
    """L2-normalize a vector, rejecting zero-norm input."""
    arr = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValidationError("cannot normalize zero or non-finite vector")
    return arr / norm
