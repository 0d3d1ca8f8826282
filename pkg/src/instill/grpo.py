"""Group-relative advantage normalization and the clipped policy objective.

Pure functions over externally supplied rewards and per-token
log-probabilities; nothing here touches a model. Conventions: the group
standard deviation is the population one (divide by m), the importance
ratio is sequence-level, and the KL penalty uses the nonnegative per-token
estimator exp(d) - d - 1 with d = logp_ref - logp_new.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ValidationError


@dataclass(frozen=True)
class GrpoParams:
    eps_std: float = 1e-8
    eps_clip: float = 0.2
    beta_kl: float = 0.01

    def __post_init__(self) -> None:
        if self.eps_std < 0:
            raise ValidationError("eps_std must be >= 0")
        if not 0.0 < self.eps_clip < 1.0:
            raise ValidationError("eps_clip must be in (0, 1)")
        if self.beta_kl < 0:
            raise ValidationError("beta_kl must be >= 0")


@dataclass(frozen=True)
class GroupRollout:
    """Candidate rewards (and optional log-prob sequences) for one prompt."""

    prompt_id: str
    rewards: tuple[float, ...]
    logp_new: tuple[tuple[float, ...], ...] | None = None
    logp_old: tuple[tuple[float, ...], ...] | None = None
    logp_ref: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if len(self.rewards) < 2:
            raise ValidationError(f"group {self.prompt_id!r} needs >= 2 candidates")
        if not all(math.isfinite(r) for r in self.rewards):
            raise ValidationError(f"group {self.prompt_id!r} has non-finite rewards")
        for name in ("logp_new", "logp_old", "logp_ref"):
            seqs = getattr(self, name)
            if seqs is not None and len(seqs) != len(self.rewards):
                raise ValidationError(f"group {self.prompt_id!r}: {name} misaligned with rewards")
        if self.logp_new is not None and self.logp_old is not None:
            for i, (new, old) in enumerate(zip(self.logp_new, self.logp_old)):
                if len(new) != len(old):
                    raise ValidationError(
                        f"group {self.prompt_id!r} candidate {i}: token counts differ"
                    )

    @property
    def m(self) -> int:
        return len(self.rewards)

    def has_logprobs(self) -> bool:
        return self.logp_new is not None and self.logp_old is not None and self.logp_ref is not None


def group_normalize(rewards: Sequence[float], eps_std: float = 1e-8) -> np.ndarray:
    """Within-group advantages: (R_i - mean) / (population std + eps).

    A constant group yields exactly zero advantages regardless of eps.
    """
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise ValidationError(f"group must hold >= 2 rewards, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("rewards must be finite")
    centered = arr - arr.mean()
    if np.all(centered == 0.0):
        return np.zeros_like(arr)
    std = float(np.sqrt(np.mean(centered**2)))
    return centered / (std + eps_std)


def importance_ratio(logp_new: Sequence[float], logp_old: Sequence[float]) -> float:
    """Sequence-level probability ratio exp(sum(new) - sum(old))."""
    return math.exp(log_importance_ratio(logp_new, logp_old))


def log_importance_ratio(logp_new: Sequence[float], logp_old: Sequence[float]) -> float:
    """Log-domain ratio; exact even where the exponentiated value underflows."""
    if len(logp_new) != len(logp_old):
        raise ValidationError(
            f"token count mismatch: {len(logp_new)} vs {len(logp_old)}"
        )
    return float(math.fsum(logp_new) - math.fsum(logp_old))


def clipped_surrogate(ratio: float, advantage: float, eps_clip: float = 0.2) -> float:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    if not math.isfinite(ratio) or ratio <= 0.0:
        raise ValidationError(f"importance ratio must be positive and finite, got {ratio}")
    clipped = min(max(ratio, 1.0 - eps_clip), 1.0 + eps_clip)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty(logp_new: Sequence[float], logp_ref: Sequence[float]) -> float:
    """Token-mean of exp(d) - d - 1 with d = logp_ref_t - logp_new_t (>= 0)."""
    if len(logp_new) != len(logp_ref):
        raise ValidationError(
            f"token count mismatch: {len(logp_new)} vs {len(logp_ref)}"
        )
    if len(logp_new) == 0:
        return 0.0
    total = 0.0
    for p, q in zip(logp_new, logp_ref):
        d = q - p
        total += math.exp(d) - d - 1.0
    return total / len(logp_new)


def grpo_objective(groups: Sequence[GroupRollout], params: GrpoParams = GrpoParams()) -> dict:
    """Mean clipped surrogate minus the KL penalty, with per-group diagnostics.

    objective = mean_g[ mean_i clip_i ] - beta_kl * mean_g[ mean_i kl_i ].
    """
    if not groups:
        raise ValidationError("need at least one group")
    clip_terms = []
    kl_terms = []
    diagnostics = []
    for group in groups:
        if not group.has_logprobs():
            raise ValidationError(f"group {group.prompt_id!r} is missing log-prob sequences")
        advantages = group_normalize(group.rewards, params.eps_std)
        surrogates = []
        kls = []
        clipped_count = 0
        for i in range(group.m):
            log_ratio = log_importance_ratio(group.logp_new[i], group.logp_old[i])
            ratio = math.exp(log_ratio)
            surrogates.append(clipped_surrogate(ratio, float(advantages[i]), params.eps_clip))
            if abs(ratio - 1.0) > params.eps_clip:
                clipped_count += 1
            kls.append(kl_penalty(group.logp_new[i], group.logp_ref[i]))
        group_clip = float(np.mean(surrogates))
        group_kl = float(np.mean(kls))
        clip_terms.append(group_clip)
        kl_terms.append(group_kl)
        rewards = np.asarray(group.rewards, dtype=np.float64)
        diagnostics.append(
            {
                "prompt_id": group.prompt_id,
                "mean_reward": float(rewards.mean()),
                "std_reward": float(np.sqrt(np.mean((rewards - rewards.mean()) ** 2))),
                "clip_fraction": clipped_count / group.m,
                "kl": group_kl,
                "surrogate": group_clip,
            }
        )
    objective = float(np.mean(clip_terms)) - params.beta_kl * float(np.mean(kl_terms))
    return {
        "objective": objective,
        "surrogate": float(np.mean(clip_terms)),
        "kl": float(np.mean(kl_terms)),
        "per_group": diagnostics,
    }
