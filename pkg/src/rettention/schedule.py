"""Denoising-step schedule and the per-site ratio/residual cache.

Steps before ``warmup_full_steps`` run full attention. After warmup, every
``cache_period``-th step runs full attention and refreshes the cache; the
steps in between run sparse attention against the cache.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attention import (
    AttentionInputs,
    AttentionOutput,
    compute_denominator_ratio,
    compute_residual,
    full_attention,
    reshape_attention,
)
from .errors import ParameterError
from .masks import SparseMask

# Best value on the ramp-up grid {0, 0.01, 0.02, 0.04}.
DEFAULT_LAMBDA = 0.04
LAMBDA_GRID = (0.0, 0.01, 0.02, 0.04)


class StepKind(str, enum.Enum):
    WARMUP_FULL = "warmup_full"
    CACHE_FULL = "cache_full"
    SPARSE = "sparse"

    @property
    def is_full(self) -> bool:
        return self is not StepKind.SPARSE


@dataclass(frozen=True)
class DenoisingSchedule:
    total_steps: int = 20
    warmup_full_steps: int = 5
    cache_period: int = 5
    ramp_lambda: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_full_steps <= self.total_steps:
            raise ParameterError(
                f"warmup_full_steps must be in [0, total_steps={self.total_steps}], got {self.warmup_full_steps}"
            )
        if self.cache_period < 1:
            raise ParameterError(f"cache_period must be >= 1, got {self.cache_period}")
        if not self.ramp_lambda >= 0.0:
            raise ParameterError(f"lambda must be >= 0, got {self.ramp_lambda}")

    def classify(self, t: int) -> StepKind:
        return classify_step(self, t)

    def kinds(self) -> list[StepKind]:
        return [classify_step(self, t) for t in range(self.total_steps)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("ramp_lambda")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoisingSchedule":
        d = dict(d)
        if "lambda" in d:
            d["ramp_lambda"] = d.pop("lambda")
        return cls(**d)


def classify_step(sched: DenoisingSchedule, t: int) -> StepKind:
    if not 0 <= t < sched.total_steps:
        raise ParameterError(f"step {t} outside [0, {sched.total_steps})")
    if t < sched.warmup_full_steps:
        return StepKind.WARMUP_FULL
    if (t - sched.warmup_full_steps) % sched.cache_period == 0:
        return StepKind.CACHE_FULL
    return StepKind.SPARSE


@dataclass(frozen=True)
class AttentionCache:
    """Ratio and residual captured at one full-attention step for one attention site."""

    rho_base: np.ndarray
    current_rho: np.ndarray
    residual: np.ndarray
    captured_at: int
    steps_since_capture: int = 0

    def to_dict(self) -> dict:
        return {
            "rho_base": self.rho_base.tolist(),
            "current_rho": self.current_rho.tolist(),
            "residual": self.residual.tolist(),
            "captured_at": self.captured_at,
            "steps_since_capture": self.steps_since_capture,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionCache":
        return cls(
            rho_base=np.asarray(d["rho_base"], dtype=np.float64),
            current_rho=np.asarray(d["current_rho"], dtype=np.float64),
            residual=np.asarray(d["residual"], dtype=np.float64),
            captured_at=int(d["captured_at"]),
            steps_since_capture=int(d["steps_since_capture"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def capture_cache(inp: AttentionInputs, mask: SparseMask, t: int) -> tuple[AttentionCache, AttentionOutput]:
    """Run full attention at step ``t`` and capture the exact ratio and residual.

    Returns the new cache and the full-attention output, which is the step's
    actual output.
    """
    full = full_attention(inp)
    stats = compute_denominator_ratio(inp, mask)
    rho = stats.rho
    reshaped = reshape_attention(inp, mask, rho)
    residual = compute_residual(full, reshaped)
    cache = AttentionCache(rho_base=rho, current_rho=rho.copy(), residual=residual, captured_at=t)
    return cache, full


def advance_cache(cache: AttentionCache, ramp_lambda: float) -> AttentionCache:
    """One denoising step later: ``current_rho = min(1, rho_base + lambda * steps)``."""
    if not ramp_lambda >= 0.0:
        raise ParameterError(f"lambda must be >= 0, got {ramp_lambda}")
    n = cache.steps_since_capture + 1
    rho = np.minimum(1.0, cache.rho_base + ramp_lambda * n)
    return replace(cache, current_rho=rho, steps_since_capture=n)
