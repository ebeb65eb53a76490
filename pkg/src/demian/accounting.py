"""FLOPs and dollar-cost model for annotation generation.

Products are kept exact; approximate figures quoted elsewhere are matched by
test tolerances, not by rounding here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class CostModel:
    active_params: float = 3e9
    input_tokens: float = 8200.0
    output_tokens: float = 150.0
    price_in: float = 0.13  # dollars per 1e6 tokens
    price_out: float = 0.52

    def __post_init__(self):
        for name in ("active_params", "input_tokens", "output_tokens", "price_in", "price_out"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")


def flops_per_call(cm: CostModel) -> float:
    return 2.0 * cm.active_params * (cm.input_tokens + cm.output_tokens)


def _check_counts(n_clips: int, n_aspects: int) -> None:
    if n_clips < 0:
        raise ValueError(f"n_clips must be >= 0, got {n_clips}")
    if n_aspects < 0:
        raise ValueError(f"n_aspects must be >= 0, got {n_aspects}")


def corpus_flops(cm: CostModel, n_clips: int, n_aspects: int) -> float:
    _check_counts(n_clips, n_aspects)
    return n_clips * n_aspects * flops_per_call(cm)


def dollars_per_call(cm: CostModel) -> float:
    return (cm.input_tokens * cm.price_in + cm.output_tokens * cm.price_out) / 1e6


def corpus_dollars(cm: CostModel, n_clips: int, n_aspects: int) -> float:
    _check_counts(n_clips, n_aspects)
    return n_clips * n_aspects * dollars_per_call(cm)


@dataclass(frozen=True)
class ComputePoint:
    train_flops: float
    annotated: bool

    def __post_init__(self):
        if self.train_flops < 0:
            raise ValueError(f"train_flops must be >= 0, got {self.train_flops}")


def compute_axis(
    points: Sequence[ComputePoint], cm: CostModel, n_clips: int, n_aspects: int
) -> list[float]:
    """Total-compute positions: annotated points carry the corpus annotation
    FLOPs as a fixed upfront offset, unannotated points pass through."""
    offset = corpus_flops(cm, n_clips, n_aspects)
    return [p.train_flops + offset if p.annotated else p.train_flops for p in points]
