"""Centered/sharpened teacher targets, the multi-granularity distillation loss,
and the exploration terms added on top of it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .seqgen import sequence_entropy, sequence_info

STRATEGIES = ("base", "entropy", "info", "combined")


@dataclass
class LossSpec:
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    granularity_lambda: float = 1.0
    strategy: str = "base"
    alpha: float = 0.1
    beta: float = 0.1
    strategy_switch_epoch: Optional[int] = None
    cross_view: bool = False
    aggregate_loss_term: bool = False

    def __post_init__(self):
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ValueError("teacher_temp and student_temp must be > 0")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError("center_momentum must lie in [0, 1)")
        if self.granularity_lambda <= 0:
            raise ValueError("granularity_lambda must be > 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.strategy == "combined" and self.strategy_switch_epoch is None:
            raise ValueError("combined strategy needs strategy_switch_epoch")


def teacher_distribution(logits_t: torch.Tensor, center: torch.Tensor, teacher_temp: float) -> torch.Tensor:
    return torch.softmax((logits_t - center) / teacher_temp, dim=-1).detach()


@torch.no_grad()
def update_center(center: torch.Tensor, batch_teacher_logits: torch.Tensor, m: float) -> torch.Tensor:
    if batch_teacher_logits.shape[0] == 0:
        raise ValueError("cannot update center from an empty batch")
    return m * center + (1.0 - m) * batch_teacher_logits.mean(dim=0)


def granularity_weights(n_levels: int, lam: float) -> list[float]:
    """``lam**j / sum_j lam**j`` for ``j = 1..n_levels``."""
    raw = [lam ** j for j in range(1, n_levels + 1)]
    total = sum(raw)
    return [w / total for w in raw]


def cross_entropy(p: torch.Tensor, student_logits: torch.Tensor, student_temp: float) -> torch.Tensor:
    """``-sum_k p_k log softmax(s / T_s)_k`` over the last axis."""
    return -(p * torch.log_softmax(student_logits / student_temp, dim=-1)).sum(-1)


def ssl_loss(
    p_t_views: Sequence[torch.Tensor],
    student_views: Sequence[dict],
    spec: LossSpec,
    aggregated_views: Optional[Sequence[torch.Tensor]] = None,
):
    """Weighted cross-entropy over prefix granularities, averaged over views and batch.

    ``p_t_views[i]`` is ``[B, K]``; ``student_views[i]`` maps prefix length n to
    ``[B, K]`` logits. Returns (loss, {n: unweighted CE averaged over views}).
    """
    if not p_t_views or len(p_t_views) != len(student_views):
        raise ValueError("need the same non-zero number of teacher and student views")
    for p in p_t_views:
        if (p < 0).any() or not torch.allclose(p.sum(-1), torch.ones((), dtype=p.dtype), atol=1e-5):
            raise ValueError("teacher targets must lie on the probability simplex")
    lengths = sorted(student_views[0])
    levels = len(lengths) + int(spec.aggregate_loss_term)
    weights = granularity_weights(levels, spec.granularity_lambda)
    n_views = len(p_t_views)
    total = 0.0
    breakdown: dict = {n: 0.0 for n in lengths}
    for i in range(n_views):
        if spec.cross_view:
            targets = [p_t_views[k] for k in range(n_views) if k != i] or [p_t_views[i]]
        else:
            targets = [p_t_views[i]]
        for p in targets:
            scale = 1.0 / (len(targets) * n_views)
            for j, n in enumerate(lengths):
                ce = cross_entropy(p, student_views[i][n], spec.student_temp).mean()
                breakdown[n] = breakdown[n] + scale * ce
                total = total + weights[j] * scale * ce
            if spec.aggregate_loss_term:
                ce = cross_entropy(p, aggregated_views[i], spec.student_temp).mean()
                breakdown["agg"] = breakdown.get("agg", 0.0) + scale * ce
                total = total + weights[-1] * scale * ce
    return total, breakdown


def active_strategy(spec: LossSpec, epoch: int) -> str:
    """``combined`` runs the info term before the switch epoch and the entropy term after it."""
    if spec.strategy != "combined":
        return spec.strategy
    return "info" if epoch < spec.strategy_switch_epoch else "entropy"


def total_loss(ssl: torch.Tensor, soft_batch: torch.Tensor, spec: LossSpec, vq_aux=None, epoch: int = 0):
    """Add the exploration term of the active strategy (and the VQ aux loss, if any).

    ``soft_batch`` is ``[..., L, A]``; entropy/info terms are batch means.
    """
    out = ssl if vq_aux is None else ssl + vq_aux
    strategy = active_strategy(spec, epoch)
    if strategy == "entropy":
        out = out - spec.alpha * sequence_entropy(soft_batch).mean()
    elif strategy == "info":
        out = out - spec.beta * sequence_info(soft_batch).mean()
    return out
