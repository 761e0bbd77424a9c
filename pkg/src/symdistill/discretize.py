"""Relaxed discretizations of decoder outputs: tempered softmax, Gumbel-Softmax, VQ."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

KINDS = ("softmax_temp", "gumbel", "vq")
SCHEDULES = ("constant", "linear", "cosine")
GUMBEL_EPS = 1e-12


@dataclass
class DiscretizeSpec:
    kind: str = "gumbel"
    tau_start: float = 1.0
    tau_end: float = 0.12
    tau_schedule: str = "cosine"
    st_hard: bool = False
    vq_beta: float = 0.25

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"discretize must be one of {KINDS}, got {self.kind!r}")
        if self.tau_schedule not in SCHEDULES:
            raise ValueError(f"tau_schedule must be one of {SCHEDULES}, got {self.tau_schedule!r}")
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError(f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}")
        if self.vq_beta < 0:
            raise ValueError("vq_beta must be >= 0")


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def hard_ids(soft: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index
    return soft.argmax(dim=-1)


def one_hot_like(soft: torch.Tensor) -> torch.Tensor:
    return F.one_hot(hard_ids(soft), soft.shape[-1]).to(soft.dtype)


def straight_through(soft: torch.Tensor) -> torch.Tensor:
    """Hard one-hot forward value with the gradient of ``soft``."""
    return one_hot_like(soft) - soft.detach() + soft


def softmax_discretize(logits: torch.Tensor, tau: float) -> torch.Tensor:
    _check_tau(tau)
    return torch.softmax(logits / tau, dim=-1)


def gumbel_noise(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Standard Gumbel draws ``-log(-log U)``, U clamped away from {0, 1}.

    Drawn in float64 so the clamp bounds survive, then cast.
    """
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return (-torch.log(-torch.log(u))).to(dtype)


def gumbel_discretize(
    logits: torch.Tensor,
    tau: float,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """``softmax((logits + g) / tau)``. Pass ``noise`` to freeze ``g``."""
    _check_tau(tau)
    if noise is None:
        if generator is None:
            raise ValueError("gumbel_discretize needs a generator or explicit noise")
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    return torch.softmax((logits + noise) / tau, dim=-1)


def vq_distances(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances ``[..., A]``, computed exactly as sum of squares of differences."""
    return ((z.unsqueeze(-2) - codebook) ** 2).sum(-1)


def vq_discretize(z: torch.Tensor, codebook: torch.Tensor, beta: float = 0.25):
    """Nearest-code quantization.

    Returns (ids, quantized with straight-through gradient to ``z``, aux loss).
    The aux loss is ``|sg(z) - e|^2 + beta * |z - sg(e)|^2``, averaged over leading dims.
    """
    if z.shape[-1] != codebook.shape[-1]:
        raise ValueError(f"z has dim {z.shape[-1]} but codes have dim {codebook.shape[-1]}")
    if codebook.shape[0] < 1:
        raise ValueError("empty codebook")
    with torch.no_grad():
        ids = vq_distances(z, codebook).argmin(dim=-1)
    e = codebook[ids]
    codebook_loss = ((z.detach() - e) ** 2).sum(-1)
    commit_loss = ((z - e.detach()) ** 2).sum(-1)
    aux = (codebook_loss + beta * commit_loss).mean()
    quantized = z + (e - z).detach()
    return ids, quantized, aux


def schedule_tau(spec: DiscretizeSpec, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    a, b = spec.tau_start, spec.tau_end
    frac = step / total_steps
    if spec.tau_schedule == "constant":
        return a
    if spec.tau_schedule == "linear":
        return a + (b - a) * frac
    return b + (a - b) * (1.0 + math.cos(math.pi * frac)) / 2.0
