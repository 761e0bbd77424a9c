"""Student forward pass: generate a symbol sequence from teacher patch tokens,
then embed its power-of-two prefixes through the symbol encoder and head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .discretize import (
    DiscretizeSpec,
    gumbel_discretize,
    gumbel_noise,
    one_hot_like,
    softmax_discretize,
    straight_through,
    vq_discretize,
    vq_distances,
)
from .netcore import SymbolicModel, is_power_of_two

ENTROPY_FLOOR = 1e-30


@dataclass
class SymbolSequence:
    logits: torch.Tensor  # [B, L, A]
    soft: torch.Tensor  # [B, L, A] relaxed assignment (one-hot under VQ)
    ids: torch.Tensor  # [B, L]
    emb: torch.Tensor  # [B, L, d_model] embeddings actually fed forward
    attn: torch.Tensor  # [B, layers kept, H, L, P-1]
    vq_aux: Optional[torch.Tensor] = None

    @property
    def deepest_attn(self) -> torch.Tensor:
        return self.attn[:, -1]


@dataclass
class GranularEmbeddings:
    pooled: dict  # n -> [B, d_model]
    proj: dict  # n -> [B, K]
    aggregated: torch.Tensor  # [B, K]


def prefix_lengths(seq_len: int) -> list[int]:
    if not is_power_of_two(seq_len):
        raise ValueError(f"seq_len={seq_len}: power of two required")
    out, n = [], 1
    while n <= seq_len:
        out.append(n)
        n *= 2
    return out


def generate(
    model: SymbolicModel,
    spec: DiscretizeSpec,
    patch_tokens: torch.Tensor,
    tau: float,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
    deterministic: bool = False,
) -> SymbolSequence:
    """Free-running generation of ``seq_len`` symbols.

    Each step feeds back ``soft @ tokemb`` (the hard code under ``st_hard``, the
    straight-through quantized vector under VQ). Gumbel noise for all steps is
    drawn up front as one ``[B, L, A]`` tensor, or taken from ``noise``.
    ``deterministic`` drops the noise and feeds hard argmax codes.
    """
    cfg = model.cfg
    dec = model.dec
    if patch_tokens.dim() == 2:
        patch_tokens = patch_tokens.unsqueeze(0)
    b, L = patch_tokens.shape[0], cfg.seq_len
    dtype = dec.start.dtype
    mem = dec.memory(patch_tokens.to(dtype))
    if spec.kind == "gumbel" and not deterministic and noise is None:
        if generator is None:
            raise ValueError("gumbel generation needs a generator or frozen noise")
        noise = gumbel_noise((b, L, cfg.vocab_size), generator, dtype)

    caches = [{} for _ in dec.layers]
    inp = dec.start.expand(b, 1, -1)
    logits_l, soft_l, ids_l, emb_l, attn_l, aux_l = [], [], [], [], [], []
    for t in range(L):
        h, attns = dec(inp, mem, caches, offset=t)
        h = h[:, -1]
        keep = attns if cfg.keep_all_attn else attns[-1:]
        attn_l.append(torch.stack([w[:, :, -1] for w in keep], dim=1))
        if spec.kind == "vq":
            ids, fed, aux = vq_discretize(h, model.tokemb, spec.vq_beta)
            logits = -vq_distances(h, model.tokemb)
            soft = F.one_hot(ids, cfg.vocab_size).to(dtype)
            aux_l.append(aux)
        else:
            logits = dec.head(h)
            if spec.kind == "gumbel" and not deterministic:
                soft = gumbel_discretize(logits, tau, noise=noise[:, t])
            else:
                soft = softmax_discretize(logits, tau)
            if deterministic:
                weights = one_hot_like(soft)
            elif spec.st_hard:
                weights = straight_through(soft)
            else:
                weights = soft
            ids = soft.argmax(dim=-1)
            fed = weights @ model.tokemb
        logits_l.append(logits)
        soft_l.append(soft)
        ids_l.append(ids)
        emb_l.append(fed)
        inp = fed.unsqueeze(1)

    return SymbolSequence(
        logits=torch.stack(logits_l, 1),
        soft=torch.stack(soft_l, 1),
        ids=torch.stack(ids_l, 1),
        emb=torch.stack(emb_l, 1),
        attn=torch.stack(attn_l, 3),
        vq_aux=torch.stack(aux_l).mean() if aux_l else None,
    )


def embed_prefixes(model: SymbolicModel, seq: SymbolSequence, lengths: Optional[list[int]] = None) -> GranularEmbeddings:
    """Pool each prefix ``emb[:, :n]`` with the encoder and project it with the student head.

    ``aggregated`` is the plain sum of the per-prefix projections.
    """
    lengths = prefix_lengths(seq.emb.shape[1]) if lengths is None else lengths
    pooled, proj = {}, {}
    for n in lengths:
        pooled[n] = model.enc(seq.emb[:, :n])
        proj[n] = model.student_head(pooled[n])
    aggregated = torch.stack([proj[n] for n in lengths]).sum(0)
    return GranularEmbeddings(pooled=pooled, proj=proj, aggregated=aggregated)


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (nats) over the last axis; zero-probability entries contribute 0."""
    return -(p * torch.log(p.clamp_min(ENTROPY_FLOOR))).sum(-1)


def sequence_info(soft: torch.Tensor) -> torch.Tensor:
    """Entropy of the position-averaged assignment; ``soft`` is ``[..., L, A]``."""
    return entropy(soft.mean(dim=-2))


def sequence_entropy(soft: torch.Tensor) -> torch.Tensor:
    """Mean per-position entropy of ``soft`` (``[..., L, A]``)."""
    return entropy(soft).mean(dim=-1)


def distinct_ratio(ids: torch.Tensor) -> torch.Tensor:
    """Non-differentiable diagnostic: distinct symbols / L, per sequence."""
    return torch.tensor([len(set(row.tolist())) / ids.shape[-1] for row in ids.reshape(-1, ids.shape[-1])])
