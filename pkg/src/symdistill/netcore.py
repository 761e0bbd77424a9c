"""Differentiable building blocks: projector head, decoder with cross-attention,
symbol encoder, and the parameter container shared by trainer and tools."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    vocab_size: int = 128
    seq_len: int = 8
    d_model: int = 256
    n_heads: int = 4
    dec_depth: int = 4
    enc_depth: int = 2
    proj_hidden: int = 1024
    proj_bottleneck: int = 128
    n_prototypes: int = 1024
    d_t: int = 768
    keep_all_attn: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not is_power_of_two(self.seq_len):
            raise ValueError(f"seq_len={self.seq_len}: power of two required")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.n_prototypes < 2:
            raise ValueError("n_prototypes must be >= 2")
        if self.dec_depth < 1:
            raise ValueError("dec_depth must be >= 1")
        if self.enc_depth < 0:
            raise ValueError("enc_depth must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _trunc_normal(*shape) -> nn.Parameter:
    p = nn.Parameter(torch.empty(*shape))
    nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
    return p


class Projector(nn.Module):
    """DINO-style head: MLP -> bottleneck -> l2 normalize -> prototype logits.

    Prototype rows of the last layer are renormalized to unit length on every
    call, so logits are cosines (plus bias) in [-1, 1].
    ``n_hidden=0`` degenerates to a single plain linear map ``d_in -> n_out``.
    """

    def __init__(self, d_in: int, hidden: int, bottleneck: int, n_out: int, n_hidden: int = 2):
        super().__init__()
        self.n_hidden = n_hidden
        if n_hidden == 0:
            self.mlp = nn.Identity()
            self.last = nn.Linear(d_in, n_out)
        else:
            layers: list[nn.Module] = [nn.Linear(d_in, hidden), nn.GELU()]
            for _ in range(n_hidden - 1):
                layers += [nn.Linear(hidden, hidden), nn.GELU()]
            layers.append(nn.Linear(hidden, bottleneck))
            self.mlp = nn.Sequential(*layers)
            self.last = nn.Linear(bottleneck, n_out)
        _init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.n_hidden == 0:
            return self.last(x)
        # F.normalize clamps the norm, so the zero vector maps to zero
        z = F.normalize(self.mlp(x), dim=-1, eps=1e-12)
        return F.linear(z, F.normalize(self.last.weight, dim=-1), self.last.bias)


def projector_forward(proj: Projector, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != proj_in_features(proj):
        raise ValueError(f"projector expects input dim {proj_in_features(proj)}, got {x.shape[-1]}")
    return proj(x)


def proj_in_features(proj: Projector) -> int:
    first = proj.last if proj.n_hidden == 0 else proj.mlp[0]
    return first.in_features


class Attention(nn.Module):
    """Multi-head attention that hands back its softmax weights."""

    def __init__(self, d_model: int, n_heads: int, d_kv: Optional[int] = None):
        super().__init__()
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.o = nn.Linear(d_model, d_model)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def attend(self, x, k, v, mask=None):
        q = self.split(self.q(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        w = scores.softmax(dim=-1)
        out = (w @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o(out), w

    def forward(self, x, mem, mask=None):
        return self.attend(x, self.split(self.k(mem)), self.split(self.v(mem)), mask)


class MLP(nn.Sequential):
    def __init__(self, d_model: int, mult: int = 4):
        super().__init__(nn.Linear(d_model, mult * d_model), nn.GELU(), nn.Linear(mult * d_model, d_model))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = Attention(d_model, n_heads)
        self.ln3 = nn.LayerNorm(d_model)
        self.mlp = MLP(d_model)

    def forward(self, x, mem, cache: Optional[dict] = None):
        """``x`` holds the positions not yet seen; ``cache`` keeps earlier self-attn keys/values."""
        h = self.ln1(x)
        k = self.self_attn.split(self.self_attn.k(h))
        v = self.self_attn.split(self.self_attn.v(h))
        past = 0
        if cache is not None:
            if "k" in cache:
                past = cache["k"].shape[2]
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        t_new, t_all = x.shape[1], k.shape[2]
        qpos = torch.arange(past, past + t_new, device=x.device)[:, None]
        mask = torch.arange(t_all, device=x.device)[None, :] > qpos
        a, _ = self.self_attn.attend(h, k, v, mask)
        x = x + a
        if cache is not None and "mk" in cache:
            mk, mv = cache["mk"], cache["mv"]
        else:
            mk = self.cross_attn.split(self.cross_attn.k(mem))
            mv = self.cross_attn.split(self.cross_attn.v(mem))
            if cache is not None:
                cache["mk"], cache["mv"] = mk, mv
        a, cross_w = self.cross_attn.attend(self.ln2(x), mk, mv)
        x = x + a
        x = x + self.mlp(self.ln3(x))
        return x, cross_w


class Decoder(nn.Module):
    """Autoregressive symbol decoder; cross-attends to projected teacher patch tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.start = _trunc_normal(cfg.d_model)
        self.pos = _trunc_normal(cfg.seq_len, cfg.d_model)
        self.mem_proj = nn.Linear(cfg.d_t, cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(cfg.d_model, cfg.n_heads) for _ in range(cfg.dec_depth))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        _init_weights(self)

    def memory(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        if patch_tokens.shape[-2] == 0:
            raise ValueError("decoder needs at least one patch token")
        if patch_tokens.shape[-1] != self.cfg.d_t:
            raise ValueError(f"patch tokens have dim {patch_tokens.shape[-1]}, expected d_t={self.cfg.d_t}")
        return self.mem_proj(patch_tokens)

    def forward(self, x: torch.Tensor, mem: torch.Tensor, caches: Optional[list] = None, offset: int = 0):
        """Run the stack on positions ``offset .. offset+x.shape[1]``.

        Returns (final hidden states, per-layer cross-attention weights [B, H, t, P-1]).
        """
        t = x.shape[1]
        if offset + t > self.cfg.seq_len:
            raise ValueError(f"prefix length {offset + t} exceeds seq_len={self.cfg.seq_len}")
        x = x + self.pos[offset:offset + t]
        attns = []
        for i, layer in enumerate(self.layers):
            x, w = layer(x, mem, None if caches is None else caches[i])
            attns.append(w)
        return self.ln_f(x), attns


def decoder_step(model: "SymbolicModel", prefix_embeddings: torch.Tensor, patch_tokens: torch.Tensor):
    """Full-recompute decoder step.

    ``prefix_embeddings`` is ``[B, t, d_model]`` and starts with the start token.
    Returns (logits [B, A], hidden [B, d_model], cross-attention of the last
    position per layer, each [B, H, P-1]).
    """
    t = prefix_embeddings.shape[1]
    if not 1 <= t <= model.cfg.seq_len:
        raise ValueError(f"prefix length t={t} outside [1, {model.cfg.seq_len}]")
    dec = model.dec
    h, attns = dec(prefix_embeddings, dec.memory(patch_tokens))
    last = h[:, -1]
    return dec.head(last), last, [w[:, :, -1] for w in attns]


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = MLP(d_model)

    def forward(self, x):
        h = self.ln1(x)
        a, _ = self.attn(h, h)
        x = x + a
        return x + self.mlp(self.ln2(x))


class SymbolEncoder(nn.Module):
    """Bidirectional encoder over symbol embeddings with a prepended summary token.

    The summary slot carries no positional embedding (it is itself learned); symbol
    slots 1..n get ``pos[0..n)``. ``to_teacher`` maps the pooled output into the
    teacher feature space so both projectors share one input width.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.summary = _trunc_normal(cfg.d_model)
        self.pos = _trunc_normal(cfg.seq_len, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.n_heads) for _ in range(cfg.enc_depth))
        self.ln_f = nn.LayerNorm(cfg.d_model) if cfg.enc_depth else nn.Identity()
        self.to_teacher = nn.Linear(cfg.d_model, cfg.d_t)
        _init_weights(self)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[-2]
        if n == 0:
            raise ValueError("encoder needs at least one symbol")
        if n > self.cfg.seq_len:
            raise ValueError(f"{n} symbols exceed seq_len={self.cfg.seq_len}")
        summary = self.summary.expand(*tokens.shape[:-2], 1, -1)
        x = torch.cat([summary, tokens + self.pos[:n]], dim=-2)
        for layer in self.layers:
            x = layer(x)
        return self.ln_f(x)[..., 0, :]


def encoder_forward(model: "SymbolicModel", token_embeddings: torch.Tensor) -> torch.Tensor:
    return model.enc(token_embeddings)


class SymbolicModel(nn.Module):
    """All trainable and teacher-side state under the checkpoint names
    ``dec.*``, ``tokemb``, ``enc.*``, ``proj_s.*``, ``proj_t.*`` and ``center``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.dec = Decoder(cfg)
        self.tokemb = _trunc_normal(cfg.vocab_size, cfg.d_model)
        self.enc = SymbolEncoder(cfg)
        self.proj_s = Projector(cfg.d_t, cfg.proj_hidden, cfg.proj_bottleneck, cfg.n_prototypes)
        self.proj_t = copy.deepcopy(self.proj_s)
        for p in self.proj_t.parameters():
            p.requires_grad_(False)
        self.register_buffer("center", torch.zeros(cfg.n_prototypes))

    def student_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("proj_t."):
                yield p

    def student_head(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj_s(self.enc.to_teacher(pooled))

    @torch.no_grad()
    def teacher_logits(self, global_tokens: torch.Tensor) -> torch.Tensor:
        return self.proj_t(global_tokens)


def ema_update(theta_t: Mapping[str, torch.Tensor], theta_s: Mapping[str, torch.Tensor], lam: float) -> dict:
    """Return ``lam * theta_t + (1 - lam) * theta_s`` per named tensor."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA decay {lam} outside [0, 1]")
    if set(theta_t) != set(theta_s):
        raise ValueError("teacher and student tensor maps have different keys")
    out = {}
    for name, t in theta_t.items():
        s = theta_s[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        out[name] = lam * t + (1.0 - lam) * s
    return out


@torch.no_grad()
def ema_update_(teacher: nn.Module, student: nn.Module, lam: float) -> None:
    """In-place form of :func:`ema_update` over module parameters."""
    new = ema_update(dict(teacher.named_parameters()), dict(student.named_parameters()), lam)
    for name, p in teacher.named_parameters():
        p.copy_(new[name])
