"""Invariant checks behind ``symdistill selfcheck``.

Each check returns ``(ok, detail)``; :func:`run_all` prints one line per check.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np
import torch

from . import checkpoint as symc
from .config import RunConfig
from .discretize import DiscretizeSpec, gumbel_discretize, gumbel_noise, softmax_discretize, vq_discretize
from .featstore import FeatureSet, read_features, write_features
from .gradcheck import fd_check, projection
from .losses import LossSpec, ssl_loss, teacher_distribution, total_loss, update_center
from .netcore import ModelConfig, SymbolicModel, decoder_step, ema_update
from .seqgen import embed_prefixes, generate
from .trainer import build_model

GRAD_TOL = 1e-4


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=8, seq_len=4, d_model=16, n_heads=2, dec_depth=2, enc_depth=1,
                proj_hidden=32, proj_bottleneck=8, n_prototypes=16, d_t=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **kw) -> SymbolicModel:
    return build_model(tiny_config(**kw), seed, dtype=torch.float64)


def _params(module):
    return [p for p in module.parameters() if p.requires_grad]


def check_projector_grad(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    m = tiny_model(seed)
    x = torch.randn(3, m.cfg.d_t, generator=g, dtype=torch.float64, requires_grad=True)
    w = projection((3, m.cfg.n_prototypes), g)
    return fd_check(lambda: (m.proj_s(x) * w).sum(), _params(m.proj_s) + [x], generator=g)


def check_decoder_grad(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    m = tiny_model(seed)
    t = 3
    prefix = torch.randn(2, t, m.cfg.d_model, generator=g, dtype=torch.float64, requires_grad=True)
    patches = torch.randn(2, 4, m.cfg.d_t, generator=g, dtype=torch.float64, requires_grad=True)
    w = projection((2, m.cfg.vocab_size), g)
    return fd_check(lambda: (decoder_step(m, prefix, patches)[0] * w).sum(),
                    _params(m.dec) + [prefix, patches], generator=g)


def check_encoder_grad(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    m = tiny_model(seed)
    toks = torch.randn(2, m.cfg.seq_len, m.cfg.d_model, generator=g, dtype=torch.float64, requires_grad=True)
    w = projection((2, m.cfg.d_model), g)
    return fd_check(lambda: (m.enc(toks) * w).sum(), _params(m.enc) + [toks], generator=g)


def check_discretize_grad(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(3, 8, generator=g, dtype=torch.float64, requires_grad=True)
    noise = gumbel_noise((3, 8), g, torch.float64)
    w = projection((3, 8), g)
    e1 = fd_check(lambda: (softmax_discretize(logits, 0.7) * w).sum(), [logits], generator=g)
    e2 = fd_check(lambda: (gumbel_discretize(logits, 0.7, noise=noise) * w).sum(), [logits], generator=g)
    z = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    codes = torch.randn(6, 5, generator=g, dtype=torch.float64, requires_grad=True)
    # stop-gradients: d aux/dz is beta * d|z-e|^2/dz, d aux/de is d|z-e|^2/de
    ids = vq_discretize(z, codes)[0]
    aux = lambda: vq_discretize(z, codes, 0.25)[2]
    e3 = fd_check(aux, [z], generator=g, fd_fn=lambda: 0.25 * ((z - codes[ids]) ** 2).sum(-1).mean())
    e4 = fd_check(aux, [codes], generator=g, fd_fn=lambda: ((z - codes[ids]) ** 2).sum(-1).mean())
    return max(e1, e2, e3, e4)


def student_loss_fn(m: SymbolicModel, spec: DiscretizeSpec, lspec: LossSpec, tokens: torch.Tensor, noise):
    """Full unrolled student loss for ``tokens`` ``[B, V, P, d_t]`` with frozen Gumbel noise."""
    b, v = tokens.shape[:2]

    def fn():
        p_t = [teacher_distribution(m.teacher_logits(tokens[:, i, 0]), m.center, lspec.teacher_temp)
               for i in range(v)]
        patches = tokens[:, :, 1:]
        seq = generate(m, spec, patches.reshape(b * v, *patches.shape[2:]), 0.8, noise=noise)
        emb = embed_prefixes(m, seq)
        views = [{n: p.view(b, v, -1)[:, i] for n, p in emb.proj.items()} for i in range(v)]
        ssl, _ = ssl_loss(p_t, views, lspec)
        return total_loss(ssl, seq.soft, lspec, seq.vq_aux)

    return fn


def check_full_loss_grad(seed: int = 0, kind: str = "gumbel", strategy: str = "info") -> float:
    g = torch.Generator().manual_seed(seed)
    m = tiny_model(seed)
    tokens = torch.randn(2, 2, 5, m.cfg.d_t, generator=g, dtype=torch.float64)
    noise = gumbel_noise((4, m.cfg.seq_len, m.cfg.vocab_size), g, torch.float64)
    spec = DiscretizeSpec(kind=kind)
    lspec = LossSpec(strategy=strategy, alpha=0.3, beta=0.3, granularity_lambda=0.7)
    return fd_check(student_loss_fn(m, spec, lspec, tokens, noise), list(m.student_parameters()), generator=g)


def check_gumbel_max(n_draws: int = 100_000, n_vectors: int = 10, A: int = 16, seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_vectors):
        logits = torch.randn(A, generator=g, dtype=torch.float64)
        soft = gumbel_discretize(logits.expand(n_draws, A), 1.0, generator=g)
        freq = torch.bincount(soft.argmax(-1), minlength=A).double() / n_draws
        worst = max(worst, 0.5 * float((freq - torch.softmax(logits, -1)).abs().sum()))
    return worst


def check_vq_oracle(trials: int = 1000, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for t in range(trials):
        codes = rng.standard_normal((32, 8))
        z = rng.standard_normal(8)
        if t % 10 == 0:
            # engineered exact tie: integer z, two codes one unit away along one axis
            z = rng.integers(-3, 4, 8).astype(np.float64)
            i, j = rng.choice(32, 2, replace=False)
            k = rng.integers(8)
            codes[i], codes[j] = z.copy(), z.copy()
            codes[i][k] += 1.0
            codes[j][k] -= 1.0
        best = min(range(32), key=lambda i: (float(((z - codes[i]) ** 2).sum()), i))
        ids, _, _ = vq_discretize(torch.from_numpy(z), torch.from_numpy(codes))
        mismatches += int(ids) != best
    return mismatches


def check_loss_oracle(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    V, K, B, lengths = 2, 64, 3, [1, 2, 4, 8]
    lam = 0.8
    p_t = [torch.softmax(torch.randn(B, K, generator=g, dtype=torch.float64), -1) for _ in range(V)]
    s = [{n: torch.randn(B, K, generator=g, dtype=torch.float64) for n in lengths} for _ in range(V)]
    spec = LossSpec(granularity_lambda=lam, student_temp=0.1)
    got, _ = ssl_loss(p_t, s, spec)
    wsum = sum(lam ** j for j in range(1, 5))
    ref = 0.0
    for i in range(V):
        for j, n in enumerate(lengths, 1):
            for b in range(B):
                x = (s[i][n][b] / 0.1).tolist()
                mx = max(x)
                lse = mx + math.log(sum(math.exp(v - mx) for v in x))
                ce = -sum(p * (v - lse) for p, v in zip(p_t[i][b].tolist(), x))
                ref += (lam ** j / wsum) * ce / (B * V)
    return abs(float(got) - ref)


def check_ema_center() -> bool:
    t = {"w": torch.tensor([2.0, -1.5], dtype=torch.float64)}
    s = {"w": torch.tensor([4.0, 0.25], dtype=torch.float64)}
    ok = torch.equal(ema_update(t, s, 1.0)["w"], t["w"])
    ok &= torch.equal(ema_update(t, s, 0.0)["w"], s["w"])
    ok &= torch.equal(ema_update(t, s, 0.5)["w"], torch.tensor([3.0, -0.625], dtype=torch.float64))
    c = torch.tensor([0.0, 1.0], dtype=torch.float64)
    batch = torch.tensor([[1.0, 3.0], [1.0, 5.0]], dtype=torch.float64)
    ok &= torch.equal(update_center(c, batch, 0.0), torch.tensor([1.0, 4.0], dtype=torch.float64))
    ok &= torch.equal(update_center(c, batch, 1.0), c)
    ok &= torch.equal(update_center(c, batch, 0.9), 0.9 * c + (1 - 0.9) * batch.mean(0))
    return bool(ok)


def check_attention_rows(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    m = tiny_model(seed, keep_all_attn=True)
    patches = torch.randn(3, 4, m.cfg.d_t, generator=g, dtype=torch.float64)
    seq = generate(m, DiscretizeSpec(kind="gumbel"), patches, 0.5, generator=g)
    return float((seq.attn.detach().sum(-1) - 1).abs().max())


def check_formats(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    fs = FeatureSet(tokens=rng.standard_normal((3, 2, 5, 4)).astype(np.float32), grid_h=2, grid_w=2,
                    labels=np.array([0, 2, 1]), n_classes=3)
    m = build_model(tiny_config(), seed)
    with tempfile.TemporaryDirectory() as d:
        write_features(fs, os.path.join(d, "f.symf"))
        back = read_features(os.path.join(d, "f.symf"))
        ok = back.tokens.tobytes() == fs.tokens.tobytes() and np.array_equal(back.labels, fs.labels)
        symc.save_checkpoint(os.path.join(d, "c.symc"), m.state_dict(), RunConfig().to_text())
        tensors, _ = symc.load_checkpoint(os.path.join(d, "c.symc"))
        ok &= all(torch.equal(tensors[k], v) for k, v in m.state_dict().items())
    return bool(ok)


def run_all(quick: bool = False, out=print) -> bool:
    draws = 20_000 if quick else 100_000
    tv_tol = 0.02 if quick else 0.01
    checks = [
        ("projector gradient", lambda: check_projector_grad(), lambda e: e < GRAD_TOL),
        ("decoder step gradient", lambda: check_decoder_grad(), lambda e: e < GRAD_TOL),
        ("encoder gradient", lambda: check_encoder_grad(), lambda e: e < GRAD_TOL),
        ("discretization gradients", lambda: check_discretize_grad(), lambda e: e < GRAD_TOL),
        ("full student loss gradient", lambda: check_full_loss_grad(), lambda e: e < GRAD_TOL),
        ("Gumbel-max frequencies (TV)", lambda: check_gumbel_max(draws), lambda e: e < tv_tol),
        ("VQ vs exhaustive search (mismatches)", lambda: check_vq_oracle(), lambda e: e == 0),
        ("granularity loss vs scalar oracle", lambda: check_loss_oracle(), lambda e: e < 1e-10),
        ("EMA / centering closed forms", lambda: check_ema_center(), lambda e: e is True),
        ("attention rows sum to 1", lambda: check_attention_rows(), lambda e: e < 1e-5),
        ("SYMF / SYMC round trip", lambda: check_formats(), lambda e: e is True),
    ]
    all_ok = True
    for name, run, accept in checks:
        try:
            value = run()
            ok = accept(value)
        except Exception as e:  # report and keep going
            value, ok = f"{type(e).__name__}: {e}", False
        all_ok &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {value}")
    return all_ok
