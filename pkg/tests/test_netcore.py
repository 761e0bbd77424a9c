import pytest
import torch
import torch.nn.functional as F

from symdistill.gradcheck import fd_check, projection
from symdistill.netcore import ModelConfig, Projector, decoder_step, ema_update, ema_update_, projector_forward
from symdistill.selfcheck import (
    GRAD_TOL,
    check_decoder_grad,
    check_encoder_grad,
    check_projector_grad,
    tiny_model,
)


def test_config_invariants():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="power of two"):
        ModelConfig(seq_len=6)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=1)
    with pytest.raises(ValueError):
        ModelConfig(n_prototypes=1)


def test_projector_zero_input_gives_equal_logits():
    proj = Projector(6, 16, 4, 10).double()
    y = projector_forward(proj, torch.zeros(6, dtype=torch.float64))
    assert torch.isfinite(y).all()
    assert torch.all(y == y[0])


def test_projector_degenerate_is_linear():
    proj = Projector(5, 0, 0, 3, n_hidden=0).double()
    x = torch.randn(4, 5, dtype=torch.float64)
    assert torch.allclose(proj(x), x @ proj.last.weight.T + proj.last.bias)


def test_projector_shape_mismatch():
    proj = Projector(6, 16, 4, 10)
    with pytest.raises(ValueError):
        projector_forward(proj, torch.zeros(5))


def test_projector_logits_are_bounded_cosines():
    proj = Projector(6, 16, 4, 10).double()
    y = proj(100 * torch.randn(20, 6, dtype=torch.float64))
    assert y.abs().max() <= 1 + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    assert check_projector_grad(seed) < GRAD_TOL
    assert check_decoder_grad(seed) < GRAD_TOL
    assert check_encoder_grad(seed) < GRAD_TOL


def test_identical_patches_give_uniform_cross_attention(model64):
    patch = torch.randn(1, 1, 8, dtype=torch.float64).expand(1, 4, 8)
    prefix = model64.dec.start.view(1, 1, -1)
    _, _, attns = decoder_step(model64, prefix, patch)
    for w in attns:
        assert torch.allclose(w, torch.full_like(w, 0.25), atol=1e-12)


def test_attention_rows_sum_to_one(model64):
    prefix = torch.randn(3, 4, 16, dtype=torch.float64)
    _, _, attns = decoder_step(model64, prefix, torch.randn(3, 5, 8, dtype=torch.float64))
    for w in attns:
        assert torch.allclose(w.sum(-1), torch.ones((), dtype=w.dtype), atol=1e-5)


def test_decoder_step_errors(model64):
    with pytest.raises(ValueError):
        decoder_step(model64, torch.randn(1, 5, 16, dtype=torch.float64), torch.randn(1, 4, 8, dtype=torch.float64))
    with pytest.raises(ValueError):
        decoder_step(model64, torch.randn(1, 2, 16, dtype=torch.float64), torch.randn(1, 0, 8, dtype=torch.float64))


def test_causality(model64):
    """Hidden state at position t ignores positions > t."""
    x = torch.randn(2, 4, 16, dtype=torch.float64)
    mem = model64.dec.memory(torch.randn(2, 3, 8, dtype=torch.float64))
    h1, _ = model64.dec(x, mem)
    x2 = x.clone()
    x2[:, 2:] += torch.randn(2, 2, 16, dtype=torch.float64)
    h2, _ = model64.dec(x2, mem)
    assert torch.equal(h1[:, :2], h2[:, :2])
    assert not torch.allclose(h1[:, 2:], h2[:, 2:])


def test_kv_cache_matches_full_recompute(model64):
    x = torch.randn(2, 4, 16, dtype=torch.float64)
    mem = model64.dec.memory(torch.randn(2, 3, 8, dtype=torch.float64))
    full, full_attn = model64.dec(x, mem)
    caches = [{} for _ in model64.dec.layers]
    for t in range(4):
        h, attn = model64.dec(x[:, t:t + 1], mem, caches, offset=t)
        assert torch.allclose(h[:, 0], full[:, t], atol=1e-12)
        assert torch.allclose(attn[-1][:, :, 0], full_attn[-1][:, :, t], atol=1e-12)


def test_encoder_depth_zero_returns_summary():
    m = tiny_model(0, enc_depth=0)
    out = m.enc(torch.randn(3, 2, 16, dtype=torch.float64))
    assert torch.equal(out, m.enc.summary.expand(3, -1))
    with pytest.raises(ValueError):
        m.enc(torch.zeros(1, 0, 16, dtype=torch.float64))


def test_encoder_is_position_sensitive(model64):
    toks = torch.randn(1, 4, 16, dtype=torch.float64)
    perm = toks[:, [1, 0, 3, 2]]
    assert not torch.allclose(model64.enc(toks), model64.enc(perm))


def test_ema_closed_forms():
    t = {"a": torch.tensor([2.0]), "b": torch.randn(3, 2)}
    s = {"a": torch.tensor([4.0]), "b": torch.randn(3, 2)}
    assert torch.equal(ema_update(t, s, 1.0)["b"], t["b"])
    assert torch.equal(ema_update(t, s, 0.0)["b"], s["b"])
    assert ema_update(t, s, 0.5)["a"].item() == 3.0


def test_ema_then_identity_equals_single_update():
    t = {"w": torch.randn(5, dtype=torch.float64)}
    s = {"w": torch.randn(5, dtype=torch.float64)}
    once = ema_update(t, s, 0.7)
    twice = ema_update(once, s, 1.0)
    assert torch.equal(once["w"], twice["w"])


def test_ema_errors():
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(2)}, 1.5)


def test_ema_inplace_on_projectors(model64):
    with torch.no_grad():
        for p in model64.proj_s.parameters():
            p.add_(1.0)
    before = {k: v.clone() for k, v in model64.proj_t.state_dict().items()}
    ema_update_(model64.proj_t, model64.proj_s, 1.0)
    for k, v in model64.proj_t.state_dict().items():
        assert torch.equal(v, before[k])
    ema_update_(model64.proj_t, model64.proj_s, 0.0)
    for (k, v), (_, w) in zip(model64.proj_t.state_dict().items(), model64.proj_s.state_dict().items()):
        assert torch.equal(v, w)


def test_teacher_and_student_projectors_share_shapes(model64):
    ts = {k: v.shape for k, v in model64.proj_t.state_dict().items()}
    ss = {k: v.shape for k, v in model64.proj_s.state_dict().items()}
    assert ts == ss
    assert all(not p.requires_grad for p in model64.proj_t.parameters())


def test_fd_harness_detects_wrong_gradient():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            return (a ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(4, dtype=torch.float64)

    assert fd_check(lambda: Wrong.apply(x), [x]) > 1e-2
    assert fd_check(lambda: (x ** 2).sum(), [x]) < 1e-8
