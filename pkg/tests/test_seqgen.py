import math

import mpmath
import pytest
import torch

from symdistill.discretize import DiscretizeSpec
from symdistill.netcore import decoder_step
from symdistill.selfcheck import GRAD_TOL, check_full_loss_grad, tiny_model
from symdistill.seqgen import (
    distinct_ratio,
    embed_prefixes,
    generate,
    prefix_lengths,
    sequence_entropy,
    sequence_info,
)

GUMBEL = DiscretizeSpec(kind="gumbel")


def _patches(b=3, p=4, d=8, seed=0):
    return torch.randn(b, p, d, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _mp_entropy(row):
    mpmath.mp.dps = 40
    return float(-sum(mpmath.mpf(x) * mpmath.log(mpmath.mpf(x)) for x in row if x > 0))


def test_prefix_lengths():
    assert prefix_lengths(8) == [1, 2, 4, 8]
    assert prefix_lengths(1) == [1]
    with pytest.raises(ValueError):
        prefix_lengths(6)


def test_single_step_generation_is_decoder_step():
    m = tiny_model(0, seq_len=1)
    patches = _patches()
    seq = generate(m, DiscretizeSpec(kind="softmax_temp"), patches, 0.5)
    logits, _, _ = decoder_step(m, m.dec.start.expand(3, 1, -1), patches)
    assert torch.allclose(seq.logits[:, 0], logits, atol=1e-12)


def test_same_seed_same_sequence(model64):
    a = generate(model64, GUMBEL, _patches(), 0.7, generator=torch.Generator().manual_seed(3))
    b = generate(model64, GUMBEL, _patches(), 0.7, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a.ids, b.ids) and torch.equal(a.soft, b.soft) and torch.equal(a.attn, b.attn)


def test_patch_tokens_drive_first_logits(model64):
    g = torch.Generator().manual_seed(9)
    spec = DiscretizeSpec(kind="softmax_temp")
    for _ in range(100):
        x = torch.randn(1, 4, 8, generator=g, dtype=torch.float64)
        y = torch.randn(1, 4, 8, generator=g, dtype=torch.float64)
        assert not torch.equal(generate(model64, spec, x, 0.5).logits[:, 0],
                               generate(model64, spec, y, 0.5).logits[:, 0])


def test_sequence_invariants(model64):
    seq = generate(model64, GUMBEL, _patches(), 0.5, generator=torch.Generator().manual_seed(0))
    assert torch.equal(seq.ids, seq.soft.argmax(-1))
    assert torch.allclose(seq.soft.sum(-1), torch.ones((), dtype=torch.float64), atol=1e-12)
    assert seq.deepest_attn.shape == (3, 2, 4, 4)
    assert torch.allclose(seq.attn.sum(-1), torch.ones((), dtype=torch.float64), atol=1e-5)


def test_soft_refeed_matches_expected_embedding(model64):
    seq = generate(model64, GUMBEL, _patches(), 0.5, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(seq.emb, seq.soft @ model64.tokemb, atol=1e-12)


def test_hard_refeed_under_straight_through(model64):
    spec = DiscretizeSpec(kind="gumbel", st_hard=True)
    seq = generate(model64, spec, _patches(), 0.5, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(seq.emb, model64.tokemb[seq.ids], atol=1e-12)


def test_vq_generation(model64):
    seq = generate(model64, DiscretizeSpec(kind="vq"), _patches(), 1.0)
    assert torch.allclose(seq.emb, model64.tokemb[seq.ids], atol=1e-12)
    assert seq.vq_aux is not None and seq.vq_aux.item() >= 0


def test_gumbel_needs_randomness(model64):
    with pytest.raises(ValueError):
        generate(model64, GUMBEL, _patches(), 0.5)


def test_aggregated_is_sum_of_prefix_projections(model64):
    seq = generate(model64, GUMBEL, _patches(), 0.5, generator=torch.Generator().manual_seed(1))
    ge = embed_prefixes(model64, seq)
    assert sorted(ge.proj) == [1, 2, 4]
    ref = ge.proj[1] + ge.proj[2] + ge.proj[4]
    assert torch.allclose(ge.aggregated, ref, atol=1e-6)


def test_single_prefix_aggregated():
    m = tiny_model(0, seq_len=1)
    seq = generate(m, GUMBEL, _patches(), 0.5, generator=torch.Generator().manual_seed(1))
    ge = embed_prefixes(m, seq)
    assert torch.equal(ge.aggregated, ge.proj[1])


def test_prefix_locality(model64):
    seq = generate(model64, GUMBEL, _patches(), 0.5, generator=torch.Generator().manual_seed(1))
    before = embed_prefixes(model64, seq)
    seq.emb = seq.emb.clone()
    seq.emb[:, 2:] += torch.randn(3, 2, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    after = embed_prefixes(model64, seq)
    assert torch.equal(before.proj[1], after.proj[1])
    assert torch.equal(before.proj[2], after.proj[2])
    assert not torch.allclose(before.proj[4], after.proj[4])


def test_sequence_info_examples():
    rep = torch.zeros(8, 16, dtype=torch.float64)
    rep[:, 3] = 1
    assert sequence_info(rep).item() == 0.0
    distinct = torch.eye(8, dtype=torch.float64)
    assert sequence_info(distinct).item() == pytest.approx(math.log(8), abs=1e-15)


def test_sequence_entropy_examples():
    assert sequence_entropy(torch.eye(4, dtype=torch.float64)).item() == 0.0
    uni = torch.full((4, 16), 1 / 16, dtype=torch.float64)
    assert sequence_entropy(uni).item() == pytest.approx(math.log(16), abs=1e-14)


def test_entropy_terms_match_high_precision_oracle():
    g = torch.Generator().manual_seed(4)
    soft = torch.softmax(torch.randn(8, 12, generator=g, dtype=torch.float64), -1)
    rows = soft.tolist()
    ref_entropy = sum(_mp_entropy(r) for r in rows) / 8
    mean_row = [sum(r[a] for r in rows) / 8 for a in range(12)]
    assert abs(sequence_entropy(soft).item() - ref_entropy) < 1e-10
    assert abs(sequence_info(soft).item() - _mp_entropy(mean_row)) < 1e-10


def test_entropy_bounds():
    g = torch.Generator().manual_seed(5)
    for _ in range(20):
        soft = torch.softmax(3 * torch.randn(4, 6, generator=g, dtype=torch.float64), -1)
        assert 0 <= sequence_entropy(soft) <= math.log(6) + 1e-12
        assert 0 <= sequence_info(soft) <= math.log(6) + 1e-12
        # the tighter ln min(L, A) bound needs hard rows: the mean then has at most L atoms
        hard = torch.nn.functional.one_hot(soft.argmax(-1), 6).double()
        assert 0 <= sequence_info(hard) <= math.log(4) + 1e-12


def test_distinct_ratio():
    ids = torch.tensor([[1, 1, 1, 1], [0, 1, 2, 3]])
    assert distinct_ratio(ids).tolist() == [0.25, 1.0]


# the VQ path is straight-through, so its unrolled gradient is a surrogate rather than a derivative
@pytest.mark.parametrize("kind", ["softmax_temp", "gumbel"])
def test_unrolled_student_loss_gradient(kind):
    assert check_full_loss_grad(0, kind, "base") < GRAD_TOL
