import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfit import losses as L
from sfit import oracles
from sfit.errors import EmptyBatch, IndexOutOfRange, LayerCountMismatch, NonDistribution, ShapeMismatch


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def fmap(*rows):
    return t(rows).unsqueeze(1)


finite = st.floats(-3, 3, allow_nan=False, width=64)
maps = arrays(np.float64, (3, 2, 3), elements=finite)
batched_maps = arrays(np.float64, (2, 3, 2, 2), elements=finite)


def prob_rows(draw_logits):
    return torch.softmax(t(draw_logits), 1)


logit_rows = arrays(np.float64, (4, 5), elements=st.floats(-5, 5, width=64))


# -------------------------------------------------------------- KD

@pytest.mark.parametrize(
    "p_t, p_s, want",
    [
        ([[0.5, 0.5]], [[0.5, 0.5]], 0.0),
        ([[1.0, 0.0]], [[0.5, 0.5]], math.log(2)),
        ([[0.25] * 4], [[0.25] * 4], 0.0),
    ],
)
def test_kd_examples(p_t, p_s, want):
    assert float(L.kd_loss(t(p_t), t(p_s))) == pytest.approx(want, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(a=logit_rows, b=logit_rows)
def test_kd_matches_oracle_and_nonnegative(a, b):
    p_t, p_s = prob_rows(a), prob_rows(b)
    v = float(L.kd_loss(p_t, p_s))
    assert v >= -1e-12
    assert v == pytest.approx(oracles.kl(p_t.numpy(), p_s.numpy()), abs=1e-9)


def test_kd_gradient_only_through_source():
    p_t = torch.softmax(torch.randn(3, 4, requires_grad=True), 1)
    z = torch.randn(3, 4, requires_grad=True)
    L.kd_loss(p_t, torch.softmax(z, 1)).backward()
    assert z.grad is not None and z.grad.abs().sum() > 0


def test_kd_errors():
    with pytest.raises(ShapeMismatch):
        L.kd_loss(t([[0.5, 0.5]]), t([[1.0, 0.0, 0.0]]))
    with pytest.raises(NonDistribution):
        L.kd_loss(t([[0.5, 0.6]]), t([[0.5, 0.5]]))


# -------------------------------------------------------------- Gram / RP / style

def test_gram_examples():
    assert torch.equal(L.gram(fmap([1, 0], [0, 1])), t([[1, 0], [0, 1]]))
    assert torch.equal(L.gram(fmap([1, 1], [1, -1])), t([[2, 0], [0, 2]]))


def test_reshape_is_row_major():
    f = torch.arange(12.0).reshape(2, 2, 3)
    assert L.reshape_features(f)[1].tolist() == [6, 7, 8, 9, 10, 11]


def test_normalize_rows_examples():
    assert L.normalize_rows(t([[2, 0], [0, 0]])).tolist() == [[1, 0], [0, 0]]
    assert L.normalize_rows(t([[2, 0], [0, 2]])).tolist() == [[1, 0], [0, 1]]


@settings(max_examples=30, deadline=None)
@given(f=maps)
def test_gram_matches_oracle(f):
    np.testing.assert_allclose(L.gram(t(f)).numpy(), oracles.gram(f.reshape(3, -1)), atol=1e-9)


def test_rp_examples():
    assert float(L.rp_loss(fmap([1, 0], [0, 1]), fmap([1, 1], [1, -1]))) == pytest.approx(0, abs=1e-6)
    assert float(L.rp_loss(fmap([1, 0], [0, 1]), fmap([1, 1], [0, 0]))) == pytest.approx(0.5, abs=1e-6)


def test_style_example():
    assert float(L.style_loss(fmap([1, 0], [0, 1]), fmap([1, 1], [1, -1]))) == pytest.approx(0.5, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(a=batched_maps, b=batched_maps)
def test_rp_style_match_oracles(a, b):
    assert float(L.rp_loss(t(a), t(b))) == pytest.approx(oracles.rp(a, b), abs=1e-9)
    assert float(L.style_loss(t(a), t(b))) == pytest.approx(oracles.style(a, b), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(a=maps, b=maps)
def test_rp_nonnegative_and_symmetric(a, b):
    ab, ba = float(L.rp_loss(t(a), t(b))), float(L.rp_loss(t(b), t(a)))
    assert ab >= 0 and ab == pytest.approx(ba, abs=1e-9)
    assert float(L.style_loss(t(a), t(b))) >= 0


@settings(max_examples=50, deadline=None)
@given(a=maps, b=maps, alpha=st.floats(0.01, 100))
def test_rp_scale_invariance(a, b, alpha):
    # rows below the epsilon guard are not rescaled, so keep maps non-degenerate
    for f in (a, b):
        assume(np.linalg.norm(oracles.gram(f.reshape(3, -1)), axis=1).min() * min(alpha, 1) ** 2 > 1e-6)
    assert float(L.rp_loss(t(a), alpha * t(b))) == pytest.approx(float(L.rp_loss(t(a), t(b))), abs=1e-9)


def test_style_not_scale_invariant():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.randn(4, 3, 3, generator=gen), torch.randn(4, 3, 3, generator=gen)
    assert float(L.style_loss(a, b)) != float(L.style_loss(a, 2 * b))


def test_rp_zero_channel_is_finite_with_finite_gradient():
    a = torch.randn(4, 3, 3)
    b = torch.randn(4, 3, 3)
    b[2] = 0
    b.requires_grad_(True)
    v = L.rp_loss(a, b)
    v.backward()
    assert torch.isfinite(v) and torch.isfinite(b.grad).all()


def test_rp_gradient_only_through_source():
    a = torch.randn(4, 3, 3, requires_grad=True)
    b = torch.randn(4, 3, 3, requires_grad=True)
    L.rp_loss(a, b).backward()
    assert a.grad is None and b.grad is not None


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        L.rp_loss(torch.zeros(4, 3, 3), torch.zeros(4, 3, 2))
    with pytest.raises(ShapeMismatch):
        L.style_loss(torch.zeros(4, 3, 3), torch.zeros(3, 3, 3))


# -------------------------------------------------------------- MMD

def test_mmd_oracle_examples():
    a = fmap([1, 0], [0, 1]).numpy()
    assert L.mmd_poly2_oracle(a, a) == 0
    assert L.mmd_poly2_oracle(a, fmap([1, 1], [1, -1]).numpy()) == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(a=maps, b=maps)
def test_style_is_scaled_mmd(a, b):
    d = a.shape[0]
    mmd = L.mmd_poly2_oracle(a, b)
    assert d * d * float(L.style_loss(t(a), t(b))) == pytest.approx(mmd, rel=1e-6, abs=1e-9)


def test_mmd_poly2_batch_estimator():
    a = torch.randn(5, 3, dtype=torch.float64)
    assert float(L.mmd_poly2(a, a.clone())) == pytest.approx(0, abs=1e-12)
    # a per-position MMD over one map equals the batch estimator scaled by n^2
    f_a, f_b = torch.randn(3, 2, 2, dtype=torch.float64), torch.randn(3, 2, 2, dtype=torch.float64)
    u, v = f_a.reshape(3, -1).T, f_b.reshape(3, -1).T
    assert 16 * float(L.mmd_poly2(u, v)) == pytest.approx(L.mmd_poly2_oracle(f_a.numpy(), f_b.numpy()))


# -------------------------------------------------------------- ID / content

def test_id_content_examples():
    x = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    assert float(L.id_loss(x, x)) == 0 and float(L.content_loss(x, x)) == 0
    assert float(L.id_loss(x + 0.1, x)) == pytest.approx(0.1, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(a=batched_maps, b=batched_maps)
def test_id_content_match_oracles(a, b):
    assert float(L.id_loss(t(a), t(b))) == pytest.approx(oracles.mean_abs(a, b), abs=1e-6)
    assert float(L.content_loss(t(a), t(b))) == pytest.approx(oracles.mean_sq(a, b), abs=1e-9)


# -------------------------------------------------------------- diversity / pseudo

def test_diversity_examples():
    assert float(L.diversity_loss(t([[0.1] * 10]))) == pytest.approx(-2.302585, abs=1e-6)
    one_hot = t([[0, 1, 0], [0, 1, 0]])
    assert float(L.diversity_loss(one_hot)) == 0


@settings(max_examples=50, deadline=None)
@given(z=logit_rows)
def test_diversity_bounds(z):
    p = prob_rows(z)
    v = float(L.diversity_loss(p))
    assert -math.log(5) - 1e-9 <= v <= 1e-12
    assert v == pytest.approx(oracles.neg_entropy_of_mean(p.numpy()), abs=1e-9)


def test_diversity_empty():
    with pytest.raises(EmptyBatch):
        L.diversity_loss(torch.zeros(0, 3))


def test_pseudo_label_examples():
    assert float(L.pseudo_label_loss(t([[0.2, 0.8]]), [0], [1])) == 0
    assert float(L.pseudo_label_loss(t([[0.0, 1.0]]), [1], [1])) == 0
    assert float(L.pseudo_label_loss(t([[0.5, 0.5]]), [1], [1])) == pytest.approx(math.log(2), abs=1e-6)


def test_pseudo_label_mean_over_agreeing():
    p = t([[0.5, 0.5], [0.25, 0.75], [0.9, 0.1]])
    got = float(L.pseudo_label_loss(p, [0, 1, 1], [0, 1, 0]))
    assert got == pytest.approx((math.log(2) - math.log(0.75)) / 2)
    assert got == pytest.approx(oracles.pseudo_label(p.numpy(), [0, 1, 1], [0, 1, 0]))


def test_pseudo_label_none_agree_keeps_graph():
    z = torch.randn(2, 3, requires_grad=True)
    v = L.pseudo_label_loss(torch.softmax(z, 1), [0, 1], [1, 2])
    v.backward()
    assert float(v.detach()) == 0 and torch.equal(z.grad, torch.zeros(2, 3))


def test_pseudo_label_index_range():
    with pytest.raises(IndexOutOfRange):
        L.pseudo_label_loss(t([[0.5, 0.5]]), [2], [2])


# -------------------------------------------------------------- variants

def test_batch_variant_single_sample_is_zero():
    assert float(L.batch_similarity_loss(t([[1.0, 2.0]]), t([[5.0, -1.0]]))) == 0


@settings(max_examples=20, deadline=None)
@given(a=batched_maps, b=batched_maps)
def test_variants_match_oracles(a, b):
    assert float(L.batch_similarity_loss(t(a), t(b))) == pytest.approx(oracles.batch_similarity(a, b), abs=1e-9)
    assert float(L.pixel_similarity_loss(t(a), t(b))) == pytest.approx(oracles.pixel_similarity(a, b), abs=1e-9)


def test_bn_stats_examples():
    s = [(t([0.0, 1.0]), t([1.0, 1.0]))]
    assert float(L.bn_stats_loss(s, s)) == 0
    assert float(L.bn_stats_loss([(t([1.0, 1.0]), t([1.0, 1.0]))], s)) == 1
    with pytest.raises(LayerCountMismatch):
        L.bn_stats_loss(s, s + s)


def test_bn_recorder_collects_every_layer():
    from sfit.models import build_classifier

    model = build_classifier().eval()
    rec = L.BNStatsRecorder(model)
    with rec:
        model(torch.randn(4, 1, 28, 28))
    assert len(rec.batch_stats) == len(rec.running_stats) == 2
    assert rec.batch_stats[1][0].shape == (50,)
    model(torch.randn(4, 1, 28, 28))
    assert len(rec.batch_stats) == 2  # hooks removed on exit


# -------------------------------------------------------------- total

def test_total_defaults_and_ablations():
    terms = {"kd": t(0.2), "rp": t(0.3), "style": t(5.0)}
    assert float(L.total_sfit_loss(L.LossWeights(), terms)) == 0.5
    assert float(L.total_sfit_loss(L.LossWeights(w_rp=0), terms)) == pytest.approx(0.2)
    assert float(L.total_sfit_loss(L.LossWeights(w_rp=0, w_style=1), terms)) == pytest.approx(5.2)
    assert float(L.total_sfit_loss(L.LossWeights(0, 0), terms)) == 0


def test_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        L.LossWeights(w_kd=-1)
