"""Analytic loss examples, oracle comparisons and gradient checks.

``sfit selftest`` runs every check and prints one PASS/FAIL line each. The
same checks back the fast acceptance criteria in the test suite.
"""
from __future__ import annotations

import io
import math
import time
import traceback
from typing import Callable

import numpy as np
import torch

from . import losses as L
from . import oracles
from .errors import BadMagic, NonDistribution, TruncatedFile
from .models import build_classifier, build_generator, decode_checkpoint, encode_checkpoint

CHECKS: dict[str, list[tuple[str, Callable[[], None]]]] = {}


def check(group: str):
    def register(fn):
        CHECKS.setdefault(group, []).append((fn.__name__, fn))
        return fn
    return register


def _t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


def _close(got, want, tol=1e-6, what=""):
    got = float(got)
    assert abs(got - want) <= tol, f"{what}: got {got!r}, want {want!r} (tol {tol})"


def _maps(*rows):
    """A (D, 1, N) feature map from the rows of a reshaped D x N matrix."""
    return _t(rows).unsqueeze(1)


# ------------------------------------------------------------ analytic values

@check("analytic")
def kd_identical_binary():
    _close(L.kd_loss(_t([[0.5, 0.5]]), _t([[0.5, 0.5]])), 0.0, what="KL of equal rows")


@check("analytic")
def kd_onehot_vs_uniform():
    _close(L.kd_loss(_t([[1.0, 0.0]]), _t([[0.5, 0.5]])), math.log(2), what="KL([1,0] || [.5,.5])")


@check("analytic")
def kd_uniform4():
    u = _t([[0.25] * 4])
    _close(L.kd_loss(u, u), 0.0, what="KL of uniform rows")


@check("analytic")
def kd_rejects_non_distribution():
    try:
        L.kd_loss(_t([[0.7, 0.7]]), _t([[0.5, 0.5]]))
    except NonDistribution:
        return
    raise AssertionError("rows summing to 1.4 were accepted")


@check("analytic")
def gram_identity():
    g = L.gram(_maps([1, 0], [0, 1]))
    assert torch.equal(g, _t([[1, 0], [0, 1]])), g


@check("analytic")
def gram_hadamard():
    g = L.gram(_maps([1, 1], [1, -1]))
    assert torch.equal(g, _t([[2, 0], [0, 2]])), g


@check("analytic")
def normalize_rows_examples():
    assert torch.equal(L.normalize_rows(_t([[2, 0], [0, 0]])), _t([[1, 0], [0, 0]]))
    assert torch.equal(L.normalize_rows(_t([[2, 0], [0, 2]])), _t([[1, 0], [0, 1]]))


@check("analytic")
def rp_identical_maps():
    f = torch.randn(4, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    _close(L.rp_loss(f, f.clone()), 0.0, what="rp of identical maps")


@check("analytic")
def rp_normalized_grams_match():
    _close(L.rp_loss(_maps([1, 0], [0, 1]), _maps([1, 1], [1, -1])), 0.0, what="rp(I, Hadamard)")


@check("analytic")
def rp_rank_one_source():
    f_t, f_s = _maps([1, 0], [0, 1]), _maps([1, 1], [0, 0])
    want = oracles.rp(f_t.numpy(), f_s.numpy())
    _close(want, 0.5, what="oracle rp(I, [[1,1],[0,0]])")
    _close(L.rp_loss(f_t, f_s), want, what="rp(I, [[1,1],[0,0]])")


@check("analytic")
def style_identical_maps():
    f = _maps([1, 2], [3, 4])
    _close(L.style_loss(f, f.clone()), 0.0, what="style of identical maps")


@check("analytic")
def style_identity_vs_hadamard():
    _close(L.style_loss(_maps([1, 0], [0, 1]), _maps([1, 1], [1, -1])), 0.5, what="style(I, Hadamard)")


@check("analytic")
def mmd_oracle_examples():
    f = _maps([1, 0], [0, 1]).numpy()
    _close(L.mmd_poly2_oracle(f, f), 0.0, what="mmd of identical maps")
    _close(L.mmd_poly2_oracle(f, _maps([1, 1], [1, -1]).numpy()), 2.0, what="mmd(I, Hadamard)")


@check("analytic")
def id_and_content_examples():
    x = torch.rand(2, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    _close(L.id_loss(x, x), 0.0, what="id of identical images")
    _close(L.content_loss(x, x), 0.0, what="content of identical features")
    _close(L.id_loss(x + 0.1, x), 0.1, what="id with +0.1 offset")
    y = torch.rand(2, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    _close(L.id_loss(y, x), oracles.mean_abs(y, x), what="id vs oracle")


@check("analytic")
def diversity_examples():
    _close(L.diversity_loss(_t([[0.1] * 10])), -math.log(10), what="diversity of uniform mean")
    onehot = torch.zeros(3, 10, dtype=torch.float64)
    onehot[:, 4] = 1
    _close(L.diversity_loss(onehot), 0.0, what="diversity of one-hot mean")
    p = torch.softmax(torch.randn(8, 10, dtype=torch.float64, generator=torch.Generator().manual_seed(4)), 1)
    v = float(L.diversity_loss(p))
    assert -math.log(10) - 1e-12 <= v <= 0, v


@check("analytic")
def pseudo_label_examples():
    _close(L.pseudo_label_loss(_t([[0.3, 0.7]]), [0], [1]), 0.0, what="disagreeing branches")
    _close(L.pseudo_label_loss(_t([[0.0, 1.0]]), [1], [1]), 0.0, what="confident agreement")
    _close(L.pseudo_label_loss(_t([[0.5, 0.5]]), [0], [0]), math.log(2), what="agreement at 0.5")


@check("analytic")
def similarity_variant_examples():
    f = torch.randn(2, 4, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    _close(L.batch_similarity_loss(f, f.clone()), 0.0, what="batch variant identical")
    _close(L.pixel_similarity_loss(f, f.clone()), 0.0, what="pixel variant identical")
    _close(L.batch_similarity_loss(_t([[1.0, 2.0]]), _t([[-3.0, 0.5]])), 0.0, what="batch variant with B=1")
    g = f + 0.3 * torch.randn(2, 4, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(6))
    _close(L.batch_similarity_loss(f, g), oracles.batch_similarity(f.numpy(), g.numpy()), what="batch vs oracle")
    _close(L.pixel_similarity_loss(f, g), oracles.pixel_similarity(f.numpy(), g.numpy()), what="pixel vs oracle")


@check("analytic")
def bn_stats_examples():
    same = [(_t([0.5, 1.0]), _t([1.0, 2.0]))]
    _close(L.bn_stats_loss(same, same), 0.0, what="equal stats")
    _close(L.bn_stats_loss([(_t([1.0, 0.0]), _t([1.0, 1.0]))], [(_t([0.0, 0.0]), _t([1.0, 1.0]))]), 1.0,
           what="unit mean gap")
    rng = torch.Generator().manual_seed(7)
    a = [(torch.randn(3, dtype=torch.float64, generator=rng), torch.rand(3, dtype=torch.float64, generator=rng))
         for _ in range(2)]
    b = [(torch.randn(3, dtype=torch.float64, generator=rng), torch.rand(3, dtype=torch.float64, generator=rng))
         for _ in range(2)]
    _close(L.bn_stats_loss(a, b), oracles.bn_stats(a, b), what="bn stats vs oracle")


@check("analytic")
def total_loss_defaults():
    w = L.LossWeights()
    _close(L.total_sfit_loss(w, {"kd": _t(0.2), "rp": _t(0.3)}), 0.5, what="default weights")
    zero = L.LossWeights(0, 0, 0, 0, 0, 0)
    _close(L.total_sfit_loss(zero, {"kd": _t(0.2), "rp": _t(0.3)}), 0.0, what="all-zero weights")


# ------------------------------------------------------------ gradient checks

def _gradcheck(loss_of, x: np.ndarray, what: str):
    """Compare autograd against central differences (step 1e-3) in float64."""
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    loss_of(xt).backward()
    analytic = xt.grad.numpy()
    numeric = oracles.central_difference(lambda v: float(loss_of(torch.tensor(v))), x, 1e-3)
    tol = np.maximum(1e-4, 1e-3 * np.abs(numeric))
    err = np.abs(analytic - numeric)
    assert np.all(err <= tol), f"{what}: max gradient error {err.max():.3g} (analytic vs finite difference)"


def _rand(shape, seed, low=None):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) if low is None else rng.uniform(low, 1.0, shape)


def _grad_shapes():
    return [(4, 3, 3), (2, 4, 3, 3)]


@check("gradients")
def grad_kd():
    p_t = torch.softmax(torch.tensor(_rand((2, 5), 10)), 1)
    _gradcheck(lambda z: L.kd_loss(p_t, torch.softmax(z, 1)), _rand((2, 5), 11), "L_KD")


@check("gradients")
def grad_rp():
    for i, shape in enumerate(_grad_shapes()):
        f_t = torch.tensor(_rand(shape, 20 + i))
        _gradcheck(lambda f: L.rp_loss(f_t, f), _rand(shape, 30 + i), f"L_RP {shape}")


@check("gradients")
def grad_style():
    for i, shape in enumerate(_grad_shapes()):
        f_t = torch.tensor(_rand(shape, 40 + i))
        _gradcheck(lambda f: L.style_loss(f_t, f), _rand(shape, 50 + i), f"L_style {shape}")


@check("gradients")
def grad_content():
    for i, shape in enumerate(_grad_shapes()):
        f = torch.tensor(_rand(shape, 60 + i))
        _gradcheck(lambda g: L.content_loss(g, f), _rand(shape, 70 + i), f"L_content {shape}")


@check("gradients")
def grad_id():
    for i, shape in enumerate(_grad_shapes()):
        x = _rand(shape, 80 + i)
        # keep |x_gen - x| away from the kink at 0
        offset = np.where(_rand(shape, 90 + i) > 0, 0.5, -0.5) + 0.1 * _rand(shape, 95 + i)
        xt = torch.tensor(x)
        _gradcheck(lambda g: L.id_loss(g, xt), x + offset, f"L_ID {shape}")


@check("gradients")
def grad_diversity():
    _gradcheck(lambda z: L.diversity_loss(torch.softmax(z, 1)), _rand((4, 5), 100), "L_div")


@check("gradients")
def grad_pseudo():
    y_s, y_t = [0, 2, 1, 3], [0, 2, 4, 3]
    _gradcheck(lambda z: L.pseudo_label_loss(torch.softmax(z, 1), y_s, y_t), _rand((4, 5), 110), "L_pseudo")


@check("gradients")
def grad_batch_variant():
    q_t = torch.tensor(_rand((3, 4), 120))
    _gradcheck(lambda q: L.batch_similarity_loss(q_t, q), _rand((3, 4), 121), "L_batch pooled")
    f_t = torch.tensor(_rand((2, 4, 3, 3), 122))
    _gradcheck(lambda f: L.batch_similarity_loss(f_t, f), _rand((2, 4, 3, 3), 123), "L_batch maps")


@check("gradients")
def grad_pixel_variant():
    for i, shape in enumerate(_grad_shapes()):
        f_t = torch.tensor(_rand(shape, 130 + i))
        _gradcheck(lambda f: L.pixel_similarity_loss(f_t, f), _rand(shape, 140 + i), f"L_pixel {shape}")


@check("gradients")
def grad_bn_stats():
    running = [(torch.tensor(_rand(4, 150)), torch.tensor(_rand(4, 151, low=0.5)))]

    def loss_of(x):
        stats = [(x.mean(dim=(0, 2, 3)), x.var(dim=(0, 2, 3), unbiased=False))]
        return L.bn_stats_loss(stats, running)

    _gradcheck(loss_of, _rand((2, 4, 3, 3), 152), "bn_stats")


# ------------------------------------------------------------ Gram properties

def _random_maps(n, shape=(4, 3, 3), seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(*shape, generator=gen, dtype=dtype) for _ in range(n)]


@check("gram")
def gram_symmetric_f32():
    for f in _random_maps(20, (8, 5, 5), seed=200):
        g = L.gram(f)
        asym = float((g - g.T).abs().max())
        assert asym <= 1e-6, f"asymmetry {asym}"


@check("gram")
def gram_psd():
    for f in _random_maps(20, (8, 2, 2), seed=201):
        eig = np.linalg.eigvalsh(L.gram(f).double().numpy())
        assert eig.min() >= -1e-5, f"min eigenvalue {eig.min()}"


@check("gram")
def gram_unit_rows():
    for f in _random_maps(20, (8, 5, 5), seed=202):
        norms = torch.linalg.vector_norm(L.normalize_rows(L.gram(f)), dim=1)
        dev = float((norms - 1).abs().max())
        assert dev <= 1e-5, f"row norm deviation {dev}"


@check("gram")
def rp_scale_invariant_style_not():
    for f_t, f_s in zip(_random_maps(10, seed=203), _random_maps(10, seed=204)):
        rp1, rp2 = float(L.rp_loss(f_t, f_s)), float(L.rp_loss(f_t, 2 * f_s))
        assert abs(rp1 - rp2) <= 1e-5, f"rp changed under scaling: {rp1} vs {rp2}"
        st1, st2 = float(L.style_loss(f_t, f_s)), float(L.style_loss(f_t, 2 * f_s))
        assert st1 != st2, "style loss unchanged under scaling"


@check("gram")
def rp_symmetric_and_zero_safe():
    a, b = _random_maps(2, seed=205)
    assert abs(float(L.rp_loss(a, b)) - float(L.rp_loss(b, a))) <= 1e-6
    b = b.clone()
    b[1] = 0
    v = L.rp_loss(a, b)
    assert torch.isfinite(v), v


# ------------------------------------------------------------ style == MMD

@check("mmd")
def style_equals_mmd():
    pairs = zip(_random_maps(50, seed=300, dtype=torch.float64), _random_maps(50, seed=301, dtype=torch.float64))
    for f_a, f_b in pairs:
        d = f_a.shape[0]
        style = d * d * float(L.style_loss(f_a, f_b))
        mmd = L.mmd_poly2_oracle(f_a.numpy(), f_b.numpy())
        rel = abs(style - mmd) / max(abs(mmd), 1e-30)
        assert rel < 1e-6, f"D^2 style {style} vs mmd {mmd} (rel {rel:.3g})"


# ------------------------------------------------------------ checkpoints

@check("checkpoint")
def checkpoint_round_trip():
    for model in (build_classifier(seed=3), build_generator(seed=3)):
        raw = encode_checkpoint(model)
        state = decode_checkpoint(raw)
        assert encode_checkpoint(state) == raw, "save -> load -> save changed bytes"
        for name, tensor in model.state_dict().items():
            if name in state:
                assert torch.equal(state[name], tensor), name


@check("checkpoint")
def checkpoint_rejects_corruption():
    raw = encode_checkpoint(build_classifier(seed=3))
    for bad, err in ((b"NOTACKPT" + raw[8:], BadMagic), (raw[: len(raw) // 2], TruncatedFile)):
        try:
            decode_checkpoint(bad)
        except err:
            continue
        raise AssertionError(f"corrupted checkpoint not rejected with {err.__name__}")


def run(groups=None, out=None) -> int:
    """Run the selected check groups; returns the number of failures."""
    import sys

    out = out or sys.stdout
    failures = 0
    for group, checks in CHECKS.items():
        if groups and group not in groups:
            continue
        start = time.perf_counter()
        for name, fn in checks:
            try:
                fn()
            except Exception as exc:  # noqa: BLE001 - report and continue
                failures += 1
                detail = str(exc) or traceback.format_exception_only(type(exc), exc)[-1].strip()
                print(f"FAIL {group}/{name}: {detail}", file=out)
            else:
                print(f"PASS {group}/{name}", file=out)
        print(f"---- {group}: {time.perf_counter() - start:.2f}s", file=out)
    return failures


def run_to_string(groups=None) -> tuple[int, str]:
    buf = io.StringIO()
    return run(groups, buf), buf.getvalue()
