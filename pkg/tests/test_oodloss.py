"""Outlier losses: closed-form values, analytic gradients, invariances."""

import numpy as np
import pytest

from oodseg.errors import ArgumentError
from oodseg.imagery import IGNORE_ID, OOD_ID, LabelMap, LogitMap
from oodseg.oodloss import (
    VARIANTS,
    LossConfig,
    combined_loss,
    id_cross_entropy,
    ood_energy_max,
    ood_full_ovr,
    ood_topk_ovr,
    ood_uniform_ce,
)

# Closed forms, computed independently before the tests were frozen.
TOPK_1_0_M1 = 1.410037595801459  # (softplus(2) + softplus(0)) / 2
UCE_1_0 = 0.8132616875182228  # ln(1 + e) - 1/2

_LOSSES = {
    "topk_ovr": ood_topk_ovr,
    "full_ovr": ood_full_ovr,
    "uniform_ce": ood_uniform_ce,
    "energy_max": ood_energy_max,
}


def _one_pixel(lam):
    logits = np.asarray(lam, dtype=np.float64).reshape(1, 1, -1)
    labels = np.full((1, 1), OOD_ID, dtype=np.uint8)
    return LogitMap(logits), LabelMap(labels)


def _random_instance(rng, n_classes=6, h=4, w=6, ood_frac=0.5):
    lam = rng.normal(0.0, 2.0, (h, w, n_classes))
    lab = np.where(rng.random((h, w)) < ood_frac, OOD_ID, rng.integers(0, n_classes, (h, w)))
    return lam, lab.astype(np.uint8)


# ---------------------------------------------------------------------------
# Config validation

def test_loss_config_validation():
    assert LossConfig().top_k == 5 and LossConfig().slope == 2.0
    assert LossConfig().ood_weight == 0.01
    with pytest.raises(ArgumentError):
        LossConfig(variant="nope")
    with pytest.raises(ArgumentError):
        LossConfig(top_k=0)
    with pytest.raises(ArgumentError):
        LossConfig(slope=0.0)
    with pytest.raises(ArgumentError):
        LossConfig(ood_weight=-1e-9)
    assert set(VARIANTS) == set(_LOSSES)


def test_shape_mismatch_rejected():
    cfg = LossConfig()
    lam = np.zeros((2, 2, 3))
    with pytest.raises(ArgumentError):
        ood_topk_ovr(lam, np.zeros((2, 3), dtype=np.uint8), cfg)
    with pytest.raises(ArgumentError):
        ood_topk_ovr(np.zeros((2, 2, 1)), np.zeros((2, 2), dtype=np.uint8), cfg)


# ---------------------------------------------------------------------------
# Closed-form values

def test_topk_closed_form():
    logits, labels = _one_pixel([1.0, 0.0, -1.0])
    res = ood_topk_ovr(logits, labels, LossConfig(top_k=2, slope=2.0))
    assert abs(res.value - TOPK_1_0_M1) < 1e-12
    assert res.n_pixels == 1


def test_topk_gradient_at_zero():
    logits, labels = _one_pixel([0.0, 0.0, 0.0])
    res = ood_topk_ovr(logits, labels, LossConfig(top_k=1, slope=2.0))
    # ties resolve to the lowest class index; 2 * sigmoid(0) = 1
    np.testing.assert_array_equal(res.grad[0, 0], [1.0, 0.0, 0.0])


def test_topk_empty_ood_set():
    lam = np.zeros((2, 2, 4))
    lab = np.zeros((2, 2), dtype=np.uint8)
    for fn in _LOSSES.values():
        res = fn(lam, lab, LossConfig())
        assert res.value == 0.0 and res.n_pixels == 0
        np.testing.assert_array_equal(res.grad, 0.0)


def test_full_ovr_closed_form():
    logits, labels = _one_pixel([0.0, 0.0])
    res = ood_full_ovr(logits, labels, LossConfig(slope=2.0))
    assert abs(res.value - np.log(2.0)) < 1e-12


def test_full_ovr_equals_topk_when_k_covers_classes():
    rng = np.random.default_rng(1)
    for _ in range(10):
        lam, lab = _random_instance(rng)
        full = ood_full_ovr(lam, lab, LossConfig(top_k=2))
        topk = ood_topk_ovr(lam, lab, LossConfig(top_k=17))
        assert full.value == topk.value
        np.testing.assert_array_equal(full.grad, topk.grad)


def test_full_ovr_symmetric_gradient_on_equal_logits():
    logits, labels = _one_pixel([0.3, 0.3, 0.3, 0.3])
    res = ood_full_ovr(logits, labels, LossConfig())
    g = res.grad[0, 0]
    assert np.ptp(g) == 0.0 and g[0] > 0


def test_uniform_ce_closed_forms():
    logits, labels = _one_pixel(np.zeros(19))
    res = ood_uniform_ce(logits, labels, LossConfig())
    assert abs(res.value - np.log(19.0)) < 1e-12
    np.testing.assert_allclose(res.grad, 0.0, atol=1e-15)

    logits, labels = _one_pixel([1.0, 0.0])
    res = ood_uniform_ce(logits, labels, LossConfig())
    assert abs(res.value - UCE_1_0) < 1e-12
    assert abs(res.value - (np.log1p(np.e) - 0.5)) < 1e-12


def test_energy_max_closed_forms():
    logits, labels = _one_pixel([0.0, 0.0])
    assert abs(ood_energy_max(logits, labels, LossConfig()).value - np.log(2.0)) < 1e-12

    logits, labels = _one_pixel([1000.0, 1000.0])
    res = ood_energy_max(logits, labels, LossConfig())
    assert abs(res.value - (1000.0 + np.log(2.0))) < 1e-9  # no overflow


def test_energy_max_grad_rows_sum_to_inverse_count():
    rng = np.random.default_rng(2)
    lam, lab = _random_instance(rng)
    res = ood_energy_max(lam, lab, LossConfig())
    rows = res.grad[lab == OOD_ID]
    np.testing.assert_allclose(rows.sum(axis=1), 1.0 / res.n_pixels, rtol=1e-12)


def test_id_cross_entropy_values():
    lam = np.zeros((1, 1, 6))
    lab = np.zeros((1, 1), dtype=np.uint8)
    assert abs(id_cross_entropy(lam, lab).value - np.log(6.0)) < 1e-12

    lam = np.zeros((1, 2, 3))
    lam[0, 0, 1] = 100.0
    lam[0, 1, 2] = 100.0
    lab = np.array([[1, 2]], dtype=np.uint8)
    assert id_cross_entropy(lam, lab).value < 1e-6

    lab = np.full((1, 2), IGNORE_ID, dtype=np.uint8)
    res = id_cross_entropy(lam, lab)
    assert res.value == 0.0 and res.n_pixels == 0
    np.testing.assert_array_equal(res.grad, 0.0)


def test_id_cross_entropy_excludes_sentinels():
    rng = np.random.default_rng(3)
    lam = rng.normal(size=(3, 4, 6))
    lab = rng.integers(0, 6, (3, 4)).astype(np.uint8)
    lab[0, 0] = OOD_ID
    lab[1, 1] = IGNORE_ID
    res = id_cross_entropy(lam, lab)
    assert res.n_pixels == 10
    np.testing.assert_array_equal(res.grad[0, 0], 0.0)
    np.testing.assert_array_equal(res.grad[1, 1], 0.0)


# ---------------------------------------------------------------------------
# Top-k selection mechanics

def test_tie_break_prefers_lower_class_index():
    logits, labels = _one_pixel([5.0, 5.0, 0.0, 5.0])
    res = ood_topk_ovr(logits, labels, LossConfig(top_k=2))
    g = res.grad[0, 0]
    assert g[0] > 0 and g[1] > 0 and g[2] == 0 and g[3] == 0


def test_selection_is_exactly_k_largest():
    rng = np.random.default_rng(4)
    for _ in range(20):
        lam = rng.normal(size=(1, 1, 8))
        labels = np.full((1, 1), OOD_ID, dtype=np.uint8)
        res = ood_topk_ovr(lam, labels, LossConfig(top_k=3))
        support = np.flatnonzero(res.grad[0, 0])
        expect = np.sort(np.argsort(-lam[0, 0], kind="stable")[:3])
        np.testing.assert_array_equal(support, expect)


def test_monotonicity_probes():
    rng = np.random.default_rng(5)
    cfg = LossConfig(top_k=2)
    for _ in range(10):
        lam, lab = _random_instance(rng, n_classes=5)
        base = ood_topk_ovr(lam, lab, cfg)
        sel = np.argwhere(base.grad != 0)
        i, j, c = sel[rng.integers(len(sel))]
        bumped = lam.copy()
        bumped[i, j, c] -= 0.5
        assert ood_topk_ovr(bumped, lab, cfg).value < base.value
        # a non-selected logit pushed further down never changes the loss
        ood_rows = np.argwhere(lab == OOD_ID)
        for i, j in ood_rows:
            cold = np.flatnonzero(base.grad[i, j] == 0)
            if len(cold):
                low = lam.copy()
                low[i, j, cold[0]] -= 10.0
                assert ood_topk_ovr(low, lab, cfg).value == base.value
                break


def test_slope_scale_identity():
    rng = np.random.default_rng(6)
    for _ in range(10):
        lam, lab = _random_instance(rng)
        a = ood_topk_ovr(lam, lab, LossConfig(top_k=3, slope=2.0))
        b = ood_topk_ovr(2.0 * lam, lab, LossConfig(top_k=3, slope=1.0))
        assert a.value == b.value
        np.testing.assert_allclose(a.grad, 2.0 * b.grad, rtol=1e-15)


def test_pixel_permutation_invariance():
    rng = np.random.default_rng(7)
    lam, lab = _random_instance(rng, h=1, w=24)
    perm = rng.permutation(24)
    for name, fn in _LOSSES.items():
        cfg = LossConfig(variant=name)
        a = fn(lam, lab, cfg)
        b = fn(lam[:, perm], lab[:, perm], cfg)
        assert abs(a.value - b.value) <= 1e-12 * max(1.0, abs(a.value))
        np.testing.assert_allclose(b.grad, a.grad[:, perm], rtol=1e-12)
    a = id_cross_entropy(lam, lab)
    b = id_cross_entropy(lam[:, perm], lab[:, perm])
    assert abs(a.value - b.value) <= 1e-12 * max(1.0, abs(a.value))


# ---------------------------------------------------------------------------
# Finite-difference gradient checks
#
# Error is measured in the gradient's max norm: ||g_analytic - g_fd||_inf
# divided by max(||g_fd||_inf, 1e-12).

def _fd_grad(fn, lam, lab, h=1e-6):
    grad = np.zeros_like(lam)
    it = np.nditer(lam, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        up = lam.copy()
        up[idx] += h
        dn = lam.copy()
        dn[idx] -= h
        grad[idx] = (fn(up, lab).value - fn(dn, lab).value) / (2 * h)
    return grad


def _max_rel_err(analytic, fd):
    return np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    checked = 0
    cases = []
    for name in VARIANTS:
        cases += [(name, LossConfig(variant=name, top_k=k)) for k in (1, 3, 17)]
    for name, cfg in cases:
        fn = _LOSSES[name]
        for _ in range(9):
            lam, lab = _random_instance(rng, n_classes=5, h=2, w=3)
            res = fn(lam, lab, cfg)
            fd = _fd_grad(lambda a, b: fn(a, b, cfg), lam, lab)
            assert _max_rel_err(res.grad, fd) < 1e-5, (name, cfg.top_k)
            checked += 1
    for _ in range(12):
        lam, lab = _random_instance(rng, n_classes=5, h=2, w=3)
        res = id_cross_entropy(lam, lab)
        fd = _fd_grad(lambda a, b: id_cross_entropy(a, b), lam, lab)
        assert _max_rel_err(res.grad, fd) < 1e-5
        checked += 1
    assert checked >= 100


# ---------------------------------------------------------------------------
# Combined loss

def test_combined_loss_arithmetic():
    rng = np.random.default_rng(9)
    pre, pre_lab = _random_instance(rng, h=2, w=3)
    post, post_lab = _random_instance(rng, h=8, w=12)
    cfg = LossConfig(ood_weight=0.01)
    out = combined_loss(pre, post, post_lab, pre_lab, cfg)
    assert abs(out.value - (out.id_term.value + 0.01 * out.ood_term.value)) < 1e-12
    assert out.id_term.value == id_cross_entropy(post, post_lab).value
    assert out.ood_term.value == ood_topk_ovr(pre, pre_lab, cfg).value


def test_combined_loss_gamma_zero():
    rng = np.random.default_rng(10)
    pre, pre_lab = _random_instance(rng, h=2, w=3)
    post, post_lab = _random_instance(rng, h=8, w=12)
    out = combined_loss(pre, post, post_lab, pre_lab, LossConfig(ood_weight=0.0))
    assert out.value == out.id_term.value


def test_combined_loss_without_ood_pixels():
    rng = np.random.default_rng(11)
    pre = rng.normal(size=(2, 3, 6))
    pre_lab = np.zeros((2, 3), dtype=np.uint8)
    post, post_lab = _random_instance(rng, h=8, w=12, ood_frac=0.0)
    for variant in VARIANTS:
        out = combined_loss(pre, post, post_lab, pre_lab, LossConfig(variant=variant))
        assert out.value == out.id_term.value
        assert out.ood_term.value == 0.0
