import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cycledepth.metrics import REPORT_KEYS, compute_metrics


def loop_metrics(pred, gt, cap=80.0, lo=0.1):
    """Independent scalar reference."""
    n = 0
    s_abs = s_sq = s_se = s_log = 0.0
    a = [0, 0, 0]
    for p, g in zip(pred, gt):
        if not g > 0:
            continue
        p, g = min(max(float(p), lo), cap), min(max(float(g), lo), cap)
        n += 1
        s_abs += abs(p - g) / g
        s_sq += (p - g) ** 2 / g
        s_se += (p - g) ** 2
        s_log += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        for k in range(3):
            a[k] += r < 1.25 ** (k + 1)
    return {"abs_rel": s_abs / n, "sq_rel": s_sq / n, "rmse": math.sqrt(s_se / n),
            "rmse_log": math.sqrt(s_log / n), "a1": a[0] / n, "a2": a[1] / n, "a3": a[2] / n, "pixels": n}


def test_identity():
    d = np.linspace(1, 70, 50)
    r = compute_metrics(d, d)
    assert r.abs_rel == r.sq_rel == r.rmse == r.rmse_log == 0
    assert r.a1 == r.a2 == r.a3 == 1 and r.pixels == 50


def test_hand_case():
    r = compute_metrics([2.0], [1.0])
    assert r.abs_rel == 1 and r.sq_rel == 1 and r.rmse == 1
    assert abs(r.rmse_log - math.log(2)) < 1e-12
    assert r.a3 == 0


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred = rng.uniform(0.05, 100, 64)
        gt = rng.uniform(0.05, 100, 64)
        gt[rng.random(64) < 0.1] = 0
        got = compute_metrics(pred, gt).to_dict()
        ref = loop_metrics(pred, gt)
        for k, v in ref.items():
            assert abs(got[k] - v) <= 1e-12 * max(1, abs(v)), k


def test_report_keys():
    assert list(compute_metrics([1.0], [1.0]).to_dict()) == list(REPORT_KEYS)


def test_empty_valid_mask_rejected():
    with pytest.raises(ValueError):
        compute_metrics([1.0, 2.0], [0.0, -1.0])
    with pytest.raises(ValueError):
        compute_metrics([1.0], [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(0.5, 40)), arrays(np.float64, 16, elements=st.floats(0.5, 40)),
       st.floats(0.25, 2.0))
def test_scale_property(pred, gt, c):
    # c keeps every depth inside (min_depth, cap) so clipping never engages
    a = compute_metrics(pred, gt)
    b = compute_metrics(pred * c, gt * c)
    for k in ("abs_rel", "rmse_log"):
        assert getattr(b, k) == pytest.approx(getattr(a, k), rel=1e-9, abs=1e-12)
    for k in ("a1", "a2", "a3"):
        # thresholds are compared strictly, so allow a single boundary flip from rounding
        assert abs(getattr(b, k) - getattr(a, k)) <= 1 / 16
    assert b.rmse == pytest.approx(c * a.rmse, rel=1e-9, abs=1e-12)
    assert b.sq_rel == pytest.approx(c * a.sq_rel, rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(1, 70)), arrays(np.float64, 8, elements=st.floats(1, 70)),
       st.integers(0, 7), st.floats(0, 30))
def test_worsening_never_decreases_abs_rel(pred, gt, i, delta):
    base = compute_metrics(pred, gt).abs_rel
    worse = pred.copy()
    worse[i] += delta if pred[i] >= gt[i] else -min(delta, pred[i] - 0.1)
    assert compute_metrics(worse, gt).abs_rel >= base - 1e-15


def test_capping():
    gt = np.array([10.0, 20.0])
    a = compute_metrics(np.array([500.0, 20.0]), gt)
    b = compute_metrics(np.array([80.0, 20.0]), gt)
    assert a == b
    assert compute_metrics(np.array([90.0]), np.array([200.0])).abs_rel == 0


def test_accuracies_ordered():
    rng = np.random.default_rng(3)
    r = compute_metrics(rng.uniform(1, 80, 500), rng.uniform(1, 80, 500))
    assert r.a1 <= r.a2 <= r.a3
