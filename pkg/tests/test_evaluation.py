import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odebayes.errors import LabelMismatch
from odebayes.evaluation import (
    LogLikMatrix,
    gpd_fit_pwm,
    gpd_fit_zs,
    loo_compare,
    loo_report,
    lpd,
    lpd_pointwise,
    posterior_predictive,
    predictive_bands,
    psis_loo,
    psis_smooth,
)
from odebayes.model import simulate_data
from odebayes.models import TOY_TRUTH, make_model


def normal_fixture(seed=0, n=20, s=2000):
    """Conjugate normal-mean posterior draws and their pointwise log-likelihood."""
    rng = np.random.default_rng(seed)
    y = rng.normal(1.0, 1.0, n)
    mu = rng.normal(y.mean(), 1.0 / math.sqrt(n), s)
    ll = -0.5 * math.log(2 * math.pi) - 0.5 * (y[None, :] - mu[:, None]) ** 2
    return y, ll


def test_lpd_examples():
    assert lpd(np.log([[0.2], [0.4]])) == pytest.approx(math.log(0.3), abs=1e-12)
    row = np.array([[-1.0, -2.0, -0.5]])
    assert lpd(row) == pytest.approx(-3.5)
    assert lpd(np.repeat(row, 7, axis=0)) == pytest.approx(-3.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 3), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_lpd_shift_stability(ll, c):
    assert lpd(ll + c) - ll.shape[1] * c == pytest.approx(lpd(ll), abs=1e-10 * max(1.0, abs(c)) * 10)


def test_lpd_extreme_values_are_finite():
    assert math.isfinite(lpd(np.array([[-1e4], [-1e4 - 1.0]])))


def test_psis_constant_loglik():
    ll = np.full((400, 2), -1.7)
    res = psis_loo(ll)
    np.testing.assert_allclose(res.pointwise, -1.7, atol=1e-12)
    assert np.all(np.isnan(res.pareto_k))
    assert res.n_undefined == 2 and res.n_high == 0


def test_psis_close_to_exact_loo_normal():
    y, ll = normal_fixture()
    res = psis_loo(ll)
    n = y.size
    # exact LOO predictive for known-variance normal mean with flat prior
    exact = 0.0
    for i in range(n):
        rest = np.delete(y, i)
        var = 1.0 + 1.0 / (n - 1)
        exact += -0.5 * math.log(2 * math.pi * var) - 0.5 * (y[i] - rest.mean()) ** 2 / var
    assert abs(res.elpd_loo - exact) < 0.1
    assert np.all(res.pareto_k < 0.7)


def test_pointwise_sum_and_bound():
    for seed in range(3):
        _, ll = normal_fixture(seed)
        res = psis_loo(ll)
        assert np.sum(res.pointwise) == pytest.approx(res.elpd_loo, abs=1e-10)
        assert np.all(res.pointwise <= lpd_pointwise(ll) + 1e-12)


def test_heavy_tail_flagged():
    rng = np.random.default_rng(3)
    # posterior much narrower than the leave-one-out posterior for one point
    mu = rng.normal(0.0, 0.05, 4000)
    ll = -0.5 * ((8.0 - mu[:, None]) / 0.05) ** 2
    res = psis_loo(ll)
    assert res.pareto_k[0] > 0.7 and res.n_high == 1


def test_small_sample_warning():
    _, ll = normal_fixture(s=50)
    assert any("unreliable" in w for w in psis_loo(ll).warnings)


def test_psis_weights_are_normalised_and_truncated():
    rng = np.random.default_rng(1)
    lr = rng.standard_t(3, 1000)
    lw, k = psis_smooth(lr)
    assert np.exp(lw).sum() == pytest.approx(1.0)
    assert lw.max() <= (lr - lr.max() - np.log(np.exp(lr - lr.max()).sum())).max() + 1e-12


@pytest.mark.parametrize("fit", [gpd_fit_zs, gpd_fit_pwm])
def test_gpd_fits_recover_exponential(fit):
    x = np.sort(np.random.default_rng(2).exponential(2.0, 5000))
    k, sigma = fit(x)
    assert abs(k) < 0.1
    assert sigma == pytest.approx(2.0, rel=0.1)


def test_pwm_option_runs():
    _, ll = normal_fixture()
    a, b = psis_loo(ll), psis_loo(ll, fit="pwm")
    assert a.elpd_loo == pytest.approx(b.elpd_loo, abs=0.05)


def test_compare_self_and_antisymmetry():
    _, ll = normal_fixture()
    a = psis_loo(ll)
    assert loo_compare(a, a) == (0.0, 0.0, False)
    _, ll2 = normal_fixture(seed=5)
    b = psis_loo(ll2)
    d1, s1, _ = loo_compare(a, b)
    d2, s2, _ = loo_compare(b, a)
    assert d1 == -d2 and s1 == s2


def test_compare_one_hot_shift():
    _, ll = normal_fixture()
    a = psis_loo(ll)
    b = psis_loo(ll)
    b.pointwise = b.pointwise.copy()
    b.pointwise[3] += 1.0
    n = b.pointwise.size
    onehot = np.zeros(n)
    onehot[3] = 1.0
    diff, se, _ = loo_compare(a, b)
    assert diff == pytest.approx(1.0, abs=1e-12)
    assert se == pytest.approx(math.sqrt(n * np.var(onehot)), abs=1e-12)


def test_compare_label_mismatch():
    _, ll = normal_fixture()
    a = psis_loo(LogLikMatrix(ll, [("g", float(i), 0) for i in range(20)]))
    b = psis_loo(LogLikMatrix(ll, [("h", float(i), 0) for i in range(20)]))
    with pytest.raises(LabelMismatch):
        loo_compare(a, b)


def test_report_lists_k_counts_and_groups():
    _, ll = normal_fixture()
    labels = [("pt1" if i < 10 else "pt2", float(i), 0) for i in range(20)]
    res = psis_loo(LogLikMatrix(ll, labels))
    text = loo_report(res, "none", res, "partial")
    assert "k > 0.7: 0" in text and "k > 1.0: 0" in text
    assert "pt1" in text and "pt2" in text and "total" in text
    assert "elpd_diff = 0.0" in text
    assert sum(res.group_totals().values()) == pytest.approx(res.elpd_loo)


def test_loglik_matrix_csv():
    m = LogLikMatrix(np.array([[-1.0, -2.5]]), None)
    assert m.to_csv() == "draw,obs_index,loglik\n0,0,-1.0\n0,1,-2.5\n"


def toy_truth(model):
    return np.array([TOY_TRUTH[n] for n in model.space.names])


def test_predictive_shapes():
    model = make_model("toy")
    th = np.repeat(toy_truth(model)[None], 4000, axis=0)
    out = posterior_predictive(model, th, np.linspace(0, 48, 101), np.random.default_rng(0))
    assert out.y_pred.shape == (4000, 2, 101)
    assert out.y_mean.shape == (4000, 2, 101)
    assert out.n_failed == 0


def test_predictive_zero_noise():
    model = make_model("toy")
    th = toy_truth(model)
    th[model.space.index("sigma")] = 0.0
    out = posterior_predictive(model, th[None], np.linspace(0, 48, 11), np.random.default_rng(0))
    np.testing.assert_array_equal(out.y_pred, out.y_mean)


def test_predictive_band_calibration():
    model = make_model("toy")
    truth = toy_truth(model)
    ts = np.linspace(0, 48, 101)
    pred = posterior_predictive(model, np.repeat(truth[None], 4000, axis=0), ts, np.random.default_rng(1))
    bands = predictive_bands(pred.y_pred)
    lo, hi = bands[0], bands[-1]
    cover = []
    for seed in range(20):
        ds = simulate_data(model, truth, ts, n_groups=1, seed=100 + seed)
        y = ds.groups[0].observations
        cover.append(np.mean((y >= lo) & (y <= hi)))
    assert abs(np.mean(cover) - 0.95) < 0.03
    assert np.all(bands[0] <= bands[2]) and np.all(bands[2] <= bands[-1])
