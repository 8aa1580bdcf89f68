import numpy as np
import pytest

from odebayes.diagnostics import (
    DegenerateChainError,
    ess,
    quantile,
    rank_normalize,
    rhat,
    split_chains,
    summarize,
)


def ar1(phi, n_chains, n, seed):
    rng = np.random.default_rng(seed)
    x = np.empty((n_chains, n))
    x[:, 0] = rng.standard_normal(n_chains) / np.sqrt(1 - phi**2)
    eps = rng.standard_normal((n_chains, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + eps[:, t]
    return x


def test_rhat_converged_chains():
    x = np.random.default_rng(0).standard_normal((4, 10_000))
    assert 0.999 <= rhat(x) <= 1.01


def test_rhat_non_overlapping_chains():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.standard_normal(1000) + 10, rng.standard_normal(1000) - 10])
    assert rhat(x) > 1.5


def test_rhat_needs_two_chains():
    with pytest.raises(ValueError):
        rhat(np.random.default_rng(0).standard_normal((1, 100)))


def test_degenerate_chain():
    x = np.random.default_rng(0).standard_normal((2, 100))
    x[1] = 3.0
    with pytest.raises(DegenerateChainError):
        rhat(x)
    with pytest.raises(DegenerateChainError):
        ess(x)


def test_ess_iid():
    x = np.random.default_rng(2).standard_normal((4, 10_000))
    assert abs(ess(x) - 40_000) < 4_000


def test_ess_ar1():
    phi = 0.9
    x = ar1(phi, 4, 20_000, seed=3)
    expected = (1 - phi) / (1 + phi) * x.size
    assert abs(ess(x) - expected) < 0.2 * expected


def test_ess_tail_below_total():
    x = ar1(0.5, 4, 2000, seed=4)
    assert 0 < ess(x, kind="tail") < x.size * 2


def test_monotone_transform_invariance():
    x = np.exp(ar1(0.3, 4, 1000, seed=5) * 0.5)
    y = np.log(x) * 3.0 + 7.0
    assert rhat(x) == pytest.approx(rhat(y), abs=1e-12)
    assert ess(x) == pytest.approx(ess(y), abs=1e-12)


def test_reversed_chain_same_ess():
    x = ar1(0.6, 4, 1000, seed=6)
    assert ess(x[:, ::-1]) == pytest.approx(ess(x), rel=1e-12)


def test_antithetic_chain_is_clamped():
    n = 1000
    x = np.empty((2, n))
    base = np.random.default_rng(7).standard_normal((2, n // 2))
    x[:, 0::2] = base
    x[:, 1::2] = -base
    assert ess(x) <= 2 * x.size


def test_split_chains_shape():
    x = np.arange(2 * 7, dtype=float).reshape(2, 7)
    s = split_chains(x)
    assert s.shape == (4, 3)
    np.testing.assert_array_equal(s[2], [4.0, 5.0, 6.0])


def test_rank_normalize_ties_and_range():
    z = rank_normalize(np.array([[1.0, 2.0, 2.0, 3.0]]))
    assert z[0, 1] == z[0, 2]
    assert z[0, 0] < 0 < z[0, 3]


def test_quantile_type7():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert quantile(x, 0.5) == 2.5
    assert quantile(x, 0.25) == pytest.approx(1.75)


def test_summary_table_and_warnings():
    rng = np.random.default_rng(8)
    draws = rng.standard_normal((4, 1000, 2))
    stats = [{"is_divergent": np.zeros(1000, bool)} for _ in range(4)]
    s = summarize(draws, stats, names=["p[1]", "sigma"], model_name="toy")
    table = s.table()
    assert "Inference for model toy." in table
    for col in ("mean", "se_mean", "sd", "5%", "50%", "95%", "n_eff", "Rhat"):
        assert col in table
    assert "divergent" not in table
    stats[2]["is_divergent"][:3] = True
    s2 = summarize(draws, stats)
    assert any("3 divergent" in w for w in s2.warnings)


def test_summary_flags_poor_mixing():
    rng = np.random.default_rng(9)
    draws = np.vstack([rng.standard_normal(500) + 5, rng.standard_normal(500)])[:, :, None]
    s = summarize(draws)
    assert any("R-hat" in w for w in s.warnings)


def test_summary_csv_columns():
    s = summarize(np.random.default_rng(0).standard_normal((2, 200, 1)), names=["K"])
    lines = s.to_csv().splitlines()
    assert lines[0] == "param,mean,se_mean,sd,q05,q50,q95,ess_bulk,ess_tail,rhat"
    row = lines[1].split(",")
    assert row[0] == "K" and float(row[1]) == s["K"].mean
