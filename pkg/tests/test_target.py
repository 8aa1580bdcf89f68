import math

import numpy as np
import pytest

from odebayes.errors import ConfigError, DimensionMismatch
from odebayes.model import Dataset
from odebayes.models import make_model
from odebayes.ode import SolverConfig
from odebayes.scenarios import prostate_hierarchy, simulate_toy
from odebayes.target import PoolingStructure, build_target

TIGHT = SolverConfig(1e-10, 1e-10)


@pytest.fixture(scope="module")
def toy_data():
    return simulate_toy(seed=11)


def fd_grad(target, u, h=1e-6):
    g = np.empty_like(u)
    for k in range(u.size):
        e = np.zeros_like(u)
        e[k] = h * max(1.0, abs(u[k]))
        g[k] = (target.eval_value_only(u + e) - target.eval_value_only(u - e)) / (2 * e[k])
    return g


def test_toy_complete_pooling_shape(toy_data):
    t = build_target(make_model("toy"), toy_data)
    assert t.dim == 6
    assert t.n_obs == 156
    assert t.pointwise_loglik(np.zeros(6)).shape == (156,)


@pytest.mark.parametrize("mode", ["complete", "none", "partial"])
def test_gradient_matches_finite_differences(toy_data, mode):
    small = Dataset(toy_data.groups[:3])
    t = build_target(make_model("toy"), small, mode, TIGHT)
    rng = np.random.default_rng(4)
    u = rng.normal(0.0, 0.3, t.dim)
    lp, g = t.eval(u)
    assert math.isfinite(lp)
    fd = fd_grad(t, u)
    assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0) < 1e-4


def test_prostate_partial_gradient():
    ds, _ = prostate_hierarchy(2, n_patients=2)
    t = build_target(make_model("prostate"), ds, "partial", TIGHT)
    u = np.random.default_rng(1).normal(0.0, 0.2, t.dim)
    _, g = t.eval(u)
    fd = fd_grad(t, u)
    assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0) < 1e-4


def test_no_pooling_is_separable(toy_data):
    model = make_model("toy")
    a, b = toy_data.groups[:2]
    both = build_target(model, Dataset((a, b)), "none")
    ta = build_target(model, Dataset((a,)), "none")
    tb = build_target(model, Dataset((b,)), "none")
    u = np.random.default_rng(2).normal(0.0, 0.2, both.dim)
    n = ta.dim
    assert both.eval_value_only(u) == pytest.approx(ta.eval_value_only(u[:n]) + tb.eval_value_only(u[n:]), rel=1e-12)


def test_complete_pooling_one_group_equals_no_pooling(toy_data):
    model = make_model("toy")
    one = Dataset(toy_data.groups[:1])
    u = np.full(6, 0.1)
    assert build_target(model, one, "complete").eval_value_only(u) == pytest.approx(
        build_target(model, one, "none").eval_value_only(u), rel=1e-12)


def test_pointwise_sums_to_likelihood(toy_data):
    t = build_target(make_model("toy"), toy_data)
    u = np.full(6, 0.05)
    pw = t.pointwise_loglik(u)
    flat = build_target(make_model("toy", {"priors": {n: "flat" for n in t.model.space.names}}), toy_data)
    _, lj = t.model.space.constrain_with_logjac(u)
    assert pw.sum() == pytest.approx(flat.eval_value_only(u) - lj, rel=1e-12)


def test_solver_failure_gives_minus_inf(toy_data):
    t = build_target(make_model("toy"), toy_data, solver_config=SolverConfig(max_steps=5))
    rec = t.eval_with_diagnostics(np.zeros(6))
    assert rec.value == -math.inf and rec.numeric_failure
    assert np.all(rec.gradient == 0.0)


def test_nonfinite_input_gives_minus_inf(toy_data):
    t = build_target(make_model("toy"), toy_data)
    u = np.zeros(6)
    u[2] = np.nan
    assert t.eval_value_only(u) == -math.inf


def test_dimension_mismatch(toy_data):
    t = build_target(make_model("toy"), toy_data)
    with pytest.raises(DimensionMismatch):
        t.eval(np.zeros(5))
    with pytest.raises(DimensionMismatch):
        build_target(make_model("decay"), toy_data)


def test_empty_dataset_is_prior_only():
    model = make_model("toy")
    t = build_target(model, Dataset(()))
    u = np.full(6, 0.2)
    c, lj = model.space.constrain_with_logjac(u)
    assert t.eval_value_only(u) == pytest.approx(model.space.log_prior(c) + lj, rel=1e-12)


def test_partial_layout_and_names(toy_data):
    t = build_target(make_model("toy"), Dataset(toy_data.groups[:2]), "partial")
    assert t.dim == 1 + 2 * 5 + 2 * 5
    names = t.param_names()
    assert names[0] == "sigma"
    assert len(names) == t.constrained_draw(np.zeros(t.dim)).size


def test_invalid_pooling():
    model = make_model("toy")
    with pytest.raises(ConfigError):
        PoolingStructure("sometimes")
    with pytest.raises(ConfigError):
        PoolingStructure("partial", shared=("r1",), pooled=("r1",)).resolve(model)
    with pytest.raises(ConfigError):
        PoolingStructure("none", pooled=("K",)).resolve(model)


def test_observation_weights(toy_data):
    model = make_model("toy")
    small = Dataset(toy_data.groups[:2])
    plain = build_target(model, small, "complete", TIGHT)
    u = np.random.default_rng(6).normal(0.0, 0.2, plain.dim)
    ones = build_target(model, small, "complete", TIGHT, obs_weights=np.ones(plain.n_obs))
    assert ones.eval_value_only(u) == pytest.approx(plain.eval_value_only(u), rel=1e-13)
    w = np.ones(plain.n_obs)
    w[17] = 0.0
    drop = build_target(model, small, "complete", TIGHT, obs_weights=w)
    assert drop.eval_value_only(u) == pytest.approx(plain.eval_value_only(u) - plain.pointwise_loglik(u)[17], rel=1e-12)
    _, g = drop.eval(u)
    fd = fd_grad(drop, u)
    assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0) < 1e-4
    with pytest.raises(DimensionMismatch):
        build_target(model, small, obs_weights=np.ones(3))
    with pytest.raises(ConfigError):
        build_target(model, small, obs_weights=-np.ones(plain.n_obs))


def test_extreme_parameters_give_minus_inf(toy_data):
    # carrying capacity underflows to a subnormal; the rhs divides by it
    t = build_target(make_model("toy"), toy_data)
    lp, g = t.eval(np.array([-105.0, 99.0, -744.0, -100.0, 76.0, 0.0]))
    assert lp == -math.inf and np.all(g == 0.0)
