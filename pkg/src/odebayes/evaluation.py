"""Predictive evaluation: posterior predictive draws, lpd and PSIS-LOO.

PSIS-LOO follows Vehtari, Gelman and Gabry (2017): the largest raw
importance ratios of each observation are replaced by expected order
statistics of a generalized Pareto fit, whose shape ``k`` doubles as a
reliability diagnostic (``k > 0.7`` high, ``k > 1`` very high).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatch, LabelMismatch, OdeBayesError
from .model import Model
from .ode import SolverConfig, solve

K_HIGH = 0.7
K_VERY_HIGH = 1.0
MIN_DRAWS = 100

# GPD fit: prior shrinkage of k towards 0.5 with weight 10 observations;
# Zhang-Stephens grid uses 30 + sqrt(n) points and prior scale 3.
K_PRIOR_WEIGHT = 10.0
K_PRIOR_MEAN = 0.5
ZS_PRIOR_BS = 3.0


@dataclass
class LogLikMatrix:
    """Pointwise log-likelihood, ``values[s, i]`` for draw ``s`` and observation ``i``."""

    values: np.ndarray
    labels: list
    n_excluded: int = 0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.labels is None:
            self.labels = [(None, float(i), 0) for i in range(self.values.shape[1])]
        self.labels = [tuple(x) for x in self.labels]
        if len(self.labels) != self.values.shape[1]:
            raise DimensionMismatch("one label per observation required")

    @property
    def n_draws(self):
        return self.values.shape[0]

    @property
    def n_obs(self):
        return self.values.shape[1]

    @classmethod
    def from_draws(cls, target, draws_unconstrained, dataset=None):
        """Evaluate the pointwise log-likelihood for each draw.

        Draws whose solve fails or whose likelihood is not finite are
        excluded and counted in ``n_excluded``.
        """
        draws = np.atleast_2d(draws_unconstrained)
        ds = dataset if dataset is not None else target.dataset
        rows = []
        excluded = 0
        for u in draws:
            ll = target.pointwise_loglik(u, dataset)
            if np.all(np.isfinite(ll)):
                rows.append(ll)
            else:
                excluded += 1
        vals = np.array(rows) if rows else np.zeros((0, ds.n_obs))
        return cls(vals, ds.labels(), excluded)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("draw,obs_index,loglik\n")
        for s in range(self.n_draws):
            for i in range(self.n_obs):
                out.write(f"{s},{i},{float(self.values[s, i])!r}\n")
        return out.getvalue()


def _values(loglik):
    if isinstance(loglik, LogLikMatrix):
        return loglik.values
    return np.atleast_2d(np.asarray(loglik, dtype=float))


def lpd_pointwise(loglik):
    """``log(mean_s exp(loglik[s, i]))`` for each observation."""
    v = _values(loglik)
    if v.size == 0:
        raise ValueError("empty log-likelihood matrix")
    return logsumexp(v, axis=0) - math.log(v.shape[0])


def lpd(loglik) -> float:
    """Log pointwise predictive density summed over observations."""
    return float(np.sum(lpd_pointwise(loglik)))


# -- generalized Pareto fits --------------------------------------------------


def gpd_fit_zs(x):
    """Zhang-Stephens empirical Bayes fit of ``(k, sigma)`` to sorted positive exceedances.

    The returned ``k`` is shrunk towards 0.5 as ``(n k + 10 * 0.5) / (n + 10)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= ZS_PRIOR_BS * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    ll = n * (np.log(-(b / k)) - k - 1.0)
    with np.errstate(over="ignore"):
        w = 1.0 / np.exp(ll - ll[:, None]).sum(axis=1)
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep], b[keep]
    w /= w.sum()
    b_post = float(np.sum(b * w))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + K_PRIOR_WEIGHT * K_PRIOR_MEAN) / (n + K_PRIOR_WEIGHT)
    return k_post, sigma


def gpd_fit_pwm(x):
    """Probability-weighted-moment fit of ``(k, sigma)`` with the same shrinkage on ``k``.

    Valid for ``k < 1``; heavier tails are underestimated.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    b0 = x.mean()
    p = (np.arange(1, n + 1) - 0.35) / n
    b1 = float(np.mean(p * x))
    d = 2.0 * b1 - b0
    if d <= 0:
        return math.inf, b0
    k = 2.0 - b0 / d
    sigma = 2.0 * b0 * (b0 - b1) / d
    k = (n * k + K_PRIOR_WEIGHT * K_PRIOR_MEAN) / (n + K_PRIOR_WEIGHT)
    return k, sigma


def gpd_quantile(p, k, sigma):
    """Inverse CDF of the generalized Pareto distribution with location 0."""
    p = np.asarray(p, dtype=float)
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    with np.errstate(over="ignore"):
        return sigma * np.expm1(-k * np.log1p(-p)) / k


_FITS = {"zs": gpd_fit_zs, "pwm": gpd_fit_pwm}


def psis_smooth(log_ratios, fit="zs"):
    """Pareto-smooth one vector of log importance ratios.

    Returns ``(normalised log weights, k)``. ``k`` is NaN when all ratios are
    equal and ``inf`` when the tail is too short to fit.
    """
    lr = np.asarray(log_ratios, dtype=float)
    s = lr.size
    x = lr - lr.max()
    if np.ptp(x) == 0:
        return x - logsumexp(x), float("nan")
    m = int(min(math.ceil(0.2 * s), math.ceil(3.0 * math.sqrt(s))))
    order = np.argsort(x, kind="stable")
    cutoff = max(x[order[s - m - 1]], math.log(np.finfo(float).tiny)) if m < s else x[order[0]]
    tail = np.flatnonzero(x > cutoff)
    if tail.size <= 4:
        k = math.inf
    else:
        t_order = tail[np.argsort(x[tail], kind="stable")]
        exc = np.exp(x[t_order]) - math.exp(cutoff)
        k, sigma = _FITS[fit](exc)
        if math.isfinite(k):
            p = (np.arange(tail.size) + 0.5) / tail.size
            smoothed = np.log(gpd_quantile(p, k, sigma) + math.exp(cutoff))
            x = x.copy()
            x[t_order] = smoothed
            # never exceed the largest raw ratio
            x[x > 0] = 0.0
    return x - logsumexp(x), float(k)


@dataclass
class LooResult:
    """PSIS-LOO estimate with pointwise contributions and Pareto ``k``."""

    elpd_loo: float
    se: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    labels: list = field(default_factory=list)
    lpd: float = float("nan")
    n_draws: int = 0
    n_excluded: int = 0
    warnings: list = field(default_factory=list)

    @property
    def n_high(self):
        return int(np.sum(self.pareto_k > K_HIGH))

    @property
    def n_very_high(self):
        return int(np.sum(self.pareto_k > K_VERY_HIGH))

    @property
    def n_undefined(self):
        return int(np.sum(np.isnan(self.pareto_k)))

    def group_totals(self):
        """Sum of pointwise elpd per group id, in order of first appearance."""
        out = {}
        for lab, v in zip(self.labels, self.pointwise):
            out[lab[0]] = out.get(lab[0], 0.0) + float(v)
        return out


def psis_loo(loglik, fit="zs") -> LooResult:
    """Leave-one-out expected log pointwise predictive density by PSIS.

    Parameters
    ----------
    loglik : LogLikMatrix or array ``(n_draws, n_obs)``
    fit : {"zs", "pwm"}
        Generalized Pareto fit: Zhang-Stephens (default) or probability
        weighted moments.
    """
    if fit not in _FITS:
        raise ValueError(f"unknown GPD fit {fit!r}")
    v = _values(loglik)
    labels = loglik.labels if isinstance(loglik, LogLikMatrix) else [(None, float(i), 0) for i in range(v.shape[1])]
    n_exc = loglik.n_excluded if isinstance(loglik, LogLikMatrix) else 0
    s, n = v.shape
    if s == 0 or n == 0:
        raise ValueError("empty log-likelihood matrix")
    warnings = []
    if s < MIN_DRAWS:
        warnings.append(f"only {s} draws; PSIS estimates are unreliable below {MIN_DRAWS}")
    elpd = np.empty(n)
    ks = np.empty(n)
    for i in range(n):
        lw, k = psis_smooth(-v[:, i], fit)
        elpd[i] = logsumexp(lw + v[:, i])
        ks[i] = k
    total = float(np.sum(elpd))
    se = float(math.sqrt(n * np.var(elpd))) if n > 1 else 0.0
    res = LooResult(total, se, elpd, ks, list(labels), lpd(v), s, n_exc, warnings)
    if res.n_high:
        warnings.append(f"{res.n_high} observation(s) with Pareto k > {K_HIGH}")
    return res


def loo_compare(a: LooResult, b: LooResult):
    """Compare two LOO results on the same observations.

    Returns ``(elpd_diff, se_diff, flagged)`` with ``elpd_diff = elpd_b - elpd_a``
    and ``flagged`` when the difference exceeds twice its standard error.

    Raises
    ------
    LabelMismatch
        If the observation labels differ.
    """
    if len(a.labels) != len(b.labels) or any(tuple(x) != tuple(y) for x, y in zip(a.labels, b.labels)):
        raise LabelMismatch("LOO results refer to different observations")
    d = np.asarray(b.pointwise) - np.asarray(a.pointwise)
    diff = float(np.sum(d))
    se = float(math.sqrt(d.size * np.var(d))) if d.size > 1 else 0.0
    return diff, se, bool(abs(diff) > 2.0 * se)


def loo_report(res: LooResult, name: str = "", other: Optional[LooResult] = None, other_name: str = "") -> str:
    """Text report: per-group elpd columns and total, Pareto k counts, optional comparison."""
    out = io.StringIO()
    totals = res.group_totals()
    out.write(f"PSIS-LOO{(' for ' + name) if name else ''}: {res.n_draws} draws, {len(res.pointwise)} observations\n")
    if res.n_excluded:
        out.write(f"{res.n_excluded} draw(s) excluded after solver failure\n")
    keys = [str(k) for k in totals] + ["total"]
    vals = [f"{v:.1f}" for v in totals.values()] + [f"{res.elpd_loo:.1f}"]
    w = [max(len(k), len(v)) for k, v in zip(keys, vals)]
    out.write("group     " + " ".join(k.rjust(x) for k, x in zip(keys, w)) + "\n")
    out.write("elpd_loo  " + " ".join(v.rjust(x) for v, x in zip(vals, w)) + "\n")
    out.write(f"se(elpd_loo) = {res.se:.2f}\n")
    ks = res.pareto_k
    good = int(np.sum(ks <= 0.5))
    ok = int(np.sum((ks > 0.5) & (ks <= K_HIGH)))
    out.write("Pareto k diagnostics:\n")
    out.write(f"  (-inf, 0.5]  good      {good}\n")
    out.write(f"  (0.5, 0.7]   ok        {ok}\n")
    out.write(f"  (0.7, 1]     high      {res.n_high - res.n_very_high}\n")
    out.write(f"  (1, inf)     very high {res.n_very_high}\n")
    if res.n_undefined:
        out.write(f"  undefined (constant ratios) {res.n_undefined}\n")
    out.write(f"k > 0.7: {res.n_high}\nk > 1.0: {res.n_very_high}\n")
    for w_ in res.warnings:
        out.write(f"Warning: {w_}\n")
    if other is not None:
        diff, se, flag = loo_compare(res, other)
        out.write(f"compare {other_name or 'b'} - {name or 'a'}: elpd_diff = {diff:.1f}, se_diff = {se:.1f}"
                  f"{', |diff| > 2 se' if flag else ''}\n")
    return out.getvalue()


# -- posterior predictive -------------------------------------------------------


@dataclass
class PredictiveDraws:
    """``y_mean`` and ``y_pred`` of shape ``(n_draws, n_channels, n_times)``."""

    times: np.ndarray
    y_mean: np.ndarray
    y_pred: np.ndarray
    n_failed: int = 0


def posterior_predictive(model: Model, thetas, ts_gen, rng, group=None, config: Optional[SolverConfig] = None,
                         forcing=None) -> PredictiveDraws:
    """Noise-free trajectories and noisy replicates for each parameter draw.

    ``thetas`` holds constrained parameter vectors of the model, one per row.
    Draws whose solve fails are skipped and counted.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != model.space.n:
        raise DimensionMismatch(f"expected {model.space.n} parameters per draw, got {thetas.shape[1]}")
    ts = np.asarray(ts_gen, dtype=float)
    system = model.system_for(group)
    if forcing is None and group is not None:
        forcing = group.forcing
    means, preds = [], []
    failed = 0
    for th in thetas:
        try:
            traj = solve(system, model.xi(th), ts, config, forcing)
        except OdeBayesError:
            failed += 1
            continue
        mean = model.projection @ traj.states.T
        sd = model.observation.sd(mean, th[model.noise_index])
        noise = rng.standard_normal(mean.shape)
        means.append(mean)
        preds.append(mean + np.maximum(sd, 0.0) * noise)
    shape = (0, model.n_channels, ts.size)
    return PredictiveDraws(
        ts,
        np.array(means) if means else np.zeros(shape),
        np.array(preds) if preds else np.zeros(shape),
        failed,
    )


def predictive_from_fit(target, draws_unconstrained, ts_gen, rng, group_id=None, config=None) -> PredictiveDraws:
    """Posterior predictive for one group of a fitted target (default: the first)."""
    ds = target.dataset
    ids = ds.group_ids()
    if group_id is None:
        gi = 0
    elif group_id in ids:
        gi = ids.index(group_id)
    else:
        raise DimensionMismatch(f"unknown group {group_id!r}")
    group = ds.groups[gi] if ids else None
    draws = np.atleast_2d(draws_unconstrained)
    thetas = np.array([target.group_thetas(u)[gi if target.n_groups else 0] for u in draws])
    return posterior_predictive(target.model, thetas, ts_gen, rng, group, config or target.config)


BAND_PROBS = (0.025, 0.25, 0.5, 0.75, 0.975)


def predictive_bands(values, probs=BAND_PROBS):
    """Quantiles over draws: array ``(len(probs), n_channels, n_times)``."""
    return np.quantile(values, probs, axis=0, method="linear")
