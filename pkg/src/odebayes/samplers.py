"""MCMC samplers: random-walk Metropolis, Metropolis-Hastings, HMC and NUTS.

All samplers work on the unconstrained scale. A target is any object with a
``dim`` attribute, ``eval(theta) -> (log_density, gradient)`` and
``eval_value_only(theta) -> log_density``; :class:`FunctionTarget` wraps
plain callables.

Warmup for HMC and NUTS adapts the step size by dual averaging and a diagonal
inverse metric over expanding windows. RWM and MH adapt a proposal scale
towards the usual optimal acceptance rates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InitFailure

ALGORITHMS = ("RWM", "MH", "HMC", "NUTS")
MH_PROPOSALS = ("langevin", "gaussian", "lognormal")

# dual averaging
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75

# warmup windows, as fractions of n_warmup and the first slow window length
INIT_BUFFER = 0.15
TERM_BUFFER = 0.10
BASE_WINDOW = 25

# acceptance rates the proposal scale is tuned towards
RWM_ACCEPT_1D = 0.44
RWM_ACCEPT = 0.23
MALA_ACCEPT = 0.574

INIT_RADIUS = 2.0
INIT_TRIES = 100


# -- targets ----------------------------------------------------------------


class FunctionTarget:
    """Wrap a log density (and optionally its gradient) as a sampler target.

    Without ``grad``, gradients come from central differences.
    """

    def __init__(self, dim: int, logp: Callable, grad: Optional[Callable] = None, names=None):
        self.dim = int(dim)
        self._logp = logp
        self._grad = grad
        self._names = list(names) if names is not None else None

    def eval_value_only(self, theta):
        v = float(self._logp(theta))
        return v if v == v else -math.inf

    def eval(self, theta):
        lp = self.eval_value_only(theta)
        if self._grad is not None:
            g = np.asarray(self._grad(theta), dtype=float)
        else:
            g = np.empty(self.dim)
            for i in range(self.dim):
                h = 1e-6 * max(1.0, abs(theta[i]))
                e = np.zeros(self.dim)
                e[i] = h
                g[i] = (self.eval_value_only(theta + e) - self.eval_value_only(theta - e)) / (2 * h)
        return lp, g

    def param_names(self):
        return self._names or [f"x[{i + 1}]" for i in range(self.dim)]


def _eval(target, theta):
    lp, g = target.eval(theta)
    lp = float(lp)
    if not (lp == lp) or lp == math.inf:
        return -math.inf, np.zeros_like(theta)
    return lp, np.asarray(g, dtype=float)


def _value(target, theta):
    lp = float(target.eval_value_only(theta))
    if not (lp == lp) or lp == math.inf:
        return -math.inf
    return lp


# -- configuration and output ---------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    ``rwm_sigma`` is the initial random-walk (and MH) proposal scale, either a
    scalar or one value per dimension; by default ``2.38 / sqrt(dim)``.
    ``hmc_L`` is the number of leapfrog steps for static HMC.
    ``step_size`` fixes the initial HMC/NUTS step size instead of the
    doubling heuristic. ``step_jitter`` draws each static-HMC step size
    uniformly within that relative range, which breaks the resonance of a
    fixed trajectory length with periodic orbits. ``thin`` keeps every
    ``thin``-th post-warmup transition. ``n_jobs`` > 1 runs chains on a
    thread pool; results do not depend on it.
    """

    algorithm: str = "NUTS"
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    seed: int = 0
    rwm_sigma: Optional[object] = None
    mh_proposal: str = "langevin"
    hmc_L: int = 16
    max_tree_depth: int = 10
    target_accept: float = 0.8
    divergence_delta: float = 1000.0
    step_size: Optional[float] = None
    step_jitter: float = 0.2
    adapt_metric: bool = True
    thin: int = 1
    n_jobs: int = 1

    def __post_init__(self):
        alg = str(self.algorithm).upper()
        object.__setattr__(self, "algorithm", alg)
        object.__setattr__(self, "mh_proposal", str(self.mh_proposal).lower())
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.mh_proposal not in MH_PROPOSALS:
            raise ConfigError(f"mh_proposal must be one of {MH_PROPOSALS}")
        for name in ("n_chains", "n_warmup", "n_draws", "hmc_L", "max_tree_depth", "thin", "n_jobs"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")
        if not self.divergence_delta > 0:
            raise ConfigError("divergence_delta must be positive")
        if not 0.0 <= self.step_jitter < 1.0:
            raise ConfigError("step_jitter must lie in [0, 1)")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.rwm_sigma is not None and np.any(np.asarray(self.rwm_sigma, dtype=float) <= 0):
            raise ConfigError("rwm_sigma must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown sampler settings: {sorted(bad)}")
        return cls(**d)


STAT_NAMES = ("lp", "accept_prob", "is_divergent", "energy", "energy_error", "tree_depth", "n_leapfrog", "step_size")


@dataclass
class ChainOutput:
    """Draws and per-draw statistics of one chain.

    Warmup draws are kept in ``warmup_unconstrained`` and ``warmup_stats``
    and are not used for inference.
    """

    chain: int
    draws_unconstrained: np.ndarray
    draws_constrained: np.ndarray
    stats: dict
    warmup_unconstrained: np.ndarray
    warmup_stats: dict
    param_names: list
    step_size: float = float("nan")
    inv_mass: Optional[np.ndarray] = None
    algorithm: str = "NUTS"

    @property
    def n_draws(self):
        return self.draws_unconstrained.shape[0]

    @property
    def n_divergent(self):
        return int(np.sum(self.stats["is_divergent"]))


# -- random-walk and Metropolis-Hastings ------------------------------------


def _accept(log_alpha, rng):
    """Accept with probability min(1, exp(log_alpha)); always consumes one uniform."""
    u = rng.uniform()
    if not log_alpha == log_alpha:
        log_alpha = -math.inf
    alpha = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
    return alpha, u < alpha


def rwm_step(target, theta, sigma, rng, lp=None):
    """One random-walk Metropolis step with proposal ``N(theta, diag(sigma^2))``.

    Returns ``(theta_next, alpha, accepted)``. On rejection the current
    point is returned unchanged.
    """
    theta_next, alpha, accepted, _ = _rwm(target, np.asarray(theta, dtype=float), sigma, rng, lp)
    return theta_next, alpha, accepted


def _rwm(target, theta, sigma, rng, lp):
    if lp is None:
        lp = _value(target, theta)
    prop = theta + sigma * rng.standard_normal(theta.size)
    lp_new = _value(target, prop)
    alpha, ok = _accept(lp_new - lp if lp_new > -math.inf else -math.inf, rng)
    if ok:
        return prop, alpha, True, lp_new
    return theta, alpha, False, lp


class GaussianProposal:
    """Symmetric proposal ``theta' ~ N(theta, diag(scale^2))``."""

    symmetric = True

    def __init__(self, scale):
        self.scale = scale

    def sample(self, theta, rng):
        return theta + self.scale * rng.standard_normal(theta.size)

    def log_q(self, to, frm):
        z = (to - frm) / self.scale
        return -0.5 * float(z @ z)


class LogNormalProposal:
    """Multiplicative proposal ``theta' = theta * exp(scale * z)`` for positive states."""

    symmetric = False

    def __init__(self, scale):
        self.scale = scale

    def sample(self, theta, rng):
        return theta * np.exp(self.scale * rng.standard_normal(theta.size))

    def log_q(self, to, frm):
        if np.any(to <= 0) or np.any(frm <= 0):
            return -math.inf
        z = (np.log(to) - np.log(frm)) / self.scale
        return float(-0.5 * z @ z - np.sum(np.log(to)))


class LangevinProposal:
    """Gradient-shifted proposal ``N(theta + eps^2/2 * M^-1 grad, eps^2 M^-1)``."""

    symmetric = False

    def __init__(self, target, scale, inv_mass=None):
        self.target = target
        self.scale = scale
        self.inv_mass = 1.0 if inv_mass is None else inv_mass
        self._cache = {}

    def _grad(self, theta):
        key = theta.tobytes()
        g = self._cache.get(key)
        if g is None:
            g = _eval(self.target, theta)[1]
            if len(self._cache) > 4:
                self._cache.clear()
            self._cache[key] = g
        return g

    def _mean(self, theta):
        return theta + 0.5 * self.scale**2 * self.inv_mass * self._grad(theta)

    def sample(self, theta, rng):
        sd = self.scale * np.sqrt(self.inv_mass)
        return self._mean(theta) + sd * rng.standard_normal(theta.size)

    def log_q(self, to, frm):
        g = self._grad(frm)
        if not np.all(np.isfinite(g)):
            return -math.inf
        sd = self.scale * np.sqrt(self.inv_mass)
        z = (to - self._mean(frm)) / sd
        return -0.5 * float(z @ z)


def mh_step(target, theta, proposal, rng, lp=None):
    """One Metropolis-Hastings step with an arbitrary proposal.

    ``proposal`` provides ``sample(theta, rng)`` and ``log_q(to, frm)``
    (log proposal density up to a constant shared by both directions).
    Returns ``(theta_next, alpha, accepted)``.
    """
    theta_next, alpha, accepted, _ = _mh(target, np.asarray(theta, dtype=float), proposal, rng, lp)
    return theta_next, alpha, accepted


def _mh(target, theta, proposal, rng, lp):
    if lp is None:
        lp = _value(target, theta)
    prop = proposal.sample(theta, rng)
    lp_new = _value(target, prop)
    if lp_new == -math.inf:
        log_alpha = -math.inf
    elif getattr(proposal, "symmetric", False):
        log_alpha = lp_new - lp
    else:
        q_rev = proposal.log_q(theta, prop)
        q_fwd = proposal.log_q(prop, theta)
        if q_rev == -math.inf:
            log_alpha = -math.inf
        else:
            log_alpha = (lp_new - lp) + (q_rev - q_fwd)
    alpha, ok = _accept(log_alpha, rng)
    if ok:
        return prop, alpha, True, lp_new
    return theta, alpha, False, lp


# -- Hamiltonian dynamics -----------------------------------------------------


def leapfrog(target, theta, r, eps, mass_diag=None):
    """One leapfrog step of size ``eps`` with diagonal mass matrix ``mass_diag``.

    Returns ``(theta', r')``.
    """
    theta = np.asarray(theta, dtype=float)
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float) if mass_diag is not None else np.ones_like(theta)
    _, grad = _eval(target, theta)
    th, rr, _, _ = _leapfrog(target, theta, np.asarray(r, dtype=float), grad, eps, inv_mass)
    return th, rr


def _leapfrog(target, theta, r, grad, eps, inv_mass):
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * inv_mass * r_half
    lp, g = _eval(target, theta_new)
    if lp == -math.inf:
        return theta_new, r_half, lp, g
    return theta_new, r_half + 0.5 * eps * g, lp, g


def _kinetic(r, inv_mass):
    with np.errstate(over="ignore"):
        # an exploding trajectory gives inf, which is flagged as divergent
        return 0.5 * float(np.sum(inv_mass * r * r))


def hmc_step(target, theta, eps, L, mass_diag, rng, delta=1000.0, state=None):
    """Static HMC: ``L`` leapfrog steps then a Metropolis correction.

    Returns ``(theta_next, alpha, is_divergent, energy)`` where ``energy`` is
    the Hamiltonian at the returned state.
    """
    theta = np.asarray(theta, dtype=float)
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float) if mass_diag is not None else np.ones_like(theta)
    if state is None:
        state = _eval(target, theta)
    out = _hmc(target, theta, state[0], state[1], eps, L, inv_mass, rng, delta)
    return out[0], out[3]["accept_prob"], out[3]["is_divergent"], out[3]["energy"]


def _hmc(target, theta, lp, grad, eps, L, inv_mass, rng, delta):
    r = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    h0 = -lp + _kinetic(r, inv_mass)
    th, rr, lp1, g1 = theta, r, lp, grad
    divergent = False
    n = 0
    for _ in range(L):
        th, rr, lp1, g1 = _leapfrog(target, th, rr, g1, eps, inv_mass)
        n += 1
        if lp1 == -math.inf:
            divergent = True
            break
        if -lp1 + _kinetic(rr, inv_mass) - h0 > delta:
            divergent = True
            break
    h1 = -lp1 + _kinetic(rr, inv_mass) if lp1 > -math.inf else math.inf
    d_h = h1 - h0
    log_alpha = -d_h if not divergent else -math.inf
    alpha, ok = _accept(log_alpha, rng)
    if divergent:
        alpha = 0.0 if d_h == math.inf else min(1.0, math.exp(min(0.0, -d_h)))
    stats = {"accept_prob": alpha, "is_divergent": divergent, "energy_error": abs(d_h), "n_leapfrog": n,
             "tree_depth": 0}
    if ok and not divergent:
        stats["energy"] = h1
        return th, lp1, g1, stats
    stats["energy"] = h0
    return theta, lp, grad, stats


# -- NUTS -------------------------------------------------------------------


class _Tree:
    __slots__ = ("th_m", "r_m", "g_m", "th_p", "r_p", "g_p", "th_s", "lp_s", "g_s", "h_s", "n", "s",
                 "a_sum", "n_a", "divergent", "n_leap", "max_err")


def _uturn(th_m, th_p, r_m, r_p, inv_mass):
    d = th_p - th_m
    return float(d @ (inv_mass * r_m)) < 0 or float(d @ (inv_mass * r_p)) < 0


def _build_tree(target, th, r, g, log_u, v, j, eps, inv_mass, joint0, delta, rng):
    if j == 0:
        th1, r1, lp1, g1 = _leapfrog(target, th, r, g, v * eps, inv_mass)
        t = _Tree()
        t.n_leap = 1
        joint = lp1 - _kinetic(r1, inv_mass) if lp1 > -math.inf else -math.inf
        t.th_m = t.th_p = t.th_s = th1
        t.r_m = t.r_p = r1
        t.g_m = t.g_p = t.g_s = g1
        t.lp_s = lp1
        t.h_s = -joint
        t.n = 1 if log_u <= joint else 0
        t.divergent = not (log_u < joint + delta)
        t.s = not t.divergent
        t.a_sum = 1.0 if joint >= joint0 else (math.exp(joint - joint0) if joint > -math.inf else 0.0)
        t.n_a = 1
        t.max_err = abs(joint0 - joint)
        return t
    t = _build_tree(target, th, r, g, log_u, v, j - 1, eps, inv_mass, joint0, delta, rng)
    if not t.s:
        return t
    if v == -1:
        t2 = _build_tree(target, t.th_m, t.r_m, t.g_m, log_u, v, j - 1, eps, inv_mass, joint0, delta, rng)
        t.th_m, t.r_m, t.g_m = t2.th_m, t2.r_m, t2.g_m
    else:
        t2 = _build_tree(target, t.th_p, t.r_p, t.g_p, log_u, v, j - 1, eps, inv_mass, joint0, delta, rng)
        t.th_p, t.r_p, t.g_p = t2.th_p, t2.r_p, t2.g_p
    n_tot = t.n + t2.n
    if n_tot > 0 and rng.uniform() < t2.n / n_tot:
        t.th_s, t.lp_s, t.g_s, t.h_s = t2.th_s, t2.lp_s, t2.g_s, t2.h_s
    t.n = n_tot
    t.a_sum += t2.a_sum
    t.n_a += t2.n_a
    t.n_leap += t2.n_leap
    t.max_err = max(t.max_err, t2.max_err)
    t.divergent = t.divergent or t2.divergent
    t.s = t2.s and not _uturn(t.th_m, t.th_p, t.r_m, t.r_p, inv_mass)
    return t


def nuts_step(target, theta, eps, mass_diag, max_depth, rng, delta=1000.0, state=None):
    """One NUTS transition (slice variant with progressive sampling).

    Returns ``(theta_next, stats)`` with keys ``accept_prob``,
    ``is_divergent``, ``energy``, ``energy_error``, ``tree_depth`` and
    ``n_leapfrog``.
    """
    theta = np.asarray(theta, dtype=float)
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float) if mass_diag is not None else np.ones_like(theta)
    if state is None:
        state = _eval(target, theta)
    th, _, _, stats = _nuts(target, theta, state[0], state[1], eps, inv_mass, max_depth, rng, delta)
    return th, stats


def _nuts(target, theta, lp, grad, eps, inv_mass, max_depth, rng, delta):
    r0 = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    joint0 = lp - _kinetic(r0, inv_mass)
    log_u = joint0 - rng.standard_exponential()
    th_m = th_p = theta
    r_m = r_p = r0
    g_m = g_p = grad
    th_s, lp_s, g_s, h_s = theta, lp, grad, -joint0
    n = 1
    s = True
    j = 0
    a_sum = 0.0
    n_a = 0
    n_leap = 0
    divergent = False
    max_err = 0.0
    while s and j < max_depth:
        v = 1 if rng.uniform() < 0.5 else -1
        if v == -1:
            t = _build_tree(target, th_m, r_m, g_m, log_u, v, j, eps, inv_mass, joint0, delta, rng)
            th_m, r_m, g_m = t.th_m, t.r_m, t.g_m
        else:
            t = _build_tree(target, th_p, r_p, g_p, log_u, v, j, eps, inv_mass, joint0, delta, rng)
            th_p, r_p, g_p = t.th_p, t.r_p, t.g_p
        a_sum += t.a_sum
        n_a += t.n_a
        n_leap += t.n_leap
        max_err = max(max_err, t.max_err)
        if t.divergent:
            divergent = True
        if t.s and t.n > 0 and rng.uniform() < t.n / n:
            th_s, lp_s, g_s, h_s = t.th_s, t.lp_s, t.g_s, t.h_s
        n += t.n
        s = t.s and not _uturn(th_m, th_p, r_m, r_p, inv_mass)
        j += 1
    stats = {
        "accept_prob": a_sum / n_a if n_a else 0.0,
        "is_divergent": divergent,
        "energy": h_s,
        "energy_error": max_err,
        "tree_depth": j,
        "n_leapfrog": n_leap,
    }
    return th_s, lp_s, g_s, stats


# -- adaptation ---------------------------------------------------------------


class DualAveraging:
    """Nesterov dual averaging of ``log(step_size)`` towards a target acceptance rate."""

    def __init__(self, eps0, target_accept, gamma=DA_GAMMA, t0=DA_T0, kappa=DA_KAPPA):
        self.target = target_accept
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.h_bar = 0.0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_prob):
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def step_size(self):
        return math.exp(self.log_eps)

    @property
    def final_step_size(self):
        return math.exp(self.log_eps_bar)


def warmup_windows(n_warmup):
    """Metric-adaptation windows ``[(start, end), ...]`` within the warmup iterations.

    An initial 15% and a terminal 10% adapt the step size only; windows in
    between start at 25 iterations and double, the last one stretched to the
    terminal buffer.
    """
    if n_warmup < 20:
        return []
    init = int(math.ceil(INIT_BUFFER * n_warmup))
    term_start = n_warmup - int(math.ceil(TERM_BUFFER * n_warmup))
    out = []
    start, w = init, BASE_WINDOW
    while start < term_start:
        end = start + w
        if end + 2 * w > term_start:
            end = term_start
        out.append((start, end))
        start = end
        w *= 2
    return out


def regularized_variance(x):
    """Diagonal inverse-metric estimate from window draws, shrunk towards 1e-3."""
    n = x.shape[0]
    var = np.var(x, axis=0, ddof=1) if n > 1 else np.ones(x.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def find_reasonable_step(target, theta, lp, grad, inv_mass, rng, eps=1.0):
    """Double or halve ``eps`` until one leapfrog step's acceptance crosses 0.5."""
    r = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    h0 = -lp + _kinetic(r, inv_mass)

    def log_p(e):
        _, r1, lp1, _ = _leapfrog(target, theta, r, grad, e, inv_mass)
        if lp1 == -math.inf:
            return -math.inf
        return h0 - (-lp1 + _kinetic(r1, inv_mass))

    lp_acc = log_p(eps)
    direction = 1.0 if lp_acc > math.log(0.5) else -1.0
    for _ in range(100):
        if direction > 0 and not lp_acc > math.log(0.5):
            break
        if direction < 0 and not lp_acc < math.log(0.5):
            break
        eps = eps * 2.0**direction
        if eps < 1e-10 or eps > 1e7:
            break
        lp_acc = log_p(eps)
    return float(min(max(eps, 1e-10), 1e7))


# -- initialisation -------------------------------------------------------------


def _init_one(target, rng, radius=INIT_RADIUS, tries=INIT_TRIES):
    for _ in range(tries):
        theta = rng.uniform(-radius, radius, target.dim)
        lp, g = _eval(target, theta)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return theta, lp, g
    raise InitFailure(f"no finite starting point after {tries} draws from [-{radius}, {radius}]^{target.dim}")


def init_points(target, config: SamplerConfig, rng):
    """Draw one starting point per chain uniformly from ``[-2, 2]^dim``.

    Each draw is retried until value and gradient are finite.

    Raises
    ------
    InitFailure
        After 100 rejected draws for a chain.
    """
    return [_init_one(target, rng)[0] for _ in range(config.n_chains)]


def chain_rng(seed, chain):
    """Independent counter-based stream for ``chain`` under ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain)])))


# -- driver -------------------------------------------------------------------


def _empty_stats(n):
    return {
        "lp": np.zeros(n),
        "accept_prob": np.zeros(n),
        "is_divergent": np.zeros(n, dtype=bool),
        "energy": np.full(n, np.nan),
        "energy_error": np.zeros(n),
        "tree_depth": np.zeros(n, dtype=int),
        "n_leapfrog": np.zeros(n, dtype=int),
        "step_size": np.zeros(n),
    }


def _store(stats, i, lp, st, step):
    stats["lp"][i] = lp
    stats["accept_prob"][i] = st["accept_prob"]
    stats["is_divergent"][i] = st.get("is_divergent", False)
    stats["energy"][i] = st.get("energy", np.nan)
    stats["energy_error"][i] = st.get("energy_error", 0.0)
    stats["tree_depth"][i] = st.get("tree_depth", 0)
    stats["n_leapfrog"][i] = st.get("n_leapfrog", 0)
    stats["step_size"][i] = step


def run_chain(target, config: SamplerConfig, chain: int, init=None) -> ChainOutput:
    """Run warmup and sampling for one chain."""
    rng = chain_rng(config.seed, chain)
    if init is None:
        theta, lp, grad = _init_one(target, rng)
    else:
        theta = np.array(init, dtype=float)
        lp, grad = _eval(target, theta)
        if not math.isfinite(lp):
            raise InitFailure(f"chain {chain}: initial point has non-finite log density")
    dim = target.dim
    n_w, n_d = config.n_warmup, config.n_draws
    warm = np.empty((n_w, dim))
    draws = np.empty((n_d, dim))
    wstats, dstats = _empty_stats(n_w), _empty_stats(n_d)
    alg = config.algorithm
    inv_mass = np.ones(dim)
    windows = warmup_windows(n_w) if config.adapt_metric else []
    ends = {e: s for s, e in windows}
    delta = config.divergence_delta

    if alg in ("HMC", "NUTS"):
        if config.step_size is not None:
            eps = float(config.step_size)
        else:
            eps = find_reasonable_step(target, theta, lp, grad, inv_mass, rng)
        da = DualAveraging(eps, config.target_accept)

        def transition(theta, lp, grad, eps):
            if alg == "NUTS":
                return _nuts(target, theta, lp, grad, eps, inv_mass, config.max_tree_depth, rng, delta)
            if config.step_jitter > 0:
                eps = eps * (1.0 + config.step_jitter * (2.0 * rng.uniform() - 1.0))
            return _hmc(target, theta, lp, grad, eps, config.hmc_L, inv_mass, rng, delta)

        for i in range(n_w):
            theta, lp, grad, st = transition(theta, lp, grad, eps)
            warm[i] = theta
            _store(wstats, i, lp, st, eps)
            eps = da.update(st["accept_prob"])
            if i + 1 in ends:
                inv_mass = regularized_variance(warm[ends[i + 1]: i + 1])
                eps = find_reasonable_step(target, theta, lp, grad, inv_mass, rng, eps)
                da.restart(eps)
        if n_w > 0:
            eps = da.final_step_size
        for i in range(n_d):
            div = False
            n_leap = 0
            for _ in range(config.thin):
                theta, lp, grad, st = transition(theta, lp, grad, eps)
                div = div or st["is_divergent"]
                n_leap += st["n_leapfrog"]
            st["is_divergent"] = div
            st["n_leapfrog"] = n_leap
            draws[i] = theta
            _store(dstats, i, lp, st, eps)
        step_out = eps
    else:
        base = np.full(dim, 2.38 / math.sqrt(dim)) if config.rwm_sigma is None else \
            np.broadcast_to(np.asarray(config.rwm_sigma, dtype=float), (dim,)).copy()
        scale = 1.0
        if alg == "MH" and config.mh_proposal == "langevin":
            target_rate = MALA_ACCEPT
        else:
            target_rate = RWM_ACCEPT_1D if dim == 1 else RWM_ACCEPT
        sd = np.ones(dim)

        def make_step(scale, sd):
            sigma = scale * base * sd
            if alg == "RWM":
                return lambda th, l: _rwm(target, th, sigma, rng, l)
            if config.mh_proposal == "gaussian":
                prop = GaussianProposal(sigma)
            elif config.mh_proposal == "lognormal":
                prop = LogNormalProposal(sigma)
            else:
                prop = LangevinProposal(target, scale * float(np.mean(base)), sd * sd)
            return lambda th, l: _mh(target, th, prop, rng, l)

        step = make_step(scale, sd)
        log_scale = 0.0
        for i in range(n_w):
            theta, alpha, _, lp = step(theta, lp)
            warm[i] = theta
            _store(wstats, i, lp, {"accept_prob": alpha}, scale)
            # Robbins-Monro on the log scale
            log_scale += (alpha - target_rate) / (i + 1) ** 0.6
            scale = math.exp(log_scale)
            if i + 1 in ends:
                sd = np.sqrt(regularized_variance(warm[ends[i + 1]: i + 1]))
            step = make_step(scale, sd)
        for i in range(n_d):
            for _ in range(config.thin):
                theta, alpha, _, lp = step(theta, lp)
            draws[i] = theta
            _store(dstats, i, lp, {"accept_prob": alpha}, scale)
        step_out = scale
        inv_mass = sd * sd

    if hasattr(target, "constrained_draws"):
        constrained = target.constrained_draws(draws)
    else:
        constrained = draws.copy()
    names = target.param_names() if hasattr(target, "param_names") else [f"x[{i + 1}]" for i in range(dim)]
    return ChainOutput(
        chain=chain,
        draws_unconstrained=draws,
        draws_constrained=constrained,
        stats=dstats,
        warmup_unconstrained=warm,
        warmup_stats=wstats,
        param_names=list(names),
        step_size=float(step_out),
        inv_mass=inv_mass,
        algorithm=alg,
    )


def run_chains(target, config: SamplerConfig, inits=None) -> list:
    """Run ``config.n_chains`` independent chains.

    Each chain has its own random stream derived from ``(seed, chain)``, so
    results are identical whether chains run sequentially or on threads.
    """
    config.validate()
    if inits is not None and len(inits) != config.n_chains:
        raise ConfigError("need one initial point per chain")
    jobs = [(c, None if inits is None else inits[c]) for c in range(config.n_chains)]
    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            return list(pool.map(lambda a: run_chain(target, config, *a), jobs))
    return [run_chain(target, config, c, init) for c, init in jobs]
