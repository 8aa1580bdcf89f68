"""Parameters, priors, observation models and datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, OutOfBounds
from .ode import ForcingSchedule, OdeSystem, SolverConfig, solve

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# -- priors ---------------------------------------------------------------


class Prior:
    """Univariate prior on the constrained scale.

    Normalising constants are kept so that log densities are comparable
    across models.
    """

    def logpdf(self, x: float) -> float:
        raise NotImplementedError

    def grad(self, x: float) -> float:
        """Derivative of :meth:`logpdf` with respect to ``x``."""
        raise NotImplementedError

    def in_support(self, x: float) -> bool:
        return True


@dataclass(frozen=True)
class Normal(Prior):
    mu: float = 0.0
    sigma: float = 1.0

    def logpdf(self, x):
        z = (x - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - LOG_SQRT_2PI

    def grad(self, x):
        return -(x - self.mu) / self.sigma**2


@dataclass(frozen=True)
class HalfNormal(Prior):
    sigma: float = 1.0

    def in_support(self, x):
        return x >= 0

    def logpdf(self, x):
        if x < 0:
            return -math.inf
        z = x / self.sigma
        return math.log(2.0) - 0.5 * z * z - math.log(self.sigma) - LOG_SQRT_2PI

    def grad(self, x):
        return -x / self.sigma**2


@dataclass(frozen=True)
class LogNormal(Prior):
    mu: float = 0.0
    sigma: float = 1.0

    def in_support(self, x):
        return x > 0

    def logpdf(self, x):
        if x <= 0:
            return -math.inf
        z = (math.log(x) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(x) - math.log(self.sigma) - LOG_SQRT_2PI

    def grad(self, x):
        return -1.0 / x - (math.log(x) - self.mu) / (self.sigma**2 * x)


@dataclass(frozen=True)
class Uniform(Prior):
    a: float = 0.0
    b: float = 1.0

    def in_support(self, x):
        return self.a <= x <= self.b

    def logpdf(self, x):
        if x < self.a or x > self.b:
            return -math.inf
        return -math.log(self.b - self.a)

    def grad(self, x):
        return 0.0


@dataclass(frozen=True)
class Exponential(Prior):
    rate: float = 1.0

    def in_support(self, x):
        return x >= 0

    def logpdf(self, x):
        if x < 0:
            return -math.inf
        return math.log(self.rate) - self.rate * x

    def grad(self, x):
        return -self.rate


@dataclass(frozen=True)
class Flat(Prior):
    def logpdf(self, x):
        return 0.0

    def grad(self, x):
        return 0.0


_PRIORS = {
    "normal": Normal,
    "halfnormal": HalfNormal,
    "half_normal": HalfNormal,
    "lognormal": LogNormal,
    "uniform": Uniform,
    "exponential": Exponential,
    "flat": Flat,
}


def parse_prior(spec) -> Prior:
    """Build a prior from ``"normal(0, 1)"``-style text or a ``{"dist": ...}`` mapping."""
    if isinstance(spec, Prior):
        return spec
    if isinstance(spec, dict):
        spec = dict(spec)
        name = spec.pop("dist").lower()
        return _PRIORS[name](**spec)
    text = str(spec).strip().lower().replace(" ", "")
    if "(" not in text:
        return _PRIORS[text]()
    name, args = text[:-1].split("(", 1)
    vals = [float(a) for a in args.split(",") if a]
    if name not in _PRIORS:
        raise ValueError(f"unknown prior {name!r}")
    return _PRIORS[name](*vals)


# -- parameter space ------------------------------------------------------


@dataclass(frozen=True)
class Parameter:
    name: str
    lower: float = -math.inf
    upper: float = math.inf
    prior: Prior = field(default_factory=Flat)

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower bound must be below upper bound")


class ParameterSpace:
    """Ordered named parameters with bounds and the bijection onto R^n.

    One-sided bounds use a log transform, two-sided bounds a scaled logistic,
    unbounded parameters the identity.
    """

    def __init__(self, params: Sequence[Parameter]):
        self.params = tuple(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.names = tuple(names)
        self.n = len(self.params)
        self._lo = np.array([p.lower for p in self.params], dtype=float)
        self._hi = np.array([p.upper for p in self.params], dtype=float)
        lo_f, hi_f = np.isfinite(self._lo), np.isfinite(self._hi)
        self._kind = np.where(lo_f & hi_f, 3, np.where(lo_f, 1, np.where(hi_f, 2, 0)))
        self._masks = [self._kind == k for k in range(4)]
        self._lo_in = np.nextafter(self._lo, np.inf)
        self._hi_in = np.nextafter(self._hi, -np.inf)

    def __len__(self):
        return self.n

    def index(self, name: str) -> int:
        return self.names.index(name)

    def replace_prior(self, name, prior) -> "ParameterSpace":
        ps = list(self.params)
        i = self.index(name)
        ps[i] = replace(ps[i], prior=parse_prior(prior))
        return ParameterSpace(ps)

    def unconstrain(self, theta_c) -> np.ndarray:
        theta_c = np.asarray(theta_c, dtype=float)
        if theta_c.shape[-1] != self.n:
            raise DimensionMismatch(f"expected {self.n} parameters, got {theta_c.shape[-1]}")
        if np.any(theta_c <= self._lo) or np.any(theta_c >= self._hi):
            bad = [n for n, v, lo, hi in zip(self.names, theta_c, self._lo, self._hi) if not lo < v < hi]
            raise OutOfBounds(f"parameters on or outside their bounds: {bad}")
        k, lo, hi = self._kind, self._lo, self._hi
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(k == 1, np.log(theta_c - lo), theta_c)
            u = np.where(k == 2, np.log(hi - theta_c), u)
            frac = (theta_c - lo) / (hi - lo)
            u = np.where(k == 3, np.log(frac) - np.log1p(-frac), u)
        return u

    def constrain_with_logjac(self, theta_u):
        """Map to the constrained scale; also return ``log|det dtheta_c/dtheta_u|``."""
        c, dc, lj, _ = self.constrain_full(theta_u)
        return c, float(np.sum(lj))

    def constrain(self, theta_u) -> np.ndarray:
        return self.constrain_full(theta_u)[0]

    def constrain_full(self, theta_u):
        """Return ``(theta_c, dtheta_c/dtheta_u, per-component log-jac, d logjac/du)``."""
        u = np.asarray(theta_u, dtype=float)
        c = u.copy()
        dc = np.ones_like(u)
        lj = np.zeros_like(u)
        dlj = np.zeros_like(u)
        m = self._masks
        if m[1].any() or m[2].any():
            one = m[1] | m[2]
            uo = u[..., one]
            eu = np.exp(uo)
            sign = np.where(m[1][one], 1.0, -1.0)
            c[..., one] = np.where(m[1][one], self._lo[one], self._hi[one]) + sign * eu
            dc[..., one] = sign * eu
            lj[..., one] = uo
            dlj[..., one] = 1.0
        if m[3].any():
            ut = u[..., m[3]]
            lo, width = self._lo[m[3]], self._hi[m[3]] - self._lo[m[3]]
            s = expit(ut)
            c[..., m[3]] = lo + width * s
            dc[..., m[3]] = width * s * (1.0 - s)
            # log s(1-s) = -softplus(-u) - softplus(u)
            lj[..., m[3]] = np.log(width) - np.logaddexp(0.0, -ut) - np.logaddexp(0.0, ut)
            dlj[..., m[3]] = 1.0 - 2.0 * s
        # keep constrained values inside the open support despite rounding
        np.clip(c, self._lo_in, self._hi_in, out=c)
        return c, dc, lj, dlj

    def log_prior(self, theta_c) -> float:
        total = 0.0
        for p, x in zip(self.params, theta_c):
            if not p.lower <= x <= p.upper:
                return -math.inf
            total += p.prior.logpdf(float(x))
        return total

    def log_prior_grad(self, theta_c) -> np.ndarray:
        return np.array([p.prior.grad(float(x)) for p, x in zip(self.params, theta_c)])


# -- observation models ---------------------------------------------------


@dataclass(frozen=True)
class AdditiveGaussian:
    """``y_obs ~ N(pred, sigma^2)``."""

    sigma: str = "sigma"

    @property
    def noise_params(self):
        return (self.sigma,)

    def sd(self, pred, noise):
        return np.full_like(pred, noise[0])

    def sd_grads(self, pred, noise):
        """``(d sd/d pred, d sd/d noise_k for each k)``."""
        return np.zeros_like(pred), (np.ones_like(pred),)


@dataclass(frozen=True)
class AddPropGaussian:
    """``y_obs ~ N(pred, (sigma + pred * sigma_prop)^2)``."""

    sigma: str = "sigma"
    sigma_prop: str = "sigma_prop"

    @property
    def noise_params(self):
        return (self.sigma, self.sigma_prop)

    def sd(self, pred, noise):
        return noise[0] + pred * noise[1]

    def sd_grads(self, pred, noise):
        return np.full_like(pred, noise[1]), (np.ones_like(pred), pred)


def gaussian_loglik(obs, pred, sd):
    """Pointwise normal log density; ``-inf`` wherever ``sd <= 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (obs - pred) / sd
        ll = -0.5 * z * z - np.log(sd) - LOG_SQRT_2PI
    return np.where(sd > 0, ll, -np.inf)


# -- data -----------------------------------------------------------------


@dataclass(frozen=True)
class Group:
    """One time series: ``observations`` has shape ``(n_channels, n_times)``."""

    group_id: str
    times: np.ndarray
    observations: np.ndarray
    forcing: Optional[ForcingSchedule] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        y = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if y.shape[1] != t.size:
            raise DimensionMismatch(f"group {self.group_id}: {y.shape[1]} observations for {t.size} times")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"group {self.group_id}: times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError(f"group {self.group_id}: observations must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "observations", y)

    @property
    def n_channels(self):
        return self.observations.shape[0]

    @property
    def n_obs(self):
        return self.observations.size

    def subset(self, mask) -> "Group":
        mask = np.asarray(mask, dtype=bool)
        return replace(self, times=self.times[mask], observations=self.observations[:, mask])


@dataclass(frozen=True)
class Dataset:
    groups: tuple
    channel_names: tuple = ()

    def __post_init__(self):
        groups = tuple(self.groups)
        ids = [g.group_id for g in groups]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate group ids")
        if groups and len({g.n_channels for g in groups}) > 1:
            raise DimensionMismatch("all groups must have the same number of channels")
        object.__setattr__(self, "groups", groups)

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def n_channels(self):
        return self.groups[0].n_channels if self.groups else 0

    @property
    def n_obs(self):
        return sum(g.n_obs for g in self.groups)

    def group_ids(self):
        return [g.group_id for g in self.groups]

    def labels(self):
        """Observation labels ``(group, time, channel)`` in likelihood order."""
        out = []
        for g in self.groups:
            for c in range(g.n_channels):
                for t in g.times:
                    out.append((g.group_id, float(t), c))
        return out

    def select(self, group_ids) -> "Dataset":
        keep = set(group_ids)
        return replace(self, groups=tuple(g for g in self.groups if g.group_id in keep))

    def map_groups(self, fn) -> "Dataset":
        return replace(self, groups=tuple(fn(g) for g in self.groups))


# -- model bundle ---------------------------------------------------------


@dataclass(frozen=True)
class Model:
    """An ODE model with its parameters, observation model and data layout.

    ``ode_params`` lists, in order, the parameter names that form the ODE
    parameter vector ``xi``. ``channels`` gives, for each observed channel,
    the state indices summed to form the prediction.
    """

    name: str
    system: OdeSystem
    space: ParameterSpace
    ode_params: tuple
    observation: object
    channels: tuple
    channel_names: tuple = ()
    default_pooling: str = "complete"
    initial_state: Optional[Callable] = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        for n in tuple(self.ode_params) + tuple(self.observation.noise_params):
            self.space.index(n)
        if len(self.ode_params) != self.system.n_params:
            raise DimensionMismatch("ode_params length must equal system.n_params")
        object.__setattr__(self, "_xi_idx", np.array([self.space.index(n) for n in self.ode_params], dtype=int))
        object.__setattr__(
            self, "_noise_idx", np.array([self.space.index(n) for n in self.observation.noise_params], dtype=int)
        )
        proj = np.zeros((len(self.channels), self.system.dim))
        for c, comps in enumerate(self.channels):
            for k in comps:
                proj[c, k] = 1.0
        object.__setattr__(self, "_proj", proj)

    @property
    def n_channels(self):
        return len(self.channels)

    @property
    def xi_index(self):
        return self._xi_idx

    @property
    def noise_index(self):
        return self._noise_idx

    @property
    def projection(self):
        """Matrix mapping states to observed channels."""
        return self._proj

    def xi(self, theta_c):
        return np.asarray(theta_c, dtype=float)[self._xi_idx]

    def system_for(self, group: Optional[Group]) -> OdeSystem:
        if group is None or self.initial_state is None:
            return self.system
        return self.system.with_initial(self.initial_state(self.system, group))

    def with_space(self, space: ParameterSpace) -> "Model":
        return replace(self, space=space)

    def label(self, name):
        return self.labels.get(name, name)

    def predict(self, theta_c, times, group: Optional[Group] = None, config=None, forcing=None):
        """Noise-free channel predictions, shape ``(n_channels, n_times)``."""
        system = self.system_for(group)
        if forcing is None and group is not None:
            forcing = group.forcing
        traj = solve(system, self.xi(theta_c), times, config, forcing)
        return self._proj @ traj.states.T


def simulate_data(model: Model, theta_c, times, n_groups=1, seed=0, forcings=None, config=None,
                  group_ids=None) -> Dataset:
    """Simulate noisy observations from ``model``.

    ``theta_c`` is either one parameter vector shared by all groups or an
    array with one row per group. ``forcings`` optionally gives one forcing
    schedule per group.
    """
    theta = np.atleast_2d(np.asarray(theta_c, dtype=float))
    if theta.shape[0] == 1:
        theta = np.repeat(theta, n_groups, axis=0)
    if theta.shape != (n_groups, model.space.n):
        raise DimensionMismatch(f"theta must have shape ({n_groups}, {model.space.n})")
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("time grid must be nonempty")
    rng = np.random.default_rng(seed)
    ids = list(group_ids) if group_ids is not None else [f"g{m + 1}" for m in range(n_groups)]
    groups = []
    for m in range(n_groups):
        forcing = forcings[m] if forcings is not None else None
        pred = model.predict(theta[m], times, None, config, forcing)
        noise = theta[m][model.noise_index]
        sd = model.observation.sd(pred, noise)
        if np.any(sd < 0):
            raise ValueError("negative observation standard deviation")
        eps = rng.standard_normal(pred.shape)
        groups.append(Group(ids[m], times.copy(), pred + sd * eps, forcing))
    return Dataset(tuple(groups), tuple(model.channel_names))
