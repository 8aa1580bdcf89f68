"""Log-posterior targets on the unconstrained scale.

A target combines the parameter priors, the ODE likelihood and the
log-Jacobian of the constraining transform. Grouped data can be pooled
completely (one parameter vector for all groups), not at all (independent
per-group blocks) or partially (per-group values drawn from a normal
hyper-distribution on the unconstrained scale).

Layout of the unconstrained vector::

    [shared params] [group 1 block] ... [group M block] [mu_k, log tau_k ...]

where each group block holds that group's independent parameters followed by
the latent values of its pooled parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .model import LOG_SQRT_2PI, Dataset, HalfNormal, Model, Normal, parse_prior
from .ode import STATUS_OK, SolverConfig, integrate_raw

POOLING_MODES = ("complete", "none", "partial")


@dataclass(frozen=True)
class PoolingStructure:
    """How parameters are shared across groups.

    Parameters
    ----------
    mode : {"complete", "none", "partial"}
    shared : tuple of str, optional
        Parameters common to all groups. Defaults: everything under
        ``complete``; nothing under ``none``; the noise parameters under
        ``partial``.
    pooled : tuple of str, optional
        Under ``partial``, parameters given the hierarchical prior. Defaults to
        every parameter not in ``shared``. Parameters in neither list are
        independent per group.
    hyper_mu, hyper_tau : dict, optional
        Per-parameter priors for the location (unconstrained scale) and the
        scale of the group-level distribution. Defaults ``normal(0, 1)`` and
        ``halfnormal(1)``.
    centred : bool
        Sample the group values directly instead of standardised offsets.
    """

    mode: str = "complete"
    shared: Optional[tuple] = None
    pooled: Optional[tuple] = None
    hyper_mu: dict = field(default_factory=dict)
    hyper_tau: dict = field(default_factory=dict)
    centred: bool = False

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)

    def resolve(self, model: Model):
        """Return ``(shared, independent, pooled)`` index tuples into the parameter space."""
        names = model.space.names
        for n in tuple(self.shared or ()) + tuple(self.pooled or ()):
            if n not in names:
                raise ConfigError(f"pooling refers to unknown parameter {n!r}")
        if self.mode == "complete":
            shared = names if self.shared is None else tuple(self.shared)
            if set(shared) != set(names):
                raise ConfigError("complete pooling shares every parameter")
            pooled = ()
        elif self.mode == "none":
            shared = () if self.shared is None else tuple(self.shared)
            pooled = ()
            if self.pooled:
                raise ConfigError("no pooling cannot have pooled parameters")
        else:
            noise = tuple(model.observation.noise_params)
            shared = noise if self.shared is None else tuple(self.shared)
            pooled = tuple(n for n in names if n not in shared) if self.pooled is None else tuple(self.pooled)
            if set(shared) & set(pooled):
                raise ConfigError("a parameter cannot be both shared and pooled")
        indep = tuple(n for n in names if n not in shared and n not in pooled)
        idx = model.space.index
        return (
            tuple(sorted(idx(n) for n in shared)),
            tuple(sorted(idx(n) for n in indep)),
            tuple(sorted(idx(n) for n in pooled)),
        )


def as_pooling(spec, model: Model) -> PoolingStructure:
    if spec is None:
        return PoolingStructure(model.default_pooling)
    if isinstance(spec, PoolingStructure):
        return spec
    if isinstance(spec, str):
        return PoolingStructure(spec)
    spec = dict(spec)
    hm = {k: parse_prior(v) for k, v in (spec.pop("hyper_mu", None) or {}).items()}
    ht = {k: parse_prior(v) for k, v in (spec.pop("hyper_tau", None) or {}).items()}
    for key in ("shared", "pooled"):
        if spec.get(key) is not None:
            spec[key] = tuple(spec[key])
    try:
        return PoolingStructure(hyper_mu=hm, hyper_tau=ht, **spec)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class EvalRecord:
    value: float
    gradient: np.ndarray
    numeric_failure: bool = False


class _Unit:
    """Groups that share one ODE solve: same design and same parameters."""

    __slots__ = ("members", "offsets", "system", "times", "forcing", "obs", "n_obs", "weight")

    def __init__(self, model, groups, members, offsets):
        g = groups[0]
        self.members = list(members)
        self.offsets = list(offsets)
        self.system = model.system_for(g)
        self.times = np.ascontiguousarray(g.times, dtype=float)
        self.forcing = g.forcing
        self.obs = np.stack([x.observations for x in groups])
        self.n_obs = g.n_obs
        self.weight = None


def _solve_key(model, group):
    return (group.times.tobytes(), group.forcing, model.system_for(group).y0)


class TargetFn:
    """Log posterior density on the unconstrained scale.

    Use :func:`build_target` to construct. ``eval(theta_u)`` returns the log
    density and its gradient; ``eval_value_only`` skips the sensitivities.
    Solver failures give ``-inf`` with a zero gradient.
    """

    def __init__(self, model: Model, dataset: Dataset, pooling: PoolingStructure, config: SolverConfig,
                 obs_weights=None):
        self.model = model
        self.dataset = dataset
        self.pooling = pooling
        self.config = config
        space = model.space
        self.shared, self.indep, self.pooled = pooling.resolve(model)
        self.n_groups = dataset.n_groups
        n_sh, n_in, n_po = len(self.shared), len(self.indep), len(self.pooled)
        self.block = n_in + n_po
        self.hyper_offset = n_sh + self.n_groups * self.block
        self.dim = self.hyper_offset + 2 * n_po
        # complete pooling lets groups with the same design share one solve
        share = pooling.mode == "complete" or self.block == 0
        units = {}
        off = 0
        for m, g in enumerate(dataset.groups):
            key = _solve_key(model, g) if share else m
            units.setdefault(key, []).append((m, g, off))
            off += g.n_obs
        self._units = [
            _Unit(model, [g for _, g, _ in v], [m for m, _, _ in v], [o for _, _, o in v])
            for v in units.values()
        ]
        self.n_obs = off
        self.obs_weights = None
        if obs_weights is not None:
            w = np.asarray(obs_weights, dtype=float)
            if w.shape != (off,):
                raise DimensionMismatch(f"expected {off} observation weights, got shape {w.shape}")
            if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
                raise ConfigError("observation weights must be finite and nonnegative")
            self.obs_weights = w
            for unit in self._units:
                unit.weight = np.stack([w[o: o + unit.n_obs].reshape(unit.obs.shape[1:]) for o in unit.offsets])
        self._mu_priors = []
        self._tau_priors = []
        for k in self.pooled:
            name = space.names[k]
            self._mu_priors.append(pooling.hyper_mu.get(name, Normal(0.0, 1.0)))
            self._tau_priors.append(pooling.hyper_tau.get(name, HalfNormal(1.0)))
        self._priors = [p.prior for p in space.params]
        self._xi_idx = model.xi_index
        self._noise_idx = model.noise_index
        self._proj = model.projection

    # -- layout -----------------------------------------------------------

    def group_unconstrained(self, theta_u):
        """Per-group unconstrained parameter vectors, shape ``(n_groups, n)``.

        With no groups, one row for the shared parameters is returned.
        """
        u = np.asarray(theta_u, dtype=float)
        n = self.model.space.n
        rows = max(self.n_groups, 1)
        out = np.zeros((rows, n))
        sh = list(self.shared)
        out[:, sh] = u[: len(sh)]
        if self.n_groups == 0:
            return out
        base = len(sh)
        n_in = len(self.indep)
        blocks = u[base: self.hyper_offset].reshape(self.n_groups, self.block)
        out[:, list(self.indep)] = blocks[:, :n_in]
        if self.pooled:
            lat = blocks[:, n_in:]
            mu, tau = self._hyper(u)
            out[:, list(self.pooled)] = lat if self.pooling.centred else mu + tau * lat
        return out

    def group_thetas(self, theta_u):
        """Constrained per-group parameter vectors, shape ``(n_groups, n)``."""
        return self.model.space.constrain_full(self.group_unconstrained(theta_u))[0]

    def _hyper(self, u):
        n_po = len(self.pooled)
        h = u[self.hyper_offset: self.hyper_offset + 2 * n_po]
        return h[0::2], np.exp(h[1::2])

    def param_names(self):
        """Names of the quantities reported by :meth:`constrained_draw`."""
        m = self.model
        names = m.space.names
        out = [m.label(names[k]) for k in self.shared]
        ids = self.dataset.group_ids()
        per_group = list(self.indep) + list(self.pooled)
        for gid in ids:
            out += [f"{m.label(names[k])}[{gid}]" for k in per_group]
        for k in self.pooled:
            out += [f"mu_{m.label(names[k])}", f"tau_{m.label(names[k])}"]
        return out

    def constrained_draw(self, theta_u):
        """Map one unconstrained vector to the reported constrained quantities."""
        u = np.asarray(theta_u, dtype=float)
        th = self.group_thetas(u)
        out = [th[0, list(self.shared)]]
        per_group = list(self.indep) + list(self.pooled)
        if self.n_groups:
            out.append(th[:, per_group].ravel())
        if self.pooled:
            mu, tau = self._hyper(u)
            out.append(np.column_stack([mu, tau]).ravel())
        return np.concatenate(out)

    def constrained_draws(self, theta_u):
        u = np.atleast_2d(theta_u)
        return np.array([self.constrained_draw(r) for r in u]).reshape(u.shape[0], -1)

    # -- evaluation -------------------------------------------------------

    def eval(self, theta_u):
        """Return ``(log_density, gradient)``."""
        r = self._evaluate(theta_u, True)
        return r.value, r.gradient

    def eval_value_only(self, theta_u) -> float:
        return self._evaluate(theta_u, False).value

    def eval_with_diagnostics(self, theta_u) -> EvalRecord:
        return self._evaluate(theta_u, True)

    __call__ = eval

    def _evaluate(self, theta_u, want_grad) -> EvalRecord:
        u = np.asarray(theta_u, dtype=float)
        if u.shape != (self.dim,):
            raise DimensionMismatch(f"expected a vector of length {self.dim}, got shape {u.shape}")
        grad = np.zeros(self.dim)
        if not np.all(np.isfinite(u)):
            return EvalRecord(-math.inf, grad, True)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value, failed = self._accumulate(u, grad, want_grad, None)
        if failed or not math.isfinite(value) or (want_grad and not np.all(np.isfinite(grad))):
            bad_grad = want_grad and not np.all(np.isfinite(grad)) and math.isfinite(value)
            return EvalRecord(-math.inf, np.zeros(self.dim), failed or bad_grad or math.isnan(value))
        return EvalRecord(value, grad, False)

    def _accumulate(self, u, grad, want_grad, pointwise):
        """Add everything into ``grad``; return ``(value, solver_failed)``."""
        space = self.model.space
        ug = self.group_unconstrained(u)
        c, dc, lj, dlj = space.constrain_full(ug)
        gc = np.zeros_like(ug)  # d logp / d theta_c per group
        total = 0.0
        # priors and log-Jacobians on shared and independent parameters
        k_sh = list(self.shared)
        for k in k_sh:
            x = c[0, k]
            lp = self._priors[k].logpdf(x)
            if lp == -math.inf:
                return -math.inf, False
            total += lp + lj[0, k]
            if want_grad:
                grad[k_sh.index(k)] += self._priors[k].grad(x) * dc[0, k] + dlj[0, k]
        base = len(k_sh)
        n_in = len(self.indep)
        for m in range(self.n_groups):
            off = base + m * self.block
            for j, k in enumerate(self.indep):
                x = c[m, k]
                lp = self._priors[k].logpdf(x)
                if lp == -math.inf:
                    return -math.inf, False
                total += lp + lj[m, k]
                if want_grad:
                    grad[off + j] += self._priors[k].grad(x) * dc[m, k] + dlj[m, k]
        if self.pooled:
            total += self._hyper_terms(u, grad, want_grad)
        # likelihood
        failed = False
        for unit in self._units:
            m0 = unit.members[0]
            hit = self._unit_loglik(unit, c[m0], want_grad)
            if hit is None:
                failed = True
                break
            ll_sum, ll, g_theta = hit
            if pointwise is not None:
                for k, o in enumerate(unit.offsets):
                    pointwise[o: o + unit.n_obs] = ll[k]
            total += ll_sum
            if want_grad:
                # members of a shared unit have identical parameters
                gc[m0] += g_theta
        if failed:
            return -math.inf, True
        if want_grad:
            gu = gc * dc
            self._scatter(u, gu, grad)
        return total, False

    def _hyper_terms(self, u, grad, want_grad):
        n_in = len(self.indep)
        base = len(self.shared)
        mu, tau = self._hyper(u)
        total = 0.0
        ho = self.hyper_offset
        for j in range(len(self.pooled)):
            pm, pt = self._mu_priors[j], self._tau_priors[j]
            t = tau[j]
            log_t = u[ho + 2 * j + 1]
            total += pm.logpdf(mu[j]) + pt.logpdf(t) + log_t
            if want_grad:
                grad[ho + 2 * j] += pm.grad(mu[j])
                grad[ho + 2 * j + 1] += pt.grad(t) * t + 1.0
            idx = base + np.arange(self.n_groups) * self.block + n_in + j
            lat = u[idx]
            if self.pooling.centred:
                r = (lat - mu[j]) / t
                total += float(np.sum(-0.5 * r * r - log_t - LOG_SQRT_2PI))
                if want_grad:
                    grad[idx] += -r / t
                    grad[ho + 2 * j] += float(np.sum(r / t))
                    grad[ho + 2 * j + 1] += float(np.sum(r * r - 1.0))
            else:
                total += float(np.sum(-0.5 * lat * lat - LOG_SQRT_2PI))
                if want_grad:
                    grad[idx] += -lat
        return total

    def _scatter(self, u, gu, grad):
        """Chain rule from per-group unconstrained parameters to ``theta_u``."""
        k_sh = list(self.shared)
        if k_sh:
            grad[: len(k_sh)] += gu[:, k_sh].sum(axis=0)
        if self.n_groups == 0:
            return
        base = len(k_sh)
        n_in = len(self.indep)
        blocks = grad[base: self.hyper_offset].reshape(self.n_groups, self.block)
        if n_in:
            blocks[:, :n_in] += gu[:, list(self.indep)]
        if self.pooled:
            g_po = gu[:, list(self.pooled)]
            if self.pooling.centred:
                blocks[:, n_in:] += g_po
            else:
                mu, tau = self._hyper(u)
                lat = u[base: self.hyper_offset].reshape(self.n_groups, self.block)[:, n_in:]
                blocks[:, n_in:] += g_po * tau
                ho = self.hyper_offset
                grad[ho: ho + 2 * len(self.pooled): 2] += g_po.sum(axis=0)
                grad[ho + 1: ho + 2 * len(self.pooled): 2] += (g_po * lat).sum(axis=0) * tau
        grad[base: self.hyper_offset] = blocks.ravel()

    def _unit_loglik(self, unit, theta_c, want_grad):
        """Return ``(sum, per-member pointwise rows, d sum / d theta_c)`` or None on solver failure."""
        xi = np.ascontiguousarray(theta_c[self._xi_idx])
        try:
            status, out, _ = integrate_raw(unit.system, xi, unit.times, self.config, unit.forcing, want_grad)
        except ArithmeticError:
            # user Python right-hand sides may raise at extreme parameters
            return None
        if status != STATUS_OK:
            return None
        d = unit.system.dim
        pred = self._proj @ out[:, :d].T
        obs_model = self.model.observation
        noise = theta_c[self._noise_idx]
        sd = obs_model.sd(pred, noise)
        n_rep = len(unit.members)
        if not (np.all(sd > 0) and np.all(np.isfinite(pred))):
            return -math.inf, np.full((n_rep, unit.n_obs), -math.inf), np.zeros_like(theta_c)
        z = (unit.obs - pred) / sd
        ll = -0.5 * z * z - np.log(sd) - LOG_SQRT_2PI
        w = unit.weight
        total = float(ll.sum()) if w is None else float((w * ll).sum())
        g = None
        if want_grad:
            g = np.zeros_like(theta_c)
            sens = out[:, d:].reshape(unit.times.size, d, xi.size)
            dpred = np.einsum("cd,tdk->ctk", self._proj, sens)
            dsd_dpred, dsd_dnoise = obs_model.sd_grads(pred, noise)
            if w is None:
                dll_dsd = ((z * z).sum(axis=0) - n_rep) / sd
                dll_dpred = z.sum(axis=0) / sd + dll_dsd * dsd_dpred
            else:
                dll_dsd = ((w * z * z).sum(axis=0) - w.sum(axis=0)) / sd
                dll_dpred = (w * z).sum(axis=0) / sd + dll_dsd * dsd_dpred
            g[self._xi_idx] += np.einsum("ct,ctk->k", dll_dpred, dpred)
            for j, dn in enumerate(dsd_dnoise):
                g[self._noise_idx[j]] += float(np.sum(dll_dsd * dn))
        return total, ll.reshape(n_rep, -1), g

    # -- pointwise --------------------------------------------------------

    def pointwise_loglik(self, theta_u, dataset: Optional[Dataset] = None):
        """Per-observation log-likelihood terms in ``dataset.labels()`` order.

        ``dataset`` defaults to the fitted data. Another dataset may be given
        (for held-out observations); its groups are matched by id.
        """
        u = np.asarray(theta_u, dtype=float)
        if dataset is None:
            out = np.empty(self.n_obs)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value, failed = self._accumulate(u, np.zeros(self.dim), False, out)
            if failed:
                out[:] = np.nan
            return out
        return loglik_for_dataset(self, u, dataset)


def loglik_for_dataset(target: TargetFn, theta_u, dataset: Dataset):
    """Pointwise log-likelihood of ``dataset`` under the group parameters in ``theta_u``.

    Solver failures give NaN entries.
    """
    ids = target.dataset.group_ids()
    th = target.group_thetas(theta_u)
    out = []
    for g in dataset.groups:
        if target.n_groups == 0 or target.pooling.mode == "complete":
            row = th[0]
        elif g.group_id in ids:
            row = th[ids.index(g.group_id)]
        else:
            raise DimensionMismatch(f"group {g.group_id!r} was not part of the fit")
        unit = _Unit(target.model, [g], [0], [0])
        if g.group_id in ids:
            # initial state from the fitted segment, not the held-out one
            unit.system = target.model.system_for(target.dataset.groups[ids.index(g.group_id)])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            hit = target._unit_loglik(unit, row, False)
        out.append(np.full(g.n_obs, np.nan) if hit is None else hit[1][0])
    return np.concatenate(out) if out else np.zeros(0)


def build_target(model: Model, dataset: Dataset, pooling=None, solver_config: Optional[SolverConfig] = None,
                 obs_weights=None) -> TargetFn:
    """Build the log posterior for ``model`` given ``dataset``.

    ``obs_weights`` (one per observation, in ``dataset.labels()`` order)
    scale each likelihood term; a zero weight leaves that observation out.
    Pointwise log-likelihoods stay unweighted.

    Raises
    ------
    DimensionMismatch
        If the dataset channels do not match the model's observed channels.
    ConfigError
        If the pooling specification is invalid.
    """
    if dataset.n_groups and dataset.n_channels != model.n_channels:
        raise DimensionMismatch(f"model {model.name} observes {model.n_channels} channel(s), data has {dataset.n_channels}")
    pooling = as_pooling(pooling, model)
    return TargetFn(model, dataset, pooling, solver_config or SolverConfig(), obs_weights)


__all__ = [
    "PoolingStructure",
    "TargetFn",
    "EvalRecord",
    "build_target",
    "as_pooling",
    "loglik_for_dataset",
]
