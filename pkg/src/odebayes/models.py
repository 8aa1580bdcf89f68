"""Built-in models: bacterial competition, coral bleaching, prostate PSA.

Right-hand sides and Jacobians are compiled with numba; the plain-Python
versions (``.py_func``) also accept dual numbers, which the tests use to
cross-check the hand-written Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numba
import numpy as np

from .errors import UnknownOverride
from .model import (
    AdditiveGaussian,
    AddPropGaussian,
    HalfNormal,
    Model,
    Parameter,
    ParameterSpace,
    Uniform,
    parse_prior,
)
from .ode import OdeSystem

INF = math.inf

# Kernels write into ``out``; Jacobian kernels skip structural zeros.

# -- exponential decay: dy/dt = -theta y ----------------------------------


@numba.njit(cache=True, error_model="numpy")
def decay_rhs(t, y, xi, u, out):
    out[0] = -xi[0] * y[0]


@numba.njit(cache=True, error_model="numpy")
def decay_jac_y(t, y, xi, u, out):
    out[0, 0] = -xi[0]


@numba.njit(cache=True, error_model="numpy")
def decay_jac_xi(t, y, xi, u, out):
    out[0, 0] = -y[0]


# -- two-species competition, shared carrying capacity ------------------------
# xi = (r1, r2, K, y10, y20)


@numba.njit(cache=True, error_model="numpy")
def toy_rhs(t, y, xi, u, out):
    g = 1.0 - (y[0] + y[1]) / xi[2]
    out[0] = xi[0] * y[0] * g
    out[1] = xi[1] * y[1] * g


@numba.njit(cache=True, error_model="numpy")
def toy_jac_y(t, y, xi, u, out):
    r1 = xi[0]
    r2 = xi[1]
    K = xi[2]
    g = 1.0 - (y[0] + y[1]) / K
    out[0, 0] = r1 * g - r1 * y[0] / K
    out[0, 1] = -r1 * y[0] / K
    out[1, 0] = -r2 * y[1] / K
    out[1, 1] = r2 * g - r2 * y[1] / K


@numba.njit(cache=True, error_model="numpy")
def toy_jac_xi(t, y, xi, u, out):
    r1 = xi[0]
    r2 = xi[1]
    K = xi[2]
    s = y[0] + y[1]
    g = 1.0 - s / K
    out[0, 0] = y[0] * g
    out[0, 2] = r1 * y[0] * s / (K * K)
    out[1, 1] = y[1] * g
    out[1, 2] = r2 * y[1] * s / (K * K)


# -- coral cover: healthy C, bleaching B --------------------------------------
# xi = (alpha, beta, gamma, mu)


@numba.njit(cache=True, error_model="numpy")
def coral_rhs(t, y, xi, u, out):
    a, b, g, m = xi[0], xi[1], xi[2], xi[3]
    C = y[0]
    B = y[1]
    out[0] = a * C * (1.0 - (C + B)) - b * C + g * B
    out[1] = b * C - g * B - m * B


@numba.njit(cache=True, error_model="numpy")
def coral_jac_y(t, y, xi, u, out):
    a, b, g, m = xi[0], xi[1], xi[2], xi[3]
    C = y[0]
    B = y[1]
    out[0, 0] = a * (1.0 - C - B) - a * C - b
    out[0, 1] = -a * C + g
    out[1, 0] = b
    out[1, 1] = -g - m


@numba.njit(cache=True, error_model="numpy")
def coral_jac_xi(t, y, xi, u, out):
    C = y[0]
    B = y[1]
    out[0, 0] = C * (1.0 - C - B)
    out[0, 1] = -C
    out[0, 2] = B
    out[1, 1] = C
    out[1, 2] = -B
    out[1, 3] = -B


# -- prostate cancer: stem S, differentiated D, PSA P; u = treatment T ------
# xi = (p, lam, alpha, rho, phi)


@numba.njit(cache=True, error_model="numpy")
def prostate_rhs(t, y, xi, u, out):
    p, lam, alpha, rho, phi = xi[0], xi[1], xi[2], xi[3], xi[4]
    S = y[0]
    D = y[1]
    P = y[2]
    tot = S + D
    # S/(S+D) is taken as 0 at the singular point S+D=0
    f = S / tot if tot != 0.0 else 0.0 * S
    out[0] = f * p * lam * S
    out[1] = (1.0 - p * f) * lam * S - alpha * D * u
    out[2] = rho * D - phi * P


@numba.njit(cache=True, error_model="numpy")
def prostate_jac_y(t, y, xi, u, out):
    p, lam, alpha, rho, phi = xi[0], xi[1], xi[2], xi[3], xi[4]
    S = y[0]
    D = y[1]
    tot = S + D
    if tot != 0.0:
        f = S / tot
        fS = D / (tot * tot)
        fD = -S / (tot * tot)
    else:
        f = 0.0
        fS = 0.0
        fD = 0.0
    out[0, 0] = p * lam * (f + S * fS)
    out[0, 1] = p * lam * S * fD
    out[1, 0] = lam * (1.0 - p * f) - p * lam * S * fS
    out[1, 1] = -p * lam * S * fD - alpha * u
    out[2, 1] = rho
    out[2, 2] = -phi


@numba.njit(cache=True, error_model="numpy")
def prostate_jac_xi(t, y, xi, u, out):
    p, lam = xi[0], xi[1]
    S = y[0]
    D = y[1]
    P = y[2]
    tot = S + D
    f = S / tot if tot != 0.0 else 0.0
    out[0, 0] = f * lam * S
    out[0, 1] = f * p * S
    out[1, 0] = -f * lam * S
    out[1, 1] = (1.0 - p * f) * S
    out[1, 2] = -D * u
    out[2, 3] = D
    out[2, 4] = -P


# -- bundles ------------------------------------------------------------------

TOY_TRUTH = {"r1": 0.14, "r2": 0.12, "K": 4.04, "y10": 1.24, "y20": 0.72, "sigma": 0.18}

KINDS = ("toy", "coral", "prostate", "decay")


def _positive(name, scale):
    return Parameter(name, 0.0, INF, HalfNormal(scale))


def _first_psa(system, group):
    y0 = list(system.y0)
    y0[2] = float(group.observations[0, 0])
    return y0


def _decay(initial):
    system = OdeSystem.from_kernels(
        1, 1, decay_rhs, decay_jac_y, decay_jac_xi,
        y0=(initial.get("y0", 1.0),), state_names=("y",), param_names=("theta",),
    )
    space = ParameterSpace([_positive("theta", 1.0), _positive("sigma", 1.0)])
    return Model("decay", system, space, ("theta",), AdditiveGaussian("sigma"), ((0,),), ("y",))


def _toy(initial):
    system = OdeSystem.from_kernels(
        2, 5, toy_rhs, toy_jac_y, toy_jac_xi,
        y0_param=(3, 4), state_names=("y1", "y2"), param_names=("r1", "r2", "K", "y10", "y20"),
    )
    space = ParameterSpace([
        _positive("r1", 1.0),
        _positive("r2", 1.0),
        _positive("K", 10.0),
        _positive("y10", 10.0),
        _positive("y20", 10.0),
        _positive("sigma", 1.0),
    ])
    labels = {"r1": "p[1]", "r2": "p[2]", "K": "p[3]", "y10": "y0[1]", "y20": "y0[2]", "sigma": "sigma"}
    return Model(
        "toy", system, space, ("r1", "r2", "K", "y10", "y20"), AdditiveGaussian("sigma"),
        ((0,), (1,)), ("y1", "y2"), "complete", labels=labels,
    )


def _coral(initial):
    system = OdeSystem.from_kernels(
        2, 4, coral_rhs, coral_jac_y, coral_jac_xi,
        y0=(initial.get("C0", 0.2), initial.get("B0", 0.05)), state_names=("C", "B"),
        param_names=("alpha", "beta", "gamma", "mu"),
    )
    space = ParameterSpace([
        _positive("alpha", 1.0),
        _positive("beta", 1.0),
        _positive("gamma", 1.0),
        _positive("mu", 1.0),
        _positive("sigma", 1.0),
    ])
    return Model(
        "coral", system, space, ("alpha", "beta", "gamma", "mu"), AdditiveGaussian("sigma"),
        ((0, 1),), ("cover",), "complete",
    )


def _prostate(initial):
    system = OdeSystem.from_kernels(
        3, 5, prostate_rhs, prostate_jac_y, prostate_jac_xi,
        y0=(initial.get("S0", 0.05), initial.get("D0", 1.0), initial.get("P0", 1.0)),
        state_names=("S", "D", "P"), param_names=("p", "lam", "alpha", "rho", "phi"),
    )
    space = ParameterSpace([
        Parameter("p", 0.0, 1.0, Uniform(0.0, 1.0)),
        _positive("lam", 1.0),
        _positive("alpha", 1.0),
        _positive("rho", 1.0),
        _positive("phi", 1.0),
        _positive("sigma", 1.0),
        _positive("sigma_prop", 1.0),
    ])
    # P0 comes from the first PSA value of each patient unless fixed explicitly
    init = None if "P0" in initial else _first_psa
    return Model(
        "prostate", system, space, ("p", "lam", "alpha", "rho", "phi"),
        AddPropGaussian("sigma", "sigma_prop"), ((2,),), ("psa",), "none", initial_state=init,
    )


_BUILDERS = {"toy": _toy, "coral": _coral, "prostate": _prostate, "decay": _decay}
_INITIALS = {"toy": (), "coral": ("C0", "B0"), "prostate": ("S0", "D0", "P0"), "decay": ("y0",)}
_ALIASES = {"p[1]": "r1", "p[2]": "r2", "p[3]": "K", "y0[1]": "y10", "y0[2]": "y20"}


def make_model(kind: str, overrides: dict | None = None) -> Model:
    """Build one of the built-in models.

    ``overrides`` may contain ``priors`` (parameter name to prior spec),
    ``initial`` (fixed initial states by name) and ``pooling``. Any unknown
    key or name raises :class:`UnknownOverride`.
    """
    kind = kind.lower()
    if kind not in _BUILDERS:
        raise UnknownOverride(f"unknown model kind {kind!r}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"priors", "initial", "pooling"}
    if unknown:
        raise UnknownOverride(f"unknown override keys: {sorted(unknown)}")
    initial = dict(overrides.get("initial") or {})
    bad = set(initial) - set(_INITIALS[kind])
    if bad:
        raise UnknownOverride(f"{kind} has no fixed initial states {sorted(bad)}")
    model = _BUILDERS[kind](initial)
    space = model.space
    for name, prior in (overrides.get("priors") or {}).items():
        name = _ALIASES.get(name, name) if kind == "toy" else name
        if name not in space.names:
            raise UnknownOverride(f"{kind} has no parameter {name!r}")
        space = space.replace_prior(name, parse_prior(prior))
    model = model.with_space(space)
    if "pooling" in overrides:
        model = replace(model, default_pooling=str(overrides["pooling"]).lower())
    return model
