"""Adaptive Dormand-Prince 5(4) integration with forward sensitivities.

The integrator is written once and instantiated twice: a numba-compiled copy
used when the right-hand side and both Jacobians are ``numba.njit`` functions,
and a plain-Python copy for arbitrary callables. Both share the same step
control, so results agree to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numba
import numpy as np
from numba.core.dispatcher import Dispatcher

from . import dual
from .errors import MaxStepsExceeded, NonFiniteState

# Dormand-Prince 5(4) tableau
C2, C3, C4, C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
B1, B3, B4, B5, B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
E1, E3, E4, E5, E6, E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)

# PI controller
SAFETY = 0.9
ALPHA = 0.7 / 5.0
BETA = 0.4 / 5.0
FAC_MIN = 0.2
FAC_MAX = 10.0

STATUS_OK = 0
STATUS_MAX_STEPS = 1
STATUS_NONFINITE = 2


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    max_steps: int = 1_000_000
    initial_step: Optional[float] = None

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("solver tolerances must be strictly positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ValueError("initial_step must be positive")


@dataclass(frozen=True)
class ForcingSchedule:
    """Piecewise-constant, right-continuous forcing.

    ``values[0]`` applies before ``breakpoints[0]``, ``values[k]`` on
    ``[breakpoints[k-1], breakpoints[k])`` and ``values[-1]`` afterwards.
    """

    breakpoints: tuple = ()
    values: tuple = (0.0,)

    def __post_init__(self):
        b = tuple(float(x) for x in self.breakpoints)
        v = tuple(float(x) for x in self.values)
        if len(v) != len(b) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value=0.0):
        return cls((), (value,))

    @classmethod
    def from_intervals(cls, intervals, on=1.0, off=0.0):
        """Build an on/off schedule from ``(t_on, t_off)`` pairs."""
        bps, vals = [], [off]
        for t_on, t_off in sorted(intervals):
            if bps and t_on < bps[-1]:
                raise ValueError("treatment intervals overlap")
            if bps and t_on == bps[-1]:
                # back-to-back intervals merge
                bps.pop()
                vals.pop()
            else:
                bps.append(float(t_on))
                vals.append(on)
            bps.append(float(t_off))
            vals.append(off)
        return cls(tuple(bps), tuple(vals))

    def value_at(self, t):
        return self.values[int(np.searchsorted(self.breakpoints, t, side="right"))]

    def arrays(self):
        arr = self.__dict__.get("_arrays")
        if arr is None:
            arr = (np.asarray(self.breakpoints, dtype=float), np.asarray(self.values, dtype=float))
            object.__setattr__(self, "_arrays", arr)
        return arr


@dataclass(frozen=True)
class OdeSystem:
    """A first-order ODE system ``dy/dt = rhs(t, y, xi, u)``.

    Parameters
    ----------
    dim : int
        Number of state variables.
    n_params : int
        Length of the ODE-parameter vector ``xi``.
    rhs : callable
        ``rhs(t, y, xi, u) -> array`` where ``u`` is the current forcing value.
    jac_y, jac_xi : callable, optional
        Jacobians of ``rhs`` with the same signature. When either is missing,
        both are obtained by forward-mode dual numbers.
    t0 : float
        Initial time.
    y0 : sequence of float
        Fixed initial state; entries listed in ``y0_param`` are overridden.
    y0_param : sequence of int
        For each state, the index into ``xi`` holding its initial value, or -1
        if the initial value is fixed.
    kernels : tuple, optional
        ``(rhs_into, jac_y_into, jac_xi_into)``: numba-compiled versions that
        write into a trailing ``out`` argument. When present the compiled
        integrator is used. See :meth:`from_kernels`.
    """

    dim: int
    n_params: int
    rhs: Callable
    jac_y: Optional[Callable] = None
    jac_xi: Optional[Callable] = None
    t0: float = 0.0
    y0: tuple = ()
    y0_param: tuple = ()
    state_names: tuple = ()
    param_names: tuple = ()
    kernels: Optional[tuple] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        y0 = tuple(float(v) for v in self.y0) if self.y0 else (0.0,) * self.dim
        idx = tuple(int(i) for i in self.y0_param) if self.y0_param else (-1,) * self.dim
        if len(y0) != self.dim or len(idx) != self.dim:
            raise ValueError("y0 and y0_param must have length dim")
        if any(i >= self.n_params for i in idx):
            raise ValueError("y0_param index out of range")
        if self.kernels is not None and not all(isinstance(k, Dispatcher) for k in self.kernels):
            raise TypeError("kernels must be numba-compiled functions")
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y0_param", idx)

    @classmethod
    def from_kernels(cls, dim, n_params, rhs_into, jac_y_into, jac_xi_into, **kwargs):
        """Build a system from in-place compiled kernels.

        Kernels have signature ``f(t, y, xi, u, out)``. Jacobian kernels may
        leave structural zeros unwritten. Their pure-Python versions must also
        accept object arrays so that dual numbers can flow through them.
        """
        return cls(
            dim=dim,
            n_params=n_params,
            rhs=_VectorRhs(rhs_into, (dim,)),
            jac_y=_VectorRhs(jac_y_into, (dim, dim)),
            jac_xi=_VectorRhs(jac_xi_into, (dim, n_params)),
            kernels=(rhs_into, jac_y_into, jac_xi_into),
            **kwargs,
        )

    def with_initial(self, y0):
        return replace(self, y0=tuple(float(v) for v in y0))

    def initial_state(self, xi):
        y = np.array(self.y0, dtype=float)
        for k, i in enumerate(self.y0_param):
            if i >= 0:
                y[k] = xi[i]
        return y

    def initial_sensitivity(self):
        s = np.zeros((self.dim, self.n_params))
        for k, i in enumerate(self.y0_param):
            if i >= 0:
                s[k, i] = 1.0
        return s

    @property
    def compiled(self):
        return self.kernels is not None

    def jacobians(self, t, y, xi, u=0.0):
        """Return ``(df/dy, df/dxi)``, analytically if available."""
        if self.jac_y is not None and self.jac_xi is not None:
            return (
                np.asarray(self.jac_y(t, y, xi, u), dtype=float),
                np.asarray(self.jac_xi(t, y, xi, u), dtype=float),
            )
        return dual.rhs_jacobians(self.rhs, t, y, xi, u)


class _VectorRhs:
    """Returning-style wrapper around an in-place kernel.

    Uses the kernel's pure-Python body so that dual numbers work.
    """

    def __init__(self, kernel, shape):
        self.kernel = kernel
        self.shape = shape

    def __call__(self, t, y, xi, u):
        py = self.kernel.py_func
        if y.dtype == object or np.asarray(xi).dtype == object:
            out = np.zeros(self.shape, dtype=object)
            out[...] = 0.0
            py(t, y, xi, u, out)
            return out
        out = np.zeros(self.shape)
        self.kernel(t, np.asarray(y, dtype=float), np.asarray(xi, dtype=float), float(u), out)
        return out


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    sensitivities: Optional[np.ndarray] = None
    n_steps: int = 0


def _build(decorate, compiled):
    helper = numba.njit(inline="always", error_model="numpy") if compiled else decorate
    if compiled:
        @helper
        def combine(out, z, hs, coef, K, n):
            for i in range(z.size):
                acc = 0.0
                for j in range(n):
                    acc += coef[j] * K[j, i]
                out[i] = z[i] + hs * acc

        @helper
        def sens_rhs(out, jy, jx, z, dim, nxi):
            # dS/dt = Jy S + Jxi, S stored row-major after the state
            for a in range(dim):
                for b in range(nxi):
                    acc = jx[a, b]
                    for c in range(dim):
                        acc += jy[a, c] * z[dim + c * nxi + b]
                    out[dim + a * nxi + b] = acc

        @helper
        def zero(a):
            for i in range(a.shape[0]):
                for j in range(a.shape[1]):
                    a[i, j] = 0.0
    else:
        def combine(out, z, hs, coef, K, n):
            out[:] = z + hs * (coef[:n] @ K[:n])

        def sens_rhs(out, jy, jx, z, dim, nxi):
            s = z[dim:].reshape(dim, nxi)
            out[dim:] = (jy @ s + jx).ravel()

        def zero(a):
            a[...] = 0.0

    @helper
    def aug_rhs(out, rhs, jac_y, jac_xi, sens, t, z, xi, u, dim, nxi, jy, jx):
        y = z[:dim]
        rhs(t, y, xi, u, out[:dim])
        if sens:
            zero(jy)
            zero(jx)
            jac_y(t, y, xi, u, jy)
            jac_xi(t, y, xi, u, jx)
            sens_rhs(out, jy, jx, z, dim, nxi)

    @helper
    def all_finite(v):
        for i in range(v.size):
            if not math.isfinite(v[i]):
                return False
        return True

    @helper
    def err_norm(err, z0, z1, rtol, atol):
        m = 0.0
        for i in range(err.size):
            sc = atol + rtol * max(abs(z0[i]), abs(z1[i]))
            v = abs(err[i]) / sc
            if not v <= m:
                # NaN propagates here as well
                m = v
        return m

    @helper
    def initial_step(rhs, jac_y, jac_xi, sens, t0, z0, f0, xi, u, dim, nxi, jy, jx, rtol, atol, span):
        nz = z0.size
        d0 = 0.0
        d1 = 0.0
        for i in range(nz):
            sc = atol + rtol * abs(z0[i])
            d0 += (z0[i] / sc) ** 2
            d1 += (f0[i] / sc) ** 2
        d0 = math.sqrt(d0 / nz)
        d1 = math.sqrt(d1 / nz)
        if d0 < 1e-5 or d1 < 1e-5:
            h0 = 1e-6
        else:
            h0 = 0.01 * d0 / d1
        h0 = min(h0, span)
        z1 = z0 + h0 * f0
        f1 = np.empty(nz)
        aug_rhs(f1, rhs, jac_y, jac_xi, sens, t0 + h0, z1, xi, u, dim, nxi, jy, jx)
        d2 = 0.0
        for i in range(nz):
            sc = atol + rtol * abs(z0[i])
            d2 += ((f1[i] - f0[i]) / sc) ** 2
        d2 = math.sqrt(d2 / nz) / h0
        if not math.isfinite(d2):
            return h0
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
        return min(100.0 * h0, h1, span)

    @decorate
    def integrate(rhs, jac_y, jac_xi, sens, xi, z0, t0, ts, breaks, fvals, rtol, atol, max_steps, h_init):
        nxi = xi.size
        nz = z0.size
        dim = nz // (1 + nxi) if sens else nz
        nt = ts.size
        out = np.empty((nt, nz))
        jy = np.zeros((dim, dim))
        jx = np.zeros((dim, nxi))
        A = np.array([
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [A21, 0.0, 0.0, 0.0, 0.0, 0.0],
            [A31, A32, 0.0, 0.0, 0.0, 0.0],
            [A41, A42, A43, 0.0, 0.0, 0.0],
            [A51, A52, A53, A54, 0.0, 0.0],
            [A61, A62, A63, A64, A65, 0.0],
            [B1, 0.0, B3, B4, B5, B6],
        ])
        C = np.array([0.0, C2, C3, C4, C5, 1.0, 1.0])
        E = np.array([E1, 0.0, E3, E4, E5, E6, E7])
        zeros = np.zeros(nz)

        # merged stopping points: output times, then breakpoints inside (t0, t_end)
        t_end = ts[nt - 1]
        nstop = nt
        for b in breaks:
            if b > t0 and b < t_end:
                nstop += 1
        stops = np.empty(nstop)
        out_idx = np.full(nstop, -1, dtype=np.int64)
        i = 0
        j = 0
        k = 0
        while i < nt or j < breaks.size:
            if j >= breaks.size or (i < nt and ts[i] <= breaks[j]):
                stops[k] = ts[i]
                out_idx[k] = i
                k += 1
                i += 1
            else:
                b = breaks[j]
                j += 1
                if b > t0 and b < t_end and not (i < nt and ts[i] == b):
                    stops[k] = b
                    k += 1

        K = np.empty((7, nz))
        ztmp = np.empty(nz)
        znew = np.empty(nz)
        errv = np.empty(nz)
        t = t0
        z = z0.copy()
        fi = 0
        while fi < breaks.size and breaks[fi] <= t:
            fi += 1
        u = fvals[fi]
        aug_rhs(K[0], rhs, jac_y, jac_xi, sens, t, z, xi, u, dim, nxi, jy, jx)
        if not all_finite(K[0]):
            return STATUS_NONFINITE, out, 0
        h = h_init
        if h <= 0.0:
            span = 1.0
            for q in range(k):
                if stops[q] > t:
                    span = stops[q] - t
                    break
            h = initial_step(rhs, jac_y, jac_xi, sens, t, z, K[0].copy(), xi, u, dim, nxi, jy, jx,
                             rtol, atol, span)
        err_prev = 1e-4
        n_steps = 0
        for q in range(k):
            target = stops[q]
            rejected = False
            while t < target:
                if n_steps >= max_steps:
                    return STATUS_MAX_STEPS, out, n_steps
                n_steps += 1
                remaining = target - t
                if remaining <= 1e-13 * max(1.0, abs(t)):
                    # stop at rounding distance: treat as already reached
                    t = target
                    break
                landing = False
                hs = h
                if hs >= remaining * (1.0 - 1e-12):
                    hs = remaining
                    landing = True
                if hs <= 1e-14 * max(1.0, abs(t)):
                    return STATUS_MAX_STEPS, out, n_steps
                for st in range(1, 7):
                    # written out rather than via aug_rhs: the call overhead is
                    # comparable to the arithmetic for small systems
                    zs = znew if st == 6 else ztmp
                    combine(zs, z, hs, A[st], K, st)
                    tst = t + C[st] * hs
                    ys = zs[:dim]
                    rhs(tst, ys, xi, u, K[st, :dim])
                    if sens:
                        zero(jy)
                        zero(jx)
                        jac_y(tst, ys, xi, u, jy)
                        jac_xi(tst, ys, xi, u, jx)
                        sens_rhs(K[st], jy, jx, zs, dim, nxi)
                combine(errv, zeros, hs, E, K, 7)
                err = err_norm(errv, z, znew, rtol, atol)
                if not math.isfinite(err):
                    h = hs * FAC_MIN
                    rejected = True
                    continue
                if err <= 1.0:
                    if err == 0.0:
                        fac = FAC_MAX
                    else:
                        fac = SAFETY * err ** (-ALPHA) * err_prev**BETA
                        fac = min(FAC_MAX, max(FAC_MIN, fac))
                    if rejected:
                        fac = min(fac, 1.0)
                    err_prev = max(err, 1e-4)
                    t = target if landing else t + hs
                    for ii in range(nz):
                        z[ii] = znew[ii]
                        K[0, ii] = K[6, ii]
                    # a truncated landing step must not shrink the next proposal
                    h_next = hs * fac
                    if landing and h_next < h:
                        h_next = h
                    h = h_next
                    rejected = False
                else:
                    h = hs * max(FAC_MIN, SAFETY * err ** (-ALPHA))
                    rejected = True
            if not all_finite(z):
                return STATUS_NONFINITE, out, n_steps
            if out_idx[q] >= 0:
                out[out_idx[q]] = z
            fi_old = fi
            while fi < breaks.size and breaks[fi] <= t:
                fi += 1
            if fi != fi_old:
                # forcing switches here; the FSAL derivative is stale
                u = fvals[fi]
                aug_rhs(K[0], rhs, jac_y, jac_xi, sens, t, z, xi, u, dim, nxi, jy, jx)
                if not all_finite(K[0]):
                    return STATUS_NONFINITE, out, n_steps
        return STATUS_OK, out, n_steps

    return integrate


_integrate_compiled = _build(numba.njit(cache=True, error_model="numpy"), True)
_integrate_python = _build(lambda f: f, False)

_ENTRIES: dict = {}


def make_entry(rhs_into, jac_y_into, jac_xi_into):
    """Compile an integrator entry point specialised to one set of kernels.

    Passing jitted functions as runtime arguments costs tens of microseconds
    per call in type dispatch; binding them at compile time avoids that.
    """

    integ = _integrate_compiled

    @numba.njit
    def entry(sens, xi, z0, t0, ts, breaks, fvals, rtol, atol, max_steps, h0):
        return integ(rhs_into, jac_y_into, jac_xi_into, sens, xi, z0, t0, ts, breaks, fvals,
                     rtol, atol, max_steps, h0)

    return entry


def _entry_for(kernels):
    entry = _ENTRIES.get(kernels)
    if entry is None:
        entry = _ENTRIES[kernels] = make_entry(*kernels)
    return entry


def _python_kernels(system):
    rhs = system.rhs

    def rhs_into(t, y, xi, u, out):
        out[:] = rhs(t, y, xi, u)

    if system.jac_y is not None and system.jac_xi is not None:
        jy_f, jx_f = system.jac_y, system.jac_xi

        def jy_into(t, y, xi, u, out):
            out[:] = jy_f(t, y, xi, u)

        def jx_into(t, y, xi, u, out):
            out[:] = jx_f(t, y, xi, u)
    else:
        cache = {}

        def _jac(t, y, xi, u):
            key = (t, y.tobytes(), u)
            if key not in cache:
                cache.clear()
                cache[key] = dual.rhs_jacobians(rhs, t, y, xi, u)
            return cache[key]

        def jy_into(t, y, xi, u, out):
            out[:] = _jac(t, y, xi, u)[0]

        def jx_into(t, y, xi, u, out):
            out[:] = _jac(t, y, xi, u)[1]

    return rhs_into, jy_into, jx_into


def integrate_raw(system: OdeSystem, xi, ts, config: SolverConfig, forcing: Optional[ForcingSchedule],
                  sens: bool, y0=None):
    """Low-level integration without argument validation.

    Returns ``(status, out, n_steps)`` with ``out`` of shape
    ``(len(ts), dim * (1 + n_params))`` when ``sens`` else ``(len(ts), dim)``.
    Callers that evaluate the same system many times (target densities) use
    this to skip the checks done by :func:`solve`.
    """
    y0 = system.initial_state(xi) if y0 is None else y0
    if sens:
        z0 = np.concatenate([y0, system.initial_sensitivity().ravel()])
    else:
        z0 = np.asarray(y0, dtype=float)
    if forcing is None:
        breaks, fvals = _NO_BREAKS, _ZERO_FORCING
    else:
        breaks, fvals = forcing.arrays()
    h0 = config.initial_step if config.initial_step is not None else -1.0
    if system.kernels is not None:
        return _entry_for(system.kernels)(
            sens, xi, z0, float(system.t0), ts, breaks, fvals,
            config.rel_tol, config.abs_tol, int(config.max_steps), float(h0),
        )
    rhs, jy, jx = _python_kernels(system)
    return _integrate_python(
        rhs, jy, jx, sens, xi, z0, float(system.t0), ts, breaks, fvals,
        config.rel_tol, config.abs_tol, int(config.max_steps), float(h0),
    )


_NO_BREAKS = np.zeros(0)
_ZERO_FORCING = np.zeros(1)


def check_status(status, config):
    if status == STATUS_MAX_STEPS:
        raise MaxStepsExceeded(f"exceeded {config.max_steps} steps")
    if status == STATUS_NONFINITE:
        raise NonFiniteState("right-hand side produced a non-finite value")


def _run(system: OdeSystem, xi, ts, config: Optional[SolverConfig], forcing: Optional[ForcingSchedule], sens: bool):
    config = config or SolverConfig()
    xi = np.ascontiguousarray(xi, dtype=float)
    ts = np.ascontiguousarray(ts, dtype=float)
    if xi.size != system.n_params:
        raise ValueError(f"expected {system.n_params} ODE parameters, got {xi.size}")
    if not np.all(np.isfinite(xi)):
        raise ValueError("ODE parameters must be finite")
    if ts.ndim != 1 or ts.size == 0:
        raise ValueError("output grid must be a nonempty 1-D array")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("output times must be strictly increasing")
    if ts[0] < system.t0:
        raise ValueError("output times must not precede t0")
    status, out, n = integrate_raw(system, xi, ts, config, forcing, sens)
    check_status(status, config)
    d = system.dim
    traj = Trajectory(times=ts.copy(), states=out[:, :d].copy(), n_steps=n)
    if sens:
        traj.sensitivities = out[:, d:].reshape(ts.size, d, system.n_params).copy()
    return traj


def solve(system: OdeSystem, xi, ts, config: Optional[SolverConfig] = None,
          forcing: Optional[ForcingSchedule] = None) -> Trajectory:
    """Integrate ``system`` and return the states at the output times ``ts``.

    Steps always land exactly on forcing breakpoints so that no step straddles
    a discontinuity.

    Raises
    ------
    MaxStepsExceeded
        If more than ``config.max_steps`` steps are attempted.
    NonFiniteState
        If the right-hand side returns NaN or Inf.
    """
    return _run(system, xi, ts, config, forcing, sens=False)


def solve_with_sensitivities(system: OdeSystem, xi, ts, config: Optional[SolverConfig] = None,
                             forcing: Optional[ForcingSchedule] = None) -> Trajectory:
    """Like :func:`solve`, also returning ``sensitivities[i] = dy(ts[i])/dxi``.

    The forward-sensitivity system ``dS/dt = (df/dy) S + df/dxi`` is integrated
    together with the state under the same error control.
    """
    return _run(system, xi, ts, config, forcing, sens=True)
