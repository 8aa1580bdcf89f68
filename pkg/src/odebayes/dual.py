"""Forward-mode automatic differentiation with dual numbers.

Only what right-hand-side functions of small ODE systems need: arithmetic,
powers, comparisons and a handful of elementary functions. ``numpy`` ufuncs
such as ``np.exp`` dispatch to the methods of the same name on object arrays,
so rhs code written against ``numpy`` works unchanged.
"""

from __future__ import annotations

import math

import numpy as np


class Dual:
    """A value together with its gradient with respect to a set of seeds."""

    __slots__ = ("val", "der")

    def __init__(self, val, der):
        self.val = float(val)
        self.der = np.asarray(der, dtype=float)

    def __repr__(self):
        return f"Dual({self.val!r}, {self.der!r})"

    @staticmethod
    def _lift(other, n):
        if isinstance(other, Dual):
            return other
        return Dual(other, np.zeros(n))

    def __add__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        return Dual(self.val + other, self.der)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        return Dual(self.val - other, self.der)

    def __rsub__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        return Dual(other - self.val, -self.der)

    def __mul__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.der * other.val + other.der * self.val)
        return Dual(self.val * other, self.der * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        if isinstance(other, Dual):
            q = self.val / other.val
            return Dual(q, (self.der - q * other.der) / other.val)
        return Dual(self.val / other, self.der / other)

    def __rtruediv__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        q = other / self.val
        return Dual(q, -q / self.val * self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __abs__(self):
        return self if self.val >= 0 else -self

    def __pow__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        if isinstance(other, Dual):
            # a**b = exp(b log a)
            return (other * self.log()).exp()
        if other == 0:
            return Dual(1.0, np.zeros_like(self.der))
        return Dual(self.val**other, other * self.val ** (other - 1) * self.der)

    def __rpow__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        v = other**self.val
        return Dual(v, v * math.log(other) * self.der)

    def _cmp_val(self, other):
        return other.val if isinstance(other, Dual) else other

    def __lt__(self, other):
        return self.val < self._cmp_val(other)

    def __le__(self, other):
        return self.val <= self._cmp_val(other)

    def __gt__(self, other):
        return self.val > self._cmp_val(other)

    def __ge__(self, other):
        return self.val >= self._cmp_val(other)

    def __eq__(self, other):
        return self.val == self._cmp_val(other)

    def __ne__(self, other):
        return self.val != self._cmp_val(other)

    __hash__ = None

    def __float__(self):
        return self.val

    def exp(self):
        v = math.exp(self.val)
        return Dual(v, v * self.der)

    def log(self):
        return Dual(math.log(self.val), self.der / self.val)

    def sqrt(self):
        v = math.sqrt(self.val)
        return Dual(v, self.der / (2.0 * v))

    def sin(self):
        return Dual(math.sin(self.val), math.cos(self.val) * self.der)

    def cos(self):
        return Dual(math.cos(self.val), -math.sin(self.val) * self.der)

    def tanh(self):
        v = math.tanh(self.val)
        return Dual(v, (1.0 - v * v) * self.der)


def seed(values, offset, n):
    """Wrap ``values`` as duals seeded on directions ``offset .. offset+len-1``."""
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        d = np.zeros(n)
        d[offset + i] = 1.0
        out[i] = Dual(v, d)
    return out


def value_and_jacobian(f, x):
    """Evaluate vector function ``f`` at ``x`` and return ``(f(x), df/dx)``."""
    x = np.asarray(x, dtype=float)
    out = f(seed(x, 0, x.size))
    val = np.empty(len(out))
    jac = np.zeros((len(out), x.size))
    for i, o in enumerate(out):
        if isinstance(o, Dual):
            val[i] = o.val
            jac[i] = o.der
        else:
            val[i] = float(o)
    return val, jac


def rhs_jacobians(rhs, t, y, xi, u):
    """Jacobians ``(df/dy, df/dxi)`` of an ODE right-hand side by forward mode."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    dim, nxi = y.size, xi.size
    n = dim + nxi
    out = rhs(t, seed(y, 0, n), seed(xi, dim, n), u)
    jy = np.zeros((len(out), dim))
    jx = np.zeros((len(out), nxi))
    for i, o in enumerate(out):
        if isinstance(o, Dual):
            jy[i] = o.der[:dim]
            jx[i] = o.der[dim:]
    return jy, jx
