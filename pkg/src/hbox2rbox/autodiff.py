"""Forward-mode differentiation with dual numbers.

A :class:`Dual` carries a value and a tangent along one seed direction. Both
may be numpy arrays of the same shape, which lets a single forward pass
differentiate a batch of independent objects at once: seeding column ``k`` of
an ``(n, p)`` parameter block yields ``d loss_i / d p_ik`` for every ``i`` as
long as the objective returns the per-object losses unreduced.

The free functions (:func:`sin`, :func:`maximum`, :func:`where`, ...) accept
plain floats, numpy arrays or duals, so loss code is written once and
evaluated either way.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFailureError


class Dual:
    __slots__ = ("val", "dot")
    # Make numpy defer to our reflected operators (ndarray + Dual -> Dual.__radd__).
    __array_ufunc__ = None

    def __init__(self, val, dot=0.0):
        self.val = val
        self.dot = dot

    def __repr__(self):
        return f"Dual({self.val!r}, {self.dot!r})"

    @property
    def shape(self):
        return np.shape(self.val)

    def __len__(self):
        return len(self.val)

    def __getitem__(self, idx):
        dot = self.dot[idx] if np.ndim(self.dot) else self.dot
        return Dual(self.val[idx], dot)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.dot * other.val + self.val * other.dot)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.val / other.val
            return Dual(q, (self.dot - q * other.dot) / other.val)
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other):
        q = other / self.val
        return Dual(q, -q * self.dot / self.val)

    def __pow__(self, p):
        if isinstance(p, Dual):
            return exp(p * log(self))
        if p == 2:
            return Dual(self.val * self.val, 2.0 * self.val * self.dot)
        return Dual(self.val ** p, p * self.val ** (p - 1) * self.dot)

    # Comparisons act on values only; branches are locally constant.
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    def __float__(self):
        return float(self.val)

    def sum(self, axis=None):
        return Dual(np.sum(self.val, axis=axis), np.sum(np.broadcast_to(self.dot, np.shape(self.val)), axis=axis))

    def mean(self, axis=None):
        n = np.size(self.val) if axis is None else np.shape(self.val)[axis]
        return self.sum(axis) / n

    def reshape(self, *shape):
        return Dual(np.reshape(self.val, shape), np.reshape(np.broadcast_to(self.dot, np.shape(self.val)), shape))


def value(x):
    return x.val if isinstance(x, Dual) else x


def tangent(x):
    return x.dot if isinstance(x, Dual) else np.zeros_like(np.asarray(x, dtype=float))


def detach(x):
    return Dual(x.val, 0.0 * np.asarray(x.dot)) if isinstance(x, Dual) else x


def _unary(x, f, df):
    if isinstance(x, Dual):
        return Dual(f(x.val), df(x.val) * x.dot)
    return f(x)


def sin(x):
    return _unary(x, np.sin, np.cos)


def cos(x):
    return _unary(x, np.cos, lambda v: -np.sin(v))


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.val)
        return Dual(e, e * x.dot)
    return np.exp(x)


def log(x):
    return _unary(x, np.log, lambda v: 1.0 / v)


def sqrt(x):
    if isinstance(x, Dual):
        r = np.sqrt(x.val)
        return Dual(r, 0.5 * x.dot / r)
    return np.sqrt(x)


def abs(x):  # noqa: A001 - mirrors numpy naming
    # d|x|/dx = sign(x), with 0 at the kink.
    return _unary(x, np.abs, np.sign)


def floor(x):
    return np.floor(value(x))


def ceil(x):
    return np.ceil(value(x))


def where(cond, a, b):
    cond = np.asarray(cond)
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual(np.where(cond, value(a), value(b)), np.where(cond, tangent_like(a, b), tangent_like(b, a)))
    return np.where(cond, a, b)


def tangent_like(x, other):
    if isinstance(x, Dual):
        return x.dot
    return np.zeros_like(np.asarray(value(other), dtype=float))


def _tie_average(out, a, b):
    # At exact ties take the midpoint of the two one-sided derivatives, so a
    # perfect IoU match is a stationary point instead of picking a side.
    if not isinstance(out, Dual):
        return out
    tie = np.asarray(value(a) == value(b))
    if not tie.any():
        return out
    mid = 0.5 * (tangent_like(a, b) + tangent_like(b, a))
    return Dual(out.val, np.where(tie, mid, out.dot))


def maximum(a, b):
    return _tie_average(where(value(a) >= value(b), a, b), a, b)


def minimum(a, b):
    return _tie_average(where(value(a) <= value(b), a, b), a, b)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def stack(items, axis=0):
    if any(isinstance(t, Dual) for t in items):
        vals = [np.asarray(value(t), dtype=float) for t in items]
        shape = np.broadcast_shapes(*(v.shape for v in vals))
        dots = [np.broadcast_to(tangent(t) if isinstance(t, Dual) else 0.0, shape) for t in items]
        return Dual(np.stack([np.broadcast_to(v, shape) for v in vals], axis=axis), np.stack(dots, axis=axis))
    return np.stack(items, axis=axis)


def sum(x, axis=None):  # noqa: A001
    if isinstance(x, Dual):
        return x.sum(axis)
    return np.sum(x, axis=axis)


def mean(x, axis=None):
    if isinstance(x, Dual):
        return x.mean(axis)
    return np.mean(x, axis=axis)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _check_finite(out, index):
    if not np.all(np.isfinite(value(out))):
        raise NumericFailureError("objective value is not finite", index)
    if isinstance(out, Dual) and not np.all(np.isfinite(out.dot)):
        raise NumericFailureError("derivative is not finite", index)


def grad(objective, params):
    """Gradient of a scalar objective by one forward pass per parameter.

    ``objective`` receives a :class:`Dual` wrapping the whole parameter vector
    (index it to get scalar duals) and must return a scalar.
    """
    params = np.asarray(params, dtype=float)
    g = np.zeros_like(params)
    for k in range(params.size):
        seed = np.zeros_like(params)
        seed.flat[k] = 1.0
        out = objective(Dual(params.copy(), seed))
        _check_finite(out, k)
        g.flat[k] = float(np.sum(tangent(out)))
    return g


def batched_grad(objective, params, columns=None):
    """Per-row gradients of a row-separable objective.

    ``params`` has shape ``(n, p)``; ``objective`` maps it to ``n`` losses where
    loss ``i`` depends on row ``i`` only. One pass per seeded column, so the
    cost is independent of ``n``. Returns ``(losses, grads)`` with ``grads`` of
    shape ``(n, p)``; columns not listed in ``columns`` get zero gradient.
    """
    params = np.asarray(params, dtype=float)
    n, p = params.shape
    cols = range(p) if columns is None else columns
    grads = np.zeros((n, p))
    losses = None
    for k in cols:
        seed = np.zeros((n, p))
        seed[:, k] = 1.0
        out = objective(Dual(params, seed))
        _check_finite(out, k)
        losses = np.broadcast_to(value(out), (n,)).astype(float)
        grads[:, k] = np.broadcast_to(tangent(out), (n,))
    if losses is None:
        losses = np.broadcast_to(np.asarray(value(objective(params)), dtype=float), (n,)).copy()
    return losses, grads


# ---------------------------------------------------------------------------
# Finite-difference checker
# ---------------------------------------------------------------------------

class KinkWarning(UserWarning):
    """A finite-difference stencil straddles a non-differentiable point."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: np.ndarray
    kinked: list = field(default_factory=list)
    ad: np.ndarray = None
    fd: np.ndarray = None

    @property
    def checked(self):
        return len(self.rel_errors) - len(self.kinked)


def _scalar(objective, x):
    return float(np.sum(value(objective(x))))


def check_gradient(objective, params, epsilon=1e-5, kink_tol=0.1, jump_tol=1e-6):
    """Compare forward-mode and central-difference gradients coordinate by coordinate.

    A coordinate is treated as kinked (and excluded) when the forward-mode
    gradient is not locally affine across the stencil: the second difference
    of the gradient at ``x - eps, x, x + eps`` is comparable to its first
    difference or exceeds ``jump_tol`` times the gradient itself, or the
    curvature implied by function values disagrees with the curvature implied
    by gradients. The absolute test catches small jumps hidden under strong
    curvature; a jump below it shifts the central difference by at most about
    ``jump_tol / 2`` relative.
    """
    params = np.asarray(params, dtype=float)
    ad = grad(objective, params)
    fd = np.zeros_like(params)
    rel = np.zeros(params.size)
    kinked = []
    for k in range(params.size):
        e = np.zeros_like(params)
        e.flat[k] = epsilon
        fp = _scalar(objective, params + e)
        fm = _scalar(objective, params - e)
        f0 = _scalar(objective, params)
        fd.flat[k] = (fp - fm) / (2.0 * epsilon)
        gp = grad(objective, params + e).flat[k]
        gm = grad(objective, params - e).flat[k]
        g0 = ad.flat[k]
        first = gp - gm
        second = gp - 2.0 * g0 + gm
        scale = max(abs_(gp), abs_(gm), abs_(g0), 1e-12)
        curv_g = first / (2.0 * epsilon)
        curv_f = (fp - 2.0 * f0 + fm) / epsilon**2
        roundoff = 4.0 * np.finfo(float).eps * (abs_(f0) + 1.0) / epsilon**2
        kink = (abs_(first) > 1e-9 * scale and abs_(second) > kink_tol * abs_(first)) or abs_(second) > jump_tol * scale or (
            abs_(curv_f - curv_g) > kink_tol * max(abs_(curv_f), abs_(curv_g)) + 10.0 * roundoff
        )
        rel[k] = abs_(fd.flat[k] - g0) / max(1e-8, abs_(fd.flat[k]) + abs_(g0))
        if kink:
            kinked.append(k)
            warnings.warn(f"kink inside finite-difference stencil at coordinate {k}; excluded", KinkWarning, stacklevel=2)
    mask = np.ones(params.size, dtype=bool)
    mask[kinked] = False
    max_err = float(rel[mask].max()) if mask.any() else 0.0
    return GradCheckReport(max_err, rel, kinked, ad, fd)


def finite_diff_check(objective, params, epsilon=1e-5):
    """Max relative error ``|g_fd - g_ad| / max(1e-8, |g_fd| + |g_ad|)`` over non-kinked coordinates."""
    return check_gradient(objective, params, epsilon).max_rel_error


def abs_(x):
    return math.fabs(x)
