"""One-bit Gaussian likelihood primitives.

Observations follow ``r = sign(H x + n - b)`` with ``n ~ N(0, Diag(sigma**2))``.
For a candidate ``x`` the negative log-likelihood is

    nll(x) = -sum_i log Q(u_i),    u_i = (r_i / sigma_i) * (b_i - h_i^T x)

with ``Q`` the standard normal tail. Its gradient is ``H^T Rt eta(Rt (b - H x))``
where ``Rt = Diag(r / sigma)`` and ``eta = Q' / Q = -pdf / Q``.

The tail-ratio functions are evaluated through the scaled complementary
error function so that nothing degrades to 0/0 for large arguments.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError, ShapeError, ValidationError

__all__ = [
    "SystemParams",
    "Constellation",
    "as_observation",
    "q_tail",
    "log_q_tail",
    "eta",
    "eta_prime",
    "nll",
    "nll_grad",
    "nll_batch",
    "nll_grad_batch",
]

_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_SQRT_PI_OVER_2 = np.sqrt(np.pi / 2.0)

# above this the derivative switches to an asymptotic series for 1 - u*Mills(u)
ASYMPTOTIC_CUTOFF = 40.0
_ERFCX_SWITCH = 5.0
# (2k-1)!! for k = 1..9, alternating sign
_MILLS_SERIES = np.array([1.0, -3.0, 15.0, -105.0, 945.0, -10395.0,
                          135135.0, -2027025.0, 34459425.0])


@dataclass(eq=False)
class SystemParams:
    """Channel ``H`` (m x n), per-antenna noise std ``sigma`` and thresholds ``b``.

    ``sigma`` holds the square roots of the diagonal noise covariance ``C``.
    ``b`` defaults to all zeros.
    """

    H: np.ndarray
    sigma: np.ndarray
    b: np.ndarray = field(default=None)

    def __post_init__(self):
        self.H = np.array(self.H, dtype=np.float64, ndmin=2)
        if self.H.ndim != 2:
            raise ShapeError(f"H must be a matrix, got shape {self.H.shape}")
        m, _ = self.H.shape
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim == 0:
            sigma = np.full(m, float(sigma))
        self.sigma = np.array(sigma, dtype=np.float64)
        self.b = (np.zeros(m) if self.b is None
                  else np.array(self.b, dtype=np.float64).reshape(-1))
        if self.sigma.shape != (m,):
            raise ShapeError(f"sigma must have length m={m}, got {self.sigma.shape}")
        if self.b.shape != (m,):
            raise ShapeError(f"b must have length m={m}, got {self.b.shape}")
        if not np.all(np.isfinite(self.H)):
            raise ValidationError("H has non-finite entries")
        if not np.all(np.isfinite(self.b)):
            raise ValidationError("b has non-finite entries")
        if not (np.all(np.isfinite(self.sigma)) and np.all(self.sigma > 0)):
            raise ValidationError("sigma entries must be finite and strictly positive")

    @property
    def m(self):
        return self.H.shape[0]

    @property
    def n(self):
        return self.H.shape[1]

    def scaled(self, alpha):
        """Return ``(alpha H, alpha sigma, alpha b)``; the likelihood is unchanged."""
        if alpha <= 0:
            raise ValidationError("scale factor must be positive")
        return SystemParams(alpha * self.H, alpha * self.sigma, alpha * self.b)

    def copy(self):
        return SystemParams(self.H.copy(), self.sigma.copy(), self.b.copy())


@dataclass(frozen=True)
class Constellation:
    """Sorted real alphabet; BPSK ``(-1, +1)`` by default."""

    points: tuple = (-1.0, 1.0)

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        if len(set(pts)) < 2:
            raise ValidationError("constellation needs at least two distinct points")
        if len(set(pts)) != len(pts) or list(pts) != sorted(pts):
            raise ValidationError("constellation points must be distinct and sorted ascending")
        if not all(np.isfinite(pts)):
            raise ValidationError("constellation points must be finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def bpsk(cls):
        return cls((-1.0, 1.0))

    @property
    def size(self):
        return len(self.points)

    def as_array(self):
        return np.array(self.points)

    def contains(self, values):
        return np.isin(np.asarray(values, dtype=np.float64), self.as_array())


def as_observation(r, m=None):
    """Validate a one-bit observation (vector or batch) and return it as float64."""
    arr = np.asarray(r, dtype=np.float64)
    bad = (arr != 1.0) & (arr != -1.0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        where = "".join(f"[{i}]" for i in idx)
        raise ValidationError(f"observation entry r{where} = {float(arr[idx]):g} is not -1 or +1")
    if m is not None and arr.shape[-1] != m:
        raise ShapeError(f"observation length {arr.shape[-1]} does not match m={m}")
    return arr


def _finite(u):
    arr = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("argument must be finite")
    return arr


def _out(arr):
    return arr.item() if arr.ndim == 0 else arr


def q_tail(u):
    """Standard normal tail probability ``P(Z >= u)``."""
    return _out(special.ndtr(-_finite(u)))


def log_q_tail(u):
    """``log Q(u)`` without underflow for large positive ``u``."""
    return _out(special.log_ndtr(-_finite(u)))


def _eta(u):
    # -pdf/Q loses ~u^2 ulps for large u (and underflows near 37.5), so
    # above the switch use the exact erfcx form, -sqrt(2/pi) / erfcx(u/sqrt2)
    big = u >= _ERFCX_SWITCH
    if not big.any():
        with np.errstate(under="ignore", over="ignore", divide="ignore"):
            return -_INV_SQRT_2PI * np.exp(-0.5 * u * u) / special.ndtr(-u)
    out = np.empty_like(u)
    small = ~big
    us = u[small]
    with np.errstate(under="ignore", over="ignore", divide="ignore"):
        # erfcx underflows to 0 only for u = inf, where -inf is the right limit
        out[big] = -_SQRT_2_OVER_PI / special.erfcx(u[big] / _SQRT2)
        out[small] = -_INV_SQRT_2PI * np.exp(-0.5 * us * us) / special.ndtr(-us)
    return out


def _eta_prime(u, e=None):
    if e is None:
        e = _eta(u)
    out = e * (-u - e)
    big = u > ASYMPTOTIC_CUTOFF
    if np.any(big):
        ub = u[big]
        inv_sq = 1.0 / (ub * ub)
        powers = inv_sq[:, None] ** np.arange(1, _MILLS_SERIES.size + 1)
        one_minus_um = powers @ _MILLS_SERIES
        mills = _SQRT_PI_OVER_2 * special.erfcx(ub / _SQRT2)
        out[big] = -one_minus_um / (mills * mills)
    return out


def eta(u):
    """Tail-ratio nonlinearity ``Q'(u) / Q(u) = -pdf(u) / Q(u)``.

    Negative everywhere (until the pdf underflows below u ~ -38.5), ~ ``-u``
    for large ``u`` and ``-> 0`` from below as ``u -> -inf``.
    """
    arr = _finite(u)
    return _out(_eta(np.atleast_1d(arr)).reshape(arr.shape))


def eta_prime(u):
    """Derivative of :func:`eta`, ``-u eta(u) - eta(u)**2``."""
    arr = _finite(u)
    return _out(_eta_prime(np.atleast_1d(arr)).reshape(arr.shape))


def _check_dims(x, r, theta):
    x = np.asarray(x, dtype=np.float64)
    r = as_observation(r)
    if x.shape[-1] != theta.n:
        raise ShapeError(f"x has length {x.shape[-1]}, channel expects n={theta.n}")
    if r.shape[-1] != theta.m:
        raise ShapeError(f"r has length {r.shape[-1]}, channel expects m={theta.m}")
    return x, r


def _arguments(X, R, theta):
    # rows of X (B x n) and R (B x m) are paired samples
    return (R / theta.sigma) * (theta.b - X @ theta.H.T)


def nll_batch(X, R, theta):
    """Per-row negative log-likelihood for batches ``X`` (B x n), ``R`` (B x m)."""
    X, R = _check_dims(X, R, theta)
    X2, R2 = np.atleast_2d(X), np.atleast_2d(R)
    if X2.shape[0] != R2.shape[0]:
        raise ShapeError("X and R must have the same number of rows")
    U = _arguments(X2, R2, theta)
    return -special.log_ndtr(-U).sum(axis=1)


def nll_grad_batch(X, R, theta):
    """Row-wise gradient of :func:`nll_batch` with respect to each ``x``."""
    X, R = _check_dims(X, R, theta)
    X2, R2 = np.atleast_2d(X), np.atleast_2d(R)
    if X2.shape[0] != R2.shape[0]:
        raise ShapeError("X and R must have the same number of rows")
    S = R2 / theta.sigma
    U = S * (theta.b - X2 @ theta.H.T)
    return (S * _eta(U.ravel()).reshape(U.shape)) @ theta.H


def nll(x, r, theta):
    """Negative log-likelihood of symbol vector ``x`` given observation ``r``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("nll expects a single vector; use nll_batch for batches")
    return float(nll_batch(x[None, :], np.asarray(r)[None, :], theta)[0])


def nll_grad(x, r, theta):
    """Gradient ``H^T Rt eta(Rt (b - H x))`` of :func:`nll`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("nll_grad expects a single vector; use nll_grad_batch")
    return nll_grad_batch(x[None, :], np.asarray(r)[None, :], theta)[0]
