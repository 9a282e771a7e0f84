"""Travel-time functions: BPR, its 2-/3-line piecewise-affine surrogates,
the slack variables that linearise them, Beckmann integrals and the
least-squares fitter for the surrogate breakpoints.

All functions broadcast over numpy arrays so a whole network evaluates in one
call.  The surrogate is always the slack form ``t0 * (a + b*eps1 + c*eps2)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import optimize

FIT_GRID = 512
DEFAULT_FIT_RANGE = 1.5
NEG_TOL = 1e-9


@dataclass(frozen=True)
class BprParams:
    t0: float | np.ndarray
    m: float | np.ndarray
    alpha: float | np.ndarray = 0.15
    power: float | np.ndarray = 4.0

    def __post_init__(self):
        if np.any(np.asarray(self.t0) <= 0) or np.any(np.asarray(self.m) <= 0):
            raise ValueError("BPR needs t0 > 0 and m > 0")
        if np.any(np.asarray(self.alpha) < 0) or np.any(np.asarray(self.power) < 1):
            raise ValueError("BPR needs alpha >= 0 and power >= 1")


@dataclass(frozen=True)
class PwaParams:
    """Normalised surrogate shape, shared by every arc with the same BPR shape.

    Breakpoints and slopes are in capacity units: on an arc with capacity m the
    thresholds are ``theta1*m`` (and ``theta2*m``) and the slopes ``beta/m``
    (and ``sigma/m``).  ``sigma``/``theta2`` are None for the 2-line model.
    """

    beta: float
    theta1: float
    sigma: float | None = None
    theta2: float | None = None
    a: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if (self.sigma is None) != (self.theta2 is None):
            raise ValueError("sigma and theta2 go together")
        if self.sigma is not None:
            if not self.sigma > 0:
                raise ValueError("sigma must be positive")
            if self.theta2 < self.theta1:
                raise ValueError("theta2 must be >= theta1")

    @property
    def n_lines(self) -> int:
        return 2 if self.sigma is None else 3

    def b(self, m):
        return self.beta / np.asarray(m, dtype=float)

    def c(self, m):
        return self.sigma / np.asarray(m, dtype=float)

    def thresholds(self, m):
        m = np.asarray(m, dtype=float)
        if self.theta2 is None:
            return self.theta1 * m, None
        return self.theta1 * m, self.theta2 * m


def _flow(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < -NEG_TOL * np.maximum(1.0, np.abs(x).max(initial=0.0))):
        raise ValueError("negative flow")
    return np.maximum(x, 0.0)


def bpr_time(params: BprParams, x):
    """t0 * (1 + alpha * (x/m)**power)."""
    x = _flow(x)
    return params.t0 * (1.0 + params.alpha * (x / params.m) ** params.power)


def bpr_derivative(params: BprParams, x):
    x = _flow(x)
    p = params.power
    return params.t0 * params.alpha * p * (x / params.m) ** (p - 1) / params.m


def slack2(theta_arc, x):
    return np.maximum(0.0, np.asarray(x, dtype=float) - theta_arc)


def slack3(theta1_arc, theta2_arc, x):
    if np.any(np.asarray(theta2_arc) < np.asarray(theta1_arc)):
        raise ValueError("theta2 must be >= theta1")
    x = np.asarray(x, dtype=float)
    eps2 = np.maximum(0.0, x - theta2_arc)
    eps1 = np.maximum(0.0, x - theta1_arc - eps2)
    return eps1, eps2


def pwa_time(params: PwaParams, t0, m, x):
    x = _flow(x)
    th1, th2 = params.thresholds(m)
    if params.n_lines == 2:
        return t0 * (params.a + params.b(m) * slack2(th1, x))
    e1, e2 = slack3(th1, th2, x)
    return t0 * (params.a + params.b(m) * e1 + params.c(m) * e2)


def beckmann_term(params: BprParams, lower, upper):
    """Integral of bpr_time from ``lower`` to ``upper`` (closed form)."""
    lo = _flow(lower)
    hi = _flow(upper)
    if np.any(lo > hi + NEG_TOL * np.maximum(1.0, np.abs(hi))):
        raise ValueError("lower limit exceeds upper limit")
    p = params.power

    def prim(s):
        return params.t0 * (s + params.alpha / (p + 1) * s ** (p + 1) / params.m ** p)

    return prim(hi) - prim(lo)


# -- fitting ---------------------------------------------------------------

def _grid(fit_range_multiple: float) -> np.ndarray:
    return np.linspace(0.0, fit_range_multiple, FIT_GRID)


def _fit2(u, r, theta):
    h = np.maximum(0.0, u - theta)
    hh = h @ h
    if hh <= 0.0:
        return 0.0, r @ r
    beta = max((h @ r) / hh, 0.0)
    res = beta * h - r
    return beta, res @ res


def _fit3(u, r, th1, th2):
    if th2 < th1:
        th1, th2 = th2, th1
    h1 = np.clip(u - th1, 0.0, th2 - th1)
    h2 = np.maximum(0.0, u - th2)
    # sigma = beta + delta keeps the surrogate convex
    cols = np.column_stack([h1 + h2, h2])
    if not np.any(cols):
        return 0.0, 0.0, r @ r
    (beta, delta), rnorm = optimize.nnls(cols, r)
    return beta, beta + delta, rnorm ** 2


@functools.lru_cache(maxsize=64)
def _fit_normalized(alpha: float, power: float, n_lines: int, fit_range_multiple: float,
                    theta1: float | None, theta2: float | None):
    u = _grid(fit_range_multiple)
    r = alpha * u ** power
    lo, hi = 0.0, float(u[-2])
    if n_lines == 2:
        if theta1 is None:
            sse = [_fit2(u, r, t)[1] for t in u[:-1]]
            k = int(np.argmin(sse))
            step = u[1] - u[0]
            res = optimize.minimize_scalar(lambda t: _fit2(u, r, t)[1],
                                           bounds=(max(lo, u[k] - step), min(hi, u[k] + step)),
                                           method="bounded", options={"xatol": 1e-12})
            theta1 = float(res.x) if res.fun <= sse[k] else float(u[k])
        beta, _ = _fit2(u, r, theta1)
        return max(beta, 1e-12), float(theta1), None, None

    if theta1 is not None and theta2 is not None:
        if theta2 < theta1:
            raise ValueError("theta2 must be >= theta1")
        beta, sigma, _ = _fit3(u, r, theta1, theta2)
        if theta2 == theta1:
            beta = sigma  # first segment has zero width; any slope is equivalent
        return max(beta, 1e-12), float(theta1), max(sigma, 1e-12), float(theta2)

    coarse = u[:-1:8]
    best = (np.inf, 0.0, 0.0)
    for i, t1 in enumerate(coarse):
        for t2 in coarse[i:]:
            sse = _fit3(u, r, t1, t2)[2]
            if sse < best[0]:
                best = (sse, t1, t2)

    def obj(z):
        t1, t2 = np.clip(z, lo, hi)
        return _fit3(u, r, min(t1, t2), max(t1, t2))[2]

    res = optimize.minimize(obj, np.array(best[1:]), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
    t1, t2 = np.clip(res.x, lo, hi) if res.fun <= best[0] else best[1:]
    t1, t2 = float(min(t1, t2)), float(max(t1, t2))
    beta, sigma, _ = _fit3(u, r, t1, t2)
    return max(beta, 1e-12), t1, max(sigma, 1e-12), t2


def fit_pwa(params: BprParams, n_lines: int = 3, fit_range_multiple: float = DEFAULT_FIT_RANGE,
            theta1: float | None = None, theta2: float | None = None) -> PwaParams:
    """Least-squares surrogate of the BPR curve over x in [0, fit_range_multiple*m].

    The intercept is pinned at ``a = 1`` so the surrogate equals t0 at zero
    flow.  Thresholds may be pinned (normalised units); otherwise they are
    searched on the fit grid and refined.  Only the BPR shape (alpha, power)
    matters, so the result is shared by all arcs with that shape.

    The default range of 1.5 capacities keeps the flat first piece short; a
    wider range lets it run to ~0.86m (3-line) or ~1.14m (2-line), where the
    surrogate underestimates moderately loaded arcs by 8-25%.
    """
    if n_lines not in (2, 3):
        raise ValueError("n_lines must be 2 or 3")
    if not fit_range_multiple > 0:
        raise ValueError("fit_range_multiple must be positive")
    alpha = float(np.unique(np.asarray(params.alpha))[0])
    power = float(np.unique(np.asarray(params.power))[0])
    if np.unique(np.asarray(params.alpha)).size > 1 or np.unique(np.asarray(params.power)).size > 1:
        raise ValueError("fit_pwa expects a single BPR shape (alpha, power)")
    beta, t1, sigma, t2 = _fit_normalized(alpha, power, n_lines, float(fit_range_multiple),
                                          theta1, theta2)
    return PwaParams(beta=float(beta), theta1=float(t1),
                     sigma=None if sigma is None else float(sigma),
                     theta2=None if t2 is None else float(t2))


def max_relative_error(pwa: PwaParams, bpr: BprParams, upper_multiple: float,
                       samples: int = 2001) -> float:
    """Max over [0, upper_multiple*m] of |pwa - bpr| / bpr for a unit arc."""
    unit = BprParams(1.0, 1.0, float(np.ravel(bpr.alpha)[0]), float(np.ravel(bpr.power)[0]))
    x = np.linspace(0.0, upper_multiple, samples)
    t = bpr_time(unit, x)
    return float(np.max(np.abs(pwa_time(pwa, 1.0, 1.0, x) - t) / t))
