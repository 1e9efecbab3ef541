"""Rate functions: strictly increasing C^1 time warps rho with rho(0) = 0.

A rate sets the clock of a dichotomy: ``rho(t) = t`` gives exponential
behaviour, ``rho(t) = log(1 + t)`` polynomial behaviour and
``rho(t) = int_0^t mu`` the general case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import RateDivergenceError, RateError

__all__ = [
    "RateFunction",
    "RateValidation",
    "make_rate",
    "rate_inverse",
    "validate_rate",
    "RATE_KINDS",
]

RATE_KINDS = ("identity", "log1p", "mu_integral", "custom")

INVERSE_TOL = 1e-10


@dataclass(frozen=True)
class RateFunction:
    """Immutable rate function with derivative and inverse evaluation.

    Parameters
    ----------
    kind : str
        One of ``RATE_KINDS``.
    fn, dfn : callable
        Vectorized ``t -> rho(t)`` and ``t -> rho'(t)``.
    domain_hint : float
        Typical time scale; numeric inversion gives up once its bracket
        exceeds ``domain_hint * 2**10``.
    inv : callable, optional
        Closed-form inverse, used by :meth:`inverse` when present.
    """

    kind: str
    fn: Callable = field(repr=False)
    dfn: Callable = field(repr=False)
    domain_hint: float = 100.0
    inv: Optional[Callable] = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __call__(self, t):
        return self.fn(t)

    def deriv(self, t):
        return self.dfn(t)

    def inverse(self, y):
        """Time ``t`` with ``rho(t) = y`` (closed form if known, else bisection)."""
        if self.inv is not None:
            return self.inv(y)
        y_arr = np.asarray(y, dtype=float)
        if y_arr.ndim == 0:
            return rate_inverse(self, float(y_arr))
        return np.array([rate_inverse(self, float(v)) for v in y_arr.ravel()]).reshape(
            y_arr.shape
        )

    def describe(self) -> dict:
        out = {"kind": self.kind}
        out.update({k: v for k, v in self.params.items() if np.isscalar(v)})
        return out


def _as_float(t):
    return np.asarray(t, dtype=float)


class _MuTable:
    """Running integral of mu tabulated on nodes.

    Node values of ``rho`` are exact up to the cell quadrature; inside a cell
    ``rho`` follows the normalized integral of the linear interpolant of
    ``mu``, which is monotone whenever the samples are positive. Beyond the
    last node mu is extended as a constant.
    """

    def __init__(self, t, mu, cell_integrals=None):
        self.t = np.asarray(t, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        h = np.diff(self.t)
        lin = 0.5 * h * (self.mu[:-1] + self.mu[1:])
        cells = lin if cell_integrals is None else np.asarray(cell_integrals, dtype=float)
        self.cum = np.concatenate([[0.0], np.cumsum(cells)])
        self._lin = lin

    def rho(self, t):
        t = _as_float(t)
        tt = np.atleast_1d(t)
        k = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, len(self.t) - 2)
        t0 = self.t[k]
        h = self.t[k + 1] - t0
        u = np.clip(tt - t0, 0.0, h)
        slope = (self.mu[k + 1] - self.mu[k]) / h
        frac = (self.mu[k] * u + 0.5 * slope * u * u) / self._lin[k]
        inside = self.cum[k] + (self.cum[k + 1] - self.cum[k]) * frac
        val = np.where(tt <= self.t[-1], inside, self.cum[-1] + self.mu[-1] * (tt - self.t[-1]))
        return val.reshape(t.shape) if t.ndim else float(val[0])

    def mu_at(self, t):
        t = _as_float(t)
        val = np.interp(t, self.t, self.mu)
        return val if t.ndim else float(val)


def _adaptive_mu_nodes(mu, t_end, tol=1e-9, max_nodes=100_000):
    """Bisect cells of ``[0, t_end]`` until mu is linear to ``tol`` on each.

    Returns nodes, mu at nodes and 5-point Gauss-Legendre cell integrals.
    """
    init = [float(a) for a in np.linspace(0.0, t_end, 65)]
    nodes = {a: float(mu(a)) for a in init}
    queue = list(zip(init[:-1], init[1:]))
    min_width = 1e-9 * (1.0 + t_end)
    while queue and len(nodes) < max_nodes:
        nxt = []
        for a, b in queue:
            m = 0.5 * (a + b)
            fm = float(mu(m))
            nodes[m] = fm
            lin_err = abs(fm - 0.5 * (nodes[a] + nodes[b])) * (b - a)
            if lin_err > tol * (1.0 + abs(fm)) and (b - a) > min_width:
                nxt.extend([(a, m), (m, b)])
        queue = nxt
    t = np.array(sorted(nodes))
    x, w = np.polynomial.legendre.leggauss(5)
    lo, hi = t[:-1], t[1:]
    half = 0.5 * (hi - lo)
    pts = (0.5 * (hi + lo))[:, None] + half[:, None] * x[None, :]
    vals = np.vectorize(mu, otypes=[float])(pts)
    cells = half * (vals @ w)
    return t, np.array([nodes[x] for x in t]), cells


def _check_mu(t, mu):
    bad = np.flatnonzero(~(mu > 0) | ~np.isfinite(mu))
    if bad.size:
        i = int(bad[0])
        raise RateError(
            f"mu must be positive and finite; mu({t[i]:.6g}) = {mu[i]:.6g}",
            location=float(t[i]),
        )


def make_rate(kind: str, **params) -> RateFunction:
    """Build a rate function from a kind string and parameters.

    ``mu_integral`` accepts either ``mu`` (a callable, tabulated on an
    adaptive grid up to ``domain_hint``) or ``t``/``mu`` sample arrays.
    ``custom`` requires ``fn`` and ``dfn`` callables.
    """
    domain_hint = float(params.pop("domain_hint", 100.0))
    if kind == "identity":
        return RateFunction(
            "identity",
            fn=lambda t: _as_float(t) * 1.0,
            dfn=lambda t: np.ones_like(_as_float(t)),
            domain_hint=domain_hint,
            inv=lambda y: _as_float(y) * 1.0,
        )
    if kind == "log1p":
        return RateFunction(
            "log1p",
            fn=lambda t: np.log1p(_as_float(t)),
            dfn=lambda t: 1.0 / (1.0 + _as_float(t)),
            domain_hint=domain_hint,
            inv=lambda y: np.expm1(_as_float(y)),
        )
    if kind == "mu_integral":
        mu = params.get("mu")
        if callable(mu):
            # accept scalar-only callables
            def mu_fn(t, _mu=mu):
                arr = _as_float(t)
                if arr.ndim == 0:
                    return float(_mu(float(arr)))
                return np.array([_mu(float(x)) for x in arr.ravel()]).reshape(arr.shape)

            t_nodes, mu_nodes, cells = _adaptive_mu_nodes(mu_fn, domain_hint)
        else:
            cells = None
            t_nodes = np.asarray(params["t"], dtype=float)
            mu_nodes = np.asarray(mu, dtype=float)
            if t_nodes.ndim != 1 or t_nodes.shape != mu_nodes.shape or t_nodes.size < 2:
                raise RateError("sampled mu needs matching 1-d t and mu arrays of length >= 2")
            if t_nodes[0] != 0.0 or np.any(np.diff(t_nodes) <= 0):
                raise RateError("sampled mu grid must start at 0 and increase strictly")
            mu_fn = None
        _check_mu(t_nodes, mu_nodes)
        table = _MuTable(t_nodes, mu_nodes, cells)
        dfn = mu_fn if mu_fn is not None else table.mu_at
        if mu_fn is not None:
            # beyond the table the constant-mu extension would disagree with mu
            t_end = t_nodes[-1]

            def fn(t):
                arr = _as_float(t)
                base = table.rho(np.minimum(arr, t_end))
                if np.all(arr <= t_end):
                    return base
                extra = np.array(
                    [integrate.quad(mu_fn, t_end, x)[0] if x > t_end else 0.0 for x in np.atleast_1d(arr)]
                )
                out = np.atleast_1d(base) + extra
                return out.reshape(arr.shape) if arr.ndim else float(out[0])
        else:
            fn = table.rho
        return RateFunction(
            "mu_integral",
            fn=fn,
            dfn=dfn,
            domain_hint=domain_hint,
            params={"nodes": len(t_nodes)},
        )
    if kind == "custom":
        fn, dfn = params.get("fn"), params.get("dfn")
        if not (callable(fn) and callable(dfn)):
            raise RateError("custom rate requires callables fn and dfn")
        return RateFunction(
            "custom",
            fn=lambda t, _f=fn: _f(_as_float(t)),
            dfn=lambda t, _d=dfn: _d(_as_float(t)),
            domain_hint=domain_hint,
        )
    raise RateError(f"unknown rate kind {kind!r}; expected one of {RATE_KINDS}")


def rate_inverse(rate: RateFunction, y: float, tol: float = INVERSE_TOL) -> float:
    """Solve ``rho(t) = y`` by bracket expansion followed by bisection.

    Raises
    ------
    RateDivergenceError
        If the bracket grows past ``domain_hint * 2**10`` before ``rho``
        exceeds ``y``.
    """
    if y < 0:
        raise ValueError(f"rate inverse needs y >= 0, got {y}")
    if y == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    limit = rate.domain_hint * 2.0**10
    while float(rate(hi)) < y:
        lo, hi = hi, 2.0 * hi
        if hi > limit:
            raise RateDivergenceError(
                f"rate grows too slowly: rho({limit:.6g}) < {y:.6g}", location=limit
            )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if float(rate(mid)) < y:
            lo = mid
        else:
            hi = mid
    t = lo if abs(float(rate(lo)) - y) <= abs(float(rate(hi)) - y) else hi
    if abs(float(rate(t)) - y) > max(tol, 4 * np.finfo(float).eps * abs(y)):
        raise RateDivergenceError(f"bisection stalled at t={t:.17g} for y={y:.17g}", location=t)
    return t


@dataclass
class RateValidation:
    passed: bool
    rho0_offset: float
    min_deriv: float
    argmin_deriv: float
    monotonicity_violations: list
    inverse_error: float

    def lines(self):
        yield f"passed={self.passed}"
        yield f"rho0_offset={self.rho0_offset:.3e}"
        yield f"min_deriv={self.min_deriv:.6g} at t={self.argmin_deriv:.6g}"
        yield f"monotonicity_violations={len(self.monotonicity_violations)}"
        for a, b in self.monotonicity_violations[:5]:
            yield f"  rho decreases on [{a:.6g}, {b:.6g}]"
        yield f"inverse_error={self.inverse_error:.3e}"


def validate_rate(rate: RateFunction, grid) -> RateValidation:
    """Check the rate invariants on a grid starting at 0."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("validation grid must be strictly increasing and start at 0")
    vals = np.asarray(rate(grid), dtype=float)
    ders = np.asarray(rate.deriv(grid), dtype=float)
    bad = np.flatnonzero(np.diff(vals) <= 0)
    violations = [(float(grid[i]), float(grid[i + 1])) for i in bad]
    i_min = int(np.argmin(ders))
    inv_err = 0.0
    if not violations and np.all(ders > 0):
        for t, v in zip(grid, vals):
            try:
                back = float(rate.inverse(v))
            except RateDivergenceError:
                inv_err = np.inf
                break
            inv_err = max(inv_err, abs(back - t) / (1.0 + t))
    else:
        inv_err = np.nan
    passed = (
        abs(vals[0]) <= 1e-12
        and not violations
        and bool(np.all(ders > 0))
        and inv_err <= 1e-8
    )
    return RateValidation(
        passed=bool(passed),
        rho0_offset=float(abs(vals[0])),
        min_deriv=float(ders[i_min]),
        argmin_deriv=float(grid[i_min]),
        monotonicity_violations=violations,
        inverse_error=float(inv_err),
    )
