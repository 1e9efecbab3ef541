"""Evolution families T(t, s) and time-indexed norm families.

Closed-form families take a vectorized ``(t, s) -> T`` map returning an
array of shape ``(n, d, d)`` for arrays ``t, s`` of shape ``(n,)``. ODE
families integrate the matrix equation ``dT/dt = A(t) T`` from ``s`` to
``t`` with adaptive step control.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, linalg, optimize

from .errors import ContinuityError, NormInadmissibleError, StiffnessError

__all__ = [
    "EvolutionFamily",
    "NormFamily",
    "base_norms",
    "weighted_norms",
    "propagator",
    "cocycle_residual",
    "continuity_residual",
    "norm_bounds_estimate",
    "check_norm_axioms",
    "NormBounds",
    "builtin_generator",
    "BUILTIN_GENERATORS",
    "interpolated_generator",
    "autonomous_family",
]


class EvolutionFamily:
    """Two-parameter propagator ``T(t, s)`` on ``R^dim``, ``t >= s >= 0``.

    Parameters
    ----------
    dim : int
        State dimension.
    closed_form : callable, optional
        Vectorized map ``(t, s) -> (n, dim, dim)`` array.
    generator : callable, optional
        ``t -> A(t)`` for ODE-integrated families.
    rtol, atol : float
        Integrator tolerances for ODE families.
    discontinuous : bool
        Admit families whose propagator jumps in ``t`` (disables the
        continuity diagnostic).
    name : str
        Label used in reports.
    """

    def __init__(
        self,
        dim: int,
        closed_form: Optional[Callable] = None,
        generator: Optional[Callable] = None,
        rtol: float = 1e-11,
        atol: float = 1e-12,
        discontinuous: bool = False,
        name: str = "family",
        cache: bool = True,
    ):
        if (closed_form is None) == (generator is None):
            raise ValueError("exactly one of closed_form or generator is required")
        self.dim = int(dim)
        self.closed_form = closed_form
        self.generator = generator
        self.rtol = rtol
        self.atol = atol
        self.discontinuous = discontinuous
        self.name = name
        self._use_cache = cache
        self._cache = {}
        self._lock = threading.Lock()

    @property
    def source(self) -> str:
        return "closed_form" if self.closed_form is not None else "ode"

    def __repr__(self):
        return f"EvolutionFamily(name={self.name!r}, dim={self.dim}, source={self.source})"

    def _integrate(self, t: float, s: float) -> np.ndarray:
        d = self.dim
        if t == s:
            return np.eye(d)

        def rhs(tau, y):
            return (np.asarray(self.generator(tau), dtype=float) @ y.reshape(d, d)).ravel()

        sol = integrate.solve_ivp(
            rhs, (s, t), np.eye(d).ravel(), method="DOP853", rtol=self.rtol, atol=self.atol
        )
        if sol.status != 0:
            raise StiffnessError(
                f"integration of {self.name} failed on [{s:.6g}, {t:.6g}]: {sol.message}",
                interval=(s, t),
            )
        return sol.y[:, -1].reshape(d, d)

    def _compute(self, t: np.ndarray, s: np.ndarray) -> np.ndarray:
        if self.closed_form is not None:
            out = np.asarray(self.closed_form(t, s), dtype=float)
            return out.reshape(len(t), self.dim, self.dim)
        return np.stack([self._integrate(float(a), float(b)) for a, b in zip(t, s)])

    def propagators(self, t, s) -> np.ndarray:
        """Batch evaluation: ``T(t[i], s[i])`` stacked into ``(n, d, d)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t, s = np.broadcast_arrays(t, s)
        if np.any(t < s - 1e-14) or np.any(s < 0):
            i = int(np.flatnonzero((t < s - 1e-14) | (s < 0))[0])
            raise ValueError(f"propagator needs t >= s >= 0, got t={t[i]}, s={s[i]}")
        if not self._use_cache:
            return self._compute(t, s)
        keys = list(zip(t.tolist(), s.tolist()))
        missing = [k for k in dict.fromkeys(keys) if k not in self._cache]
        if missing:
            arr = np.array(missing)
            mats = self._compute(arr[:, 0], arr[:, 1])
            with self._lock:
                for k, m in zip(missing, mats):
                    m.setflags(write=False)
                    self._cache[k] = m
        return np.stack([self._cache[k] for k in keys])

    def __call__(self, t: float, s: float) -> np.ndarray:
        return self.propagators(t, s)[0].copy()

    def clear_cache(self):
        with self._lock:
            self._cache.clear()


def propagator(family: EvolutionFamily, t: float, s: float) -> np.ndarray:
    """``T(t, s)`` for ``t >= s >= 0``."""
    return family(t, s)


def cocycle_residual(family: EvolutionFamily, triples) -> float:
    """Max of ``||T(t,s)T(s,tau) - T(t,tau)|| / (1 + ||T(t,tau)||)`` over triples."""
    triples = np.asarray(triples, dtype=float).reshape(-1, 3)
    t, s, tau = triples.T
    if np.any(t < s) or np.any(s < tau) or np.any(tau < 0):
        i = int(np.flatnonzero((t < s) | (s < tau) | (tau < 0))[0])
        raise ValueError(f"triple {tuple(triples[i])} is not ordered t >= s >= tau >= 0")
    ts = family.propagators(t, s)
    st = family.propagators(s, tau)
    tt = family.propagators(t, tau)
    diff = np.linalg.norm(ts @ st - tt, ord=2, axis=(1, 2))
    scale = 1.0 + np.linalg.norm(tt, ord=2, axis=(1, 2))
    return float(np.max(diff / scale)) if len(triples) else 0.0


def continuity_residual(family: EvolutionFamily, s: float, grid, lipschitz: float = 1e3) -> float:
    """Largest jump of ``t -> T(t, s)`` between neighbouring grid nodes.

    Returned as ``max ||T(t_{k+1},s) - T(t_k,s)|| / (lipschitz * dt)``; a value
    above 1 flags a jump. Raises :class:`ContinuityError` in that case unless
    the family is flagged ``discontinuous``.
    """
    grid = np.asarray(grid, dtype=float)
    grid = grid[grid >= s]
    mats = family.propagators(grid, np.full_like(grid, s))
    jumps = np.linalg.norm(np.diff(mats, axis=0), ord=2, axis=(1, 2))
    dt = np.diff(grid)
    scale = lipschitz * dt * (1.0 + np.linalg.norm(mats[:-1], ord=2, axis=(1, 2)))
    worst = float(np.max(jumps / scale)) if len(dt) else 0.0
    if worst > 1.0 and not family.discontinuous:
        k = int(np.argmax(jumps / scale))
        raise ContinuityError(
            f"{family.name}: T(t,{s:.6g}) jumps between t={grid[k]:.6g} and {grid[k+1]:.6g}"
        )
    return worst


# --- builtin generators -------------------------------------------------------

def _rotation(t):
    return np.array([[0.0, 1.0], [-1.0, 0.0]])


BUILTIN_GENERATORS = {
    "rotation": (2, _rotation),
    "scalar_decay": (1, lambda t: np.array([[-2.0]])),
    "diag_saddle": (2, lambda t: np.diag([-1.0, 1.0])),
}


def builtin_generator(name: str):
    """Return ``(dim, A)`` for a named builtin generator."""
    try:
        return BUILTIN_GENERATORS[name]
    except KeyError:
        raise KeyError(f"unknown generator {name!r}; available: {sorted(BUILTIN_GENERATORS)}") from None


def interpolated_generator(t, entries):
    """Linearly interpolated ``A(t)`` from samples ``entries[k] = A(t_k)``."""
    t = np.asarray(t, dtype=float)
    entries = np.asarray(entries, dtype=float)
    d = int(round(np.sqrt(entries.shape[1])))
    if d * d != entries.shape[1]:
        raise ValueError("generator samples need d*d columns")
    flat = entries.reshape(len(t), d * d)

    def A(tau):
        return np.array([np.interp(tau, t, flat[:, j]) for j in range(d * d)]).reshape(d, d)

    return d, A


def autonomous_family(A, name: str = "autonomous") -> EvolutionFamily:
    """Closed-form family ``T(t, s) = expm(A (t - s))`` of a constant generator."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("generator must be square")

    def closed(t, s):
        dt = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return linalg.expm(dt[:, None, None] * A[None])

    return EvolutionFamily(A.shape[0], closed_form=closed, name=name)


# --- norm families ------------------------------------------------------------

@dataclass
class NormFamily:
    """Time-indexed norms ``(t, x) -> ||x||_t``.

    ``batch(ts, xs)`` evaluates ``||xs[i]||_{ts[i]}``; subclasses or
    constructors may override it with a vectorized version.
    """

    eval: Callable
    C: Optional[float] = None
    eps: Optional[float] = None
    name: str = "norms"
    batch_eval: Optional[Callable] = field(default=None, repr=False)

    def __call__(self, t, x) -> float:
        return float(self.eval(float(t), np.asarray(x, dtype=float)))

    def batch(self, ts, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ts = np.asarray(ts, dtype=float)
        if ts.ndim == 0:
            ts = np.full(len(xs), float(ts))
        if self.batch_eval is not None:
            return np.asarray(self.batch_eval(ts, xs), dtype=float)
        return np.array([self.eval(float(t), x) for t, x in zip(ts, xs)])

    @staticmethod
    def base(x) -> float:
        return float(np.linalg.norm(x))


def base_norms() -> NormFamily:
    """Constant Euclidean norms ``||x||_t = ||x||``."""
    return NormFamily(
        eval=lambda t, x: float(np.linalg.norm(x)),
        C=1.0,
        eps=0.0,
        name="base",
        batch_eval=lambda ts, xs: np.linalg.norm(xs, axis=-1),
    )


def weighted_norms(weight: Callable, C=None, eps=None, name="weighted") -> NormFamily:
    """Scaled Euclidean norms ``||x||_t = weight(t) ||x||`` with ``weight >= 1``."""
    norms = NormFamily(
        eval=lambda t, x: float(weight(t) * np.linalg.norm(x)),
        C=C,
        eps=eps,
        name=name,
        batch_eval=lambda ts, xs: np.asarray(weight(ts)) * np.linalg.norm(xs, axis=-1),
    )
    # scalar weights let subspace detection work in the weighted geometry
    norms.weight = weight
    return norms


def check_norm_axioms(norms: NormFamily, grid, dim: int, n_pairs: int = 20, seed: int = 0,
                      rtol: float = 1e-12) -> dict:
    """Spot-check positivity, homogeneity and the triangle inequality."""
    rng = np.random.default_rng(seed)
    worst = {"positivity": 0.0, "homogeneity": 0.0, "triangle": 0.0}
    for t in np.asarray(grid, dtype=float):
        x, y = rng.standard_normal((2, dim))
        a = rng.uniform(-3, 3)
        nx, ny = norms(t, x), norms(t, y)
        if nx <= 0:
            worst["positivity"] = max(worst["positivity"], 1.0)
        worst["homogeneity"] = max(worst["homogeneity"], abs(norms(t, a * x) - abs(a) * nx) / (abs(a) * nx))
        worst["triangle"] = max(worst["triangle"], (norms(t, x + y) - nx - ny) / (nx + ny))
    worst["passed"] = (
        worst["positivity"] == 0.0 and worst["homogeneity"] <= rtol and worst["triangle"] <= rtol
    )
    return worst


@dataclass
class NormBounds:
    """Fitted constants of ``||x|| <= ||x||_t <= C exp(eps rho(t)) ||x||``."""

    C: float
    eps: float
    max_active_slack: float
    lower_violation: float
    lower_violation_at: Optional[tuple] = None


def _envelope_fit(u, g, nonneg_intercept=False, nonneg_slope=False, sign=1.0):
    """Tightest line ``c + sign*k*u >= g`` minimizing total slack.

    Ties are broken by the largest ``k``. Returns ``(c, k)``; ``c`` is
    recomputed as ``max(g - sign*k*u)`` so the slack is exactly nonnegative.
    """
    u = np.asarray(u, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(u)
    # variables (c, k); constraint -c - sign*k*u_i <= -g_i
    A_ub = np.column_stack([-np.ones(n), -sign * u])
    b_ub = -g
    obj = np.array([n, sign * u.sum()])
    bounds = [(0.0 if nonneg_intercept else None, None), (0.0 if nonneg_slope else None, None)]
    res = optimize.linprog(obj, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"envelope fit failed: {res.message}")
    best = res.fun
    # tie-break: largest slope among (near) optimal lines
    A2 = np.vstack([A_ub, obj])
    b2 = np.append(b_ub, best + 1e-9 * (1.0 + abs(best)))
    res2 = optimize.linprog([0.0, -1.0], A_ub=A2, b_ub=b2, bounds=bounds, method="highs")

    def settle(k):
        c = float(np.max(g - sign * k * u))
        if nonneg_intercept:
            c = max(c, 0.0)
        return c, float(k), n * c + sign * k * u.sum()

    c1, k1, f1 = settle(res.x[1])
    if res2.status == 0:
        c2, k2, f2 = settle(res2.x[1])
        if k2 > k1 and f2 <= f1 + 1e-12 * (1.0 + abs(f1)):
            return c2, k2
    return c1, k1


def norm_bounds_estimate(norms: NormFamily, rate, grid, probes, base: Optional[NormFamily] = None,
                         raise_on_violation: bool = True) -> NormBounds:
    """Fit ``log(||x||_t/||x||) <= log C + eps rho(t)`` over grid and probes.

    The envelope line minimizes the total slack subject to covering every
    sample, with ``C >= 1`` and ``eps >= 0``. The lower bound
    ``||x|| <= ||x||_t`` is checked on the same samples.
    """
    base = base or base_norms()
    grid = np.asarray(grid, dtype=float)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if grid.size == 0 or probes.size == 0:
        raise ValueError("need a nonempty grid and probe set")
    ts = np.repeat(grid, len(probes))
    xs = np.tile(probes, (len(grid), 1))
    nt = norms.batch(ts, xs)
    nb = base.batch(ts, xs)
    ok = nb > 0
    ratio = nt[ok] / nb[ok]
    lower = float(np.max(1.0 - ratio))
    at = None
    if lower > 1e-12:
        i = int(np.argmax(1.0 - ratio))
        at = (float(ts[ok][i]), xs[ok][i].tolist())
        if raise_on_violation:
            raise NormInadmissibleError(
                f"norm family {norms.name} violates ||x|| <= ||x||_t at t={at[0]:.6g}",
                t=at[0], x=np.array(at[1]),
            )
    r = np.asarray(rate(ts[ok]), dtype=float)
    g = np.log(ratio)
    logC, eps = _envelope_fit(r, g, nonneg_intercept=True, nonneg_slope=True)
    slack = logC + eps * r - g
    return NormBounds(
        C=float(np.exp(logC)),
        eps=eps,
        max_active_slack=float(np.min(slack)),
        lower_violation=max(lower, 0.0),
        lower_violation_at=at,
    )
