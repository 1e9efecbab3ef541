"""Green operators for the two admissibility problems and the shooting probe.

The Green solution on a grid is assembled from two recursions with the step
propagators ``T_k = T(t_{k+1}, t_k)``::

    F_{k+1} = T_k F_k + h_k/2 (T_k P_k w_k y_k + P_{k+1} w_{k+1} y_{k+1})
    G_k     = R_k G_{k+1} + h_k/2 (Q_k w_k y_k + R_k Q_{k+1} w_{k+1} y_{k+1})

with ``R_k`` the inverse of ``T_k`` restricted to the unstable bundle and
``x = F - G``. By the cocycle property this is exactly the composite
trapezoid rule for the two integrals on the grid of ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dichotomy import COND_LIMIT, DichotomyCertificate, ProjectionPath
from .errors import InvertibilityError
from .family import EvolutionFamily, NormFamily
from .funcspaces import SampledFunction, SubspaceZ, indicator, uniform_grid, y1_norm, yinf_norm

__all__ = [
    "GreenSolution",
    "AdmissibilityReport",
    "green_y1",
    "green_yinf",
    "mild_residual",
    "admissibility_probe",
    "bundled_suite",
    "dyadic_comb",
    "PAIRS",
]

PAIRS = ("Y1", "YinfPrime")


@dataclass
class GreenSolution:
    """Output of a Green operator.

    ``bound`` is the a-priori bound ``D ||y||_1`` or ``(2D/lam) ||y||'_inf``
    when a certificate was supplied; ``tail_bound`` bounds the part of the
    backward integral cut off at the horizon.
    """

    x: SampledFunction
    sup_norm: float
    input_norm: float
    bound: Optional[float] = None
    tail_bound: float = 0.0

    @property
    def within_bound(self) -> Optional[bool]:
        if self.bound is None:
            return None
        return self.sup_norm <= self.bound + self.tail_bound


def _steps(family: EvolutionFamily, grid: np.ndarray) -> np.ndarray:
    steps = np.repeat(np.eye(family.dim)[None], len(grid) - 1, axis=0)
    moving = np.flatnonzero(np.diff(grid) > 0)
    if len(moving):
        steps[moving] = family.propagators(grid[moving + 1], grid[moving])
    return steps


def _restricted_steps(steps, U_list):
    """``R_k = U_k pinv(T_k U_k)`` for every step, with condition numbers."""
    n = len(steps)
    d = steps.shape[1]
    k = U_list[0].shape[1]
    if k == 0:
        return np.zeros((n, d, d)), np.ones(n)
    U = np.stack(U_list[:-1])
    img = steps @ U
    sv = np.linalg.svd(img, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(sv[:, -1] > 0, sv[:, 0] / sv[:, -1], np.inf)
    if np.any(cond > COND_LIMIT):
        i = int(np.argmax(cond))
        raise InvertibilityError(
            f"step restriction to the unstable space is ill-conditioned at step {i} ({cond[i]:.3g})",
            condition=float(cond[i]),
        )
    return U @ np.linalg.pinv(img), cond


def _green(family, proj: ProjectionPath, y: SampledFunction, weight: np.ndarray):
    g = y.grid
    d = family.dim
    n = len(g)
    wy = y.values * weight[:, None]
    P = np.stack([proj.at(t) for t in g])
    Q = np.eye(d)[None] - P
    a = np.einsum("kij,kj->ki", P, wy)
    b = np.einsum("kij,kj->ki", Q, wy)
    steps = _steps(family, g)
    U_list = [proj.bases_at(t)[1] for t in g]
    R, _ = _restricted_steps(steps, U_list)
    h = np.diff(g)
    F = np.zeros((n, d))
    for k in range(n - 1):
        F[k + 1] = steps[k] @ (F[k] + 0.5 * h[k] * a[k]) + 0.5 * h[k] * a[k + 1]
    G = np.zeros((n, d))
    if U_list[0].shape[1]:
        for k in range(n - 2, -1, -1):
            G[k] = R[k] @ (G[k + 1] + 0.5 * h[k] * b[k + 1]) + 0.5 * h[k] * b[k]
    return SampledFunction(g, F - G, label=f"G[{y.label}]")


def _tail_mass_y1(y, norms):
    _, _, tail = y1_norm(y, norms, with_error=True)
    return tail


def green_y1(family: EvolutionFamily, proj: ProjectionPath, norms: NormFamily, y: SampledFunction,
             cert: Optional[DichotomyCertificate] = None, rate=None) -> GreenSolution:
    """Green solution of ``x(t) = T(t,s)x(s) + int_s^t T(t,tau) y(tau) dtau``.

    ``x(t) = int_0^t T(t,s)P(s)y(s) ds - int_t^T T(t,s)Q(s)y(s) ds`` on the
    grid of ``y``; ``x(0)`` lies in ``Ker P(0)``.
    """
    x = _green(family, proj, y, np.ones(len(y.grid)))
    sup = yinf_norm(x, norms)
    ynorm = y1_norm(y, norms)
    bound = tail = None
    if cert is not None:
        bound = cert.D * ynorm
        mass = _tail_mass_y1(y, norms)
        tail = cert.D * mass if mass else 0.0
    return GreenSolution(x=x, sup_norm=sup, input_norm=ynorm, bound=bound, tail_bound=tail or 0.0)


def green_yinf(family: EvolutionFamily, proj: ProjectionPath, norms: NormFamily, rate,
               y: SampledFunction, cert: Optional[DichotomyCertificate] = None) -> GreenSolution:
    """Green solution of the weighted problem (integrands carry ``rho'``)."""
    weight = np.asarray(rate.deriv(y.grid), dtype=float)
    x = _green(family, proj, y, weight)
    sup = yinf_norm(x, norms)
    ynorm = yinf_norm(y, norms)
    bound = None
    tail = 0.0
    if cert is not None:
        bound = 2.0 * cert.D / cert.lam * ynorm
        if y.extension == "constant":
            # int_T^inf rho'(s) e^{-lam(rho(s)-rho(t))} ds <= e^{-lam(rho(T)-rho(t))} / lam, worst at t = T
            tail = cert.D / cert.lam * ynorm
    return GreenSolution(x=x, sup_norm=sup, input_norm=ynorm, bound=bound, tail_bound=tail)


def _segment_integral(family, f: SampledFunction, s, t, weight_fn=None):
    times, vals = f.segment(s, t)
    if weight_fn is not None:
        vals = vals * np.asarray(weight_fn(times), dtype=float)[:, None]
    mats = family.propagators(np.full(len(times), t), times)
    integrand = np.einsum("kij,kj->ki", mats, vals)
    return np.trapezoid(integrand, times, axis=0)


def mild_residual(family: EvolutionFamily, x: SampledFunction, y: SampledFunction, pairs,
                  weighted: bool = False, rate=None) -> float:
    """Max over ``(s, t)`` of ``||x(t) - T(t,s)x(s) - int_s^t w T(t,.)y|| / (1 + ||x(t)||)``.

    Pair times are snapped to the nearest node of ``x.grid``; off-grid
    interpolation error would otherwise be amplified by unstable directions.
    """
    if weighted and rate is None:
        raise ValueError("weighted residual needs the rate")
    worst = 0.0
    g = x.grid
    for s, t in pairs:
        if t < s:
            raise ValueError(f"pair (s={s}, t={t}) is not ordered")
        s = float(g[np.argmin(np.abs(g - s))])
        t = float(g[np.argmin(np.abs(g - t))])
        xs = x.segment(s, t)[1]
        x_s, x_t = xs[0], xs[-1]
        integral = _segment_integral(family, y, s, t, rate.deriv if weighted else None)
        r = x_t - family(t, s) @ x_s - integral
        worst = max(worst, float(np.linalg.norm(r) / (1.0 + np.linalg.norm(x_t))))
    return worst


# --- admissibility probe --------------------------------------------------------

@dataclass
class AdmissibilityReport:
    """Outcome of probing one admissibility pair with a suite of inputs.

    ``uniqueness_margin`` is ``max_c ||Zc||_0 / ||T(T_max,0)Zc||_{T_max}``;
    small values mean bounded homogeneous solutions must start at 0. The
    probe only certifies uniqueness within the shooting parametrization.
    """

    pair: str
    solvable: bool
    bound_estimate: float
    uniqueness_margin: float
    unique: bool
    witnesses: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def lines(self):
        yield f"pair={self.pair}"
        yield f"solvable={self.solvable}"
        yield f"bound_estimate={self.bound_estimate:.6e}"
        yield f"uniqueness_margin={self.uniqueness_margin:.6e}"
        yield f"unique={self.unique}"
        for w in self.witnesses:
            yield f"witness {w['label']}: sup={w['sup']:.6e} growth={w['growth']:.4f} reason={w['reason']}"


def _shoot(family, Z: SubspaceZ, y: SampledFunction, weight):
    """Particular solution from x(0)=0 and the homogeneous block ``T(t,0) Z``."""
    g = y.grid
    n = len(g)
    steps = _steps(family, g)
    wy = y.values * weight[:, None]
    h = np.diff(g)
    xp = np.zeros((n, family.dim))
    M = np.zeros((n, family.dim, Z.k))
    M[0] = Z.basis
    for k in range(n - 1):
        xp[k + 1] = steps[k] @ (xp[k] + 0.5 * h[k] * wy[k]) + 0.5 * h[k] * wy[k + 1]
        M[k + 1] = steps[k] @ M[k]
    return xp, M


def _best_candidate(xp, M):
    """Least-squares ``c`` over the trajectory and the conditioning of the fit."""
    k = M.shape[2]
    if k == 0:
        return np.zeros(0), np.inf
    A = M.reshape(-1, k)
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    c_scaled, *_ = np.linalg.lstsq(As, -xp.ravel(), rcond=None)
    eig = np.linalg.eigvalsh(As.T @ As)
    return c_scaled / scale, float(eig[0] / max(eig[-1], 1e-300))


def _solve_candidate(family, Z, y, weight):
    xp, M = _shoot(family, Z, y, weight)
    c, conditioning = _best_candidate(xp, M)
    values = xp + np.einsum("kij,j->ki", M, c) if Z.k else xp
    return SampledFunction(y.grid, values, label=f"x[{y.label}]"), c, conditioning, M


def _truncated(y: SampledFunction, t_cut: float) -> SampledFunction:
    values = np.where((y.grid <= t_cut)[:, None], y.values, 0.0)
    return SampledFunction(y.grid, values, label=f"{y.label}|[0,{t_cut:g}]")


def admissibility_probe(family: EvolutionFamily, Z: SubspaceZ, norms: NormFamily, rate, suite,
                        pair: str = "Y1", budget: float = 1e6, growth_tol: float = 0.25,
                        unique_tol: float = 1e-8) -> AdmissibilityReport:
    """Probe unique solvability in ``Y_inf^Z`` for every input of ``suite``.

    For each ``y`` the candidate ``x(0) = Z c`` is chosen by least squares
    over the whole trajectory (minimal-norm ``c``). A candidate counts as
    bounded when ``||x||_inf <= budget * ||y||`` and the solution-to-input
    ratio does not grow with the horizon: the ratio for ``y`` cut off at the
    rho-half horizon ``rho^{-1}(rho(T_max)/2)`` must be within ``growth_tol``
    (relative) of the full ratio. The horizon test is skipped when the cut
    input carries less than half the input norm.
    """
    if pair not in PAIRS:
        raise ValueError(f"pair must be one of {PAIRS}")
    if not suite:
        raise ValueError("empty probe suite")
    input_norm = (lambda f: y1_norm(f, norms)) if pair == "Y1" else (lambda f: yinf_norm(f, norms))
    rows, witnesses = [], []
    unique = True
    margin = 0.0
    for y in suite:
        weight = np.ones(len(y.grid)) if pair == "Y1" else np.asarray(rate.deriv(y.grid), dtype=float)
        ynorm = input_norm(y)
        x, c, conditioning, M = _solve_candidate(family, Z, y, weight)
        if Z.k:
            unique = unique and conditioning > unique_tol
            MT = M[-1]
            _, sv, vt = np.linalg.svd(MT, full_matrices=False)
            if sv[-1] > 0:
                # max over unit c of ||Zc||_0 / ||T(T_max,0)Zc||_{T_max}
                ratio_h = norms(0.0, Z.basis @ vt[-1]) / norms(float(y.grid[-1]), MT @ vt[-1])
            else:
                ratio_h = np.inf
            margin = max(margin, float(ratio_h))
        row = {"label": y.label, "input_norm": ynorm, "c": c.tolist(), "x": x}
        if not np.all(np.isfinite(x.values)):
            row.update(sup=np.inf, ratio=np.inf, growth=np.inf, bounded=False)
            rows.append(row)
            witnesses.append({"label": y.label, "sup": np.inf, "growth": np.inf, "reason": "non-finite", "x": x})
            continue
        sup = yinf_norm(x, norms)
        ratio = sup / ynorm if ynorm > 0 else (0.0 if sup == 0 else np.inf)
        t_half = float(rate.inverse(0.5 * float(rate(x.t_max))))
        y_half = _truncated(y, t_half)
        half_norm = input_norm(y_half)
        growth = float("nan")
        if ynorm > 0 and half_norm >= 0.5 * ynorm and ratio > 0:
            x_half = _solve_candidate(family, Z, y_half, weight)[0]
            ratio_half = yinf_norm(x_half, norms) / half_norm
            growth = float((ratio - ratio_half) / ratio)
        over_budget = sup > budget * ynorm
        grew = bool(growth > growth_tol)
        bounded = not over_budget and not grew
        row.update(sup=sup, ratio=ratio, growth=growth, bounded=bounded)
        rows.append(row)
        if not bounded:
            witnesses.append({"label": y.label, "sup": sup, "growth": growth,
                              "reason": "budget" if over_budget else "growth", "x": x})
    return AdmissibilityReport(
        pair=pair,
        solvable=not witnesses and unique,
        bound_estimate=max(r["ratio"] for r in rows),
        uniqueness_margin=margin,
        unique=unique,
        witnesses=witnesses,
        rows=rows,
    )


def bundled_suite(dim: int, t_max: float, step: float, pair: str = "Y1"):
    """Standard probe inputs on ``[0, t_max]``.

    ``Y1``: five unit bumps ``chi_[a, a+1] e_i`` spread over the first half
    of the horizon. ``YinfPrime``: a constant, a decaying exponential, an
    oscillation and a bump, for every coordinate.
    """
    grid = uniform_grid(t_max, step)
    suite = []
    if pair == "Y1":
        starts = np.linspace(0.0, max(0.5 * t_max - 1.0, 0.0), 5)
        for j, a in enumerate(starts):
            a = float(np.round(a / step) * step)
            e = np.zeros(dim)
            e[j % dim] = 1.0
            f = indicator(a, min(a + 1.0, t_max), e, grid)
            suite.append(SampledFunction(f.grid, f.values, label=f"bump{j}_e{j % dim + 1}"))
        return suite
    if pair != "YinfPrime":
        raise ValueError(f"pair must be one of {PAIRS}")
    a = float(np.round(0.25 * t_max / step) * step)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        tag = f"e{i + 1}"
        suite.append(SampledFunction(grid, np.tile(e, (len(grid), 1)), extension="constant", label=f"const_{tag}"))
        suite.append(SampledFunction(grid, np.exp(-grid)[:, None] * e, label=f"exp_{tag}"))
        suite.append(SampledFunction(grid, np.sin(grid)[:, None] * e, extension="constant", label=f"sin_{tag}"))
        b = indicator(a, min(a + 1.0, t_max), e, grid)
        suite.append(SampledFunction(b.grid, b.values, label=f"bump_{tag}"))
    return suite


def dyadic_comb(dim: int, t_max: float, step: float) -> SampledFunction:
    """``sum_l chi_[2^l, 2^l + 1] e_1 / (l + 1)^2`` over the horizon; finite Y_1 norm."""
    grid = uniform_grid(t_max, step)
    e = np.zeros(dim)
    e[0] = 1.0
    total = None
    l = 0
    while 2.0**l + 1.0 <= t_max:
        f = indicator(2.0**l, 2.0**l + 1.0, e / (l + 1) ** 2, grid)
        total = f if total is None else _merge_add(total, f)
        l += 1
    return SampledFunction(total.grid, total.values, label="dyadic_comb")


def _merge_add(f: SampledFunction, g: SampledFunction) -> SampledFunction:
    """Sum of two sampled functions on the union of their grids (jumps kept)."""
    times = []
    vals = []
    gf, gg = f.grid, g.grid
    union = np.union1d(gf, gg)
    for t in union:
        fl, fr = _limits(f, t)
        gl, gr = _limits(g, t)
        left, right = fl + gl, fr + gr
        if np.array_equal(left, right):
            times.append(t)
            vals.append(right)
        else:
            times += [t, t]
            vals += [left, right]
    return SampledFunction(np.array(times), np.array(vals))


def _limits(f: SampledFunction, t):
    idx = np.flatnonzero(f.grid == t)
    if len(idx):
        return f.values[idx[0]], f.values[idx[-1]]
    v = f(t)
    return v, v
