"""Perturbed evolution families and robustness checks.

The perturbed family solves the Volterra equation

    U(t, s) = T(t, s) + int_s^t T(t, tau) B(tau) U(tau, s) dtau

by Picard iteration. Each iterate is evaluated with the trapezoid recursion
``I_{j+1} = T_j (I_j + h_j/2 g_j) + h_j/2 g_{j+1}``, so one sweep costs
O(nodes) propagator applications.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dichotomy import (
    DichotomyCertificate,
    detect_projections,
    estimate_certificate,
    verify_dichotomy,
)
from .errors import ConvergenceError, NoDichotomyError, RhoDichError
from .family import EvolutionFamily, NormFamily, base_norms
from .funcspaces import SampledFunction, SubspaceZ, uniform_grid, y1_norm, yinf_norm

__all__ = [
    "PerturbationFamily",
    "make_perturbation",
    "BoundCheck",
    "check_perturbation_bound",
    "PicardResult",
    "solve_perturbed",
    "perturbed_family",
    "OperatorBoundReport",
    "perturbation_operator_bounds",
    "RobustnessReport",
    "robustness_experiment",
    "delta_sweep",
    "mild_consistency",
]


@dataclass(frozen=True)
class PerturbationFamily:
    """``B: t -> d x d`` with declared bound parameters ``(delta, a, eps)``.

    ``fn`` is vectorized: an array of ``n`` times maps to ``(n, d, d)``.
    """

    fn: Callable = field(repr=False)
    dim: int
    delta: float
    a: float = 1.0
    eps: float = 0.0
    name: str = "B"

    def at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.asarray(self.fn(t), dtype=float).reshape(len(t), self.dim, self.dim)

    def __call__(self, t: float) -> np.ndarray:
        return self.at([t])[0]

    def scaled(self, delta: float) -> "PerturbationFamily":
        """Same shape rescaled to a new declared ``delta``."""
        factor = delta / self.delta if self.delta else 0.0
        fn = self.fn
        return PerturbationFamily(lambda t: factor * fn(t), self.dim, delta, self.a, self.eps,
                                  f"{self.name}*{factor:g}")


def make_perturbation(kind: str, dim: int, delta: float, a: float = 1.0, eps: float = 0.0,
                      matrix=None, rate=None, t=None, entries=None) -> PerturbationFamily:
    """Builtin perturbations.

    ``rate_decay``
        ``delta e^{-(eps+a) rho(t)} rho'(t) M``, saturating the admissible bound.
    ``constant``
        ``delta M`` (violates the bound for large ``t``).
    ``zero``
        ``B = 0``.
    ``samples``
        Entries sampled at times ``t`` (rows ``a11, a12, ...``), linearly
        interpolated and held constant outside.

    ``M`` defaults to the identity and is scaled to unit spectral norm.
    """
    M = np.eye(dim) if matrix is None else np.asarray(matrix, dtype=float).reshape(dim, dim)
    norm = np.linalg.norm(M, 2)
    if kind in ("rate_decay", "constant") and norm == 0:
        raise ValueError("perturbation matrix must be nonzero")
    if kind == "rate_decay":
        if rate is None:
            raise ValueError("rate_decay needs the rate function")
        M = M / norm

        def fn(tt):
            w = delta * np.exp(-(eps + a) * np.asarray(rate(tt))) * np.asarray(rate.deriv(tt))
            return w[:, None, None] * M

        return PerturbationFamily(fn, dim, delta, a, eps, f"rate_decay({delta:g})")
    if kind == "constant":
        M = M / norm
        return PerturbationFamily(lambda tt: np.broadcast_to(delta * M, (len(tt), dim, dim)).copy(),
                                  dim, delta, a, eps, f"constant({delta:g})")
    if kind == "zero":
        return PerturbationFamily(lambda tt: np.zeros((len(tt), dim, dim)), dim, delta, a, eps, "zero")
    if kind == "samples":
        ts = np.asarray(t, dtype=float)
        vals = np.asarray(entries, dtype=float).reshape(len(ts), dim * dim)
        if np.any(np.diff(ts) <= 0):
            raise ValueError("sample times must be strictly increasing")

        def fn(tt):
            cols = [np.interp(tt, ts, vals[:, j]) for j in range(dim * dim)]
            return np.stack(cols, axis=-1).reshape(len(tt), dim, dim)

        return PerturbationFamily(fn, dim, delta, a, eps, "samples")
    raise ValueError(f"unknown perturbation kind {kind!r}")


@dataclass
class BoundCheck:
    passed: bool
    ratio: float
    at: float

    def lines(self):
        yield f"passed={self.passed}"
        yield f"ratio={self.ratio:.6e} at t={self.at:.6g}"


def check_perturbation_bound(B: PerturbationFamily, rate, grid) -> BoundCheck:
    """Max of ``||B(t)|| e^{(eps+a) rho(t)} / rho'(t)``; passes iff at most ``delta (1 + 1e-9)``."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    norms = np.linalg.norm(B.at(grid), ord=2, axis=(1, 2))
    with np.errstate(over="ignore"):
        r = norms * np.exp((B.eps + B.a) * np.asarray(rate(grid), dtype=float)) / np.asarray(rate.deriv(grid))
    r = np.where(norms == 0, 0.0, r)
    i = int(np.argmax(r))
    return BoundCheck(passed=bool(r[i] <= B.delta * (1 + 1e-9)), ratio=float(r[i]), at=float(grid[i]))


# --- Picard iteration -----------------------------------------------------------

@dataclass
class PicardResult:
    """Solution of the Volterra equation with its convergence profile."""

    value: np.ndarray
    iterations: int
    distances: list
    ratio: float
    residual: float
    times: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None

    def lines(self):
        yield f"iterations={self.iterations}"
        yield f"ratio={self.ratio:.6e}"
        yield f"residual={self.residual:.6e}"
        for k, d in enumerate(self.distances, 1):
            yield f"distance[{k}]={d:.6e}"


def _picard_batch(family: EvolutionFamily, B: PerturbationFamily, taus: np.ndarray, X0: np.ndarray,
                  tol: float, max_iters: int):
    """Picard on ``n`` independent intervals with nodes ``taus`` of shape (n, m+1).

    ``X0`` has shape (n, d, k). Returns the trajectories (n, m+1, d, k), the
    successive sup distances and the final residual.
    """
    n, m1 = taus.shape
    d = family.dim
    starts = np.repeat(taus[:, :1], m1, axis=1).ravel()
    W = family.propagators(taus.ravel(), starts).reshape(n, m1, d, d) @ X0[:, None]
    h = np.diff(taus, axis=1)[:, :, None, None]
    if m1 > 1:
        steps = family.propagators(taus[:, 1:].ravel(), taus[:, :-1].ravel()).reshape(n, m1 - 1, d, d)
    Bm = B.at(taus.ravel()).reshape(n, m1, d, d)
    scale = max(float(np.max(np.abs(W))), 1e-300)

    def sweep(V):
        g = Bm @ V
        out = W.copy()
        acc = np.zeros_like(V[:, 0])
        for j in range(m1 - 1):
            acc = steps[:, j] @ (acc + 0.5 * h[:, j] * g[:, j]) + 0.5 * h[:, j] * g[:, j + 1]
            out[:, j + 1] += acc
        return out

    V = W
    distances = []
    for _ in range(max_iters):
        V_new = sweep(V)
        dist = float(np.max(np.abs(V_new - V))) / scale
        distances.append(dist)
        V = V_new
        if dist <= tol:
            break
    else:
        ratio = distances[-1] / distances[-2] if len(distances) > 1 and distances[-2] > 0 else np.inf
        raise ConvergenceError(
            f"Picard iteration did not reach {tol:.1e} in {max_iters} iterations (last ratio {ratio:.3g})",
            ratio=ratio,
        )
    residual = float(np.max(np.abs(sweep(V) - V))) / scale
    return V, distances, residual


def _ratio(distances):
    pos = [b / a for a, b in zip(distances, distances[1:]) if a > 0]
    return float(max(pos)) if pos else 0.0


def _rho_nodes(rate, s: float, t: float, per_rho: int, min_nodes: int = 16) -> np.ndarray:
    rs, rt = float(rate(s)), float(rate(t))
    m = max(int(np.ceil((rt - rs) * per_rho)), min_nodes)
    nodes = np.asarray(rate.inverse(np.linspace(rs, rt, m + 1)), dtype=float)
    nodes[0], nodes[-1] = s, t
    return np.maximum.accumulate(nodes)


def solve_perturbed(family: EvolutionFamily, B: PerturbationFamily, t: float, s: float, x, rate=None,
                    tol: float = 1e-12, max_iters: int = 50, nodes_per_rho: int = 256) -> PicardResult:
    """``U(t, s) x`` by Picard iteration on nodes uniform in rho-time.

    Raises
    ------
    ConvergenceError
        If ``max_iters`` sweeps do not bring successive iterates within ``tol``
        (sup distance relative to the unperturbed trajectory).
    """
    if t < s:
        raise ValueError(f"need t >= s, got t={t}, s={s}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float).reshape(family.dim, -1)
    if rate is None:
        from .rates import make_rate

        rate = make_rate("identity")
    if t == s:
        return PicardResult(value=x[:, 0].copy() if x.shape[1] == 1 else x.copy(), iterations=0,
                            distances=[], ratio=0.0, residual=0.0)
    taus = _rho_nodes(rate, s, t, nodes_per_rho)[None, :]
    V, distances, residual = _picard_batch(family, B, taus, x[None], tol, max_iters)
    value = V[0, -1]
    return PicardResult(
        value=value[:, 0] if value.shape[1] == 1 else value,
        iterations=len(distances),
        distances=distances,
        ratio=_ratio(distances),
        residual=residual,
        times=taus[0],
        trajectory=V[0, :, :, 0] if x.shape[1] == 1 else V[0],
    )


class _PerturbedPropagator:
    """Closed form of the perturbed family on ``[0, t_end]``.

    Cell propagators between consecutive master nodes (uniform in rho) are
    solved once; products over runs of cells use a binary-lifting table, and
    partial cells at the ends are solved on demand.
    """

    def __init__(self, family, B, rate, t_end, nodes_per_rho, substeps, tol, max_iters):
        self.family = family
        self.B = B
        self.substeps = substeps
        self.tol = tol
        self.max_iters = max_iters
        self.t_end = float(t_end)
        self.grid = _rho_nodes(rate, 0.0, self.t_end, nodes_per_rho, min_nodes=4)
        d = family.dim
        cells = self._solve(self.grid[:-1], self.grid[1:], np.repeat(np.eye(d)[None], len(self.grid) - 1, axis=0))
        self.levels = [cells]
        while 2 ** len(self.levels) <= len(cells):
            prev = self.levels[-1]
            half = 2 ** (len(self.levels) - 1)
            self.levels.append(prev[half:] @ prev[: len(prev) - half])
        self.picard_stats = dict(self._last_stats)
        self._lock = threading.Lock()

    def _solve(self, s, t, X0):
        frac = np.linspace(0.0, 1.0, self.substeps + 1)
        taus = s[:, None] + (t - s)[:, None] * frac[None, :]
        taus[:, -1] = t
        V, distances, residual = _picard_batch(self.family, self.B, taus, X0, self.tol, self.max_iters)
        self._last_stats = {"iterations": len(distances), "ratio": _ratio(distances), "residual": residual}
        return V[:, -1]

    def _chain(self, a: int, b: int) -> np.ndarray:
        """Product of cells ``a .. b-1`` (maps node a to node b)."""
        out = np.eye(self.family.dim)
        pos = a
        length = b - a
        level = 0
        while length:
            if length & 1:
                out = self.levels[level][pos] @ out
                pos += 2 ** level
            length >>= 1
            level += 1
        return out

    def __call__(self, t, s):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if np.any(t > self.t_end * (1 + 1e-12)):
            raise ValueError(f"perturbed family only defined up to t={self.t_end:g}")
        g = self.grid
        d = self.family.dim
        n = len(t)
        a = np.searchsorted(g, s, side="left")      # first node >= s
        b = np.searchsorted(g, t, side="right") - 1  # last node <= t
        out = np.empty((n, d, d))
        same = a > b
        eye = np.repeat(np.eye(d)[None], n, axis=0)
        if np.any(same):
            idx = np.flatnonzero(same)
            out[idx] = self._solve(s[idx], t[idx], eye[idx])
        rest = np.flatnonzero(~same)
        if len(rest):
            head = eye[rest].copy()
            mask = s[rest] < g[a[rest]]
            if np.any(mask):
                j = rest[mask]
                head[mask] = self._solve(s[j], g[a[j]], eye[j])
            tail = eye[rest].copy()
            mask = t[rest] > g[b[rest]]
            if np.any(mask):
                j = rest[mask]
                tail[mask] = self._solve(g[b[j]], t[j], eye[j])
            for i, k in enumerate(rest):
                out[k] = tail[i] @ self._chain(int(a[k]), int(b[k])) @ head[i]
        return out


def perturbed_family(family: EvolutionFamily, B: PerturbationFamily, t_end: float, rate=None,
                     nodes_per_rho: int = 32, substeps: int = 8, tol: float = 1e-13,
                     max_iters: int = 60) -> EvolutionFamily:
    """Evolution family ``U`` of the perturbed equation on ``[0, t_end]``.

    Master nodes are uniform in rho-time; every cell and partial cell is
    solved by Picard iteration on ``substeps`` trapezoid steps.
    """
    if B.dim != family.dim:
        raise ValueError("perturbation and family dimensions differ")
    if rate is None:
        from .rates import make_rate

        rate = make_rate("identity")
    closed = _PerturbedPropagator(family, B, rate, t_end, nodes_per_rho, substeps, tol, max_iters)
    out = EvolutionFamily(family.dim, closed_form=closed, discontinuous=family.discontinuous,
                          name=f"{family.name}+{B.name}")
    out.picard_stats = closed.picard_stats
    return out


# --- operator bounds ------------------------------------------------------------

@dataclass
class OperatorBoundReport:
    """Per-probe values of ``||Bx||_1`` and ``||Bx / rho'||_inf`` against their bounds."""

    passed: bool
    rows: list

    def lines(self):
        yield f"passed={self.passed}"
        for r in self.rows:
            yield (f"{r['label']}: D={r['D']:.9e} bound_D={r['bound_D']:.9e} "
                   f"Dprime={r['Dprime']:.9e} bound_Dprime={r['bound_Dprime']:.9e} tail={r['tail']:.3e} quad={r['quad']:.3e}")


def perturbation_operator_bounds(B: PerturbationFamily, norms: NormFamily, rate, probes, C: float = None,
                                 slack: float = 1e-6) -> OperatorBoundReport:
    """Check ``||B x||_1 <= (delta C / a) ||x||_inf`` and ``||B x / rho'||_inf <= delta C ||x||_inf``.

    ``C`` defaults to ``norms.C`` (1 if unset). The sup norm replaces the
    graph norm of the solution operator, which only strengthens the check.
    """
    C = (norms.C if norms.C is not None else 1.0) if C is None else float(C)
    rows = []
    passed = True
    for x in probes:
        Bx = np.einsum("kij,kj->ki", B.at(x.grid), x.values)
        dx = SampledFunction(x.grid, Bx)
        w = np.asarray(rate.deriv(x.grid), dtype=float)
        dpx = SampledFunction(x.grid, Bx / w[:, None])
        xs = yinf_norm(x, norms)
        val_d = y1_norm(dx, norms)
        val_dp = yinf_norm(dpx, norms)
        bound_d = B.delta * C / B.a * xs
        bound_dp = B.delta * C * xs
        # mass of ||Bx|| beyond the horizon under the declared bound
        tail = bound_d * float(np.exp(-B.a * float(rate(x.t_max)))) if x.extension == "constant" else 0.0
        quad = y1_norm(dx, norms, with_error=True)[1]
        ok = val_d <= bound_d * (1 + slack) + quad and val_dp <= bound_dp * (1 + slack)
        passed = passed and ok
        rows.append({"label": x.label or "probe", "D": val_d, "bound_D": bound_d, "Dprime": val_dp,
                     "bound_Dprime": bound_dp, "tail": tail, "quad": quad, "passed": ok})
    return OperatorBoundReport(passed=passed, rows=rows)


# --- experiments ----------------------------------------------------------------

def mild_consistency(base: EvolutionFamily, perturbed: EvolutionFamily, B: PerturbationFamily,
                     x0, y: SampledFunction, pairs) -> float:
    """Worst ``|r_U(x, y) - r_T(x, y + Bx)|`` over ``pairs``.

    ``x`` is the perturbed mild solution from ``x0`` driven by ``y`` on the
    grid of ``y``; ``r_F(x, f)`` is the mild residual
    ``x(t) - F(t,s)x(s) - int_s^t F(t,.) f``.
    """
    g = y.grid
    steps = np.repeat(np.eye(base.dim)[None], len(g) - 1, axis=0)
    moving = np.flatnonzero(np.diff(g) > 0)
    steps[moving] = perturbed.propagators(g[moving + 1], g[moving])
    h = np.diff(g)
    xv = np.zeros((len(g), base.dim))
    xv[0] = x0
    for k in range(len(g) - 1):
        xv[k + 1] = steps[k] @ (xv[k] + 0.5 * h[k] * y.values[k]) + 0.5 * h[k] * y.values[k + 1]
    x = SampledFunction(g, xv)
    forced = SampledFunction(g, y.values + np.einsum("kij,kj->ki", B.at(g), xv))
    worst = 0.0
    for s, t in pairs:
        s = float(g[np.argmin(np.abs(g - s))])
        t = float(g[np.argmin(np.abs(g - t))])
        if t < s:
            raise ValueError(f"pair (s={s}, t={t}) is not ordered")
        xs, xt = x.segment(s, t)[1][[0, -1]]
        r_u = xt - perturbed(t, s) @ xs - _integral(perturbed, y, s, t)
        r_t = xt - base(t, s) @ xs - _integral(base, forced, s, t)
        worst = max(worst, float(np.linalg.norm(r_u - r_t)))
    return worst


def _integral(family, f: SampledFunction, s, t):
    times, vals = f.segment(s, t)
    mats = family.propagators(np.full(len(times), t), times)
    return np.trapezoid(np.einsum("kij,kj->ki", mats, vals), times, axis=0)


@dataclass
class RobustnessReport:
    """Certificates before and after perturbation with diagnostics."""

    robust: bool
    before: DichotomyCertificate
    after: Optional[DichotomyCertificate]
    bound_check: BoundCheck
    lam_drop: float = np.nan
    D_ratio: float = np.nan
    max_angle: float = np.nan
    mild_consistency: float = np.nan
    verify_after: Optional[object] = None
    picard: dict = field(default_factory=dict)
    failure: str = ""

    def lines(self):
        yield f"robust={self.robust}"
        yield f"before D={self.before.D:.9e} lam={self.before.lam:.9e}"
        if self.after is not None:
            yield f"after D={self.after.D:.9e} lam={self.after.lam:.9e}"
        yield f"lam_drop={self.lam_drop:.6e}"
        yield f"D_ratio={self.D_ratio:.6e}"
        yield f"max_stable_angle={self.max_angle:.6e}"
        yield f"mild_consistency={self.mild_consistency:.6e}"
        for line in self.bound_check.lines():
            yield f"bound_check.{line}"
        for k, v in self.picard.items():
            yield f"picard.{k}={v}"
        if self.failure:
            yield f"failure={self.failure}"


def _certify(family, Z, norms, rate, grid, horizon_rho, gap):
    proj = detect_projections(family, Z, rate, grid, horizon_rho, gap, norms)
    return estimate_certificate(family, proj, norms, rate)


def robustness_experiment(family: EvolutionFamily, B: PerturbationFamily, Z: SubspaceZ,
                          norms: Optional[NormFamily], rate, config: dict) -> RobustnessReport:
    """Certify before and after perturbation and compare.

    ``config`` keys: ``t_max``, ``cert_step``, ``horizon_rho`` (default 5),
    ``gap`` (0.2), ``consistency_t`` (2.0), ``consistency_step`` (1e-3),
    ``verify`` (False).
    """
    norms = norms or base_norms()
    t_max = float(config["t_max"])
    step = float(config["cert_step"])
    horizon_rho = float(config.get("horizon_rho", 5.0))
    gap = float(config.get("gap", 0.2))
    grid = uniform_grid(t_max, step)
    check = check_perturbation_bound(B, rate, uniform_grid(t_max, min(step, 0.01)))
    if not check.passed:
        raise ValueError(f"perturbation violates its declared bound (ratio {check.ratio:.6g} > {B.delta:g})")
    before = _certify(family, Z, norms, rate, grid, horizon_rho, gap)
    t_end = float(rate.inverse(float(rate(t_max)) + horizon_rho)) * (1 + 1e-9)
    U = perturbed_family(family, B, t_end, rate=rate)
    try:
        after = _certify(U, Z, norms, rate, grid, horizon_rho, gap)
    except (NoDichotomyError, RhoDichError) as exc:
        return RobustnessReport(robust=False, before=before, after=None, bound_check=check,
                                picard=dict(U.picard_stats), failure=f"{type(exc).__name__}: {exc}")
    angle = 0.0
    for t, S0, S1 in zip(grid, before.proj.S, after.proj.S):
        if S0.shape[1] and S0.shape[1] < family.dim:
            angle = max(angle, float(np.max(_principal_angles(S0, S1))))
    t_c = min(float(config.get("consistency_t", 2.0)), t_max)
    cgrid = uniform_grid(t_c, float(config.get("consistency_step", 1e-3)))
    rng = np.random.default_rng(0)
    y = SampledFunction(cgrid, np.cos(cgrid)[:, None] * rng.standard_normal(family.dim))
    pairs = [(0.0, t_c), (0.25 * t_c, 0.75 * t_c), (0.5 * t_c, t_c)]
    consistency = mild_consistency(family, U, B, rng.standard_normal(family.dim), y, pairs)
    report = RobustnessReport(
        robust=True,
        before=before,
        after=after,
        bound_check=check,
        lam_drop=before.lam - after.lam,
        D_ratio=after.D / before.D,
        max_angle=angle,
        mild_consistency=consistency,
        picard=dict(U.picard_stats),
    )
    if config.get("verify"):
        report.verify_after = verify_dichotomy(U, after, norms, rate, uniform_grid(t_max, step / 2))
    return report


def _principal_angles(A, Bm):
    from scipy.linalg import subspace_angles

    return subspace_angles(A, Bm)


def delta_sweep(family: EvolutionFamily, B: PerturbationFamily, Z: SubspaceZ, norms, rate, config: dict,
                deltas=(0.01, 0.02, 0.05)):
    """``(delta, lam_after or None)`` per declared bound, plus the largest delta keeping a certificate."""
    rows = []
    largest = None
    for delta in deltas:
        rep = robustness_experiment(family, B.scaled(delta), Z, norms, rate, config)
        lam = rep.after.lam if rep.robust else None
        rows.append((float(delta), lam, rep))
        if rep.robust:
            largest = float(delta)
    return rows, largest
