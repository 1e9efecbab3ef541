"""Splitting X = S(tau) + U(tau), projections and dichotomy certificates.

The stable space is classified from finite-time rho-exponents of
``T(tau + H, tau)``; the unstable space is transported from the
admissibility subspace, ``U(tau) = T(tau, 0) Z``. Backward maps on the
unstable bundle are restricted pseudo-inverses, so the family itself never
has to be invertible.

The two certified bounds are named ``d1`` (forward decay on the stable part,
``||T(t,s)P(s)x||_t <= D e^{-lam (rho(t)-rho(s))} ||x||_s`` for ``t >= s``)
and ``d2`` (the same decay for the unstable part run backwards).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import subspace_angles

from .errors import (
    CommutationError,
    DegenerateSplittingError,
    InvertibilityError,
    NoDichotomyError,
)
from .family import EvolutionFamily, NormFamily, _envelope_fit
from .funcspaces import SubspaceZ

__all__ = [
    "ProjectionPath",
    "DichotomyCertificate",
    "VerificationReport",
    "stable_subspace",
    "unstable_subspace",
    "build_projections",
    "detect_projections",
    "restricted_inverse",
    "estimate_certificate",
    "verify_dichotomy",
    "geometric_pairs",
    "default_probes",
    "COND_LIMIT",
]

COND_LIMIT = 1e8
MIN_RHO_SPAN = 5.0


def _orth(m: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    if m.shape[1] == 0:
        return m
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s[0] == 0:
        return m[:, :0]
    return u[:, : int(np.sum(s > rel_tol * s[0]))]


def _projector(S: np.ndarray, U: np.ndarray) -> np.ndarray:
    d = S.shape[0]
    if U.shape[1] == 0:
        return np.eye(d)
    if S.shape[1] == 0:
        return np.zeros((d, d))
    basis = np.hstack([S, U])
    coeff = np.linalg.solve(basis, np.eye(d))
    return S @ coeff[: S.shape[1]]


def _min_angle(S: np.ndarray, U: np.ndarray) -> float:
    if S.shape[1] == 0 or U.shape[1] == 0:
        return np.pi / 2
    return float(np.min(subspace_angles(S, U)))


# --- subspaces ----------------------------------------------------------------

def stable_subspace(family: EvolutionFamily, tau: float, rate, horizon_rho: float = MIN_RHO_SPAN,
                    gap: float = 0.2, norms: Optional[NormFamily] = None) -> np.ndarray:
    """Orthonormal basis of the finite-time stable space at ``tau``.

    Right singular vectors of ``T(tau + H, tau)`` whose rho-exponent
    ``log(sigma) / (rho(tau+H) - rho(tau))`` is below ``-gap``. ``norms``
    only enters through a ``weight`` attribute (scaled Euclidean norms).

    Raises
    ------
    NoDichotomyError
        If some exponent lies in ``[-gap, gap]``.
    """
    if horizon_rho < MIN_RHO_SPAN:
        raise ValueError(f"horizon must span at least {MIN_RHO_SPAN} units of rho-time")
    r0 = float(rate(tau))
    t_end = float(rate.inverse(r0 + horizon_rho))
    span = float(rate(t_end)) - r0
    _, sig, vt = np.linalg.svd(family(t_end, tau))
    weight = getattr(norms, "weight", None)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log(sig)
        if weight is not None:
            logs = logs + np.log(weight(t_end)) - np.log(weight(tau))
    expo = logs / span
    dead = (expo >= -gap) & (expo <= gap)
    if np.any(dead):
        e = float(expo[np.flatnonzero(dead)[0]])
        raise NoDichotomyError(
            f"no spectral gap at tau={tau:.6g}: finite-time exponent {e:.4g} inside (-{gap}, {gap})",
            exponent=e,
        )
    return vt[expo < -gap].T.copy()


def unstable_subspace(family: EvolutionFamily, Z: SubspaceZ, tau: float) -> np.ndarray:
    """Orthonormal basis of ``T(tau, 0) Z``; rank drop raises InvertibilityError."""
    if Z.k == 0:
        return np.zeros((family.dim, 0))
    m = family(tau, 0.0) @ Z.basis
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    if cond > COND_LIMIT:
        raise InvertibilityError(
            f"T({tau:.6g}, 0) is not injective on Z (condition {cond:.3g})", condition=cond
        )
    return u[:, : Z.k]


def restricted_inverse(family: EvolutionFamily, U_t: np.ndarray, t: float, s: float):
    """Matrix of ``(T(s,t)|_{U(t)})^{-1}`` for ``t <= s``, acting on ``U(s)``.

    Returns ``(R, cond)`` with ``R = U_t pinv(T(s,t) U_t)``.
    """
    d = family.dim
    if U_t.shape[1] == 0:
        return np.zeros((d, d)), 1.0
    img = family(s, t) @ U_t
    sv = np.linalg.svd(img, compute_uv=False)
    cond = np.inf if sv[-1] == 0 else float(sv[0] / sv[-1])
    if cond > COND_LIMIT:
        raise InvertibilityError(
            f"T({s:.6g}, {t:.6g}) restricted to the unstable space is ill-conditioned ({cond:.3g})",
            condition=cond,
        )
    return U_t @ np.linalg.pinv(img), cond


# --- projection paths ---------------------------------------------------------

@dataclass
class ProjectionPath:
    """Projections ``P(t)`` onto ``S(t)`` along ``U(t)`` at grid nodes.

    ``builder(t) -> (S_basis, U_basis)`` is used for times that are not
    grid nodes; without one, times are quantized to the nearest node.
    """

    grid: np.ndarray
    P: np.ndarray
    S: list
    U: list
    builder: Optional[Callable] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)
    _extra: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    @classmethod
    def constant(cls, P, grid) -> "ProjectionPath":
        """Time-independent projection (bases taken from its range and kernel)."""
        P = np.asarray(P, dtype=float)
        grid = np.asarray(grid, dtype=float)
        d = P.shape[0]
        S = _orth(P)
        U = _orth(np.eye(d) - P)
        return cls(
            grid=grid,
            P=np.repeat(P[None], len(grid), axis=0),
            S=[S] * len(grid),
            U=[U] * len(grid),
            builder=lambda t: (S, U),
        )

    def _index(self, t: float):
        k = int(np.searchsorted(self.grid, t))
        for j in (k - 1, k):
            if 0 <= j < len(self.grid) and abs(self.grid[j] - t) <= 1e-12 * (1 + abs(t)):
                return j
        return None

    def bases_at(self, t: float):
        j = self._index(t)
        if j is not None:
            return self.S[j], self.U[j]
        if t in self._extra:
            return self._extra[t][1:]
        if self.builder is None:
            j = int(np.argmin(np.abs(self.grid - t)))
            return self.S[j], self.U[j]
        S, U = self.builder(t)
        self._extra[t] = (_projector(S, U), S, U)
        return S, U

    def at(self, t: float) -> np.ndarray:
        """``P(t)``."""
        j = self._index(t)
        if j is not None:
            return self.P[j]
        if t not in self._extra:
            self.bases_at(t)
        if t in self._extra:
            return self._extra[t][0]
        return self.P[int(np.argmin(np.abs(self.grid - t)))]

    def Q_at(self, t: float) -> np.ndarray:
        return np.eye(self.dim) - self.at(t)


def build_projections(grid, S_bases, U_bases, family: Optional[EvolutionFamily] = None,
                      builder: Optional[Callable] = None, angle_tol: float = 1e-6) -> ProjectionPath:
    """Projections along ``U`` onto ``S`` at each node.

    Raises
    ------
    DegenerateSplittingError
        If ``dim S + dim U != d`` or the minimal principal angle is below
        ``angle_tol``.
    """
    grid = np.asarray(grid, dtype=float)
    Ps, angles = [], []
    for t, S, U in zip(grid, S_bases, U_bases):
        d = S.shape[0]
        if S.shape[1] + U.shape[1] != d:
            raise DegenerateSplittingError(
                f"dim S + dim U = {S.shape[1]} + {U.shape[1]} != {d} at t={t:.6g}"
            )
        ang = _min_angle(S, U)
        if ang < angle_tol:
            raise DegenerateSplittingError(
                f"S and U nearly intersect at t={t:.6g} (angle {ang:.3g})", angle=ang
            )
        angles.append(ang)
        Ps.append(_projector(S, U))
    P = np.array(Ps)
    diag = {"min_angle": float(min(angles)) if angles else np.pi / 2}
    if family is not None and len(grid) > 1:
        T = family.propagators(grid[1:], grid[:-1])
        res = np.linalg.norm(T @ P[:-1] - P[1:] @ T, ord=2, axis=(1, 2))
        diag["commutation"] = float(np.max(res / (1.0 + np.linalg.norm(T, ord=2, axis=(1, 2)))))
    return ProjectionPath(grid=grid, P=P, S=list(S_bases), U=list(U_bases), builder=builder,
                          diagnostics=diag)


def detect_projections(family: EvolutionFamily, Z: SubspaceZ, rate, grid, horizon_rho: float = MIN_RHO_SPAN,
                       gap: float = 0.2, norms: Optional[NormFamily] = None) -> ProjectionPath:
    """Stable/unstable detection at every node followed by :func:`build_projections`."""

    def builder(t):
        return (stable_subspace(family, t, rate, horizon_rho, gap, norms), unstable_subspace(family, Z, t))

    grid = np.asarray(grid, dtype=float)
    pairs = [builder(t) for t in grid]
    return build_projections(grid, [p[0] for p in pairs], [p[1] for p in pairs], family=family,
                             builder=builder)


# --- certificates -------------------------------------------------------------

def geometric_pairs(n: int, exhaustive_below: int = 0):
    """Index pairs ``(i, j)``, ``j >= i``, with ``j - i`` in ``{0, 1, 2, 4, ...}``."""
    if n <= exhaustive_below:
        return [(i, j) for i in range(n) for j in range(i, n)]
    out = []
    for i in range(n):
        out.append((i, i))
        step = 1
        while i + step < n:
            out.append((i, i + step))
            step *= 2
        if i < n - 1 and (n - 1 - i) & (n - 2 - i):
            out.append((i, n - 1))
    return out


def default_probes(dim: int, n_random: int = 8, seed: int = 0) -> np.ndarray:
    """Standard basis plus seeded random unit vectors."""
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((n_random if dim > 1 else 0, dim))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True) if len(rand) else 1.0
    return np.vstack([np.eye(dim), rand])


@dataclass
class DichotomyCertificate:
    """Projections plus constants ``(D, lam)`` witnessing the dichotomy.

    ``M`` bounds ``||P(t) v||_t / ||v||_t`` on the probes.
    """

    proj: ProjectionPath
    D: float
    lam: float
    M: float
    rate: object = field(repr=False)
    family: Optional[EvolutionFamily] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def forward(self, t: float, s: float) -> np.ndarray:
        """``T(t, s) P(s)`` for ``t >= s``."""
        return self.family(t, s) @ self.proj.at(s)

    def backward(self, t: float, s: float):
        """``T(t, s) Q(s)`` for ``t <= s`` through the restricted inverse; returns ``(matrix, cond)``."""
        _, U_t = self.proj.bases_at(t)
        R, cond = restricted_inverse(self.family, U_t, t, s)
        return R @ self.proj.Q_at(s), cond


def _pair_growth(family, proj, norms, pairs, probes, chunk: int = 20000):
    """Batched growth data for the pairs ``(s, t)``, ``s <= t``.

    Returns arrays ``num1, den1`` for (d1) and ``num2, den2`` for (d2) of
    shape ``(n, p)``, plus per-pair commutation residuals and restricted
    inverse conditions. (d2) rows are NaN where ``s == t`` or the inverse
    is ill-conditioned.
    """
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    p = len(probes)
    if not len(pairs):
        empty = np.zeros((0, p))
        return {"num1": empty, "den1": empty, "num2": empty, "den2": empty, "comm": np.zeros(0),
                "cond": np.ones(0)}
    times = np.unique(pairs)
    index = {t: i for i, t in enumerate(times.tolist())}
    P_all = np.stack([proj.at(t) for t in times])
    U_all = [proj.bases_at(t)[1] for t in times]
    d = family.dim
    eye = np.eye(d)
    out = {k: [] for k in ("num1", "den1", "num2", "den2", "comm", "cond")}
    for lo in range(0, len(pairs), chunk):
        s, t = pairs[lo:lo + chunk, 0], pairs[lo:lo + chunk, 1]
        si = np.array([index[v] for v in s.tolist()])
        ti = np.array([index[v] for v in t.tolist()])
        n = len(s)
        T = family.propagators(t, s)
        Ps, Pt = P_all[si], P_all[ti]
        fwd = np.einsum("nij,pj->npi", T @ Ps, probes)
        out["num1"].append(norms.batch(np.repeat(t, p), fwd.reshape(-1, d)).reshape(n, p))
        out["den1"].append(norms.batch(np.repeat(s, p), np.tile(probes, (n, 1))).reshape(n, p))
        comm = np.linalg.norm(T @ Ps - Pt @ T, 2, axis=(1, 2)) / (1 + np.linalg.norm(T, 2, axis=(1, 2)))
        comm[t <= s] = 0.0
        num2 = np.full((n, p), np.nan)
        cond = np.ones(n)
        moving = np.flatnonzero(t > s)
        k = U_all[si[0]].shape[1]
        if k and len(moving):
            Us = np.stack([U_all[j] for j in si[moving]])
            img = T[moving] @ Us
            sv = np.linalg.svd(img, compute_uv=False)
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(sv[:, -1] > 0, sv[:, 0] / sv[:, -1], np.inf)
            cond[moving] = c
            good = c <= COND_LIMIT
            rows = moving[good]
            B = Us[good] @ np.linalg.pinv(img[good]) @ (eye - Pt[rows])
            back = np.einsum("nij,pj->npi", B, probes)
            num2[rows] = norms.batch(np.repeat(s[rows], p), back.reshape(-1, d)).reshape(len(rows), p)
        elif len(moving):
            num2[moving] = 0.0
        out["num2"].append(num2)
        out["den2"].append(norms.batch(np.repeat(t, p), np.tile(probes, (n, 1))).reshape(n, p))
        out["comm"].append(comm)
        out["cond"].append(cond)
    return {k: np.concatenate(v) for k, v in out.items()}


def _dichotomy_samples(family, proj, norms, rate, pairs_t, probes):
    """Growth samples ``(delta_rho, log ratio)`` for (d1) and (d2) plus diagnostics."""
    probes = np.atleast_2d(probes)
    pairs = np.asarray(pairs_t, dtype=float).reshape(-1, 2)
    data = _pair_growth(family, proj, norms, pairs, probes)
    bad = np.flatnonzero(data["cond"] > COND_LIMIT)
    if len(bad):
        s, t = pairs[bad[0]]
        c = float(data["cond"][bad[0]])
        raise InvertibilityError(
            f"T({t:.6g}, {s:.6g}) restricted to the unstable space is ill-conditioned ({c:.3g})", condition=c)
    drho = np.asarray(rate(pairs[:, 1]), dtype=float) - np.asarray(rate(pairs[:, 0]), dtype=float)
    deltas, logs, kinds, where = [], [], [], []
    for kind, num, den in ((0, data["num1"], data["den1"]), (1, data["num2"], data["den2"])):
        ok = np.isfinite(num) & (num > 1e-300) & (den > 0)
        i, j = np.nonzero(ok)
        deltas.append(drho[i])
        logs.append(np.log(num[ok] / den[ok]))
        kinds.append(np.full(len(i), kind))
        a, b = (0, 1) if kind == 0 else (1, 0)
        where.extend((pairs[r, a], pairs[r, b], q) for r, q in zip(i, j))
    comm = float(np.max(data["comm"], initial=0.0))
    cond = float(np.max(data["cond"], initial=1.0))
    return np.concatenate(deltas), np.concatenate(logs), np.concatenate(kinds), where, cond, comm


def _projection_bound(proj, norms, grid, probes):
    grid = np.asarray(grid, dtype=float)
    P = np.stack([proj.at(t) for t in grid])
    n, p, d = len(grid), len(probes), probes.shape[1]
    ts = np.repeat(grid, p)
    num = norms.batch(ts, np.einsum("nij,pj->npi", P, probes).reshape(-1, d))
    den = norms.batch(ts, np.tile(probes, (n, 1)))
    return float(np.max(num / den))


def estimate_certificate(family: EvolutionFamily, proj: ProjectionPath, norms: NormFamily, rate,
                         pairs=None, probes=None, commute_tol: float = 1e-6) -> DichotomyCertificate:
    """Fit ``(D, lam)`` to the growth samples of (d1) and (d2).

    The line ``log D - lam * delta_rho`` covers every sample
    ``log(||T(t,s)P(s)x||_t / ||x||_s)`` (and its mirrored backward
    counterpart) with minimal total slack; among optimal lines the largest
    ``lam`` wins, then the smallest ``D``.

    Raises
    ------
    CommutationError
        If the projections fail the commutation diagnostic.
    NoDichotomyError
        If the fitted ``lam`` is not positive.
    """
    grid = proj.grid
    if pairs is None:
        pairs = [(grid[i], grid[j]) for i, j in geometric_pairs(len(grid))]
    probes = default_probes(family.dim) if probes is None else np.atleast_2d(probes)
    delta, g, kinds, where, cond, comm = _dichotomy_samples(family, proj, norms, rate, pairs, probes)
    if comm > commute_tol:
        raise CommutationError(f"projections do not commute with the dynamics (residual {comm:.3g})")
    if len(g) == 0:
        raise NoDichotomyError("no nonzero growth samples to fit")
    logD, lam = _envelope_fit(delta, g, sign=-1.0)
    if lam <= 0:
        raise NoDichotomyError(f"best-fit decay rate {lam:.4g} is not positive", exponent=lam)
    M = _projection_bound(proj, norms, grid, probes)
    slack = logD - lam * delta - g
    diagnostics = {
        "samples": int(len(g)),
        "d1_samples": int(np.sum(kinds == 0)),
        "d2_samples": int(np.sum(kinds == 1)),
        "min_slack": float(np.min(slack)),
        "commutation": comm,
        "max_condition": cond,
        "max_delta_rho": float(np.max(delta)),
    }
    return DichotomyCertificate(proj=proj, D=float(np.exp(logD)), lam=float(lam), M=M, rate=rate,
                                family=family, diagnostics=diagnostics)


@dataclass
class VerificationReport:
    passed: bool
    d1_slack: float
    d2_slack: float
    projection_slack: float
    commutation: float
    max_condition: float
    worst_d1: Optional[tuple] = None
    worst_d2: Optional[tuple] = None
    failures: list = field(default_factory=list)

    def lines(self):
        yield f"passed={self.passed}"
        yield f"d1_slack={self.d1_slack:.6e} worst={self.worst_d1}"
        yield f"d2_slack={self.d2_slack:.6e} worst={self.worst_d2}"
        yield f"projection_slack={self.projection_slack:.6e}"
        yield f"commutation={self.commutation:.6e}"
        yield f"max_condition={self.max_condition:.6e}"
        for f in self.failures:
            yield f"FAIL {f}"


def verify_dichotomy(family: EvolutionFamily, cert: DichotomyCertificate, norms: NormFamily, rate,
                     grid, probes=None, tol: float = 1e-6, commute_tol: float = 1e-6,
                     exhaustive_below: int = 0) -> VerificationReport:
    """Recompute the worst relative slack of every dichotomy inequality on ``grid``.

    Slack is ``lhs / rhs - 1``; the certificate passes when all slacks are
    at most ``tol``, commutation residuals at most ``commute_tol`` and the
    restricted inverses have condition at most ``COND_LIMIT``.
    """
    grid = np.asarray(grid, dtype=float)
    probes = default_probes(family.dim) if probes is None else np.atleast_2d(probes)
    pairs = [(grid[i], grid[j]) for i, j in geometric_pairs(len(grid), exhaustive_below)]
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    data = _pair_growth(family, cert.proj, norms, pairs, probes)
    drho = np.asarray(rate(pairs[:, 1]), dtype=float) - np.asarray(rate(pairs[:, 0]), dtype=float)
    bound = cert.D * np.exp(-cert.lam * drho)
    worst = {"d1": (-np.inf, None), "d2": (-np.inf, None)}
    for key, num, den in (("d1", data["num1"], data["den1"]), ("d2", data["num2"], data["den2"])):
        r = np.max(num / (bound[:, None] * den), axis=1) - 1.0
        r = np.where(np.isnan(r), -np.inf, r)
        if len(r) and np.isfinite(np.max(r)):
            i = int(np.argmax(r))
            worst[key] = (float(r[i]), (float(pairs[i, 0]), float(pairs[i, 1])))
    comm = float(np.max(data["comm"], initial=0.0))
    cond_max = float(np.max(data["cond"], initial=1.0))
    failures = []
    m_slack = _projection_bound(cert.proj, norms, grid, probes) / cert.M - 1.0
    d1, d2 = worst["d1"][0], worst["d2"][0]
    if d1 > tol:
        failures.append(f"(d1) slack {d1:.3e} at (s, t) = {worst['d1'][1]}")
    if d2 > tol:
        failures.append(f"(d2) slack {d2:.3e} at (t, s) = {worst['d2'][1]}")
    if m_slack > tol:
        failures.append(f"projection bound slack {m_slack:.3e}")
    if comm > commute_tol:
        failures.append(f"commutation residual {comm:.3e}")
    if cond_max > COND_LIMIT:
        failures.append(f"restricted inverse condition {cond_max:.3e}")
    return VerificationReport(
        passed=not failures,
        d1_slack=float(d1),
        d2_slack=float(d2),
        projection_slack=float(m_slack),
        commutation=comm,
        max_condition=float(cond_max),
        worst_d1=worst["d1"][1],
        worst_d2=worst["d2"][1],
        failures=failures,
    )
