"""Adapted (Lyapunov) norms that make a dichotomy uniform.

For a certificate with projections ``P`` and decay rate ``lam``::

    ||x||_t = sup_{tau >= t}    e^{lam (rho(tau) - rho(t))} ||T(tau, t) P(t) x||
            + sup_{0 <= tau <= t} e^{lam (rho(t) - rho(tau))} ||T(tau, t) Q(t) x||

where the backward factor is the inverse of ``T(t, tau)`` restricted to the
unstable space. Both suprema are sampled on a global lattice that is uniform
in rho-time, and the forward one is truncated after ``H_sup`` rho units.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dichotomy import COND_LIMIT, DichotomyCertificate, default_probes
from .errors import HorizonTooShortError, InvertibilityError
from .family import NormBounds, NormFamily, base_norms, norm_bounds_estimate

__all__ = [
    "AdaptedNormFamily",
    "AdaptedValue",
    "adapted_norm_eval",
    "UniformityReport",
    "adapted_uniformity_check",
    "EquivalenceReport",
    "adapted_equivalence_check",
]

NODES_PER_RHO = 64


@dataclass(frozen=True)
class AdaptedValue:
    """Adapted norm with its parts and the forward truncation bound."""

    value: float
    forward: float
    backward: float
    truncation: float
    argmax_forward: float


class AdaptedNormFamily(NormFamily):
    """Norm family built from a certificate; usable wherever norms are accepted.

    Parameters
    ----------
    cert : DichotomyCertificate
        Needs ``proj``, ``family`` and the fitted ``lam``.
    rate : RateFunction
    H_sup : float
        Forward truncation span in rho units.
    lam : float, optional
        Rate inside the norm; defaults to ``cert.lam / 2`` so the forward
        supremand decays even when the fitted rate overshoots.
    base : NormFamily, optional
        Underlying norms; the Euclidean norm by default.
    """

    def __init__(self, cert: DichotomyCertificate, rate, H_sup: float = 10.0, lam: Optional[float] = None,
                 base: Optional[NormFamily] = None, nodes_per_rho: int = NODES_PER_RHO,
                 check_horizon: bool = True):
        if H_sup < 0:
            raise ValueError("H_sup must be nonnegative")
        self.cert = cert
        self.rate = rate
        self.H_sup = float(H_sup)
        self.lam = cert.lam / 2.0 if lam is None else float(lam)
        self.base_family = base or base_norms()
        self.nodes_per_rho = int(nodes_per_rho)
        self.check_horizon = check_horizon
        self._rho0 = float(rate(0.0))
        self._lattice = np.array([0.0])
        self._U = {}
        self._lock = threading.Lock()
        super().__init__(eval=self._eval, name=f"adapted(lam={self.lam:.6g}, H={self.H_sup:g})",
                         batch_eval=self._batch)

    # lattice of tau nodes with rho(tau_k) = rho(0) + k / nodes_per_rho
    def _lattice_upto(self, k_max: int) -> np.ndarray:
        with self._lock:
            n = len(self._lattice)
            if k_max >= n:
                ks = np.arange(n, k_max + 1)
                ys = self._rho0 + ks / self.nodes_per_rho
                new = np.array([float(self.rate.inverse(y)) for y in ys])
                self._lattice = np.concatenate([self._lattice, new])
            return self._lattice[: k_max + 1]

    def lattice_index(self, t: float) -> float:
        """Fractional lattice position of ``t``."""
        return (float(self.rate(t)) - self._rho0) * self.nodes_per_rho

    def lattice_time(self, k: int) -> float:
        return float(self._lattice_upto(k)[k])

    def _U_at(self, k: int, tau: float):
        U = self._U.get(k)
        if U is None:
            U = self.cert.proj.bases_at(tau)[1]
            self._U[k] = U
        return U

    def _forward(self, t, v, kt):
        k_end = int(np.floor(kt + self.H_sup * self.nodes_per_rho + 1e-9))
        k_start = int(np.floor(kt + 1e-9)) + 1
        lattice = self._lattice_upto(max(k_end, 0))
        taus = np.concatenate([[t], lattice[k_start: k_end + 1]]) if k_end >= k_start else np.array([t])
        mats = self.cert.family.propagators(taus, np.full(len(taus), t))
        w = np.einsum("kij,j->ki", mats, v)
        rt = float(self.rate(t))
        vals = np.exp(self.lam * (np.asarray(self.rate(taus), dtype=float) - rt)) * self.base_family.batch(taus, w)
        i = int(np.argmax(vals))
        if self.check_horizon and len(vals) > 1 and i == len(vals) - 1 and vals[-1] > vals[0] * (1 + 1e-12):
            raise HorizonTooShortError(
                f"forward supremand still increasing at tau={taus[-1]:.6g} (t={t:.6g}, H_sup={self.H_sup:g})"
            )
        return float(vals[i]), float(taus[i])

    def _backward(self, t, w, kt):
        k_top = int(np.ceil(kt - 1e-9)) - 1
        taus = [t]
        ks = [None]
        if k_top >= 0:
            lattice = self._lattice_upto(k_top)
            taus += list(lattice[: k_top + 1])
            ks += list(range(k_top + 1))
        taus = np.array(taus)
        U_t = self.cert.proj.bases_at(t)[1]
        if U_t.shape[1] == 0:
            return 0.0
        Us = np.stack([U_t] + [self._U_at(k, tau) for k, tau in zip(ks[1:], taus[1:])])
        mats = self.cert.family.propagators(np.full(len(taus), t), taus)
        img = mats @ Us
        sv = np.linalg.svd(img, compute_uv=False)
        cond = np.max(sv[:, 0] / np.maximum(sv[:, -1], 1e-300))
        if cond > COND_LIMIT:
            raise InvertibilityError(f"backward factor ill-conditioned at t={t:.6g} ({cond:.3g})",
                                     condition=float(cond))
        coeff = np.einsum("kij,j->ki", np.linalg.pinv(img), w)
        back = np.einsum("kij,kj->ki", Us, coeff)
        rt = float(self.rate(t))
        vals = np.exp(self.lam * (rt - np.asarray(self.rate(taus), dtype=float))) * self.base_family.batch(taus, back)
        return float(np.max(vals))

    def evaluate(self, t: float, x) -> AdaptedValue:
        """Adapted norm at ``t`` with its parts and truncation bound."""
        t = float(t)
        x = np.asarray(x, dtype=float)
        P = self.cert.proj.at(t)
        v = P @ x
        w = x - v
        kt = self.lattice_index(t)
        scale = max(float(np.linalg.norm(x)), 1e-300)
        fwd, arg = (0.0, t) if np.linalg.norm(v) <= 1e-15 * scale else self._forward(t, v, kt)
        bwd = 0.0 if np.linalg.norm(w) <= 1e-15 * scale else self._backward(t, w, kt)
        gap = max(self.cert.lam - self.lam, 0.0)
        trunc = self.cert.D * np.exp(-gap * self.H_sup) * self.base_family(t, v)
        return AdaptedValue(value=fwd + bwd, forward=fwd, backward=bwd, truncation=float(trunc),
                            argmax_forward=arg)

    def _eval(self, t, x):
        return self.evaluate(t, x).value

    def _batch(self, ts, xs):
        return np.array([self.evaluate(t, x).value for t, x in zip(ts, xs)])


def adapted_norm_eval(cert: DichotomyCertificate, rate, t: float, x, H_sup: float = 10.0,
                      lam: Optional[float] = None) -> AdaptedValue:
    """One-off evaluation of the adapted norm (see :class:`AdaptedNormFamily`)."""
    return AdaptedNormFamily(cert, rate, H_sup=H_sup, lam=lam).evaluate(t, x)


@dataclass
class UniformityReport:
    """Worst ratios of the adapted dichotomy inequalities with ``D = 1``."""

    passed: bool
    forward_ratio: float
    backward_ratio: float
    worst_forward: Optional[tuple] = None
    worst_backward: Optional[tuple] = None
    tol: float = 0.05

    @property
    def ratio(self) -> float:
        return max(self.forward_ratio, self.backward_ratio)

    def lines(self):
        yield f"passed={self.passed}"
        yield f"forward_ratio={self.forward_ratio:.6e} at {self.worst_forward}"
        yield f"backward_ratio={self.backward_ratio:.6e} at {self.worst_backward}"


def adapted_uniformity_check(cert: DichotomyCertificate, rate, adapted: AdaptedNormFamily, pairs,
                             probes=None, tol: float = 0.05) -> UniformityReport:
    """Check ``||T(t,s)P(s)x||_t <= e^{-lam(rho(t)-rho(s))} ||x||_s`` in adapted norms.

    The mirrored inequality ``||T(s,t)Q(t)x||_s <= e^{-lam(rho(t)-rho(s))} ||x||_t``
    is checked too. Pair times are snapped to the supremum lattice so the
    sampled suprema of both sides use the same nodes.
    """
    family = cert.family
    probes = default_probes(family.dim, n_random=4) if probes is None else np.atleast_2d(probes)
    lam = adapted.lam
    worst_f = (0.0, None)
    worst_b = (0.0, None)
    for s, t in pairs:
        if t < s:
            raise ValueError(f"pair (s={s}, t={t}) is not ordered")
        s = adapted.lattice_time(int(round(adapted.lattice_index(s))))
        t = adapted.lattice_time(int(round(adapted.lattice_index(t))))
        decay = np.exp(-lam * (float(rate(t)) - float(rate(s))))
        A = cert.forward(t, s)
        B = cert.backward(s, t)[0] if t > s else cert.proj.Q_at(s)
        for x in probes:
            den = decay * adapted(s, x)
            if den > 0:
                r = adapted(t, A @ x) / den
                if r > worst_f[0]:
                    worst_f = (r, (s, t))
            den = decay * adapted(t, x)
            if den > 0:
                r = adapted(s, B @ x) / den
                if r > worst_b[0]:
                    worst_b = (r, (s, t))
    return UniformityReport(
        passed=bool(max(worst_f[0], worst_b[0]) <= 1.0 + tol),
        forward_ratio=float(worst_f[0]),
        backward_ratio=float(worst_b[0]),
        worst_forward=worst_f[1],
        worst_backward=worst_b[1],
        tol=tol,
    )


@dataclass
class EquivalenceReport:
    """Fitted ``(C, eps)`` of ``||x|| <= ||x||_t^adapted <= C e^{eps rho(t)} ||x||``."""

    passed: bool
    C: float
    eps: float
    C_limit: float
    lower_violation: float
    recovery_slack: float
    bounds: NormBounds = field(repr=False, default=None)

    def lines(self):
        yield f"passed={self.passed}"
        yield f"C={self.C:.6e} (limit {self.C_limit:.6e})"
        yield f"eps={self.eps:.6e}"
        yield f"lower_violation={self.lower_violation:.6e}"
        yield f"recovery_slack={self.recovery_slack:.6e}"


def adapted_equivalence_check(adapted: AdaptedNormFamily, base: Optional[NormFamily], rate, grid, probes=None,
                              tol: float = 0.05, pairs=None) -> EquivalenceReport:
    """Fit the equivalence constants and check ``C <= 2 D + tol``.

    With ``pairs`` the converse bound
    ``||T(t,s)P(s)x|| <= C e^{eps rho(s)} e^{-lam(rho(t)-rho(s))} ||x||`` is
    checked on the probes as well; ``recovery_slack`` is its worst
    ``lhs / rhs - 1``.
    """
    base = base or base_norms()
    cert = adapted.cert
    probes = default_probes(cert.family.dim, n_random=4) if probes is None else np.atleast_2d(probes)
    bounds = norm_bounds_estimate(adapted, rate, grid, probes, base=base, raise_on_violation=False)
    limit = 2.0 * cert.D + tol
    slack = -np.inf
    for s, t in pairs or ():
        A = cert.forward(t, s)
        rhs0 = bounds.C * np.exp(bounds.eps * float(rate(s)) - adapted.lam * (float(rate(t)) - float(rate(s))))
        for x in probes:
            lhs = base(t, A @ x)
            rhs = rhs0 * base(s, x)
            if rhs > 0:
                slack = max(slack, lhs / rhs - 1.0)
    passed = bounds.C <= limit and bounds.lower_violation <= 1e-12 and slack <= tol
    return EquivalenceReport(
        passed=bool(passed),
        C=bounds.C,
        eps=bounds.eps,
        C_limit=limit,
        lower_violation=bounds.lower_violation,
        recovery_slack=float(slack) if pairs else 0.0,
        bounds=bounds,
    )
