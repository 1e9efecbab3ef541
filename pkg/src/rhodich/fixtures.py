"""Builtin fixtures with ground-truth annotations.

Each annotation is a ``(value, source)`` pair. The source says how the value
is known: ``construction`` (true by how the fixture is built),
``closed-form`` (from an explicit computation) or ``reference`` (a known
property of the counterexample families).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .family import EvolutionFamily, NormFamily, base_norms
from .funcspaces import SubspaceZ
from .rates import RateFunction, make_rate

__all__ = ["Fixture", "builtin_fixture", "FIXTURE_NAMES", "example2_multiplier"]


@dataclass
class Fixture:
    name: str
    family: EvolutionFamily
    rate: RateFunction
    Z: SubspaceZ
    norms: NormFamily
    annotations: dict = field(default_factory=dict)
    knobs: dict = field(default_factory=dict)
    known_P: np.ndarray = None

    def note(self, key):
        """Annotation value without its source label."""
        return self.annotations[key][0]


def _diag2d(t, s):
    dt = np.asarray(t) - np.asarray(s)
    out = np.zeros((len(dt), 2, 2))
    out[:, 0, 0] = np.exp(-dt)
    out[:, 1, 1] = np.exp(dt)
    return out


def _scalar(fn):
    def closed(t, s):
        return np.asarray(fn(np.asarray(t, dtype=float), np.asarray(s, dtype=float))).reshape(-1, 1, 1)

    return closed


def example2_multiplier(n):
    """``A_n = n`` if ``n = 2**l`` for some integer ``l >= 0``, else 0."""
    n = np.asarray(n, dtype=np.int64)
    is_pow2 = (n > 0) & ((n & (n - 1)) == 0)
    return np.where(is_pow2, n, 0).astype(float)


def _example2(t, s):
    ft = np.floor(np.asarray(t, dtype=float)).astype(np.int64)
    fs = np.floor(np.asarray(s, dtype=float)).astype(np.int64)
    length = ft - fs
    out = np.zeros(len(length))
    out[length == 0] = 1.0
    one = length == 1
    out[one] = example2_multiplier(fs[one])
    two = length == 2
    # A_{n+1} A_n is nonzero only for n = 1 (A_2 A_1 = 2)
    out[two] = example2_multiplier(fs[two]) * example2_multiplier(fs[two] + 1)
    return out.reshape(-1, 1, 1)


def builtin_fixture(name: str) -> Fixture:
    """Fully constructed fixture by name (see ``FIXTURE_NAMES``)."""
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; available: {', '.join(FIXTURE_NAMES)}") from None


def _make_diag2d():
    return Fixture(
        name="diag2d",
        family=EvolutionFamily(2, closed_form=_diag2d, name="diag2d"),
        rate=make_rate("identity"),
        Z=SubspaceZ.span([0.0, 1.0]),
        norms=base_norms(),
        annotations={
            "lambda": (1.0, "construction"),
            "D": (1.0, "construction"),
            "P": ([[1.0, 0.0], [0.0, 0.0]], "construction"),
            "dichotomy": (True, "construction"),
            "probe_y1": ("solvable", "closed-form"),
            "probe_yinf": ("solvable", "closed-form"),
        },
        knobs={"t_max": 20.0, "step": 0.005, "cert_step": 1.0, "horizon_rho": 10.0},
        known_P=np.diag([1.0, 0.0]),
    )


def _make_scalar_exp():
    return Fixture(
        name="scalar_exp",
        family=EvolutionFamily(1, closed_form=_scalar(lambda t, s: np.exp(-2.0 * (t - s))),
                               name="scalar_exp"),
        rate=make_rate("identity"),
        Z=SubspaceZ.trivial(1),
        norms=base_norms(),
        annotations={
            "lambda": (2.0, "closed-form"),
            "D": (1.0, "closed-form"),
            "P": ([[1.0]], "construction"),
            "dichotomy": (True, "closed-form"),
            "probe_y1": ("solvable", "closed-form"),
            "probe_yinf": ("solvable", "closed-form"),
        },
        knobs={"t_max": 10.0, "step": 0.005, "cert_step": 0.5, "horizon_rho": 5.0},
        known_P=np.eye(1),
    )


def _make_scalar_poly():
    return Fixture(
        name="scalar_poly",
        family=EvolutionFamily(1, closed_form=_scalar(lambda t, s: ((1.0 + s) / (1.0 + t)) ** 3),
                               name="scalar_poly"),
        rate=make_rate("log1p"),
        Z=SubspaceZ.trivial(1),
        norms=base_norms(),
        annotations={
            "lambda": (3.0, "closed-form"),
            "D": (1.0, "closed-form"),
            "P": ([[1.0]], "construction"),
            "dichotomy": (True, "closed-form"),
            "probe_y1": ("solvable", "closed-form"),
            "probe_yinf": ("solvable", "closed-form"),
        },
        knobs={"t_max": 100.0, "step": 0.01, "cert_step": 2.0, "horizon_rho": 5.0},
        known_P=np.eye(1),
    )


def _nonuniform(t, s):
    return np.exp(-(t - s) + (t * np.cos(t) - s * np.cos(s)) / 4.0)


def _make_nonuniform():
    return Fixture(
        name="nonuniform_scalar",
        family=EvolutionFamily(1, closed_form=_scalar(_nonuniform), name="nonuniform_scalar"),
        rate=make_rate("identity"),
        Z=SubspaceZ.trivial(1),
        norms=base_norms(),
        annotations={
            # |T(t,s)| <= exp(-(3/4)(t-s) + s/2): nonuniform with eps = 1/2
            "lambda": (0.75, "closed-form"),
            "eps": (0.5, "closed-form"),
            "P": ([[1.0]], "construction"),
            "dichotomy": (True, "closed-form"),
            "nonuniform": (True, "closed-form"),
        },
        knobs={"t_max": 20.0, "step": 0.01, "cert_step": 0.25, "horizon_rho": 40.0},
        known_P=np.eye(1),
    )


def _make_example1():
    return Fixture(
        name="example1",
        family=EvolutionFamily(1, closed_form=lambda t, s: np.ones((len(np.atleast_1d(t)), 1, 1)),
                               name="example1"),
        rate=make_rate("identity"),
        Z=SubspaceZ.trivial(1),
        norms=base_norms(),
        annotations={
            "dichotomy": (False, "reference"),
            "probe_y1": ("solvable", "reference"),
            "probe_yinf": ("unsolvable", "closed-form"),
        },
        knobs={"t_max": 20.0, "step": 0.01, "cert_step": 1.0, "horizon_rho": 5.0},
    )


def _make_example2():
    return Fixture(
        name="example2",
        family=EvolutionFamily(1, closed_form=_example2, discontinuous=True, name="example2"),
        rate=make_rate("log1p"),
        Z=SubspaceZ.trivial(1),
        norms=base_norms(),
        annotations={
            "dichotomy": (False, "reference"),
            "probe_yinf": ("solvable", "reference"),
            "probe_y1": ("unsolvable", "closed-form"),
            "discontinuous": (True, "reference"),
        },
        knobs={"t_max": 2100.0, "step": 0.25, "cert_step": 1.0, "horizon_rho": 5.0,
               "y1_extra": "dyadic_comb"},
        known_P=np.eye(1),
    )


_BUILDERS = {
    "example1": _make_example1,
    "example2": _make_example2,
    "diag2d": _make_diag2d,
    "scalar_exp": _make_scalar_exp,
    "scalar_poly": _make_scalar_poly,
    "nonuniform_scalar": _make_nonuniform,
}

FIXTURE_NAMES = tuple(_BUILDERS)
