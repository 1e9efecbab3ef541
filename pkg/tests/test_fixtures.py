import numpy as np
import pytest

from rhodich.fixtures import FIXTURE_NAMES, builtin_fixture, example2_multiplier

SOURCES = {"construction", "closed-form", "reference"}


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_fixture_complete(name):
    fx = builtin_fixture(name)
    assert fx.name == name
    assert fx.Z.dim == fx.family.dim
    assert fx.annotations
    assert all(src in SOURCES for _, src in fx.annotations.values())
    assert {"t_max", "step", "cert_step", "horizon_rho"} <= set(fx.knobs)


def test_unknown_fixture_lists_names():
    with pytest.raises(KeyError) as err:
        builtin_fixture("example3")
    assert "example1" in str(err.value) and "nonuniform_scalar" in str(err.value)


def test_reference_annotations():
    ex2 = builtin_fixture("example2")
    assert ex2.family.discontinuous and ex2.rate.kind == "log1p"
    assert ex2.note("dichotomy") is False and ex2.note("probe_yinf") == "solvable"
    poly = builtin_fixture("scalar_poly")
    assert poly.rate.kind == "log1p" and poly.note("lambda") == 3.0
    assert poly.family(3.0, 1.0)[0, 0] == pytest.approx((2 / 4) ** 3)
    diag = builtin_fixture("diag2d")
    assert diag.note("lambda") == 1.0
    np.testing.assert_array_equal(diag.note("P"), np.diag([1.0, 0.0]))


def test_example2_multiplier():
    np.testing.assert_array_equal(example2_multiplier([0, 1, 2, 3, 4, 6, 8, 1024, 1025]),
                                  [0, 1, 2, 0, 4, 0, 8, 1024, 0])


def test_nonuniform_bound_annotation():
    fx = builtin_fixture("nonuniform_scalar")
    t = np.linspace(0, 30, 61)
    s = t[:, None] * np.ones_like(t)[None, :]
    tt = t[None, :] * np.ones_like(t)[:, None]
    mask = tt >= s
    vals = fx.family.propagators(tt[mask], s[mask])[:, 0, 0]
    bound = np.exp(-0.75 * (tt[mask] - s[mask]) + 0.5 * s[mask])
    assert np.all(vals <= bound * (1 + 1e-12))
