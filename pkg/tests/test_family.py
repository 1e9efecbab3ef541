import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rhodich.errors import NormInadmissibleError, StiffnessError
from rhodich.family import (
    EvolutionFamily,
    autonomous_family,
    base_norms,
    builtin_generator,
    check_norm_axioms,
    cocycle_residual,
    continuity_residual,
    interpolated_generator,
    norm_bounds_estimate,
    propagator,
    weighted_norms,
)
from rhodich.fixtures import builtin_fixture
from rhodich.rates import make_rate


def random_triples(rng, t_max, n=100):
    return np.sort(rng.uniform(0, t_max, (n, 3)), axis=1)[:, ::-1]


def test_diag_closed_form_value():
    fam = builtin_fixture("diag2d").family
    np.testing.assert_allclose(propagator(fam, 2.0, 1.0), np.diag([np.exp(-1), np.e]), rtol=1e-15)


def test_ode_scalar_decay():
    dim, A = builtin_generator("scalar_decay")
    fam = EvolutionFamily(dim, generator=A)
    assert fam(1.0, 0.0)[0, 0] == pytest.approx(np.exp(-2), abs=1e-6)


@pytest.mark.parametrize("name", ["diag2d", "scalar_exp", "example1", "example2"])
def test_identity_at_equal_times(name):
    fam = builtin_fixture(name).family
    np.testing.assert_array_equal(fam(3.0, 3.0), np.eye(fam.dim))


def test_cocycle_closed_form_and_ode(rng):
    fam = builtin_fixture("diag2d").family
    assert cocycle_residual(fam, random_triples(rng, 5.0, 20)) <= 1e-12
    dim, A = builtin_generator("rotation")
    ode = EvolutionFamily(dim, generator=A)
    assert cocycle_residual(ode, random_triples(rng, 5.0, 30)) <= 1e-5
    ident = builtin_fixture("example1").family
    assert cocycle_residual(ident, random_triples(rng, 5.0, 10)) == 0.0


def test_rotation_matches_rotation_matrix():
    dim, A = builtin_generator("rotation")
    fam = EvolutionFamily(dim, generator=A)
    th = 1.3
    R = fam(2.0 + th, 2.0)
    np.testing.assert_allclose(R, [[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]], atol=1e-8)


def test_example2_products():
    fam = builtin_fixture("example2").family
    assert fam(1025.0, 1024.0)[0, 0] == 1024.0
    assert fam(4.5, 3.2)[0, 0] == 0.0  # A_3 = 0
    assert fam(3.0, 1.0)[0, 0] == 2.0  # A_2 A_1
    assert fam(9.0, 1.0)[0, 0] == 0.0


def test_autonomous_family_matches_expm():
    from scipy.linalg import expm

    A = np.array([[-1.0, 2.0], [0.0, 0.5]])
    fam = autonomous_family(A)
    np.testing.assert_allclose(fam(2.5, 1.0), expm(1.5 * A), rtol=1e-13)
    with pytest.raises(ValueError):
        autonomous_family(np.ones((2, 3)))


def test_interpolated_generator_round_trip():
    t = np.linspace(0, 2, 5)
    entries = np.tile([-1.0, 0.0, 0.0, -3.0], (5, 1))
    dim, A = interpolated_generator(t, entries)
    fam = EvolutionFamily(dim, generator=A)
    np.testing.assert_allclose(fam(1.0, 0.0), np.diag(np.exp([-1.0, -3.0])), rtol=1e-8)
    with pytest.raises(ValueError):
        interpolated_generator(t, np.ones((5, 3)))


def test_bad_arguments():
    fam = builtin_fixture("diag2d").family
    with pytest.raises(ValueError):
        fam(1.0, 2.0)
    with pytest.raises(ValueError):
        EvolutionFamily(1)
    with pytest.raises(KeyError):
        builtin_generator("nope")


def test_stiff_integration_reports_interval():
    fam = EvolutionFamily(1, generator=lambda t: np.array([[1.0 / (1.0 - t) ** 2]]), name="blowup")
    with pytest.raises(StiffnessError) as err:
        fam(2.0, 0.0)
    assert err.value.interval == (0.0, 2.0)


def test_continuity_residual_small_for_smooth_family():
    fam = builtin_fixture("diag2d").family
    assert continuity_residual(fam, 0.0, np.linspace(0, 2, 201)) < 0.05


def test_propagator_cache_is_read_only():
    fam = builtin_fixture("diag2d").family
    out = fam(1.0, 0.5)
    out[0, 0] = 99.0
    assert fam(1.0, 0.5)[0, 0] == pytest.approx(np.exp(-0.5))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 50), st.floats(0.01, 1e3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_weighted_norm_axioms(t, a, xs):
    norms = weighted_norms(lambda s: 1.0 + np.asarray(s), name="1+t")
    x = np.array(xs)
    y = x[::-1].copy()
    assert norms(t, a * x) == pytest.approx(a * norms(t, x), rel=1e-12, abs=1e-300)
    assert norms(t, x + y) <= norms(t, x) + norms(t, y) + 1e-9
    assert norms(t, x) >= np.linalg.norm(x) * (1 - 1e-15)


def test_norm_axiom_check_and_bounds():
    grid = np.linspace(0, 20, 41)
    probes = np.eye(2)
    assert check_norm_axioms(base_norms(), grid, 2)["passed"]
    b = norm_bounds_estimate(base_norms(), make_rate("identity"), grid, probes)
    assert (b.C, b.eps) == pytest.approx((1.0, 0.0), abs=1e-9)
    w = weighted_norms(lambda s: 1.0 + np.asarray(s))
    b = norm_bounds_estimate(w, make_rate("log1p"), grid, probes)
    assert b.C == pytest.approx(1.0, abs=1e-6)
    assert b.eps == pytest.approx(1.0, abs=1e-6)
    assert b.max_active_slack < 1e-6


def test_norm_lower_bound_violation():
    bad = weighted_norms(lambda s: 0.5 + 0 * np.asarray(s), name="half")
    with pytest.raises(NormInadmissibleError) as err:
        norm_bounds_estimate(bad, make_rate("identity"), [0.0, 1.0], np.eye(2))
    assert err.value.t == 0.0
    rep = norm_bounds_estimate(bad, make_rate("identity"), [0.0, 1.0], np.eye(2), raise_on_violation=False)
    assert rep.lower_violation == pytest.approx(0.5)
