import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rhodich.errors import RateDivergenceError, RateError
from rhodich.rates import RATE_KINDS, make_rate, rate_inverse, validate_rate

times = st.floats(min_value=0.0, max_value=1e3, allow_nan=False)


@pytest.mark.parametrize("kind", ["identity", "log1p"])
def test_rho_zero_and_derivative(kind):
    r = make_rate(kind)
    assert float(r(0.0)) == 0.0
    t = np.linspace(0, 50, 11)
    h = 1e-6
    fd = (r(t + h) - r(np.maximum(t - h, 0))) / (t + h - np.maximum(t - h, 0))
    np.testing.assert_allclose(r.deriv(t), fd, rtol=1e-6)


def test_log1p_values():
    r = make_rate("log1p")
    assert r(np.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert r.inverse(1.0) == pytest.approx(np.e - 1, rel=1e-14)


@given(times)
def test_inverse_round_trip_closed_form(t):
    for kind in ("identity", "log1p"):
        r = make_rate(kind)
        assert r.inverse(r(t)) == pytest.approx(t, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.0, max_value=50.0))
def test_bisection_inverse_matches_closed_form(t):
    r = make_rate("log1p")
    assert rate_inverse(r, float(r(t))) == pytest.approx(t, rel=1e-8, abs=1e-9)


def test_mu_integral_callable_matches_closed_form():
    # mu = 1 / (1 + t) integrates to log(1 + t)
    r = make_rate("mu_integral", mu=lambda t: 1.0 / (1.0 + t), domain_hint=50.0)
    t = np.array([0.0, 0.5, 3.0, 20.0, 49.0])
    np.testing.assert_allclose(r(t), np.log1p(t), rtol=1e-8, atol=1e-10)
    # beyond the tabulated range the integral is computed directly
    assert float(r(80.0)) == pytest.approx(np.log1p(80.0), rel=1e-8)
    assert r.inverse(np.log1p(10.0)) == pytest.approx(10.0, rel=1e-8)


def test_mu_integral_samples_linear_mu_exact():
    t = np.linspace(0, 10, 11)
    r = make_rate("mu_integral", t=t, mu=1.0 + t)
    # trapezoid on a linear mu is exact
    assert float(r(10.0)) == pytest.approx(10.0 + 50.0, rel=1e-14)
    assert float(r(2.5)) == pytest.approx(2.5 + 2.5**2 / 2, rel=1e-12)
    # constant extension beyond the samples
    assert float(r(12.0)) == pytest.approx(60.0 + 2 * 11.0, rel=1e-12)


@given(st.floats(min_value=0.0, max_value=9.9), st.floats(min_value=1e-3, max_value=5.0))
def test_mu_integral_monotone(t, dt):
    r = make_rate("mu_integral", t=np.linspace(0, 10, 6), mu=np.array([1.0, 0.1, 3.0, 0.2, 2.0, 1.0]))
    assert float(r(t + dt)) > float(r(t))


def test_mu_rejects_nonpositive():
    with pytest.raises(RateError) as err:
        make_rate("mu_integral", t=np.array([0.0, 1.0, 2.0]), mu=np.array([1.0, 0.0, 1.0]))
    assert err.value.location == 1.0


def test_mu_rejects_bad_grid():
    with pytest.raises(RateError):
        make_rate("mu_integral", t=np.array([0.5, 1.0]), mu=np.array([1.0, 1.0]))


def test_custom_and_unknown_kinds():
    r = make_rate("custom", fn=lambda t: t**2 + t, dfn=lambda t: 2 * t + 1)
    assert r.inverse(2.0) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(RateError):
        make_rate("custom", fn=lambda t: t)
    with pytest.raises(RateError):
        make_rate("quadratic")
    assert set(RATE_KINDS) == {"identity", "log1p", "mu_integral", "custom"}


def test_slow_rate_diverges():
    r = make_rate("custom", fn=lambda t: np.log1p(np.log1p(t)), dfn=lambda t: 1 / ((1 + t) * (1 + np.log1p(t))),
                  domain_hint=10.0)
    with pytest.raises(RateDivergenceError):
        rate_inverse(r, 50.0)
    with pytest.raises(ValueError):
        rate_inverse(r, -1.0)


def test_validate_rate_flags_violations():
    grid = np.linspace(0, 10, 101)
    assert validate_rate(make_rate("log1p"), grid).passed
    bad = make_rate("custom", fn=lambda t: t + 0.5 * np.sin(3 * t), dfn=lambda t: 1 + 1.5 * np.cos(3 * t))
    rep = validate_rate(bad, grid)
    assert not rep.passed
    assert rep.monotonicity_violations
    offset = make_rate("custom", fn=lambda t: t + 1.0, dfn=lambda t: np.ones_like(t))
    assert not validate_rate(offset, grid).passed
    with pytest.raises(ValueError):
        validate_rate(make_rate("identity"), [1.0, 2.0])


def test_describe_is_json_friendly():
    assert make_rate("identity").describe() == {"kind": "identity"}
    d = make_rate("mu_integral", t=np.linspace(0, 1, 5), mu=np.ones(5)).describe()
    assert d["kind"] == "mu_integral" and d["nodes"] == 5


def test_reference_values():
    ident, log1p = make_rate("identity"), make_rate("log1p")
    assert float(ident(2.0)) == 2.0 and float(ident.deriv(2.0)) == 1.0
    assert float(log1p.deriv(np.e - 1)) == pytest.approx(1 / np.e, rel=1e-15)
    assert ident.inverse(5.0) == 5.0
    assert log1p.inverse(1.0) == pytest.approx(1.7182818, abs=1e-7)
    two = make_rate("mu_integral", mu=lambda t: 2.0, domain_hint=10.0)
    assert float(two(3.0)) == pytest.approx(6.0, rel=1e-12)
    assert rate_inverse(two, 6.0) == pytest.approx(3.0, rel=1e-10)


def test_validate_sine_and_log1p_minimum():
    sine = make_rate("custom", fn=np.sin, dfn=np.cos)
    rep = validate_rate(sine, np.linspace(0, 4, 401))
    assert not rep.passed
    first = rep.monotonicity_violations[0]
    assert first[0] == pytest.approx(np.pi / 2, abs=0.02)
    rep = validate_rate(make_rate("log1p"), np.linspace(0, 100, 1001))
    assert rep.passed and rep.min_deriv == pytest.approx(1 / 101, rel=1e-12)
