import numpy as np
import pytest

from rhodich.adapted import (
    AdaptedNormFamily,
    adapted_equivalence_check,
    adapted_norm_eval,
    adapted_uniformity_check,
)
from rhodich.dichotomy import DichotomyCertificate, ProjectionPath
from rhodich.errors import HorizonTooShortError
from rhodich.family import autonomous_family, base_norms, norm_bounds_estimate
from rhodich.funcspaces import uniform_grid
from rhodich.rates import make_rate

IDENT = make_rate("identity")


def cert_for(A, P, lam, D=1.0, t_max=20.0):
    fam = autonomous_family(A)
    proj = ProjectionPath.constant(np.asarray(P, dtype=float), uniform_grid(t_max, 1.0))
    return DichotomyCertificate(proj=proj, D=D, lam=lam, M=1.0, rate=IDENT, family=fam)


def test_scalar_norm_equals_base():
    cert = cert_for([[-2.0]], [[1.0]], lam=2.0)
    for t in (0.0, 1.3, 7.0):
        v = adapted_norm_eval(cert, IDENT, t, [1.5], lam=1.0)
        assert v.value == pytest.approx(1.5, rel=1e-14)
        assert v.argmax_forward == t


def test_identity_family_horizon_too_short():
    cert = cert_for([[0.0]], [[1.0]], lam=2.0)
    with pytest.raises(HorizonTooShortError):
        adapted_norm_eval(cert, IDENT, 1.0, [1.0], lam=1.0)


def test_saddle_value():
    cert = cert_for(np.diag([-2.0, 2.0]), np.diag([1.0, 0.0]), lam=2.0)
    v = adapted_norm_eval(cert, IDENT, 1.0, [1.0, 1.0], lam=1.0)
    assert v.value == pytest.approx(2.0, rel=1e-12)
    assert (v.forward, v.backward) == pytest.approx((1.0, 1.0), rel=1e-12)
    assert v.truncation == pytest.approx(np.exp(-10.0), rel=1e-12)


def test_scalar_uniformity_exact():
    cert = cert_for([[-2.0]], [[1.0]], lam=2.0)
    ad = AdaptedNormFamily(cert, IDENT, lam=1.0)
    rng = np.random.default_rng(0)
    pairs = [tuple(sorted(p)) for p in rng.uniform(0, 15, (15, 2))]
    rep = adapted_uniformity_check(cert, IDENT, ad, pairs)
    assert rep.ratio <= 1.0 + 1e-12


def test_diag_uniformity_and_equivalence(diag2d):
    fx, cert = diag2d
    ad = AdaptedNormFamily(cert, fx.rate, base=fx.norms)
    rng = np.random.default_rng(3)
    pairs = [tuple(sorted(p)) for p in rng.uniform(0, 20, (20, 2))]
    uni = adapted_uniformity_check(cert, fx.rate, ad, pairs)
    assert uni.passed and uni.ratio <= 1.05
    eq = adapted_equivalence_check(ad, fx.norms, fx.rate, uniform_grid(20.0, 1.0), pairs=pairs)
    assert eq.passed
    assert eq.C <= 2 * cert.D + 0.05
    assert eq.lower_violation == 0.0
    nb = norm_bounds_estimate(ad, fx.rate, uniform_grid(20.0, 1.0), np.eye(2))
    assert nb.C <= 2.05


def test_corrupted_norm_breaks_uniformity():
    # a shear makes the dropped supremum terms visible
    A = np.array([[-1.0, 4.0], [0.0, -3.0]])
    cert = cert_for(A, np.eye(2), lam=1.0)
    pairs = [(0.0, 0.5), (1.0, 1.2)]
    good = AdaptedNormFamily(cert, IDENT, lam=0.5)
    assert adapted_uniformity_check(cert, IDENT, good, pairs).ratio <= 1.0 + 1e-9
    broken = AdaptedNormFamily(cert, IDENT, H_sup=0.0, lam=0.5, check_horizon=False)
    rep = adapted_uniformity_check(cert, IDENT, broken, pairs)
    assert rep.ratio > 1.0
    assert not rep.passed


def test_nonuniform_fixture(nonuniform):
    fx, cert = nonuniform
    ad = AdaptedNormFamily(cert, fx.rate, base=fx.norms)
    rng = np.random.default_rng(5)
    pairs = [tuple(sorted(p)) for p in rng.uniform(0, 20, (20, 2))]
    uni = adapted_uniformity_check(cert, fx.rate, ad, pairs)
    assert uni.ratio <= 1.05
    eq = adapted_equivalence_check(ad, fx.norms, fx.rate, uniform_grid(20.0, 0.25), pairs=pairs)
    assert eq.C <= 2 * cert.D + 0.05
    assert eq.eps > 0


def test_negative_horizon_rejected(diag2d):
    _, cert = diag2d
    with pytest.raises(ValueError):
        AdaptedNormFamily(cert, IDENT, H_sup=-1.0)


def test_lattice_round_trip():
    cert = cert_for([[-2.0]], [[1.0]], lam=2.0)
    ad = AdaptedNormFamily(cert, make_rate("log1p"), lam=1.0, nodes_per_rho=8)
    k = 17
    t = ad.lattice_time(k)
    assert ad.lattice_index(t) == pytest.approx(k, abs=1e-9)
    assert ad.batch([0.0, 1.0], np.array([[1.0], [2.0]])) == pytest.approx([1.0, 2.0])
    assert isinstance(ad(0.5, [1.0]), float)
    assert base_norms()(0.0, [3.0, 4.0]) == 5.0
