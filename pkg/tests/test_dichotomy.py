import dataclasses

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from rhodich.dichotomy import (
    DichotomyCertificate,
    ProjectionPath,
    build_projections,
    detect_projections,
    estimate_certificate,
    geometric_pairs,
    restricted_inverse,
    stable_subspace,
    unstable_subspace,
    verify_dichotomy,
)
from rhodich.errors import CommutationError, DegenerateSplittingError, InvertibilityError, NoDichotomyError
from rhodich.family import EvolutionFamily, autonomous_family, base_norms
from rhodich.fixtures import builtin_fixture
from rhodich.funcspaces import SubspaceZ, uniform_grid
from rhodich.rates import make_rate

IDENT = make_rate("identity")


def test_stable_subspace_of_saddle():
    fam = builtin_fixture("diag2d").family
    S = stable_subspace(fam, 0.0, IDENT, horizon_rho=10.0, gap=0.2)
    assert S.shape == (2, 1)
    assert float(np.max(subspace_angles(S, np.array([[1.0], [0.0]])))) <= 1e-3


def test_stable_subspace_contracting_and_neutral():
    contracting = autonomous_family(np.diag([-1.0, -2.0]))
    assert stable_subspace(contracting, 0.0, IDENT).shape == (2, 2)
    with pytest.raises(NoDichotomyError) as err:
        stable_subspace(builtin_fixture("example1").family, 0.0, IDENT)
    assert err.value.exponent == pytest.approx(0.0)
    with pytest.raises(ValueError):
        stable_subspace(contracting, 0.0, IDENT, horizon_rho=1.0)


def test_unstable_subspace_cases():
    fx = builtin_fixture("diag2d")
    U = unstable_subspace(fx.family, fx.Z, 1.0)
    assert float(np.max(subspace_angles(U, np.array([[0.0], [1.0]])))) <= 1e-12
    assert unstable_subspace(fx.family, SubspaceZ.trivial(2), 1.0).shape == (2, 0)
    ex2 = builtin_fixture("example2")
    for tau in (0.0, 7.5, 1024.0):
        assert unstable_subspace(ex2.family, ex2.Z, tau).shape == (1, 0)


def test_unstable_subspace_not_injective():
    fam = builtin_fixture("example2").family
    with pytest.raises(InvertibilityError):
        unstable_subspace(fam, SubspaceZ.span([1.0]), 5.0)


def test_projection_construction():
    grid = np.array([0.0, 1.0])
    e1, e2 = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
    proj = build_projections(grid, [e1, e1], [e2, e2])
    np.testing.assert_allclose(proj.at(0.0), np.diag([1.0, 0.0]))
    s = np.array([[1.0], [1.0]]) / np.sqrt(2)
    P = build_projections(grid[:1], [s], [e2]).at(0.0)
    np.testing.assert_allclose(P, [[1.0, 0.0], [1.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(P @ P, P, atol=1e-15)
    with pytest.raises(DegenerateSplittingError):
        build_projections(grid[:1], [e1], [e1])
    with pytest.raises(DegenerateSplittingError):
        build_projections(grid[:1], [e1], [np.zeros((2, 0))])


def test_geometric_pairs():
    pairs = geometric_pairs(6)
    assert (0, 0) in pairs and (0, 4) in pairs and (0, 5) in pairs and (1, 5) in pairs
    assert all(j >= i for i, j in pairs)
    assert len(geometric_pairs(4, exhaustive_below=10)) == 10


def test_restricted_inverse_inverts_unstable_block():
    fam = builtin_fixture("diag2d").family
    U = np.array([[0.0], [1.0]])
    R, cond = restricted_inverse(fam, U, 1.0, 3.0)
    np.testing.assert_allclose(R @ fam(3.0, 1.0) @ U, U, atol=1e-14)
    assert cond == 1.0


def test_scalar_exp_certificate(scalar_exp):
    _, cert = scalar_exp
    assert 1.9 <= cert.lam <= 2.1
    assert 0.95 <= cert.D <= 1.05


def test_scalar_poly_certificate(scalar_poly):
    _, cert = scalar_poly
    assert 2.85 <= cert.lam <= 3.15
    assert cert.D <= 1.1


def test_identity_family_has_no_dichotomy():
    fx = builtin_fixture("example1")
    proj = ProjectionPath.constant(np.eye(1), uniform_grid(10.0, 1.0))
    with pytest.raises(NoDichotomyError):
        estimate_certificate(fx.family, proj, fx.norms, IDENT)


def test_diag_certificate_and_verification(diag2d):
    fx, cert = diag2d
    assert cert.lam == pytest.approx(1.0, rel=0.05)
    for P in cert.proj.P:
        np.testing.assert_allclose(P, np.diag([1.0, 0.0]), atol=1e-3)
    rep = verify_dichotomy(fx.family, cert, fx.norms, fx.rate, uniform_grid(20.0, 0.5))
    assert rep.passed, list(rep.lines())
    assert max(rep.d1_slack, rep.d2_slack) <= 1e-6


def test_inflated_rate_fails_d1(diag2d):
    fx, cert = diag2d
    bad = dataclasses.replace(cert, lam=2 * cert.lam)
    rep = verify_dichotomy(fx.family, bad, fx.norms, fx.rate, uniform_grid(20.0, 0.5))
    assert not rep.passed
    assert rep.d1_slack > 0
    s, t = rep.worst_d1
    assert t - s >= 5.0
    assert any("(d1)" in f for f in rep.failures)


def test_commutation_failure():
    fam = autonomous_family(np.array([[-1.0, 1.0], [0.0, 1.0]]))
    wrong = ProjectionPath.constant(np.diag([1.0, 0.0]), uniform_grid(5.0, 1.0))
    with pytest.raises(CommutationError):
        estimate_certificate(fam, wrong, base_norms(), IDENT)


def test_example2_no_small_certificate():
    fx = builtin_fixture("example2")
    grid = np.arange(0.0, 1100.0)
    proj = ProjectionPath.constant(np.eye(1), grid)
    for lam in (0.01, 0.1, 1.0, 10.0):
        cert = DichotomyCertificate(proj=proj, D=1e3, lam=lam, M=1.0, rate=fx.rate, family=fx.family)
        rep = verify_dichotomy(fx.family, cert, fx.norms, fx.rate, [1024.0, 1025.0])
        assert not rep.passed
        assert rep.d1_slack == pytest.approx(1024 / (1e3 * (1026 / 1025) ** -lam) - 1, rel=1e-12)
        if lam <= 1.0:
            # below the first dyadic jump past 1e3 the same constants hold
            below = verify_dichotomy(fx.family, cert, fx.norms, fx.rate, grid[grid <= 1024.0])
            assert below.passed
            assert verify_dichotomy(fx.family, cert, fx.norms, fx.rate, grid).worst_d1 == (1024.0, 1025.0)


def test_detect_projections_saddle_with_tilted_z():
    A = np.array([[-1.0, 0.0], [0.0, 1.0]])
    fam = autonomous_family(A)
    Z = SubspaceZ.span([1.0, 1.0])
    proj = detect_projections(fam, Z, IDENT, uniform_grid(6.0, 1.0), horizon_rho=10.0)
    # unstable space is T(t,0)Z, which tends to e2
    U3 = proj.bases_at(3.0)[1]
    expected = np.array([[np.exp(-3)], [np.exp(3)]])
    assert float(np.max(subspace_angles(U3, expected))) <= 1e-9
    cert = estimate_certificate(fam, proj, base_norms(), IDENT)
    assert cert.lam == pytest.approx(1.0, rel=0.05)


def test_off_grid_projection_uses_builder(diag2d):
    fx, cert = diag2d
    np.testing.assert_allclose(cert.proj.at(2.5), np.diag([1.0, 0.0]), atol=1e-3)
    A = cert.forward(3.0, 2.5)
    np.testing.assert_allclose(A, np.diag([np.exp(-0.5), 0.0]), atol=1e-3)


def test_ode_family_certificate():
    fam = EvolutionFamily(1, generator=lambda t: np.array([[-2.0 - np.sin(t)]]))
    proj = detect_projections(fam, SubspaceZ.trivial(1), IDENT, uniform_grid(12.0, 1.0))
    cert = estimate_certificate(fam, proj, base_norms(), IDENT)
    assert 1.0 <= cert.lam <= 3.0
