import numpy as np
import pytest

from rhodich.errors import ConvergenceError
from rhodich.family import autonomous_family, base_norms, cocycle_residual
from rhodich.fixtures import builtin_fixture
from rhodich.funcspaces import SampledFunction, SubspaceZ, uniform_grid
from rhodich.rates import make_rate
from rhodich.robust import (
    PerturbationFamily,
    check_perturbation_bound,
    delta_sweep,
    make_perturbation,
    perturbation_operator_bounds,
    perturbed_family,
    robustness_experiment,
    solve_perturbed,
)

IDENT = make_rate("identity")
LOG1P = make_rate("log1p")
DECAY = autonomous_family([[-1.0]], name="decay")
BASE = base_norms()
CONFIG = {"t_max": 20.0, "cert_step": 0.5}


def constant_b(b):
    return PerturbationFamily(lambda t: np.full((len(t), 1, 1), b), 1, delta=b)


def test_bound_check_cases():
    grid = uniform_grid(50.0, 0.01)
    B = make_perturbation("rate_decay", 1, 0.05, rate=IDENT)
    rep = check_perturbation_bound(B, IDENT, grid)
    assert rep.passed and rep.ratio == pytest.approx(0.05, rel=1e-12)
    C = make_perturbation("constant", 1, 0.05)
    rep = check_perturbation_bound(C, IDENT, grid)
    assert not rep.passed and rep.at == 50.0
    P = make_perturbation("rate_decay", 1, 0.05, rate=LOG1P)
    np.testing.assert_allclose(P.at(grid)[:, 0, 0], 0.05 / (1 + grid) ** 2, rtol=1e-12)
    assert check_perturbation_bound(P, LOG1P, grid).passed


def test_make_perturbation_errors():
    with pytest.raises(ValueError):
        make_perturbation("rate_decay", 1, 0.05)
    with pytest.raises(ValueError):
        make_perturbation("constant", 2, 0.05, matrix=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        make_perturbation("cubic", 1, 0.05)
    with pytest.raises(ValueError):
        make_perturbation("samples", 1, 0.05, t=[0.0, 0.0], entries=[[1.0], [1.0]])
    S = make_perturbation("samples", 1, 0.05, t=[0.0, 2.0], entries=[[0.0], [2.0]])
    assert S(1.0)[0, 0] == pytest.approx(1.0)


def test_volterra_closed_form():
    res = solve_perturbed(DECAY, constant_b(0.1), 1.0, 0.0, [1.0], tol=1e-12)
    assert res.value[0] == pytest.approx(np.exp(-0.9), abs=1e-6)
    # geometric decay of successive distances
    assert res.ratio <= 0.15
    res8 = solve_perturbed(DECAY, constant_b(0.1), 1.0, 0.0, [1.0], tol=1e-8)
    assert res8.iterations <= 12


def test_volterra_zero_and_degenerate():
    zero = make_perturbation("zero", 2, 0.0)
    fam = builtin_fixture("diag2d").family
    res = solve_perturbed(fam, zero, 2.0, 0.5, [1.0, 1.0])
    np.testing.assert_allclose(res.value, fam(2.0, 0.5) @ [1.0, 1.0], rtol=1e-14)
    assert solve_perturbed(fam, zero, 1.0, 1.0, [2.0, 3.0]).iterations == 0
    with pytest.raises(ValueError):
        solve_perturbed(fam, zero, 1.0, 2.0, [1.0, 0.0])
    with pytest.raises(ValueError):
        solve_perturbed(fam, zero, 2.0, 1.0, [1.0, 0.0], tol=0.0)


def test_volterra_nonconvergence():
    with pytest.raises(ConvergenceError) as err:
        solve_perturbed(DECAY, constant_b(5.0), 10.0, 0.0, [1.0], max_iters=5)
    assert err.value.ratio > 0


def test_perturbed_family_zero_is_base():
    fam = builtin_fixture("diag2d").family
    U = perturbed_family(fam, make_perturbation("zero", 2, 0.0), 10.0)
    t = np.array([0.3, 2.0, 7.7, 9.9])
    s = np.array([0.0, 1.1, 2.0, 9.9])
    np.testing.assert_allclose(U.propagators(t, s), fam.propagators(t, s), rtol=1e-12, atol=1e-12)


def test_perturbed_family_scalar(rng):
    U = perturbed_family(DECAY, constant_b(0.1), 10.0)
    assert U(1.0, 0.0)[0, 0] == pytest.approx(np.exp(-0.9), abs=1e-6)
    assert U(7.3, 2.1)[0, 0] == pytest.approx(np.exp(-0.9 * 5.2), rel=1e-6)
    triples = np.sort(rng.uniform(0, 10, (30, 3)), axis=1)[:, ::-1]
    assert cocycle_residual(U, triples) <= 1e-6


def test_perturbed_family_diag_shear(rng):
    fam = builtin_fixture("diag2d").family
    B = make_perturbation("rate_decay", 2, 0.05, rate=IDENT, matrix=[[0.0, 1.0], [0.0, 0.0]])
    U = perturbed_family(fam, B, 8.0)
    triples = np.sort(rng.uniform(0, 8, (30, 3)), axis=1)[:, ::-1]
    assert cocycle_residual(U, triples) <= 1e-5
    with pytest.raises(ValueError):
        perturbed_family(DECAY, B, 5.0)


def test_operator_bounds_tight_case():
    B = make_perturbation("rate_decay", 1, 0.05, rate=IDENT)
    grid = uniform_grid(20.0, 0.01)
    one = SampledFunction(grid, np.ones(len(grid)), extension="constant", label="one")
    cosine = SampledFunction(grid, np.cos(grid), label="cos")
    rep = perturbation_operator_bounds(B, BASE, IDENT, [one, cosine])
    assert rep.passed
    row = rep.rows[0]
    assert row["D"] == pytest.approx(0.05, abs=1e-6)
    assert row["Dprime"] == pytest.approx(0.05, abs=1e-6)
    zero = perturbation_operator_bounds(make_perturbation("zero", 1, 0.05), BASE, IDENT, [one])
    assert zero.passed and zero.rows[0]["D"] == 0.0 and zero.rows[0]["Dprime"] == 0.0


def test_operator_bounds_detect_violation():
    grid = uniform_grid(20.0, 0.01)
    one = SampledFunction(grid, np.ones(len(grid)), extension="constant")
    rep = perturbation_operator_bounds(make_perturbation("constant", 1, 0.05), BASE, IDENT, [one])
    assert not rep.passed


def test_robustness_scalar():
    B = make_perturbation("rate_decay", 1, 0.05, rate=IDENT)
    rep = robustness_experiment(DECAY, B, SubspaceZ.trivial(1), BASE, IDENT, dict(CONFIG, verify=True))
    assert rep.robust
    assert rep.after.lam >= 0.8 and rep.after.D <= 1.5
    assert rep.mild_consistency <= 1e-6
    assert rep.verify_after is not None
    assert "robust=True" in "\n".join(rep.lines())


def test_robustness_zero_perturbation_identity():
    rep = robustness_experiment(DECAY, make_perturbation("zero", 1, 0.0), SubspaceZ.trivial(1), BASE, IDENT,
                                CONFIG)
    assert abs(rep.after.lam - rep.before.lam) <= 1e-12
    assert abs(rep.after.D - rep.before.D) <= 1e-12


def test_robustness_rejects_unbounded_perturbation():
    with pytest.raises(ValueError):
        robustness_experiment(DECAY, make_perturbation("constant", 1, 0.05), SubspaceZ.trivial(1), BASE, IDENT,
                              CONFIG)


def test_robustness_diag_shear():
    fx = builtin_fixture("diag2d")
    B = make_perturbation("rate_decay", 2, 0.02, rate=IDENT, matrix=[[0.0, 1.0], [0.0, 0.0]])
    rep = robustness_experiment(fx.family, B, fx.Z, BASE, IDENT,
                                {"t_max": 12.0, "cert_step": 1.0, "horizon_rho": 10.0})
    assert rep.robust
    assert rep.max_angle <= 0.1


def test_delta_sweep_monotone():
    B = make_perturbation("rate_decay", 1, 0.05, rate=IDENT)
    rows, largest = delta_sweep(DECAY, B, SubspaceZ.trivial(1), BASE, IDENT, CONFIG, (0.01, 0.02, 0.05))
    lams = [lam for _, lam, _ in rows]
    assert all(b <= a for a, b in zip(lams, lams[1:]))
    assert largest == 0.05
