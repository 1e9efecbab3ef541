import numpy as np
import pytest

from rhodich.dichotomy import detect_projections, estimate_certificate
from rhodich.fixtures import builtin_fixture
from rhodich.funcspaces import uniform_grid


def certify(name, **overrides):
    fx = builtin_fixture(name)
    k = dict(fx.knobs, **overrides)
    grid = uniform_grid(k["t_max"], k["cert_step"])
    proj = detect_projections(fx.family, fx.Z, fx.rate, grid, k["horizon_rho"], 0.2, fx.norms)
    cert = estimate_certificate(fx.family, proj, fx.norms, fx.rate)
    return fx, cert


@pytest.fixture(scope="session")
def diag2d():
    return certify("diag2d")


@pytest.fixture(scope="session")
def scalar_exp():
    return certify("scalar_exp")


@pytest.fixture(scope="session")
def scalar_poly():
    return certify("scalar_poly")


@pytest.fixture(scope="session")
def nonuniform():
    return certify("nonuniform_scalar")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for k, m in list(sys.modules.items()) if k.endswith("test_acceptance")), None)
    lines = [mod.VERDICTS[n] for n in sorted(mod.VERDICTS)] if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
