import pytest

from hiddenbsde.model import (ConstantCoefficient, ModelSpec, ProblemFunctions,
                              ThetaScaledVolatility, ZeroDriver, SquareTerminal,
                              canonical_model)


@pytest.fixture
def cm1():
    """Canonical model at the default probe noise scale."""
    return canonical_model(0.1)


@pytest.fixture
def cm1_factory():
    return canonical_model


@pytest.fixture
def square_problem():
    return ProblemFunctions(driver=ZeroDriver(), terminal=SquareTerminal(),
                            growth_p=2.0)


@pytest.fixture
def pure_drift_spec():
    """Zero-volatility degenerate model: deterministic hidden state."""
    return ModelSpec(
        a=ConstantCoefficient(1.0),
        b=ThetaScaledVolatility(ConstantCoefficient(0.0)),
        f=ConstantCoefficient(1.0),
        sigma=ConstantCoefficient(1.0),
        theta_lo=0.5, theta_hi=2.0, T=1.0, tau=0.25, epsilon=0.1, y0=2.0)


def assert_close(value, target, rel=None, abs_tol=None, label=""):
    if rel is not None:
        assert abs(value - target) <= rel * abs(target), \
            f"{label}: {value} vs {target} (rel tol {rel})"
    if abs_tol is not None:
        assert abs(value - target) <= abs_tol, \
            f"{label}: {value} vs {target} (abs tol {abs_tol})"
