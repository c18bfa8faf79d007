import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiddenbsde import model as M


CM1_DOC = """
[model]
a = 1.0
b = { kind = "theta" }
f = 1.0
sigma = 1.0
theta_lo = 0.5
theta_hi = 2.0
T = 1.0
tau = 0.25
epsilon = 0.1
"""


def test_load_config_canonical_model():
    cfg = M.load_config(CM1_DOC)
    spec = cfg.model
    assert spec.theta_lo == 0.5 and spec.theta_hi == 2.0
    assert spec.T == 1.0 and spec.tau == 0.25 and spec.epsilon == 0.1
    assert spec.y0 == 0.0
    t = np.linspace(0, 1, 7)
    assert np.allclose(spec.a(t), 1.0)
    assert np.allclose(spec.b(1.3, t), 1.3)
    assert np.allclose(spec.b.dtheta(1.3, t), 1.0)
    assert cfg == M.load_config(CM1_DOC)


def test_load_config_rejects_bad_tau():
    doc = CM1_DOC.replace("tau = 0.25", "tau = 1.5")
    with pytest.raises(M.ConfigError, match="tau"):
        M.load_config(doc)


def test_load_config_parse_error_carries_position():
    with pytest.raises(M.ConfigError, match="parse error"):
        M.load_config("[model\na = 1.0")


def test_load_config_unknown_coefficient():
    doc = CM1_DOC.replace('{ kind = "theta" }', '{ kind = "mystery" }')
    with pytest.raises(M.ConfigError, match="mystery"):
        M.load_config(doc)


def test_tabulated_interpolation():
    doc = CM1_DOC.replace("f = 1.0",
                          'f = { kind = "table", points = [[0.0, 1.0], [1.0, 2.0]] }')
    cfg = M.load_config(doc)
    assert cfg.model.f(0.5) == pytest.approx(1.5)
    assert cfg.model.f(0.0) == pytest.approx(1.0)


def test_roundtrip_serialization():
    cfg = M.load_config(CM1_DOC)
    assert M.load_config(M.serialize_config(cfg)) == cfg


def test_roundtrip_with_tables_and_problem():
    doc = CM1_DOC + """
[problem]
driver = { kind = "linear", cu = 0.3, cs = 0.2 }
terminal = { kind = "constant", value = 5.0 }
growth_p = 1.0
lipschitz = 0.5

[experiment]
grid_dt = 0.0005
mc_replicates = 7
seed = 99
theta_true = 1.0
epsilons = [0.1, 0.05]
"""
    doc = doc.replace("sigma = 1.0",
                      'sigma = { kind = "poly", coeffs = [1.0, 0.5] }')
    cfg = M.load_config(doc)
    assert M.load_config(M.serialize_config(cfg)) == cfg
    assert cfg.problem.driver(0.0, 0.0, 2.0, 1.0) == pytest.approx(0.8)


def test_catalog_evaluation_is_deterministic():
    coeff = M.TabulatedCoefficient(((0.0, 1.0), (0.5, 2.0), (1.0, 0.5)))
    t = np.linspace(0, 1, 101)
    a, b = coeff(t), coeff(t)
    assert np.array_equal(a, b)
    vol = M.ThetaScaledVolatility(M.PolynomialCoefficient((1.0, 0.2)))
    assert np.array_equal(vol(1.2, t), vol(1.2, t))


def test_validate_conditions_canonical(cm1):
    report = M.validate_conditions(cm1, n_check=25)
    assert report.min_b == pytest.approx(0.5)
    assert report.min_f == pytest.approx(1.0)
    assert report.min_sigma == pytest.approx(1.0)
    assert report.positivity_pass and report.b_dtheta_pass and report.fisher_pass
    assert report.all_pass
    # learning information tau / (2 theta) ranges over [tau/4, tau/1]
    assert report.fisher_min == pytest.approx(0.25 / 4.0, rel=1e-6)
    assert "pass" in report.summary()


def test_validate_conditions_flags_zero_gain(cm1):
    import dataclasses
    spec = dataclasses.replace(cm1, f=M.PolynomialCoefficient((0.0, 1.0)))
    report = M.validate_conditions(spec, n_check=10)
    assert report.min_f == pytest.approx(0.0)
    assert not report.positivity_pass
    assert not report.all_pass


def test_validate_conditions_problem_checks(cm1, square_problem):
    report = M.validate_conditions(cm1, n_check=10, problem=square_problem)
    assert report.lipschitz_pass
    assert report.growth_constant == pytest.approx(1.0, abs=0.2)


def test_invariant_violations_raise():
    with pytest.raises(M.ConfigError):
        M.canonical_model(0.0)
    with pytest.raises(M.ConfigError):
        M.ModelSpec(a=M.ConstantCoefficient(1.0),
                    b=M.ThetaScaledVolatility(M.ConstantCoefficient(1.0)),
                    f=M.ConstantCoefficient(1.0), sigma=M.ConstantCoefficient(1.0),
                    theta_lo=2.0, theta_hi=0.5, T=1.0, tau=0.25, epsilon=0.1)


def test_replicate_count_validated(cm1, square_problem):
    with pytest.raises(M.ConfigError, match="replicates"):
        M.ExperimentConfig(model=cm1, problem=square_problem, mc_replicates=0)


def test_grid_alignment_checks(cm1, square_problem):
    with pytest.raises(M.ConfigError, match="divide"):
        M.ExperimentConfig(model=cm1, problem=square_problem, grid_dt=0.00013)
    cfg = M.ExperimentConfig(model=cm1, problem=square_problem, grid_dt=1e-3)
    assert cfg.model.tau_index(1e-3) == 250


def test_seed_environment_override(cm1, square_problem, monkeypatch):
    cfg = M.ExperimentConfig(model=cm1, problem=square_problem, seed=7)
    assert cfg.effective_seed() == 7
    monkeypatch.setenv("HIDDENBSDE_SEED", "123")
    assert cfg.effective_seed() == 123


@settings(max_examples=25, deadline=None)
@given(
    theta_lo=st.floats(0.1, 1.0),
    width=st.floats(0.2, 3.0),
    tau_frac=st.floats(0.1, 0.9),
    eps=st.floats(0.01, 1.0),
)
def test_roundtrip_property(theta_lo, width, tau_frac, eps):
    spec = M.ModelSpec(
        a=M.ConstantCoefficient(1.0),
        b=M.ThetaScaledVolatility(M.ConstantCoefficient(1.0)),
        f=M.ConstantCoefficient(1.0),
        sigma=M.ConstantCoefficient(1.0),
        theta_lo=theta_lo, theta_hi=theta_lo + width,
        T=1.0, tau=round(tau_frac, 2), epsilon=eps)
    cfg = M.ExperimentConfig(
        model=spec,
        problem=M.ProblemFunctions(driver=M.ZeroDriver(), terminal=M.IdentityTerminal()),
        grid_dt=1e-3)
    assert M.load_config(M.serialize_config(cfg)) == cfg
