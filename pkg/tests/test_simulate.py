import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiddenbsde import rng
from hiddenbsde.simulate import (NoiseBundle, SamplePath, forward_terminal_values,
                                 forward_values, observation_values,
                                 simulate_forward, simulate_observation)
from hiddenbsde.model import ConfigError


def test_sample_path_validation():
    t = np.linspace(0, 1, 11)
    SamplePath(t, np.zeros(11), kind="hidden")
    with pytest.raises(ValueError):
        SamplePath(t, np.zeros(10), kind="hidden")
    with pytest.raises(ValueError):
        SamplePath(t[::-1], np.zeros(11), kind="hidden")
    with pytest.raises(ValueError):
        SamplePath(t, np.zeros(11), kind="weird")


def test_deterministic_drift_limit(pure_drift_spec):
    # b = 0, a = 1, y0 = 2: the Euler path is exactly 2 (1 - dt)^(T/dt)
    dt = 1e-4
    n = int(round(1.0 / dt))
    noise = NoiseBundle.from_seed(0, n, dt)
    path = simulate_forward(pure_drift_spec, 1.0, dt, noise)
    exact_discrete = 2.0 * (1.0 - dt) ** n
    assert path.v[-1] == pytest.approx(exact_discrete, abs=1e-12)
    assert path.v[-1] == pytest.approx(2.0 * np.exp(-1.0), abs=1e-3)


def test_stationary_variance_oracle(cm1):
    # OU variance int_0^1 e^{-2(1-s)} ds = (1 - e^{-2}) / 2 at theta = 1
    target = (1.0 - np.exp(-2.0)) / 2.0
    y_T = forward_terminal_values(cm1, 1.0, 1e-4, seed=11, n_paths=10_000)
    assert np.var(y_T) == pytest.approx(target, rel=0.05)


def test_same_seed_bitwise_identical(cm1):
    dt = 1e-3
    n = int(round(cm1.T / dt))
    a = simulate_forward(cm1, 1.2, dt, NoiseBundle.from_seed(42, n, dt))
    b = simulate_forward(cm1, 1.2, dt, NoiseBundle.from_seed(42, n, dt))
    assert np.array_equal(a.v, b.v)


def test_theta_outside_interval_rejected(cm1):
    noise = NoiseBundle.from_seed(0, 100, 1e-2)
    with pytest.raises(ConfigError):
        simulate_forward(cm1, 3.0, 1e-2, noise)


def test_observation_noise_free_integral(cm1):
    spec = cm1.with_epsilon(1.0)
    import dataclasses
    spec0 = dataclasses.replace(spec, epsilon=1e-300)  # effectively zero noise
    dt = 1e-3
    n = int(round(spec.T / dt))
    noise = NoiseBundle.from_seed(3, n, dt)
    y = simulate_forward(spec0, 1.0, dt, noise)
    x = simulate_observation(spec0, y, noise)
    integral = np.concatenate([[0.0], np.cumsum(y.v[:-1] * dt)])
    assert np.allclose(x.v, integral, atol=1e-250)


def test_observation_pure_noise_variance(cm1):
    # Y = 0 paths: X is scaled Brownian with Var(X_T) = eps^2 T
    dt = 1e-3
    n = int(round(cm1.T / dt))
    noise = NoiseBundle.for_replicates(17, 2000, n, dt)
    t = np.arange(n + 1) * dt
    y = np.zeros((2000, n + 1))
    x = observation_values(cm1, t, y, noise.dW)
    assert np.var(x[:, -1]) == pytest.approx(cm1.epsilon ** 2, rel=0.1)


def test_observation_residual_variance(cm1):
    # Var(X_T - int f Y dt) = eps^2 T within 10% over 1000 replicates
    dt = 1e-3
    n = int(round(cm1.T / dt))
    noise = NoiseBundle.for_replicates(23, 1000, n, dt)
    t = np.arange(n + 1) * dt
    y = forward_values(cm1, 1.0, t, noise.dV)
    x = observation_values(cm1, t, y, noise.dW)
    drift = np.sum(y[:, :-1] * dt, axis=1)
    assert np.var(x[:, -1] - drift) == pytest.approx(cm1.epsilon ** 2, rel=0.1)


def test_grid_mismatch_rejected(cm1):
    dt = 1e-3
    n = int(round(cm1.T / dt))
    y = simulate_forward(cm1, 1.0, dt, NoiseBundle.from_seed(0, n, dt))
    with pytest.raises(ConfigError):
        simulate_observation(cm1, y, NoiseBundle.from_seed(0, n - 1, dt))


def test_euler_weak_error_shrinks(pure_drift_spec):
    vals = []
    for dt in (4e-3, 2e-3, 1e-3):
        n = int(round(1.0 / dt))
        noise = NoiseBundle.from_seed(0, n, dt)
        vals.append(simulate_forward(pure_drift_spec, 1.0, dt, noise).v[-1])
    errs = np.abs(np.array(vals) - 2.0 * np.exp(-1.0))
    assert errs[2] < errs[1] < errs[0]
    assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.15)


def test_noise_bundle_moments():
    n = 20_000
    dt = 1e-4
    nb = NoiseBundle.from_seed(5, n, dt)
    for inc in (nb.dV, nb.dW):
        assert abs(inc.mean()) < 4.0 * np.sqrt(dt / n)
        assert abs(inc.var() / dt - 1.0) < 0.1
    # independence between the two streams
    corr = np.corrcoef(nb.dV, nb.dW)[0, 1]
    assert abs(corr) < 4.0 / np.sqrt(n)


def test_replicate_streams_match_child_seeds():
    batch = NoiseBundle.for_replicates(99, 5, 64, 1e-2)
    single = NoiseBundle.from_seed(rng.child_seed(99, 3), 64, 1e-2)
    assert np.array_equal(batch.dV[3], single.dV)
    assert np.array_equal(batch.dW[3], single.dW)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), theta=st.floats(0.6, 1.9))
def test_determinism_property(seed, theta):
    from hiddenbsde.model import canonical_model
    spec = canonical_model(0.1)
    noise = NoiseBundle.from_seed(seed, 200, 5e-3)
    a = simulate_forward(spec, theta, 5e-3, noise)
    b = simulate_forward(spec, theta, 5e-3, noise)
    assert np.array_equal(a.v, b.v)
    assert len(a.t) == 201 and a.kind == "hidden"
