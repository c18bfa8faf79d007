import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiddenbsde import pde
from hiddenbsde.model import (ConfigError, ConstantCoefficient, GaussianTerminal,
                              IdentityTerminal, LinearDriver, ModelSpec, PdeGridSpec,
                              ProblemFunctions, SquareTerminal, ConstantTerminal,
                              ThetaScaledVolatility, ZeroDriver, canonical_model)
from hiddenbsde.simulate import forward_terminal_values


def _no_drift_spec():
    return ModelSpec(a=ConstantCoefficient(0.0),
                     b=ThetaScaledVolatility(ConstantCoefficient(1.0)),
                     f=ConstantCoefficient(1.0), sigma=ConstantCoefficient(1.0),
                     theta_lo=0.5, theta_hi=2.0, T=1.0, tau=0.25, epsilon=0.1)


def _exact_square(t, y, theta=1.0, T=1.0):
    decay = np.exp(-2.0 * (T - t))
    return y ** 2 * decay + theta ** 2 * (1.0 - decay) / 2.0


def _exact_gaussian(t, y, c=1.0, T=1.0):
    s2 = c * c * (T - t)
    return np.exp(-y ** 2 / (2.0 * (1.0 + s2))) / np.sqrt(1.0 + s2)


class TestClosedForms:
    def test_linear_terminal(self, cm1):
        prob = ProblemFunctions(driver=ZeroDriver(), terminal=IdentityTerminal())
        sol = pde.solve_pde(prob, cm1, 1.0, 0,
                            PdeGridSpec(n_y=241, n_t=400, y_min=-4, y_max=4))
        assert pde.eval_u(sol, 0.0, 2.0) == pytest.approx(2.0 * np.exp(-1.0), abs=1e-3)
        tt, yy = np.meshgrid(sol.t, sol.y, indexing="ij")
        exact = yy * np.exp(-(1.0 - tt))
        inner = np.abs(sol.y) <= 2.0
        assert np.max(np.abs(sol.u - exact)[:, inner]) < 1e-3

    def test_square_terminal(self, cm1, square_problem):
        sol = pde.solve_pde(square_problem, cm1, 1.0, 0,
                            PdeGridSpec(n_y=481, n_t=400, y_min=-8, y_max=8))
        tt, yy = np.meshgrid(sol.t, sol.y, indexing="ij")
        inner = np.abs(sol.y) <= 4.0
        assert np.max(np.abs(sol.u - _exact_square(tt, yy))[:, inner]) < 1e-3

    def test_constant_terminal_invariant(self, cm1):
        prob = ProblemFunctions(driver=ZeroDriver(), terminal=ConstantTerminal(5.0))
        sol = pde.solve_pde(prob, cm1, 1.0, 0, PdeGridSpec(n_y=101, n_t=100))
        assert np.max(np.abs(sol.u - 5.0)) < 1e-12

    def test_terminal_condition_exact(self, cm1, square_problem):
        sol = pde.solve_pde(square_problem, cm1, 1.3, 0, PdeGridSpec(n_y=101, n_t=50))
        assert np.array_equal(sol.u[-1], np.asarray(sol.y) ** 2)

    def test_linear_driver_closed_form(self):
        # F = c u with Phi = 1: u(t) = e^{c (T - t)}
        spec = _no_drift_spec()
        prob = ProblemFunctions(driver=LinearDriver(cu=0.5),
                                terminal=ConstantTerminal(1.0), lipschitz=0.5)
        sol = pde.solve_pde(prob, spec, 1.0, 0, PdeGridSpec(n_y=101, n_t=200,
                                                            y_min=-6, y_max=6))
        exact = np.exp(0.5 * (1.0 - sol.t))
        assert np.max(np.abs(sol.u - exact[:, None])) < 1e-5


class TestEvaluation:
    def test_grid_node_exact(self, cm1, square_problem):
        sol = pde.solve_pde(square_problem, cm1, 1.0, 0, PdeGridSpec(n_y=81, n_t=40))
        it, iy = 7, 13
        assert pde.eval_u(sol, sol.t[it], sol.y[iy]) == sol.u[it, iy]

    def test_bilinear_reproduces_linear_solution(self, cm1):
        prob = ProblemFunctions(driver=ZeroDriver(), terminal=IdentityTerminal())
        sol = pde.solve_pde(prob, cm1, 1.0, 0,
                            PdeGridSpec(n_y=161, n_t=100, y_min=-4, y_max=4))
        k = 40
        t_node = sol.t[k]
        for yq in (0.123, -1.7, 2.5):
            interp = pde.eval_u(sol, t_node, yq)
            exact_row = np.interp(yq, sol.y, sol.u[k])
            assert interp == pytest.approx(exact_row, rel=1e-12)

    def test_off_grid_second_order(self, cm1, square_problem):
        # interpolation error scales with the product of node distances
        vals = []
        for n_y in (61, 121):
            sol = pde.solve_pde(square_problem, cm1, 1.0, 0,
                                PdeGridSpec(n_y=n_y, n_t=1600, y_min=-6, y_max=6))
            vals.append(pde.eval_u(sol, 0.5, 0.73) - _exact_square(0.5, 0.73))
        assert abs(vals[1]) < abs(vals[0])
        assert abs(vals[1]) == pytest.approx(abs(vals[0]) / 4.33, rel=0.5)

    def test_domain_exit_rejected(self, cm1, square_problem):
        sol = pde.solve_pde(square_problem, cm1, 1.0, 0,
                            PdeGridSpec(n_y=61, n_t=40, y_min=-3, y_max=3))
        with pytest.raises(ConfigError):
            pde.eval_u(sol, 0.5, 3.5)
        with pytest.raises(ConfigError):
            pde.eval_u_y(sol, 1.2, 0.0)


class TestThetaFamily:
    def test_theta_derivative_closed_form(self, cm1, square_problem):
        thetas = np.linspace(0.5, 2.0, 41)
        fam = pde.theta_family(square_problem, cm1, 0, thetas,
                               PdeGridSpec(n_y=241, n_t=200))
        val = fam.u_dot_at(np.array([1.0]), np.array([0.0]), np.array([0.0]))[0]
        assert val == pytest.approx(1.0 - np.exp(-2.0), abs=1e-4)

    def test_linear_terminal_has_no_theta_dependence(self, cm1):
        prob = ProblemFunctions(driver=ZeroDriver(), terminal=IdentityTerminal())
        fam = pde.theta_family(prob, cm1, 0, np.linspace(0.5, 2.0, 5),
                               PdeGridSpec(n_y=121, n_t=100))
        assert np.max(np.abs(fam.u_dot)) < 1e-8

    def test_needs_three_nodes(self, cm1, square_problem):
        with pytest.raises(ConfigError, match="3 nodes"):
            pde.theta_family(square_problem, cm1, 0, np.array([1.0]),
                             PdeGridSpec(n_y=61, n_t=20))

    def test_interior_derivative_half_step_consistency(self, cm1, square_problem):
        gs = PdeGridSpec(n_y=121, n_t=100, y_min=-6.0, y_max=6.0)
        coarse = pde.theta_family(square_problem, cm1, 0,
                                  np.linspace(0.8, 1.2, 5), gs)
        fine = pde.theta_family(square_problem, cm1, 0,
                                np.linspace(0.9, 1.1, 5), gs)
        # same interior node theta = 1.0, halved step: O(h^2) agreement
        # away from the truncation walls
        inner = np.abs(coarse.y) <= 4.0
        diff = np.abs(coarse.u_dot[2] - fine.u_dot[2])[:, inner]
        assert np.max(diff) < 1e-6


class TestRefinement:
    def test_time_order_at_least_first(self, cm1, square_problem):
        errs = []
        for n_t in (25, 50, 100):
            sol = pde.solve_pde(square_problem, cm1, 1.0, 0,
                                PdeGridSpec(n_y=321, n_t=n_t, y_min=-8, y_max=8))
            tt, yy = np.meshgrid(sol.t, sol.y, indexing="ij")
            inner = np.abs(sol.y) <= 4
            errs.append(np.max(np.abs(sol.u - _exact_square(tt, yy))[:, inner]))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 1.0)

    def test_space_order_at_least_second(self):
        spec = _no_drift_spec()
        prob = ProblemFunctions(driver=ZeroDriver(), terminal=GaussianTerminal())
        errs = []
        for n_y in (51, 101, 201):
            sol = pde.solve_pde(prob, spec, 1.0, 0,
                                PdeGridSpec(n_y=n_y, n_t=3200, y_min=-10, y_max=10))
            tt, yy = np.meshgrid(sol.t, sol.y, indexing="ij")
            inner = np.abs(sol.y) <= 5
            errs.append(np.max(np.abs(sol.u - _exact_gaussian(tt, yy))[:, inner]))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 2.0)


class TestInvariants:
    def test_maximum_principle_nonnegative(self, cm1):
        prob = ProblemFunctions(driver=ZeroDriver(), terminal=GaussianTerminal(0.7))
        sol = pde.solve_pde(prob, cm1, 1.2, 0, PdeGridSpec(n_y=201, n_t=200))
        assert sol.u.min() >= -1e-8

    def test_plugin_volatility_approaches_limit(self, cm1_factory, square_problem):
        sups = []
        for eps in (0.1, 0.05, 0.02):
            spec = cm1_factory(eps)
            gs = PdeGridSpec(n_y=161, n_t=100, y_min=-5, y_max=5)
            sol_eps = pde.solve_pde(square_problem, spec, 1.0, eps, gs)
            sol_lim = pde.solve_pde(square_problem, spec, 1.0, 0, gs)
            mask = sol_eps.t >= 0.1
            sups.append(np.max(np.abs(sol_eps.u[mask] - sol_lim.u[mask])))
        assert sups[2] < sups[1] < sups[0]

    def test_boundary_influence_detector(self, cm1, square_problem):
        base = pde.solve_pde(square_problem, cm1, 1.0, 0,
                             PdeGridSpec(n_y=241, n_t=200, y_min=-4, y_max=4))
        wide = pde.solve_pde(square_problem, cm1, 1.0, 0,
                             PdeGridSpec(n_y=481, n_t=200, y_min=-8, y_max=8))
        inner = np.abs(base.y) <= 2.0
        tt = base.t
        diff = np.abs(base.u[:, inner]
                      - wide.u[:, np.isin(np.round(wide.y, 9), np.round(base.y[inner], 9))])
        assert np.max(diff) < 1e-4

    def test_feynman_kac_monte_carlo(self, cm1, square_problem):
        sol = pde.solve_pde(square_problem, cm1, 1.0, 0,
                            PdeGridSpec(n_y=321, n_t=400, y_min=-6, y_max=6))
        y_T = forward_terminal_values(cm1, 1.0, 1e-3, seed=2718, n_paths=100_000)
        mc_mean = float(np.mean(y_T ** 2))
        mc_se = float(np.std(y_T ** 2) / np.sqrt(len(y_T)))
        assert abs(pde.eval_u(sol, 0.0, cm1.y0) - mc_mean) <= 3.0 * mc_se

    def test_picard_divergence_detected(self, cm1):
        stiff = ProblemFunctions(driver=LinearDriver(cu=100.0),
                                 terminal=SquareTerminal(), lipschitz=100.0)
        with pytest.raises(FloatingPointError, match="Picard"):
            pde.solve_pde(stiff, cm1, 1.0, 0, PdeGridSpec(n_y=61, n_t=10))


@settings(max_examples=10, deadline=None)
@given(value=st.floats(-5, 5), theta=st.floats(0.6, 1.9))
def test_constant_terminal_property(value, theta):
    spec = canonical_model(0.1)
    prob = ProblemFunctions(driver=ZeroDriver(), terminal=ConstantTerminal(value))
    sol = pde.solve_pde(prob, spec, theta, 0, PdeGridSpec(n_y=41, n_t=20))
    assert np.max(np.abs(sol.u - value)) < 1e-10
    assert np.array_equal(sol.u[-1], prob.terminal(sol.y))
