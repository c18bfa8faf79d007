"""Semilinear backward parabolic solver for the value function u.

    u_t - a(t) y u_y + c(theta, t)^2 / 2 u_yy = -F(t, y, u, c u_y),
    u(T, y) = Phi(y),

posed on a truncated y-interval with zero second derivative at the
walls.  The volatility c is either the plug-in filter coefficient
(positive epsilon mode) or the forward volatility b (limit mode).
Time stepping is Crank-Nicolson on the linear part with Picard
iteration on the driver; y-derivatives use central differences.

Families of solutions over a theta grid carry the theta derivative of
u, obtained by central differences across neighboring solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from . import kalman
from .model import ConfigError, ModelSpec, PdeGridSpec, ProblemFunctions

PICARD_MAX_ITER = 50
PICARD_TOL = 1e-10


def forward_moments(spec: ModelSpec, theta: float, n_quad: int = 801):
    """Mean and variance of the hidden state law on a time grid.

    mean(t) = y0 exp(-int_0^t a), var(t) = int_0^t b^2 exp(-2 int_s^t a) ds.
    """
    t = np.linspace(0.0, spec.T, n_quad)
    a = np.asarray(spec.a(t))
    dt = t[1] - t[0]
    A = np.concatenate([[0.0], np.cumsum(0.5 * (a[:-1] + a[1:]) * dt)])
    b2 = spec.b(float(theta), t) ** 2
    integrand = b2 * np.exp(2.0 * A)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[:-1] + integrand[1:]) * dt)])
    var = np.exp(-2.0 * A) * cum
    return t, spec.y0 * np.exp(-A), var


def default_domain(spec: ModelSpec, theta: float, stds: float = 6.0) -> tuple[float, float]:
    """Truncation interval y0 +- stds * max_t std(Y_t) at the given theta."""
    _, _, var = forward_moments(spec, theta)
    half = stds * float(np.sqrt(var.max()))
    if half <= 0:
        half = max(1.0, abs(spec.y0))
    return spec.y0 - half, spec.y0 + half


def make_grid(spec: ModelSpec, grid_spec: PdeGridSpec, theta: float) -> tuple[np.ndarray, np.ndarray]:
    y_min, y_max = grid_spec.y_min, grid_spec.y_max
    if y_min is None or y_max is None:
        lo, hi = default_domain(spec, theta, grid_spec.domain_stds)
        y_min = lo if y_min is None else y_min
        y_max = hi if y_max is None else y_max
    if not y_min < spec.y0 < y_max:
        raise ConfigError("y grid must contain the initial state y0")
    t = np.linspace(0.0, spec.T, grid_spec.n_t + 1)
    y = np.linspace(y_min, y_max, grid_spec.n_y)
    return t, y


@dataclass(frozen=True)
class PdeSolution:
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray     # shape (n_t + 1, n_y)
    u_y: np.ndarray
    theta: float
    epsilon: float    # 0 for the limit equation
    volatility: str   # "plugin" or "limit"

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])


def _dy_central(u: np.ndarray, dy: float) -> np.ndarray:
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * dy)
    out[..., 0] = (u[..., 1] - u[..., 0]) / dy
    out[..., -1] = (u[..., -1] - u[..., -2]) / dy
    return out


def plugin_volatility(spec: ModelSpec, theta: float, epsilon: float,
                      t_grid: np.ndarray, solver_dt: float = 1e-4) -> np.ndarray:
    """B(theta, t) = gamma_star f / sigma from a fine Riccati solve."""
    sp = spec.with_epsilon(epsilon)
    t_fine = sp.time_grid(solver_dt)
    gamma, _ = kalman.riccati_arrays(sp, float(theta), t_fine)
    gamma_star = np.interp(t_grid, t_fine, gamma / epsilon)
    return gamma_star * np.asarray(spec.f(t_grid)) / np.asarray(spec.sigma(t_grid))


def _operator_bands(a_t: float, c_t: float, y: np.ndarray, dy: float):
    """Tridiagonal bands (sub, diag, super) of -a y d_y + c^2/2 d_yy.

    Wall rows drop the second derivative (linear extrapolation) and use
    one-sided first differences.
    """
    n = len(y)
    adv = -a_t * y
    diff = 0.5 * c_t * c_t / (dy * dy)
    sub = np.empty(n)
    diag = np.empty(n)
    sup = np.empty(n)
    sub[1:-1] = -adv[1:-1] / (2.0 * dy) + diff
    diag[1:-1] = -2.0 * diff
    sup[1:-1] = adv[1:-1] / (2.0 * dy) + diff
    diag[0] = -adv[0] / dy
    sup[0] = adv[0] / dy
    sub[-1] = -adv[-1] / dy
    diag[-1] = adv[-1] / dy
    sub[0] = 0.0
    sup[-1] = 0.0
    return sub, diag, sup


def _apply_bands(bands, u):
    sub, diag, sup = bands
    out = diag * u
    out[1:] += sub[1:] * u[:-1]
    out[:-1] += sup[:-1] * u[1:]
    return out


def solve_pde(problem: ProblemFunctions, spec: ModelSpec, theta: float,
              epsilon_mode: float, grid_spec: PdeGridSpec | None = None,
              t_grid: np.ndarray | None = None, y_grid: np.ndarray | None = None,
              volatility_values: np.ndarray | None = None) -> PdeSolution:
    """Backward Crank-Nicolson sweep from the terminal condition.

    epsilon_mode = 0 selects the limit volatility b(theta, t); a positive
    value selects the plug-in filter volatility at that noise scale.
    Pass t_grid / y_grid to override the grid built from grid_spec.
    """
    if t_grid is None or y_grid is None:
        gs = grid_spec if grid_spec is not None else PdeGridSpec()
        t_default, y_default = make_grid(spec, gs, theta)
        t_grid = t_default if t_grid is None else t_grid
        y_grid = y_default if y_grid is None else y_grid
    t, y = np.asarray(t_grid, dtype=float), np.asarray(y_grid, dtype=float)
    n_t = len(t) - 1
    dy = float(y[1] - y[0])
    dt = float(t[1] - t[0])

    if volatility_values is not None:
        c = np.asarray(volatility_values, dtype=float)
    elif epsilon_mode == 0:
        c = spec.b(float(theta), t)
    else:
        c = plugin_volatility(spec, theta, float(epsilon_mode), t)
    a = np.asarray(spec.a(t), dtype=float)

    u = np.empty((n_t + 1, len(y)))
    u[n_t] = problem.terminal(y)

    ab = np.zeros((3, len(y)))
    for n in range(n_t - 1, -1, -1):
        bands_next = _operator_bands(a[n + 1], c[n + 1], y, dy)
        bands_cur = _operator_bands(a[n], c[n], y, dy)
        u_next = u[n + 1]
        uy_next = _dy_central(u_next, dy)
        f_next = problem.driver(t[n + 1], y, u_next, c[n + 1] * uy_next)
        rhs_base = u_next + 0.5 * dt * _apply_bands(bands_next, u_next)

        # implicit matrix I - dt/2 L_n in banded storage
        sub, diag, sup = bands_cur
        ab[0, 1:] = -0.5 * dt * sup[:-1]
        ab[1, :] = 1.0 - 0.5 * dt * diag
        ab[2, :-1] = -0.5 * dt * sub[1:]

        guess = u_next
        converged = False
        for _ in range(PICARD_MAX_ITER):
            uy_guess = _dy_central(guess, dy)
            f_cur = problem.driver(t[n], y, guess, c[n] * uy_guess)
            rhs = rhs_base + 0.5 * dt * (f_cur + f_next)
            new = solve_banded((1, 1), ab, rhs)
            if np.max(np.abs(new - guess)) < PICARD_TOL:
                guess = new
                converged = True
                break
            guess = new
        if not converged:
            raise FloatingPointError(
                "Picard iteration did not converge; driver too stiff for this step")
        u[n] = guess

    mode = "limit" if epsilon_mode == 0 else "plugin"
    return PdeSolution(t=t, y=y, u=u, u_y=_dy_central(u, dy), theta=float(theta),
                       epsilon=float(epsilon_mode), volatility=mode)


# ---------------------------------------------------------------------------
# Evaluation by bilinear interpolation
# ---------------------------------------------------------------------------

def _axis_weights(grid: np.ndarray, q: np.ndarray, what: str):
    h = float(grid[1] - grid[0])
    lo, hi = float(grid[0]), float(grid[-1])
    q = np.asarray(q, dtype=float)
    if np.any(q < lo - 1e-9 * max(1, abs(lo))) or np.any(q > hi + 1e-9 * max(1, abs(hi))):
        raise ConfigError(f"{what} query outside the solution grid")
    pos = (q - lo) / h
    # snap near-node queries so grid points reproduce stored values exactly
    rounded = np.round(pos)
    pos = np.where(np.abs(pos - rounded) < 1e-9, rounded, pos)
    pos = np.clip(pos, 0.0, len(grid) - 1 - 1e-12)
    idx = np.minimum(pos.astype(int), len(grid) - 2)
    return idx, pos - idx


def _bilinear(field: np.ndarray, t_grid: np.ndarray, y_grid: np.ndarray, t, y):
    it, wt = _axis_weights(t_grid, t, "time")
    iy, wy = _axis_weights(y_grid, y, "state")
    f00 = field[it, iy]
    f01 = field[it, iy + 1]
    f10 = field[it + 1, iy]
    f11 = field[it + 1, iy + 1]
    return (f00 * (1 - wt) * (1 - wy) + f01 * (1 - wt) * wy
            + f10 * wt * (1 - wy) + f11 * wt * wy)


def eval_u(sol: PdeSolution, t, y):
    val = _bilinear(sol.u, sol.t, sol.y, t, y)
    return float(val) if np.isscalar(t) and np.isscalar(y) else val


def eval_u_y(sol: PdeSolution, t, y):
    val = _bilinear(sol.u_y, sol.t, sol.y, t, y)
    return float(val) if np.isscalar(t) and np.isscalar(y) else val


# ---------------------------------------------------------------------------
# Solution family over a theta grid with the theta derivative
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PdeFamily:
    thetas: np.ndarray
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray       # (n_theta, n_t + 1, n_y)
    u_y: np.ndarray
    u_dot: np.ndarray   # theta derivative by differencing across nodes
    epsilon: float
    volatility: str

    def solution(self, j: int) -> PdeSolution:
        return PdeSolution(t=self.t, y=self.y, u=self.u[j], u_y=self.u_y[j],
                           theta=float(self.thetas[j]), epsilon=self.epsilon,
                           volatility=self.volatility)

    def _trilinear(self, field: np.ndarray, theta, t, y):
        ith, wth = _axis_weights(self.thetas, np.asarray(theta, dtype=float), "theta")
        it, wt = _axis_weights(self.t, np.asarray(t, dtype=float), "time")
        iy, wy = _axis_weights(self.y, np.asarray(y, dtype=float), "state")
        out = 0.0
        for dth, vth in ((0, 1 - wth), (1, wth)):
            for dtt, vt in ((0, 1 - wt), (1, wt)):
                for dyy, vy in ((0, 1 - wy), (1, wy)):
                    out = out + field[ith + dth, it + dtt, iy + dyy] * vth * vt * vy
        return out

    def u_at(self, theta, t, y):
        return self._trilinear(self.u, theta, t, y)

    def u_y_at(self, theta, t, y):
        return self._trilinear(self.u_y, theta, t, y)

    def u_dot_at(self, theta, t, y):
        return self._trilinear(self.u_dot, theta, t, y)


def theta_family(problem: ProblemFunctions, spec: ModelSpec, epsilon_mode: float,
                 thetas: np.ndarray, grid_spec: PdeGridSpec | None = None) -> PdeFamily:
    """Solve the equation per theta node; u_dot by central differences.

    End nodes use second-order one-sided differences.  Needs at least
    3 nodes for the derivative stencil.
    """
    thetas = np.asarray(thetas, dtype=float)
    if len(thetas) < 3:
        raise ConfigError("need >= 3 nodes for the theta derivative")
    if np.max(np.abs(np.diff(thetas) - (thetas[1] - thetas[0]))) > 1e-9:
        raise ConfigError("theta grid must be uniform")
    gs = grid_spec if grid_spec is not None else PdeGridSpec()
    # one shared (t, y) grid sized for the widest forward law in the family
    theta_widest = float(thetas[np.argmax([default_domain(spec, th)[1] for th in thetas])])
    t, y = make_grid(spec, gs, theta_widest)

    if epsilon_mode == 0:
        vols = [None] * len(thetas)
    else:
        sp = spec.with_epsilon(float(epsilon_mode))
        t_fine = sp.time_grid(1e-4)
        gamma, _ = kalman.riccati_arrays(sp, thetas, t_fine)
        fs = np.asarray(spec.f(t)) / np.asarray(spec.sigma(t))
        vols = [np.interp(t, t_fine, gamma[j] / float(epsilon_mode)) * fs
                for j in range(len(thetas))]

    sols = [solve_pde(problem, spec, float(th), epsilon_mode, t_grid=t, y_grid=y,
                      volatility_values=vol)
            for th, vol in zip(thetas, vols)]
    u = np.stack([s.u for s in sols])
    u_y = np.stack([s.u_y for s in sols])
    h = float(thetas[1] - thetas[0])
    u_dot = np.empty_like(u)
    u_dot[1:-1] = (u[2:] - u[:-2]) / (2.0 * h)
    u_dot[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h)
    u_dot[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * h)
    return PdeFamily(thetas=thetas, t=t, y=y, u=u, u_y=u_y, u_dot=u_dot,
                     epsilon=float(epsilon_mode), volatility=sols[0].volatility)
