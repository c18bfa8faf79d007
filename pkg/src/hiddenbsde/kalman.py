"""Continuous-time filtering for the hidden linear state.

Solves the variance equation (Riccati) together with its theta
sensitivity by classical RK4, runs the conditional-mean filter and its
theta sensitivity by an Euler recursion driven by observation
increments, reconstructs the innovation process, and tabulates the
rescaled variance over a theta grid for coefficient lookups along a
time-varying estimate.

theta arguments broadcast: a scalar gives single trajectories, an array
of shape (n,) gives stacked trajectories, and observation increments
may carry a matching leading replicate axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError, ModelSpec
from .simulate import SamplePath

_FILTER_RUNS = 0


def filter_run_count() -> int:
    """Number of filter recursions executed since the last reset."""
    return _FILTER_RUNS


def reset_filter_run_count() -> None:
    global _FILTER_RUNS
    _FILTER_RUNS = 0


# ---------------------------------------------------------------------------
# Riccati equation with joint theta-sensitivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiccatiTrajectory:
    t: np.ndarray
    gamma: np.ndarray
    gamma_star: np.ndarray
    gamma_dtheta: np.ndarray
    theta: float
    epsilon: float


def riccati_arrays(spec: ModelSpec, theta, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """RK4 integration of the filter variance and its theta derivative.

    gamma'  = -2 a gamma - gamma^2 f^2 / (eps^2 sigma^2) + b^2
    gamma.' = -2 a gamma. - 2 gamma gamma. f^2 / (eps^2 sigma^2) + 2 b b.

    both started at zero.  Returns (gamma, gamma_dtheta) with shape
    theta.shape + t.shape.
    """
    theta = np.asarray(theta, dtype=float)
    dt = float(t[1] - t[0])
    n = len(t) - 1
    e2 = spec.epsilon ** 2

    # coefficient stencils at (t_k, t_k + dt/2, t_k + dt)
    t_mid = t[:-1] + 0.5 * dt
    a_sten = (np.asarray(spec.a(t[:-1])), np.asarray(spec.a(t_mid)), np.asarray(spec.a(t[1:])))
    fs_sten = tuple(np.asarray(spec.f(tt)) ** 2 / (e2 * np.asarray(spec.sigma(tt)) ** 2)
                    for tt in (t[:-1], t_mid, t[1:]))

    g = np.empty(theta.shape + (n + 1,))
    gd = np.empty(theta.shape + (n + 1,))
    g[..., 0] = 0.0
    gd[..., 0] = 0.0

    def rhs(gk, gdk, a, fs, b2, bbd):
        dg = -2.0 * a * gk - gk * gk * fs + b2
        dgd = -2.0 * a * gdk - 2.0 * gk * gdk * fs + 2.0 * bbd
        return dg, dgd

    for k in range(n):
        stencil = []
        for j, tt in enumerate((t[k], t_mid[k], t[k + 1])):
            bv = spec.b(theta, tt)
            bd = spec.b.dtheta(theta, tt)
            stencil.append((a_sten[j][k], fs_sten[j][k], bv * bv, bv * bd))
        gk, gdk = g[..., k], gd[..., k]
        k1 = rhs(gk, gdk, *stencil[0])
        k2 = rhs(gk + 0.5 * dt * k1[0], gdk + 0.5 * dt * k1[1], *stencil[1])
        k3 = rhs(gk + 0.5 * dt * k2[0], gdk + 0.5 * dt * k2[1], *stencil[1])
        k4 = rhs(gk + dt * k3[0], gdk + dt * k3[1], *stencil[2])
        g[..., k + 1] = gk + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        gd[..., k + 1] = gdk + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])

    if not np.all(np.isfinite(g[..., -1])):
        raise FloatingPointError("Riccati integration diverged; dt too large for this epsilon")
    return g, gd


def solve_riccati(spec: ModelSpec, theta: float, dt: float) -> RiccatiTrajectory:
    if not spec.theta_lo < theta < spec.theta_hi:
        raise ConfigError("theta outside the parameter interval")
    t = spec.time_grid(dt)
    g, gd = riccati_arrays(spec, float(theta), t)
    return RiccatiTrajectory(t=t, gamma=g, gamma_star=g / spec.epsilon,
                             gamma_dtheta=gd, theta=float(theta), epsilon=spec.epsilon)


def boundary_layer_time(spec: ModelSpec, n_check: int = 21) -> float:
    """Relaxation time of the filter transient: 5 eps sigma / (b f) at the
    least favorable theta and time.  Convergence-to-limit diagnostics are
    only meaningful for t at or beyond this scale."""
    thetas = np.linspace(spec.theta_lo, spec.theta_hi, n_check)
    ts = np.linspace(0.0, spec.T, n_check)
    rate = (spec.b(thetas[:, None], ts[None, :]) * np.asarray(spec.f(ts))
            / (spec.epsilon * np.asarray(spec.sigma(ts))))
    return float(5.0 / rate.min())


def limit_coefficients(spec: ModelSpec, theta, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Small-noise limits: gamma0 = b sigma / f and A0 = b / sigma."""
    theta = np.asarray(theta, dtype=float)
    th = theta[..., None] if theta.ndim else theta
    b = spec.b(th, t)
    return b * np.asarray(spec.sigma(t)) / np.asarray(spec.f(t)), b / np.asarray(spec.sigma(t))


# ---------------------------------------------------------------------------
# Conditional-mean filter with joint theta-sensitivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterTrajectory:
    t: np.ndarray
    m: np.ndarray
    m_dtheta: np.ndarray
    A_eps: np.ndarray
    q_eps: np.ndarray
    B_eps: np.ndarray
    theta: float
    epsilon: float


def filter_arrays(spec: ModelSpec, theta, t: np.ndarray, gamma: np.ndarray,
                  gamma_dtheta: np.ndarray, dx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euler recursion for the conditional mean m and its sensitivity.

    dm  = -q m dt + (gamma f / (eps^2 sigma^2)) dX
    dm. = -q m. dt - (gamma. f^2 / (eps^2 sigma^2)) m dt
                   + (gamma. f / (eps^2 sigma^2)) dX

    with q = a + gamma f^2 / (eps^2 sigma^2), both started at zero.
    """
    global _FILTER_RUNS
    _FILTER_RUNS += 1

    dt = float(t[1] - t[0])
    n = len(t) - 1
    e2s2 = spec.epsilon ** 2 * np.asarray(spec.sigma(t[:-1])) ** 2
    f = np.asarray(spec.f(t[:-1]))
    a = np.asarray(spec.a(t[:-1]))
    gain = gamma[..., :-1] * f / e2s2
    gain_d = gamma_dtheta[..., :-1] * f / e2s2
    q = a + gain * f
    qd = gain_d * f

    shape = np.broadcast_shapes(dx.shape[:-1], gamma.shape[:-1])
    m = np.empty(shape + (n + 1,))
    md = np.empty(shape + (n + 1,))
    m[..., 0] = 0.0
    md[..., 0] = 0.0
    for k in range(n):
        mk = m[..., k]
        m[..., k + 1] = mk - q[..., k] * mk * dt + gain[..., k] * dx[..., k]
        md[..., k + 1] = (md[..., k] - q[..., k] * md[..., k] * dt
                          - qd[..., k] * mk * dt + gain_d[..., k] * dx[..., k])
    if not np.all(np.isfinite(m[..., -1])):
        raise FloatingPointError("filter recursion diverged")
    return m, md


def run_filter(spec: ModelSpec, theta: float, riccati: RiccatiTrajectory,
               x_path: SamplePath) -> FilterTrajectory:
    if len(riccati.t) != len(x_path.t) or abs(riccati.t[1] - x_path.t[1]) > 1e-12:
        raise ConfigError("Riccati and observation grids do not coincide")
    t = riccati.t
    m, md = filter_arrays(spec, theta, t, riccati.gamma, riccati.gamma_dtheta,
                          x_path.increments())
    f = np.asarray(spec.f(t))
    s = np.asarray(spec.sigma(t))
    A = riccati.gamma_star * f / (s * s)
    return FilterTrajectory(t=t, m=m, m_dtheta=md, A_eps=A,
                            q_eps=np.asarray(spec.a(t)) + A * f / spec.epsilon,
                            B_eps=A * s, theta=float(theta), epsilon=spec.epsilon)


def innovation(spec: ModelSpec, flt: FilterTrajectory, x_path: SamplePath) -> SamplePath:
    """Cumulative innovation path from observation residuals."""
    if len(flt.t) != len(x_path.t) or abs(flt.t[1] - x_path.t[1]) > 1e-12:
        raise ConfigError("filter and observation grids do not coincide")
    t = flt.t
    dt = float(t[1] - t[0])
    f = np.asarray(spec.f(t[:-1]))
    s = np.asarray(spec.sigma(t[:-1]))
    dw = (x_path.increments() - f * flt.m[..., :-1] * dt) / (spec.epsilon * s)
    w = np.concatenate([np.zeros(dw.shape[:-1] + (1,)), np.cumsum(dw, axis=-1)], axis=-1)
    return SamplePath(t, w, kind="innovation")


def filter_by_parts(spec: ModelSpec, riccati: RiccatiTrajectory,
                    x_path: SamplePath) -> np.ndarray:
    """Conditional mean via integration by parts: an ordinary integral of X.

    With g = gamma f / (eps^2 sigma^2) and Q(t) = int_0^t q,

        m(t) = g(t) X_t - int_0^t e^{-(Q(t) - Q(s))} [q g + g'](s) X_s ds,

    so no stochastic integral against dX is needed.  Test-only
    cross-check of the filter recursion; O(n) via a cumulative sum,
    which needs Q(T) well inside the exponent range of doubles.
    """
    t = riccati.t
    dt = float(t[1] - t[0])
    f = np.asarray(spec.f(t))
    s2 = np.asarray(spec.sigma(t)) ** 2
    a = np.asarray(spec.a(t))
    g = riccati.gamma * f / (spec.epsilon ** 2 * s2)
    q = a + g * f
    big_q = np.concatenate([[0.0], np.cumsum(0.5 * (q[:-1] + q[1:]) * dt)])
    if big_q[-1] > 600.0:
        raise FloatingPointError("exponent range too large; use a larger epsilon "
                                 "or coarser grid for this cross-check")
    g_prime = np.gradient(g, dt)
    psi = (q * g + g_prime) * x_path.v
    # trapezoid cumulative of e^{Q(s)} psi(s), then discount by e^{-Q(t)}
    weighted = np.exp(big_q) * psi
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (weighted[:-1] + weighted[1:]) * dt)])
    return g * x_path.v - np.exp(-big_q) * cum


# ---------------------------------------------------------------------------
# Exact discrete-time filter (verification oracle)
# ---------------------------------------------------------------------------

def discrete_kalman_oracle(spec: ModelSpec, theta: float, x_path: SamplePath) -> FilterTrajectory:
    """Exact Kalman filter for the Euler-discretized state-space model.

    State transition Y[k+1] = (1 - a dt) Y[k] + b dV, measurement
    dX[k] = f Y[k] dt + eps sigma dW.  m[k] conditions on increments
    up to dX[k-1], matching the continuous filter's convention.
    Used only in tests against the continuous recursion.
    """
    t = x_path.t
    dt = x_path.dt
    n = len(t) - 1
    a = np.asarray(spec.a(t[:-1]))
    f = np.asarray(spec.f(t[:-1]))
    s = np.asarray(spec.sigma(t[:-1]))
    b = spec.b(float(theta), t[:-1])
    dx = x_path.increments()

    r = spec.epsilon ** 2 * s * s * dt
    m = np.zeros(dx.shape[:-1] + (n + 1,))
    p = np.zeros(n + 1)
    mk = np.zeros(dx.shape[:-1])
    pk = 0.0
    for k in range(n):
        h = f[k] * dt
        gain = pk * h / (pk * h * h + r[k])
        m_post = mk + gain * (dx[..., k] - h * mk)
        p_post = (1.0 - gain * h) * pk
        phi = 1.0 - a[k] * dt
        mk = phi * m_post
        pk = phi * phi * p_post + b[k] ** 2 * dt
        m[..., k + 1] = mk
        p[k + 1] = pk

    fg = np.asarray(spec.f(t))
    sg = np.asarray(spec.sigma(t))
    A = (p / spec.epsilon) * fg / (sg * sg)
    return FilterTrajectory(t=t, m=m, m_dtheta=np.zeros_like(m), A_eps=A,
                            q_eps=np.asarray(spec.a(t)) + A * fg / spec.epsilon,
                            B_eps=A * sg, theta=float(theta), epsilon=spec.epsilon)


# ---------------------------------------------------------------------------
# Rescaled-variance table over a theta grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiccatiTable:
    """gamma_star on a uniform theta grid, linearly interpolated in theta.

    Supports coefficient lookups A_eps(theta, t_k) and q_eps(theta, t_k)
    along a time-varying, clamped estimate.
    """

    thetas: np.ndarray
    t: np.ndarray
    gamma_star: np.ndarray  # shape (n_theta, n_t)
    epsilon: float

    @property
    def _h(self) -> float:
        return float(self.thetas[1] - self.thetas[0])

    def _weights(self, theta_q):
        theta_q = np.clip(theta_q, self.thetas[0], self.thetas[-1])
        pos = (theta_q - self.thetas[0]) / self._h
        idx = np.minimum(pos.astype(int) if isinstance(pos, np.ndarray) else int(pos),
                         len(self.thetas) - 2)
        return idx, pos - idx

    def gamma_star_at(self, theta_q, k: int | None = None) -> np.ndarray:
        """Interpolated gamma_star row (or single column k) at theta_q."""
        idx, w = self._weights(np.asarray(theta_q, dtype=float))
        gs = self.gamma_star if k is None else self.gamma_star[:, k]
        if k is None:
            return gs[idx] * (1.0 - w[..., None]) + gs[idx + 1] * w[..., None]
        return gs[idx] * (1.0 - w) + gs[idx + 1] * w


def build_riccati_table(spec: ModelSpec, dt: float, n_theta: int | None = None) -> RiccatiTable:
    n_theta = 41 if n_theta is None else n_theta
    thetas = np.linspace(spec.theta_lo, spec.theta_hi, n_theta)
    t = spec.time_grid(dt)
    g, _ = riccati_arrays(spec, thetas, t)
    return RiccatiTable(thetas=thetas, t=t, gamma_star=g / spec.epsilon, epsilon=spec.epsilon)
