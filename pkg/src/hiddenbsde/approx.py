"""Assembly of the backward-equation approximation and its error report.

The adaptive filter plugs the running estimate into the conditional-mean
recursion, so a single pass over the observations tracks the hidden
state without per-theta filter solves.  The approximation evaluates the
PDE family at (t, filtered state, running estimate); references against
the true-parameter filter and against the hidden state quantify the
error, and Monte Carlo aggregates are compared with the quadrature
limits of the small-noise error law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as _rng
from .estimators import fisher_information
from .kalman import RiccatiTable, riccati_arrays, filter_arrays
from .model import ConfigError, ModelSpec
from .onestep import EstimatorTrajectory
from .pde import PdeFamily, forward_moments
from .simulate import SamplePath


# ---------------------------------------------------------------------------
# Adaptive filter driven by the estimator trajectory
# ---------------------------------------------------------------------------

def adaptive_filter_arrays(spec: ModelSpec, table: RiccatiTable, t: np.ndarray,
                           dx: np.ndarray, theta_path: np.ndarray,
                           theta_first, m_init) -> np.ndarray:
    """Euler recursion m^ on [tau, T] with table-interpolated coefficients.

    theta_path holds the (already clamped) estimates on the grid over
    (tau, T]; theta_first is used for the first step out of tau.  Shapes
    broadcast over a leading replicate axis.  Returns m^ on [tau, T].
    """
    dt = float(t[1] - t[0])
    k_tau = spec.tau_index(dt)
    n = len(t) - 1
    f = np.asarray(spec.f(t), dtype=float)
    s2 = np.asarray(spec.sigma(t), dtype=float) ** 2
    a = np.asarray(spec.a(t), dtype=float)

    shape = np.broadcast_shapes(np.shape(m_init), dx.shape[:-1], theta_path.shape[:-1])
    m_hat = np.empty(shape + (n - k_tau + 1,))
    m_hat[..., 0] = m_init
    theta_first = np.asarray(theta_first, dtype=float)
    for k in range(k_tau, n):
        j = k - k_tau
        th = theta_first if k == k_tau else theta_path[..., j - 1]
        gs = table.gamma_star_at(th, k)
        A = gs * f[k] / s2[k]
        q = a[k] + A * f[k] / spec.epsilon
        mk = m_hat[..., j]
        m_hat[..., j + 1] = mk - q * mk * dt + (A / spec.epsilon) * dx[..., k]
    if not np.all(np.isfinite(m_hat[..., -1])):
        raise FloatingPointError("adaptive filter diverged")
    return m_hat


def adaptive_filter(spec: ModelSpec, x_path: SamplePath, est_traj: EstimatorTrajectory,
                    table: RiccatiTable, m_init: float) -> SamplePath:
    """Adaptive filter path on [tau, T] for one observation path."""
    t = x_path.t
    theta_cl = est_traj.clamped(spec)
    m_hat = adaptive_filter_arrays(spec, table, t, x_path.increments(), theta_cl,
                                   spec.clamp_theta(est_traj.preliminary), m_init)
    k_tau = spec.tau_index(x_path.dt)
    return SamplePath(t[k_tau:], m_hat, kind="diagnostic")


# ---------------------------------------------------------------------------
# Approximation along a path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ApproximationResult:
    """Approximation and reference processes on the grid over (tau, T]."""

    t: np.ndarray
    m_hat: np.ndarray
    Z_hat: np.ndarray
    s_hat: np.ndarray
    Z_ref: np.ndarray | None = None      # against the true-theta filter state
    s_ref: np.ndarray | None = None
    Z_limit: np.ndarray | None = None    # against the hidden state, limit equation


def _family_eval_chunked(family: PdeFamily, theta: np.ndarray, t: np.ndarray,
                         y: np.ndarray, fields: Sequence[np.ndarray],
                         chunk: int = 2000) -> list[np.ndarray]:
    """Trilinear evaluation of several family fields at path points.

    theta and y have shape (..., n_t); t is the shared time row.  Chunks
    over time to bound the intermediate index arrays.
    """
    outs = [np.empty(np.broadcast_shapes(theta.shape, y.shape)) for _ in fields]
    n_cols = t.shape[-1]
    for lo in range(0, n_cols, chunk):
        hi = min(lo + chunk, n_cols)
        sel = (Ellipsis, slice(lo, hi))
        for out, field in zip(outs, fields):
            out[sel] = family._trilinear(field, theta[sel], t[lo:hi], y[sel])
    return outs


def _b_eps_from_table(spec: ModelSpec, table: RiccatiTable, theta: np.ndarray,
                      k_indices: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Plug-in volatility B = gamma_star f / sigma along (theta_k, t_k)."""
    f = np.asarray(spec.f(t), dtype=float)
    s = np.asarray(spec.sigma(t), dtype=float)
    out = np.empty(theta.shape)
    for j, k in enumerate(k_indices):
        out[..., j] = table.gamma_star_at(theta[..., j], int(k)) * f[j] / s[j]
    return out


def approximate_arrays(spec: ModelSpec, t: np.ndarray, dx: np.ndarray,
                       pde_family: PdeFamily, est_traj_theta: np.ndarray,
                       theta_first, m_init, table: RiccatiTable,
                       m_theta0: np.ndarray | None = None, theta0: float | None = None,
                       y_values: np.ndarray | None = None,
                       limit_family: PdeFamily | None = None) -> dict:
    """Vectorized approximation; returns arrays on the grid over (tau, T].

    est_traj_theta must already be clamped to the parameter interval.
    m_theta0 (filter at theta0 on the full grid) and y_values enable the
    reference and limit processes.  Replicates whose filtered state
    leaves the PDE domain are flagged in 'valid' rather than raising.
    """
    dt = float(t[1] - t[0])
    k_tau = spec.tau_index(dt)
    t_after = t[k_tau + 1:]
    m_hat_full = adaptive_filter_arrays(spec, table, t, dx, est_traj_theta,
                                        theta_first, m_init)
    m_hat = m_hat_full[..., 1:]

    y_lo, y_hi = float(pde_family.y[0]), float(pde_family.y[-1])
    valid = np.all((m_hat >= y_lo) & (m_hat <= y_hi), axis=-1)
    m_safe = np.clip(m_hat, y_lo, y_hi)

    Z_hat, u_y_hat = _family_eval_chunked(
        pde_family, est_traj_theta, t_after, m_safe,
        (pde_family.u, pde_family.u_y))
    k_indices = np.arange(k_tau + 1, len(t))
    B_hat = _b_eps_from_table(spec, table, est_traj_theta, k_indices, t_after)
    out = {"t": t_after, "m_hat": m_hat, "Z_hat": Z_hat, "s_hat": B_hat * u_y_hat,
           "theta_path": est_traj_theta, "valid": valid}

    if m_theta0 is not None and theta0 is not None:
        m0 = m_theta0[..., k_tau + 1:]
        th0 = np.broadcast_to(float(theta0), m0.shape)
        Z_ref, u_y_ref = _family_eval_chunked(
            pde_family, th0, t_after, np.clip(m0, y_lo, y_hi),
            (pde_family.u, pde_family.u_y))
        B_ref = _b_eps_from_table(spec, table, th0, k_indices, t_after)
        out["Z_ref"] = Z_ref
        out["s_ref"] = B_ref * u_y_ref
        out["m_ref"] = m0
        out["valid"] &= np.all((m0 >= y_lo) & (m0 <= y_hi), axis=-1)
    if y_values is not None and limit_family is not None and theta0 is not None:
        yv = y_values[..., k_tau + 1:]
        lo, hi = float(limit_family.y[0]), float(limit_family.y[-1])
        th0 = np.broadcast_to(float(theta0), yv.shape)
        (Z_limit,) = _family_eval_chunked(
            limit_family, th0, t_after, np.clip(yv, lo, hi), (limit_family.u,))
        out["Z_limit"] = Z_limit
        out["valid"] &= np.all((yv >= lo) & (yv <= hi), axis=-1)
    return out


def approximate(spec: ModelSpec, x_path: SamplePath, pde_family: PdeFamily,
                est_traj: EstimatorTrajectory, table: RiccatiTable,
                theta0: float | None = None, m_init: float | None = None,
                y_path: SamplePath | None = None,
                limit_family: PdeFamily | None = None) -> ApproximationResult:
    """Single-path approximation (Z^, s^) with optional references."""
    t = x_path.t
    dx = x_path.increments()
    if m_init is None:
        k_tau = spec.tau_index(x_path.dt)
        gamma, gamma_d = riccati_arrays(spec, float(est_traj.preliminary), t[:k_tau + 1])
        m_prelim, _ = filter_arrays(spec, float(est_traj.preliminary), t[:k_tau + 1],
                                    gamma, gamma_d, dx[:k_tau])
        m_init = float(m_prelim[-1])
    m_theta0 = None
    if theta0 is not None:
        gamma0, gamma0_d = riccati_arrays(spec, float(theta0), t)
        m_theta0, _ = filter_arrays(spec, float(theta0), t, gamma0, gamma0_d, dx)
    res = approximate_arrays(
        spec, t, dx, pde_family, est_traj.clamped(spec),
        spec.clamp_theta(est_traj.preliminary), m_init, table,
        m_theta0=m_theta0, theta0=theta0,
        y_values=None if y_path is None else y_path.v,
        limit_family=limit_family)
    if not bool(np.all(res["valid"])):
        exit_k = int(np.argmin(np.all(
            (res["m_hat"] >= pde_family.y[0]) & (res["m_hat"] <= pde_family.y[-1]),
            axis=0))) if res["m_hat"].ndim > 1 else 0
        raise ConfigError(
            f"filtered state left the PDE domain near t={res['t'][exit_k]:.4g}; "
            "enlarge the truncation interval")
    return ApproximationResult(
        t=res["t"], m_hat=res["m_hat"], Z_hat=res["Z_hat"], s_hat=res["s_hat"],
        Z_ref=res.get("Z_ref"), s_ref=res.get("s_ref"), Z_limit=res.get("Z_limit"))


# ---------------------------------------------------------------------------
# Quadrature limits of the error law and the error report
# ---------------------------------------------------------------------------

_GH_NODES = 64


def _gauss_hermite_expect(g: Callable[[np.ndarray], np.ndarray],
                          mean: float, var: float) -> float:
    """E g(Y) for Y ~ N(mean, var) by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite.hermgauss(_GH_NODES)
    pts = mean + np.sqrt(max(2.0 * var, 0.0)) * x
    return float(np.sum(w * g(pts)) / np.sqrt(np.pi))


def theorem_limit_values(spec: ModelSpec, theta0: float, limit_family: PdeFamily,
                         t_marks: Sequence[float]) -> np.ndarray:
    """Limit of eps^-1 E(Z^ - Z)^2 at the marks:

        (b sigma / f) E[U_y'(t, Y_t)^2] + E[U.(t, Y_t)^2] / I_tau^t.
    """
    tq, mean, var = forward_moments(spec, theta0)
    y_lo, y_hi = float(limit_family.y[0]), float(limit_family.y[-1])
    out = np.empty(len(t_marks))
    for i, tm in enumerate(t_marks):
        mu = float(np.interp(tm, tq, mean))
        v = float(np.interp(tm, tq, var))
        # extreme quadrature nodes carry ~e^{-100} weight; clip to the grid
        uy2 = _gauss_hermite_expect(
            lambda yy: limit_family.u_y_at(np.full_like(yy, theta0),
                                           np.full_like(yy, tm),
                                           np.clip(yy, y_lo, y_hi)) ** 2, mu, v)
        ud2 = _gauss_hermite_expect(
            lambda yy: limit_family.u_dot_at(np.full_like(yy, theta0),
                                             np.full_like(yy, tm),
                                             np.clip(yy, y_lo, y_hi)) ** 2, mu, v)
        gamma0 = (spec.b(float(theta0), tm) * spec.sigma(tm) / spec.f(tm))
        info = fisher_information(spec, theta0, spec.tau, tm)
        out[i] = float(gamma0) * uy2 + ud2 / info
    return out


def corollary_limit_draws(spec: ModelSpec, theta0: float, limit_family: PdeFamily,
                          h: Callable[[np.ndarray], np.ndarray], n_draws: int,
                          seed: int, dt_coarse: float = 1e-3) -> np.ndarray:
    """Independent draws of the limit of the integrated error statistic.

    Simulates the hidden-state law and an independent Wiener integral,
    then integrates h(s) u.(s, Y_s) M_s / I_tau^s over (tau, T].
    """
    g = _rng.generator(seed)
    n = int(round((spec.T - spec.tau) / dt_coarse))
    s_grid = spec.tau + np.arange(n + 1) * (spec.T - spec.tau) / n
    ds = float(s_grid[1] - s_grid[0])

    # hidden-state law, stepped with per-step exact Gaussian transitions
    tq, mean_q, var_q = forward_moments(spec, theta0)
    y = np.full(n_draws, float(spec.y0))
    # evolve from 0 to tau first with one exact draw
    mu_tau = float(np.interp(spec.tau, tq, mean_q))
    v_tau = float(np.interp(spec.tau, tq, var_q))
    y = mu_tau + np.sqrt(max(v_tau, 0.0)) * g.standard_normal(n_draws)

    score_rate = (np.asarray(spec.f(s_grid)) * spec.b.dtheta(float(theta0), s_grid) ** 2
                  / (2.0 * spec.b(float(theta0), s_grid) * np.asarray(spec.sigma(s_grid))))
    info = np.concatenate([[0.0], np.cumsum(0.5 * (score_rate[:-1] + score_rate[1:]) * ds)])

    a_mid = np.asarray(spec.a(s_grid[:-1] + 0.5 * ds))
    b_mid = spec.b(float(theta0), s_grid[:-1] + 0.5 * ds)
    phi = np.exp(-a_mid * ds)
    step_var = np.where(np.abs(a_mid) > 1e-12,
                        b_mid ** 2 * (1.0 - phi ** 2) / (2.0 * np.clip(a_mid, 1e-12, None)),
                        b_mid ** 2 * ds)

    m_w = np.zeros(n_draws)
    total = np.zeros(n_draws)
    for k in range(n):
        m_w = m_w + np.sqrt(score_rate[k] * ds) * g.standard_normal(n_draws)
        y = phi[k] * y + np.sqrt(step_var[k]) * g.standard_normal(n_draws)
        if info[k + 1] <= 0:
            continue
        u_dot = limit_family.u_dot_at(
            np.full(n_draws, float(theta0)), np.full(n_draws, s_grid[k + 1]),
            np.clip(y, limit_family.y[0], limit_family.y[-1]))
        total += float(h(s_grid[k + 1])) * u_dot * m_w / info[k + 1] * ds
    return total


@dataclass(frozen=True)
class ErrorDiagnostics:
    t_marks: np.ndarray
    eps_mse: np.ndarray            # eps^-1 E(Z^ - Z)^2 against the hidden-state reference
    eps_mse_ref: np.ndarray | None  # same against the true-theta filter reference
    limit_values: np.ndarray
    integrated: np.ndarray         # per-replicate integrated statistic
    integrated_mean: float
    integrated_se: float
    integrated_var: float
    limit_var: float | None
    filter_gap: float              # sup_t E|m^ - m(theta0, .)|^2 / eps^2
    n_replicates: int


def error_report(batch: dict, spec: ModelSpec, theta0: float,
                 limit_family: PdeFamily,
                 h: Callable[[np.ndarray], np.ndarray] = lambda s: np.ones_like(s),
                 t_marks: Sequence[float] = (0.5, 0.75),
                 m_theta0: np.ndarray | None = None,
                 limit_var_draws: int = 20000, limit_var_seed: int = 90210,
                 gap_t_from: float | None = None) -> ErrorDiagnostics:
    """Monte Carlo error aggregates versus the quadrature limit values.

    batch is the output of approximate_arrays over replicates and must
    contain Z_limit (hidden-state reference).
    """
    if "Z_limit" not in batch:
        raise ConfigError("error report needs the hidden-state reference Z_limit")
    valid = batch["valid"]
    if int(valid.sum()) < 2:
        raise ConfigError("error report needs at least 2 valid replicates")
    t_after = batch["t"]
    eps = spec.epsilon
    diff_limit = (batch["Z_hat"] - batch["Z_limit"])[valid]
    diff_ref = None if "Z_ref" not in batch else (batch["Z_hat"] - batch["Z_ref"])[valid]

    marks = np.asarray(t_marks, dtype=float)
    cols = np.array([int(np.argmin(np.abs(t_after - tm))) for tm in marks])
    eps_mse = np.mean(diff_limit[:, cols] ** 2, axis=0) / eps
    eps_mse_ref = None if diff_ref is None else np.mean(diff_ref[:, cols] ** 2, axis=0) / eps

    dt = float(t_after[1] - t_after[0])
    hvals = np.asarray(h(t_after), dtype=float)
    integrated = np.sum(hvals * diff_limit, axis=1) * dt / np.sqrt(eps)
    limit_draws = corollary_limit_draws(spec, theta0, limit_family, h,
                                        limit_var_draws, limit_var_seed)

    gap = np.nan
    if m_theta0 is not None:
        m0 = m_theta0[..., -len(t_after):]
        t_from = gap_t_from if gap_t_from is not None else spec.tau + (spec.T - spec.tau) / 3.0
        sel = t_after >= t_from - 1e-12
        gap = float(np.max(np.mean((batch["m_hat"][valid][:, sel] - m0[valid][:, sel]) ** 2,
                                   axis=0)) / eps ** 2)

    return ErrorDiagnostics(
        t_marks=marks, eps_mse=eps_mse, eps_mse_ref=eps_mse_ref,
        limit_values=theorem_limit_values(spec, theta0, limit_family, marks),
        integrated=integrated,
        integrated_mean=float(integrated.mean()),
        integrated_se=float(integrated.std(ddof=1) / np.sqrt(len(integrated))),
        integrated_var=float(integrated.var(ddof=1)),
        limit_var=float(limit_draws.var(ddof=1)),
        filter_gap=gap, n_replicates=int(valid.sum()))
