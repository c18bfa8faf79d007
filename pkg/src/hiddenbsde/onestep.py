"""One-step improvement of a preliminary estimate into an estimator process.

A single filter run at the preliminary value feeds a score integral
whose normalization by the accumulated information yields the estimator
trajectory on (tau, T]; no per-time filter re-solves are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kalman
from .estimators import fisher_cumulative
from .model import ConfigError, ModelSpec
from .simulate import SamplePath

INFO_FLOOR = 1e-12


@dataclass(frozen=True)
class EstimatorTrajectory:
    """theta_star on the grid over (tau, T], with the information profile.

    theta_star is intentionally unclamped; use clamped() where values
    must stay inside the parameter interval (table and PDE lookups).
    Entries with information below INFO_FLOOR are flagged invalid.
    """

    t: np.ndarray
    theta_star: np.ndarray
    info: np.ndarray
    correction: np.ndarray
    preliminary: np.ndarray | float
    epsilon: float
    valid: np.ndarray

    def clamped(self, spec: ModelSpec) -> np.ndarray:
        return np.clip(self.theta_star, spec.theta_lo, spec.theta_hi)


def onestep_arrays(spec: ModelSpec, t: np.ndarray, dx: np.ndarray, theta_prelim):
    """Vectorized one-step correction; returns (t_after, theta_star, info, corr).

    theta_prelim broadcasts against the replicate axis of dx.  The score
    integral uses left-point values of the filter mean and sensitivity
    against raw observation increments.
    """
    theta_prelim = np.asarray(theta_prelim, dtype=float)
    dt = float(t[1] - t[0])
    k_tau = spec.tau_index(dt)
    if k_tau >= len(t) - 1:
        raise ConfigError("path does not extend beyond the learning interval")

    gamma, gamma_d = kalman.riccati_arrays(spec, theta_prelim, t)
    m, md = kalman.filter_arrays(spec, theta_prelim, t, gamma, gamma_d, dx)

    f = np.asarray(spec.f(t[:-1]))[k_tau:]
    s2 = np.asarray(spec.sigma(t[:-1]))[k_tau:] ** 2
    resid = dx[..., k_tau:] - f * m[..., k_tau:-1] * dt
    score = f * md[..., k_tau:-1] / (spec.epsilon * s2) * resid
    corr = np.cumsum(score, axis=-1)

    info = fisher_cumulative(spec, theta_prelim, t[k_tau:])[..., 1:]
    valid = info > INFO_FLOOR
    theta_star = theta_prelim[..., None] if theta_prelim.ndim else theta_prelim
    theta_star = theta_star + corr / np.where(valid, info, np.inf)
    return t[k_tau + 1:], theta_star, info, corr


def onestep_process(spec: ModelSpec, x_path: SamplePath, theta_prelim: float) -> EstimatorTrajectory:
    if not spec.theta_lo <= theta_prelim <= spec.theta_hi:
        raise ConfigError("preliminary estimate outside the parameter interval")
    if x_path.t[-1] < spec.T - 1e-12:
        raise ConfigError("observation path must cover [0, T]")
    t_after, theta_star, info, corr = onestep_arrays(
        spec, x_path.t, x_path.increments(), float(theta_prelim))
    return EstimatorTrajectory(t=t_after, theta_star=theta_star, info=info,
                               correction=corr, preliminary=float(theta_prelim),
                               epsilon=spec.epsilon, valid=info > INFO_FLOOR)


def normalized_error(traj: EstimatorTrajectory, theta0: float, epsilon: float) -> SamplePath:
    """(theta_star - theta0) / sqrt(epsilon) on the trajectory grid."""
    return SamplePath(traj.t, (traj.theta_star - theta0) / np.sqrt(epsilon),
                      kind="diagnostic")
