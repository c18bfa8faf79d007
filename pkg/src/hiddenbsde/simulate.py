"""Euler-Maruyama simulation of the hidden state and its noisy observation.

All samplers accept increments with an optional leading replicate axis,
so Monte Carlo studies run as vectorized recursions over one time loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .model import ConfigError, ModelSpec

PATH_KINDS = ("hidden", "observation", "innovation", "diagnostic")


@dataclass(frozen=True)
class SamplePath:
    """Values on an ascending uniform time grid."""

    t: np.ndarray
    v: np.ndarray
    kind: str = "diagnostic"

    def __post_init__(self):
        t, v = np.asarray(self.t), np.asarray(self.v)
        if self.kind not in PATH_KINDS:
            raise ValueError(f"kind must be one of {PATH_KINDS}")
        if t.ndim != 1 or len(t) < 2 or v.shape[-1] != len(t):
            raise ValueError("path needs matching t and v with at least 2 nodes")
        steps = np.diff(t)
        if steps.min() <= 0 or np.max(np.abs(steps - steps[0])) > 1e-12 * max(1.0, abs(t[-1])):
            raise ValueError("time grid must be uniform and strictly increasing")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def increments(self) -> np.ndarray:
        return np.diff(self.v, axis=-1)

    def restricted(self, t_max: float) -> "SamplePath":
        """Path truncated to [t[0], t_max]."""
        n = int(round((t_max - self.t[0]) / self.dt))
        return SamplePath(self.t[: n + 1], self.v[..., : n + 1], self.kind)


@dataclass(frozen=True)
class NoiseBundle:
    """Independent Gaussian increments (variance dt) for the two noises.

    dV drives the hidden state, dW the observation; shapes are (n_steps,)
    or (n_replicates, n_steps).
    """

    seed: int
    dt: float
    dV: np.ndarray
    dW: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, n_steps: int, dt: float) -> "NoiseBundle":
        g = _rng.generator(seed)
        scale = np.sqrt(dt)
        return cls(seed=seed, dt=dt,
                   dV=scale * g.standard_normal(n_steps),
                   dW=scale * g.standard_normal(n_steps))

    @classmethod
    def for_replicates(cls, seed: int, n_replicates: int, n_steps: int, dt: float) -> "NoiseBundle":
        """Stack the per-replicate streams; row k equals from_seed(child_seed(seed, k))."""
        dV = np.empty((n_replicates, n_steps))
        dW = np.empty((n_replicates, n_steps))
        scale = np.sqrt(dt)
        for k in range(n_replicates):
            g = _rng.replicate_generator(seed, k)
            dV[k] = scale * g.standard_normal(n_steps)
            dW[k] = scale * g.standard_normal(n_steps)
        return cls(seed=seed, dt=dt, dV=dV, dW=dW)

    @property
    def n_steps(self) -> int:
        return self.dV.shape[-1]


def forward_values(spec: ModelSpec, theta, t: np.ndarray, dV: np.ndarray) -> np.ndarray:
    """Euler path of the hidden state; theta and dV broadcast over replicates."""
    theta = np.asarray(theta, dtype=float)
    dt = float(t[1] - t[0])
    n = len(t) - 1
    a = np.asarray(spec.a(t[:-1]), dtype=float)
    b = spec.b(theta[..., None] if theta.ndim else theta, t[:-1])
    y = np.empty(np.broadcast_shapes(dV.shape[:-1], theta.shape) + (n + 1,))
    y[..., 0] = spec.y0
    for k in range(n):
        y[..., k + 1] = y[..., k] - a[k] * y[..., k] * dt + b[..., k] * dV[..., k]
    if not np.all(np.isfinite(y[..., -1])):
        raise FloatingPointError("hidden path blew up; check coefficients and dt")
    return y


def simulate_forward(spec: ModelSpec, theta: float, dt: float, noise: NoiseBundle) -> SamplePath:
    """Hidden path Y on the uniform grid defined by dt and the noise length."""
    if not spec.theta_lo < theta < spec.theta_hi:
        raise ConfigError("theta outside the parameter interval")
    if dt <= 0:
        raise ConfigError("dt must be positive")
    t = np.arange(noise.n_steps + 1) * dt
    return SamplePath(t, forward_values(spec, theta, t, noise.dV), kind="hidden")


def observation_values(spec: ModelSpec, t: np.ndarray, y: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """Observation path from left-point increments of the hidden path."""
    dt = float(t[1] - t[0])
    f = np.asarray(spec.f(t[:-1]), dtype=float)
    s = np.asarray(spec.sigma(t[:-1]), dtype=float)
    dx = f * y[..., :-1] * dt + spec.epsilon * s * dW
    x = np.concatenate([np.zeros(dx.shape[:-1] + (1,)), np.cumsum(dx, axis=-1)], axis=-1)
    return x


def simulate_observation(spec: ModelSpec, y_path: SamplePath, noise: NoiseBundle) -> SamplePath:
    if noise.n_steps != len(y_path.t) - 1:
        raise ConfigError("noise length does not match the path grid")
    if abs(noise.dt - y_path.dt) > 1e-12:
        raise ConfigError("noise step does not match the path grid")
    x = observation_values(spec, y_path.t, y_path.v, noise.dW)
    return SamplePath(y_path.t, x, kind="observation")


def forward_terminal_values(spec: ModelSpec, theta: float, dt: float, seed: int,
                            n_paths: int, volatility=None) -> np.ndarray:
    """Terminal values Y_T of n_paths Euler paths, streamed (no path storage).

    volatility optionally overrides b(theta, .) with a plain function of t.
    """
    n = int(round(spec.T / dt))
    t = np.arange(n + 1) * (spec.T / n)
    a = np.asarray(spec.a(t[:-1]), dtype=float)
    if volatility is None:
        c = spec.b(float(theta), t[:-1])
    else:
        c = np.broadcast_to(np.asarray(volatility(t[:-1]), dtype=float), (n,))
    g = _rng.generator(seed)
    y = np.full(n_paths, float(spec.y0))
    step = spec.T / n
    scale = np.sqrt(step)
    for k in range(n):
        y += -a[k] * y * step + c[k] * scale * g.standard_normal(n_paths)
    return y


def simulate_pair(spec: ModelSpec, theta: float, dt: float, seed: int) -> tuple[SamplePath, SamplePath]:
    """Convenience: seeded (Y, X) pair on the model's standard grid."""
    n = int(round(spec.T / dt))
    noise = NoiseBundle.from_seed(seed, n, spec.T / n)
    y = simulate_forward(spec, theta, spec.T / n, noise)
    return y, simulate_observation(spec, y, noise)
