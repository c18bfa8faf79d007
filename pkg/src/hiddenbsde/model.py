"""Model definition: coefficients, parameter domain, problem functions, config.

The observation model is a hidden linear state

    dY_t = -a(t) Y_t dt + b(theta, t) dV_t,        Y_0 = y0,
    dX_t =  f(t) Y_t dt + epsilon sigma(t) dW_t,   X_0 = 0,

with unknown theta in (theta_lo, theta_hi) and noise scale epsilon.
Coefficients come from a small named catalog (constant, polynomial in t,
tabulated with linear interpolation) so configs stay declarative; the
volatility b additionally carries its first two theta derivatives.

Everything here is immutable after construction and safe to share across
concurrent replicates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


# ---------------------------------------------------------------------------
# Time-coefficient catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantCoefficient:
    value: float

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.value)


@dataclass(frozen=True)
class PolynomialCoefficient:
    """c0 + c1 t + c2 t^2 + ... evaluated with Horner's rule."""

    coeffs: tuple[float, ...]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for c in reversed(self.coeffs):
            out = out * t + c
        return out


@dataclass(frozen=True)
class TabulatedCoefficient:
    """Linear interpolation through (t, value) pairs; flat extrapolation."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ts = [p[0] for p in self.points]
        if len(ts) < 2:
            raise ConfigError("tabulated coefficient needs at least 2 points")
        if any(t2 <= t1 for t1, t2 in zip(ts, ts[1:])):
            raise ConfigError("tabulated coefficient times must be strictly increasing")

    def __call__(self, t):
        ts = np.array([p[0] for p in self.points])
        vs = np.array([p[1] for p in self.points])
        return np.interp(np.asarray(t, dtype=float), ts, vs)


TimeCoefficient = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Volatility catalog: b(theta, t) with analytic theta-derivatives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaScaledVolatility:
    """b(theta, t) = theta * profile(t)."""

    profile: TimeCoefficient = ConstantCoefficient(1.0)

    def __call__(self, theta, t):
        theta, t = np.asarray(theta, dtype=float), np.asarray(t, dtype=float)
        return theta * self.profile(t)

    def dtheta(self, theta, t):
        theta, t = np.asarray(theta, dtype=float), np.asarray(t, dtype=float)
        return np.broadcast_to(self.profile(t), np.broadcast_shapes(theta.shape, t.shape)).copy()

    def dtheta2(self, theta, t):
        theta, t = np.asarray(theta, dtype=float), np.asarray(t, dtype=float)
        return np.zeros(np.broadcast_shapes(theta.shape, t.shape))


@dataclass(frozen=True)
class ThetaFreeVolatility:
    """b(theta, t) = profile(t), independent of theta."""

    profile: TimeCoefficient

    def __call__(self, theta, t):
        theta, t = np.asarray(theta, dtype=float), np.asarray(t, dtype=float)
        return np.broadcast_to(self.profile(t), np.broadcast_shapes(theta.shape, t.shape)).copy()

    def dtheta(self, theta, t):
        theta, t = np.asarray(theta, dtype=float), np.asarray(t, dtype=float)
        return np.zeros(np.broadcast_shapes(theta.shape, t.shape))

    dtheta2 = dtheta


@dataclass(frozen=True)
class CallableVolatility:
    """Wraps an arbitrary b(theta, t); derivatives by central differences.

    h_theta should be small relative to the parameter interval; the
    default matches 1e-4 * (theta_hi - theta_lo) for a unit interval.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h_theta: float = 1e-4

    def __call__(self, theta, t):
        theta, t = np.asarray(theta, dtype=float), np.asarray(t, dtype=float)
        return np.asarray(self.fn(theta, t), dtype=float)

    def dtheta(self, theta, t):
        h = self.h_theta
        return (self(np.asarray(theta) + h, t) - self(np.asarray(theta) - h, t)) / (2.0 * h)

    def dtheta2(self, theta, t):
        h = self.h_theta
        return (self(np.asarray(theta) + h, t) - 2.0 * self(theta, t)
                + self(np.asarray(theta) - h, t)) / (h * h)


# ---------------------------------------------------------------------------
# Model / problem / experiment specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    a: TimeCoefficient
    b: ThetaScaledVolatility | ThetaFreeVolatility | CallableVolatility
    f: TimeCoefficient
    sigma: TimeCoefficient
    theta_lo: float
    theta_hi: float
    T: float
    tau: float
    epsilon: float
    y0: float = 0.0

    def __post_init__(self):
        if not self.theta_lo < self.theta_hi:
            raise ConfigError("parameter interval requires theta_lo < theta_hi")
        if not 0.0 < self.tau < self.T:
            raise ConfigError("tau must lie in (0, T)")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in (0, 1]")

    def with_epsilon(self, epsilon: float) -> "ModelSpec":
        return replace(self, epsilon=epsilon)

    def clamp_theta(self, theta):
        return np.clip(theta, self.theta_lo, self.theta_hi)

    def time_grid(self, dt: float) -> np.ndarray:
        n = int(round(self.T / dt))
        if n < 2:
            raise ConfigError("dt too coarse for the horizon")
        return np.arange(n + 1) * (self.T / n)

    def tau_index(self, dt: float) -> int:
        """Grid index of the learning-interval endpoint tau."""
        k = int(round(self.tau / dt))
        if abs(k * dt - self.tau) > 1e-9 * max(1.0, self.tau):
            raise ConfigError("dt must divide tau up to rounding")
        return k


@dataclass(frozen=True)
class ZeroDriver:
    def __call__(self, t, y, u, s):
        return np.zeros(np.broadcast_shapes(*(np.shape(v) for v in (t, y, u, s))))


@dataclass(frozen=True)
class LinearDriver:
    """F(t, y, u, s) = cu * u + cs * s + cy * y (Lipschitz constant |cu| + |cs|)."""

    cu: float = 0.0
    cs: float = 0.0
    cy: float = 0.0

    def __call__(self, t, y, u, s):
        return self.cu * np.asarray(u) + self.cs * np.asarray(s) + self.cy * np.asarray(y)


@dataclass(frozen=True)
class IdentityTerminal:
    def __call__(self, y):
        return np.asarray(y, dtype=float).copy()


@dataclass(frozen=True)
class SquareTerminal:
    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return y * y


@dataclass(frozen=True)
class ConstantTerminal:
    value: float

    def __call__(self, y):
        return np.full_like(np.asarray(y, dtype=float), self.value)


@dataclass(frozen=True)
class GaussianTerminal:
    """Phi(y) = exp(-(y/scale)^2 / 2); handy for smooth decaying tests."""

    scale: float = 1.0

    def __call__(self, y):
        y = np.asarray(y, dtype=float) / self.scale
        return np.exp(-0.5 * y * y)


@dataclass(frozen=True)
class ProblemFunctions:
    """Driver F(t, y, u, s) and terminal map Phi(y) of the backward problem."""

    driver: Callable
    terminal: Callable
    growth_p: float = 1.0
    lipschitz: float = 1.0

    def __post_init__(self):
        if self.growth_p < 0.5:
            raise ConfigError("growth exponent must be at least 1/2")
        if self.lipschitz <= 0:
            raise ConfigError("Lipschitz constant must be positive")


@dataclass(frozen=True)
class PdeGridSpec:
    n_y: int = 241
    n_t: int = 400
    y_min: float | None = None  # None: auto from the forward law (y0 +- k stds)
    y_max: float | None = None
    domain_stds: float = 6.0

    def __post_init__(self):
        if self.n_y < 3:
            raise ConfigError("pde grid needs n_y >= 3")
        if self.n_t < 2:
            raise ConfigError("pde grid needs n_t >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    problem: ProblemFunctions
    grid_dt: float = 1e-4
    pde_grid: PdeGridSpec = field(default_factory=PdeGridSpec)
    theta_grid_n: int = 41
    bandwidth_exponent: float = 2.0 / 3.0
    bandwidth_scale: float = 0.75
    qv_spacing: int = 1
    mc_replicates: int = 100
    seed: int = 0
    theta_true: float | None = None
    epsilons: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mc_replicates < 1:
            raise ConfigError("mc_replicates must be at least 1")
        if self.theta_grid_n < 3:
            raise ConfigError("theta_grid_n must be at least 3")
        if self.grid_dt <= 0:
            raise ConfigError("grid_dt must be positive")
        for span, name in ((self.model.tau, "tau"), (self.model.T - self.model.tau, "T - tau")):
            k = round(span / self.grid_dt)
            if k < 1 or abs(k * self.grid_dt - span) > 1e-9 * max(1.0, span):
                raise ConfigError(f"grid_dt must divide {name} up to rounding")

    def effective_seed(self) -> int:
        """Seed, honoring the HIDDENBSDE_SEED environment override."""
        env = os.environ.get("HIDDENBSDE_SEED")
        return int(env) if env else self.seed


def canonical_model(epsilon: float = 0.1) -> ModelSpec:
    """The package's canonical example: a = f = sigma = 1, b = theta,
    Theta = (0.5, 2), T = 1, tau = 0.25, y0 = 0."""
    return ModelSpec(
        a=ConstantCoefficient(1.0),
        b=ThetaScaledVolatility(ConstantCoefficient(1.0)),
        f=ConstantCoefficient(1.0),
        sigma=ConstantCoefficient(1.0),
        theta_lo=0.5,
        theta_hi=2.0,
        T=1.0,
        tau=0.25,
        epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# Config parsing (TOML) and serialization
# ---------------------------------------------------------------------------

def _parse_time_coefficient(raw, name: str) -> TimeCoefficient:
    if isinstance(raw, (int, float)):
        return ConstantCoefficient(float(raw))
    if isinstance(raw, dict):
        kind = raw.get("kind")
        if kind == "constant":
            return ConstantCoefficient(float(raw["value"]))
        if kind == "poly":
            return PolynomialCoefficient(tuple(float(c) for c in raw["coeffs"]))
        if kind == "table":
            return TabulatedCoefficient(tuple((float(t), float(v)) for t, v in raw["points"]))
        raise ConfigError(f"unknown coefficient kind {kind!r} for {name}")
    raise ConfigError(f"coefficient {name} must be a number or a table")


def _parse_volatility(raw) -> ThetaScaledVolatility | ThetaFreeVolatility:
    if isinstance(raw, (int, float)):
        return ThetaFreeVolatility(ConstantCoefficient(float(raw)))
    if isinstance(raw, dict):
        kind = raw.get("kind")
        if kind == "theta":
            profile = raw.get("profile", 1.0)
            return ThetaScaledVolatility(_parse_time_coefficient(profile, "b.profile"))
        if kind in ("constant", "poly", "table"):
            return ThetaFreeVolatility(_parse_time_coefficient(raw, "b"))
        raise ConfigError(f"unknown volatility kind {kind!r}")
    raise ConfigError("volatility b must be a number or a table")


_DRIVERS = {"zero": ZeroDriver, "linear": LinearDriver}
_TERMINALS = {
    "identity": IdentityTerminal,
    "square": SquareTerminal,
    "constant": ConstantTerminal,
    "gaussian": GaussianTerminal,
}


def _parse_named(raw, catalog, what: str):
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError(f"{what} must name a catalog entry")
    kind = raw["kind"]
    if kind not in catalog:
        raise ConfigError(f"unknown {what} {kind!r}; choices: {sorted(catalog)}")
    kwargs = {k: v for k, v in raw.items() if k != "kind"}
    try:
        return catalog[kind](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {what} {kind!r}: {exc}") from None


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"missing required key {key!r} in [{section}]")
    return table[key]


def load_config(text: str) -> ExperimentConfig:
    """Parse a TOML config document into a validated ExperimentConfig."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    mt = doc.get("model")
    if mt is None:
        raise ConfigError("missing [model] section")
    model = ModelSpec(
        a=_parse_time_coefficient(_require(mt, "a", "model"), "a"),
        b=_parse_volatility(_require(mt, "b", "model")),
        f=_parse_time_coefficient(_require(mt, "f", "model"), "f"),
        sigma=_parse_time_coefficient(_require(mt, "sigma", "model"), "sigma"),
        theta_lo=float(_require(mt, "theta_lo", "model")),
        theta_hi=float(_require(mt, "theta_hi", "model")),
        T=float(_require(mt, "T", "model")),
        tau=float(_require(mt, "tau", "model")),
        epsilon=float(_require(mt, "epsilon", "model")),
        y0=float(mt.get("y0", 0.0)),
    )

    pt = doc.get("problem", {})
    problem = ProblemFunctions(
        driver=_parse_named(pt.get("driver", "zero"), _DRIVERS, "driver"),
        terminal=_parse_named(pt.get("terminal", "square"), _TERMINALS, "terminal"),
        growth_p=float(pt.get("growth_p", 1.0)),
        lipschitz=float(pt.get("lipschitz", 1.0)),
    )

    et = doc.get("experiment", {})
    gt = et.get("pde_grid", {})
    pde_grid = PdeGridSpec(
        n_y=int(gt.get("n_y", 241)),
        n_t=int(gt.get("n_t", 400)),
        y_min=gt.get("y_min"),
        y_max=gt.get("y_max"),
        domain_stds=float(gt.get("domain_stds", 6.0)),
    )
    return ExperimentConfig(
        model=model,
        problem=problem,
        grid_dt=float(et.get("grid_dt", 1e-4)),
        pde_grid=pde_grid,
        theta_grid_n=int(et.get("theta_grid_n", 41)),
        bandwidth_exponent=float(et.get("bandwidth_exponent", 2.0 / 3.0)),
        bandwidth_scale=float(et.get("bandwidth_scale", 0.75)),
        qv_spacing=int(et.get("qv_spacing", 1)),
        mc_replicates=int(et.get("mc_replicates", 100)),
        seed=int(et.get("seed", 0)),
        theta_true=(float(et["theta_true"]) if "theta_true" in et else None),
        epsilons=tuple(float(e) for e in et.get("epsilons", ())),
    )


def load_config_file(path: str) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return load_config(fh.read().decode("utf-8"))


def _emit_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise ConfigError(f"cannot serialize {v!r}")


def _emit_time_coefficient(c: TimeCoefficient) -> str:
    if isinstance(c, ConstantCoefficient):
        return _emit_scalar(c.value)
    if isinstance(c, PolynomialCoefficient):
        return "{ kind = \"poly\", coeffs = [%s] }" % ", ".join(map(_emit_scalar, c.coeffs))
    if isinstance(c, TabulatedCoefficient):
        pts = ", ".join("[%s, %s]" % (_emit_scalar(t), _emit_scalar(v)) for t, v in c.points)
        return "{ kind = \"table\", points = [%s] }" % pts
    raise ConfigError(f"cannot serialize coefficient {c!r}")


def _emit_volatility(b) -> str:
    if isinstance(b, ThetaScaledVolatility):
        return "{ kind = \"theta\", profile = %s }" % _emit_time_coefficient(b.profile)
    if isinstance(b, ThetaFreeVolatility):
        inner = _emit_time_coefficient(b.profile)
        if isinstance(b.profile, ConstantCoefficient):
            return inner
        return inner
    raise ConfigError("only catalog volatilities can be serialized")


def _emit_named(obj, catalog) -> str:
    for name, cls in catalog.items():
        if isinstance(obj, cls):
            items = [f'kind = "{name}"']
            for fname in getattr(cls, "__dataclass_fields__", {}):
                items.append(f"{fname} = {_emit_scalar(getattr(obj, fname))}")
            return "{ %s }" % ", ".join(items)
    raise ConfigError(f"only catalog entries can be serialized, got {obj!r}")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Emit a TOML document that load_config parses back to an equal config."""
    m, p = cfg.model, cfg.problem
    lines = ["[model]"]
    lines.append(f"a = {_emit_time_coefficient(m.a)}")
    lines.append(f"b = {_emit_volatility(m.b)}")
    lines.append(f"f = {_emit_time_coefficient(m.f)}")
    lines.append(f"sigma = {_emit_time_coefficient(m.sigma)}")
    for key in ("theta_lo", "theta_hi", "T", "tau", "epsilon", "y0"):
        lines.append(f"{key} = {_emit_scalar(getattr(m, key))}")
    lines += ["", "[problem]"]
    lines.append(f"driver = {_emit_named(p.driver, _DRIVERS)}")
    lines.append(f"terminal = {_emit_named(p.terminal, _TERMINALS)}")
    lines.append(f"growth_p = {_emit_scalar(p.growth_p)}")
    lines.append(f"lipschitz = {_emit_scalar(p.lipschitz)}")
    lines += ["", "[experiment]"]
    lines.append(f"grid_dt = {_emit_scalar(cfg.grid_dt)}")
    lines.append(f"theta_grid_n = {_emit_scalar(cfg.theta_grid_n)}")
    lines.append(f"bandwidth_exponent = {_emit_scalar(cfg.bandwidth_exponent)}")
    lines.append(f"bandwidth_scale = {_emit_scalar(cfg.bandwidth_scale)}")
    lines.append(f"qv_spacing = {_emit_scalar(cfg.qv_spacing)}")
    lines.append(f"mc_replicates = {_emit_scalar(cfg.mc_replicates)}")
    lines.append(f"seed = {_emit_scalar(cfg.seed)}")
    if cfg.theta_true is not None:
        lines.append(f"theta_true = {_emit_scalar(cfg.theta_true)}")
    if cfg.epsilons:
        lines.append("epsilons = [%s]" % ", ".join(map(_emit_scalar, cfg.epsilons)))
    g = cfg.pde_grid
    lines += ["", "[experiment.pde_grid]"]
    lines.append(f"n_y = {_emit_scalar(g.n_y)}")
    lines.append(f"n_t = {_emit_scalar(g.n_t)}")
    if g.y_min is not None:
        lines.append(f"y_min = {_emit_scalar(g.y_min)}")
    if g.y_max is not None:
        lines.append(f"y_max = {_emit_scalar(g.y_max)}")
    lines.append(f"domain_stds = {_emit_scalar(g.domain_stds)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Regularity-condition checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionsReport:
    min_b: float
    min_f: float
    min_sigma: float
    positivity_pass: bool          # b, f, sigma separated from zero on the grid
    b_dtheta_max_error: float
    b_dtheta_pass: bool
    fisher_min: float
    fisher_pass: bool              # learning-interval information positive
    lipschitz_max: float | None = None
    lipschitz_pass: bool | None = None
    growth_constant: float | None = None

    @property
    def all_pass(self) -> bool:
        checks = [self.positivity_pass, self.b_dtheta_pass, self.fisher_pass]
        if self.lipschitz_pass is not None:
            checks.append(self.lipschitz_pass)
        return all(checks)

    def summary(self) -> str:
        rows = [
            f"min b = {self.min_b:.6g}, min f = {self.min_f:.6g}, "
            f"min sigma = {self.min_sigma:.6g}: {'pass' if self.positivity_pass else 'FAIL'}",
            f"b theta-derivative consistency: max err {self.b_dtheta_max_error:.3g}: "
            f"{'pass' if self.b_dtheta_pass else 'FAIL'}",
            f"learning information min = {self.fisher_min:.6g}: "
            f"{'pass' if self.fisher_pass else 'FAIL'}",
        ]
        if self.lipschitz_pass is not None:
            rows.append(f"driver Lipschitz (sampled {self.lipschitz_max:.3g}): "
                        f"{'pass' if self.lipschitz_pass else 'FAIL'}")
        if self.growth_constant is not None:
            rows.append(f"growth constant (sampled) = {self.growth_constant:.3g}")
        return "\n".join(rows)


def validate_conditions(spec: ModelSpec, n_check: int = 25,
                        problem: ProblemFunctions | None = None) -> ConditionsReport:
    """Sample the regularity conditions on an n_check x n_check grid.

    Checks positivity of b, f, sigma uniformly on the (theta, t) grid,
    consistency of the supplied theta-derivative of b with a central
    difference, and positivity of the learning-interval information on
    the theta grid.  Returns a report; never raises for failed checks.
    """
    if n_check < 2:
        raise ConfigError("n_check must be at least 2")
    from .estimators import fisher_information

    thetas = np.linspace(spec.theta_lo, spec.theta_hi, n_check)
    ts = np.linspace(0.0, spec.T, n_check)
    tg, thg = np.meshgrid(ts, thetas)

    b_vals = spec.b(thg, tg)
    min_b = float(b_vals.min())
    min_f = float(np.min(spec.f(ts)))
    min_sigma = float(np.min(spec.sigma(ts)))
    positivity = min_b > 0 and min_f > 0 and min_sigma > 0

    h = 1e-4 * (spec.theta_hi - spec.theta_lo)
    inner = thetas[1:-1][:, None]
    fd = (spec.b(inner + h, ts[None, :]) - spec.b(inner - h, ts[None, :])) / (2.0 * h)
    db_err = float(np.max(np.abs(fd - spec.b.dtheta(inner, ts[None, :]))))
    db_tol = 100.0 * h * h * max(1.0, float(np.max(np.abs(b_vals)))) + 1e-9
    db_pass = db_err <= db_tol

    fisher_vals = np.array([fisher_information(spec, th, 0.0, spec.tau) for th in thetas])
    fisher_min = float(fisher_vals.min())
    fisher_pass = fisher_min > 0

    lips_max = lips_pass = growth_c = None
    if problem is not None:
        rngc = np.random.Generator(np.random.Philox(key=2))
        ys = rngc.uniform(-3, 3, size=64)
        us = rngc.uniform(-3, 3, size=64)
        ss = rngc.uniform(-3, 3, size=64)
        tsamp = rngc.uniform(0, spec.T, size=64)
        du = rngc.uniform(0.05, 0.5, size=64)
        ds = rngc.uniform(0.05, 0.5, size=64)
        f0 = problem.driver(tsamp, ys, us, ss)
        f1 = problem.driver(tsamp, ys, us + du, ss + ds)
        lips_max = float(np.max(np.abs(f1 - f0) / (du + ds)))
        lips_pass = lips_max <= problem.lipschitz * (1 + 1e-9)
        denom = 1.0 + np.abs(ys) ** problem.growth_p
        growth_c = float(max(np.max(np.abs(f0) / denom),
                             np.max(np.abs(problem.terminal(ys)) / denom)))

    return ConditionsReport(
        min_b=min_b, min_f=min_f, min_sigma=min_sigma, positivity_pass=positivity,
        b_dtheta_max_error=db_err, b_dtheta_pass=db_pass,
        fisher_min=fisher_min, fisher_pass=fisher_pass,
        lipschitz_max=lips_max, lipschitz_pass=lips_pass, growth_constant=growth_c,
    )
