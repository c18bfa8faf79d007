"""Monte Carlo suites: reproducible studies with machine-readable reports.

Each suite wires the pipeline together over seeded replicates and an
epsilon ladder, evaluates its tolerance checks, and emits a report
whose canonical JSON is byte-identical across re-runs with the same
config and seed (wall-clock timing goes to a sidecar, never into the
canonical report).
"""

from __future__ import annotations

import functools
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from . import approx, estimators, kalman, onestep, pde, rng
from .model import ConfigError, ExperimentConfig, ModelSpec
from .simulate import NoiseBundle, forward_values, observation_values

SUITES = ("lemma1", "lemma2", "prop1", "prop2", "prop3", "theorem1", "corollary1")

SEED_RULE = "philox64(splitmix64(seed XOR splitmix64(golden + replicate_index)))"


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    bound: str
    passed: bool


@dataclass
class McReport:
    suite: str
    seed: int
    replicates: int
    epsilons: tuple[float, ...]
    checks: list[Check] = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    statistics: dict = field(default_factory=dict)
    failures: int = 0
    failure_budget: float = 0.01
    wall_clock: float = 0.0  # reported in the sidecar only

    @property
    def passed(self) -> bool:
        budget_ok = self.failures <= self.failure_budget * max(1, self.replicates)
        return budget_ok and all(c.passed for c in self.checks)

    def seed_ledger(self) -> dict:
        return {"base_seed": self.seed, "rule": SEED_RULE,
                "replicates": self.replicates}

    def to_json(self) -> str:
        """Canonical report JSON; excludes volatile fields (timing)."""
        payload = {
            "schema": "hiddenbsde-report-v1",
            "suite": self.suite,
            "seed_ledger": self.seed_ledger(),
            "epsilons": list(self.epsilons),
            "replicates": self.replicates,
            "checks": [asdict(c) for c in self.checks],
            "statistics": self.statistics,
            "tables": self.tables,
            "failures": self.failures,
            "failure_budget": self.failure_budget,
            "passed": self.passed,
        }
        return json.dumps(payload, sort_keys=True, indent=1, default=float)

    def summary(self) -> str:
        lines = [f"suite {self.suite}: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            lines.append(f"  [{'pass' if c.passed else 'FAIL'}] {c.name}: "
                         f"{c.value:.6g} (bound: {c.bound})")
        return "\n".join(lines)


def _simulate_batch(spec: ModelSpec, theta0: float, dt: float, seed: int,
                    n_rep: int, t_max: float | None = None):
    """Replicate paths on [0, t_max]; row k reproducible from (seed, k)."""
    horizon = spec.T if t_max is None else t_max
    n = int(round(horizon / dt))
    t = np.arange(n + 1) * dt
    noise = NoiseBundle.for_replicates(seed, n_rep, n, dt)
    y = forward_values(spec, theta0, t, noise.dV)
    x = observation_values(spec, t, y, noise.dW)
    return t, y, x


def _require_theta_true(config: ExperimentConfig) -> float:
    if config.theta_true is None:
        raise ConfigError("this suite needs theta_true in the config")
    return float(config.theta_true)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def _suite_lemma1(config: ExperimentConfig) -> McReport:
    """Convergence of the rescaled filter variance to b sigma / f.

    The sup-gap over t >= t0 is evaluated at the parameter-interval
    midpoint (the lemma is uniform in theta; the midpoint is the suite's
    documented representative) and reported at theta_true as well.
    """
    spec = config.model
    ladder = config.epsilons or (0.1, 0.05, 0.02, 0.01)
    t0 = 0.1 * spec.T
    theta_mid = 0.5 * (spec.theta_lo + spec.theta_hi)
    theta_ref = config.theta_true if config.theta_true is not None else theta_mid
    rows = []
    gaps = []
    for eps in ladder:
        sp = spec.with_epsilon(eps)
        t = sp.time_grid(config.grid_dt)
        mask = t >= t0 - 1e-12
        row = {"epsilon": eps}
        for label, th in (("mid", theta_mid), ("ref", theta_ref)):
            gamma, _ = kalman.riccati_arrays(sp, float(th), t)
            gamma0, _ = kalman.limit_coefficients(sp, float(th), t)
            gap = float(np.max(np.abs(gamma[mask] / eps - gamma0[mask])))
            row[f"sup_gap_{label}"] = gap
        gaps.append(row["sup_gap_mid"])
        rows.append(row)
    gaps = np.array(gaps)
    slope = float(np.polyfit(np.log(ladder), np.log(gaps), 1)[0])
    report = McReport(suite="lemma1", seed=config.effective_seed(), replicates=1,
                      epsilons=tuple(ladder))
    report.tables["sup_gaps"] = rows
    report.statistics["slope"] = slope
    report.checks.append(Check("sup gap strictly decreasing",
                               float(np.max(np.diff(gaps))), "< 0",
                               bool(np.all(np.diff(gaps) < 0))))
    report.checks.append(Check("log-log slope", slope, "[0.6, 1.4]",
                               0.6 <= slope <= 1.4))
    return report


def _suite_lemma2(config: ExperimentConfig) -> McReport:
    """Mean-square tracking of the hidden state by the filter."""
    spec = config.model
    theta0 = _require_theta_true(config)
    ladder = config.epsilons or (0.1, 0.05, 0.02)
    seed = config.effective_seed()
    t0 = 0.1 * spec.T
    sups = []
    rows = []
    for i, eps in enumerate(ladder):
        sp = spec.with_epsilon(eps)
        t, y, x = _simulate_batch(sp, theta0, config.grid_dt,
                                  rng.child_seed(seed, 1000 + i), config.mc_replicates)
        gamma, gamma_d = kalman.riccati_arrays(sp, theta0, t)
        m, _ = kalman.filter_arrays(sp, theta0, t, gamma, gamma_d,
                                    np.diff(x, axis=-1))
        err2 = np.mean((m - y) ** 2, axis=0)
        sup = float(np.max(err2[t >= t0 - 1e-12]))
        sups.append(sup)
        rows.append({"epsilon": eps, "sup_mse": sup, "sup_mse_over_eps": sup / eps})
    report = McReport(suite="lemma2", seed=seed, replicates=config.mc_replicates,
                      epsilons=tuple(ladder))
    report.tables["tracking"] = rows
    ratios = [sups[i + 1] / sups[i] for i in range(len(sups) - 1)]
    report.statistics["ratios"] = ratios
    for i, r in enumerate(ratios):
        report.checks.append(Check(
            f"sup-MSE ratio {ladder[i + 1]:g}/{ladder[i]:g}", float(r),
            "[0.35, 0.65]", 0.35 <= r <= 0.65))
    return report


def _suite_prop1(config: ExperimentConfig) -> McReport:
    """Asymptotic normality of the learning-interval likelihood estimate."""
    spec = config.model
    theta0 = _require_theta_true(config)
    seed = config.effective_seed()
    t, y, x = _simulate_batch(spec, theta0, config.grid_dt, seed,
                              config.mc_replicates, t_max=spec.tau)
    theta_hat, grid, values = estimators.mle_batch(
        spec, t, np.diff(x, axis=-1), config.theta_grid_n)
    info = estimators.fisher_information(spec, theta0, 0.0, spec.tau)
    z = np.sqrt(info / spec.epsilon) * (theta_hat - theta0)
    ks = float(_scipy_stats.kstest(z, "norm").statistic)
    report = McReport(suite="prop1", seed=seed, replicates=config.mc_replicates,
                      epsilons=(spec.epsilon,))
    report.statistics.update({"mean": float(z.mean()), "variance": float(z.var()),
                              "ks_distance": ks, "information": float(info)})
    report.tables["normalized_sample"] = [{"z": float(v)} for v in np.sort(z)]
    report.checks.append(Check("normalized mean", float(abs(z.mean())),
                               "< 0.15", abs(z.mean()) < 0.15))
    report.checks.append(Check("normalized variance", float(z.var()),
                               "[0.7, 1.3]", 0.7 <= z.var() <= 1.3))
    report.checks.append(Check("KS distance to standard normal", ks,
                               "<= 0.08", ks <= 0.08))
    return report


def _suite_prop2(config: ExperimentConfig) -> McReport:
    """Square-root-of-epsilon rate of the substitution estimator."""
    spec = config.model
    theta0 = _require_theta_true(config)
    ladder = config.epsilons or (0.1, 0.05, 0.02)
    seed = config.effective_seed()
    mses = []
    rows = []
    for i, eps in enumerate(ladder):
        sp = spec.with_epsilon(eps)
        t, y, x = _simulate_batch(sp, theta0, config.grid_dt,
                                  rng.child_seed(seed, 2000 + i),
                                  config.mc_replicates, t_max=sp.tau)
        theta_check, _ = estimators.substitution_batch(
            sp, t, np.diff(x, axis=-1),
            bandwidth_exponent=config.bandwidth_exponent,
            bandwidth_scale=config.bandwidth_scale,
            spacing=config.qv_spacing, theta_grid_n=config.theta_grid_n)
        mse = float(np.mean((theta_check - theta0) ** 2))
        mses.append(mse)
        rows.append({"epsilon": eps, "mse": mse, "mse_over_eps": mse / eps})
    report = McReport(suite="prop2", seed=seed, replicates=config.mc_replicates,
                      epsilons=tuple(ladder))
    report.tables["rate"] = rows
    ratios = [mses[i + 1] / mses[i] for i in range(len(mses) - 1)]
    report.statistics["ratios"] = ratios
    for i, r in enumerate(ratios):
        report.checks.append(Check(
            f"MSE ratio {ladder[i + 1]:g}/{ladder[i]:g}", float(r),
            "[0.3, 0.8]", 0.3 <= r <= 0.8))
    # deterministic closed-inverse check at the canonical statistic value
    probe = estimators.invert_psi(spec, estimators.psi_map(spec, theta0))
    err = float(abs(probe[0] - theta0))
    report.checks.append(Check("Psi inverse round-trip error", err,
                               "<= 1e-6", err <= 1e-6))
    return report


def _prop3_study(config: ExperimentConfig, eps: float, seed_offset: int):
    spec = config.model.with_epsilon(eps)
    theta0 = _require_theta_true(config)
    seed = rng.child_seed(config.effective_seed(), seed_offset)
    dt = config.grid_dt if eps >= 0.01 else config.grid_dt / 2.0
    t, y, x = _simulate_batch(spec, theta0, dt, seed, config.mc_replicates)
    dx = np.diff(x, axis=-1)
    k_tau = spec.tau_index(dt)
    theta_hat, _, _ = estimators.mle_batch(spec, t[:k_tau + 1], dx[:, :k_tau],
                                           config.theta_grid_n)
    t_after, theta_star, info, _ = onestep.onestep_arrays(spec, t, dx, theta_hat)
    return spec, theta0, t_after, theta_star, theta_hat


def _suite_prop3(config: ExperimentConfig) -> McReport:
    """One-step estimator process: limit variance, consistency, increments."""
    theta0 = _require_theta_true(config)
    spec, _, t_after, theta_star, theta_hat = _prop3_study(
        config, config.model.epsilon, 3000)
    eps = spec.epsilon
    eta = (theta_star - theta0) / np.sqrt(eps)
    info_T = estimators.fisher_information(spec, theta0, spec.tau, spec.T)

    report = McReport(suite="prop3", seed=config.effective_seed(),
                      replicates=config.mc_replicates, epsilons=(eps,))
    var_T = float(eta[:, -1].var())
    target = 1.0 / info_T
    report.statistics.update({"var_eta_T": var_T, "target": float(target),
                              "mean_eta_T": float(eta[:, -1].mean()),
                              "ks": float(_scipy_stats.kstest(
                                  eta[:, -1] * np.sqrt(info_T), "norm").statistic)})
    report.checks.append(Check("Var(eta_T) / limit", var_T * float(info_T),
                               "[0.7, 1.3]", 0.7 <= var_T * info_T <= 1.3))

    t_unif = spec.tau + (spec.T - spec.tau) / 3.0
    sup_err = np.max(np.abs(theta_star[:, t_after >= t_unif - 1e-12] - theta0), axis=1)
    p_exceed = float(np.mean(sup_err > 0.1))
    report.statistics["p_sup_exceeds_0.1"] = p_exceed
    report.checks.append(Check("P(sup_{t>=t0}|theta*-theta0| > 0.1)", p_exceed,
                               "<= 0.05", p_exceed <= 0.05))

    pairs = [(0.6, 0.8), (0.8, 1.0), (0.6, 1.0)]
    ratios = []
    rows = []
    for (t1, t2) in pairs:
        k1 = int(np.argmin(np.abs(t_after - t1 * spec.T)))
        k2 = int(np.argmin(np.abs(t_after - t2 * spec.T)))
        d = eta[:, k2] - eta[:, k1]
        emp = float(np.mean(d ** 4) / (t_after[k2] - t_after[k1]) ** 2)
        i1 = estimators.fisher_information(spec, theta0, spec.tau, t_after[k1])
        i2 = estimators.fisher_information(spec, theta0, spec.tau, t_after[k2])
        gauss = 3.0 * (1.0 / i1 - 1.0 / i2) ** 2 / (t_after[k2] - t_after[k1]) ** 2
        ratios.append(emp / gauss)
        rows.append({"t1": float(t_after[k1]), "t2": float(t_after[k2]),
                     "fourth_moment_ratio": emp, "gaussian_limit": gauss,
                     "normalized": emp / gauss})
    report.tables["increments"] = rows
    spread = float(max(ratios) / min(ratios))
    report.statistics["increment_constant_spread"] = spread
    report.checks.append(Check("increment constant spread (max/min)", spread,
                               "<= 3.0", spread <= 3.0))
    return report


@functools.lru_cache(maxsize=1)
def _approx_study(config: ExperimentConfig, eps: float | None = None,
                  seed_offset: int = 4000):
    """Shared pipeline for the approximation suites; returns diagnostics.

    Cached so the pointwise and integrated suites reuse one replicate set.
    """
    spec = config.model if eps is None else config.model.with_epsilon(eps)
    theta0 = _require_theta_true(config)
    seed = rng.child_seed(config.effective_seed(), seed_offset)
    dt = config.grid_dt
    t, y, x = _simulate_batch(spec, theta0, dt, seed, config.mc_replicates)
    dx = np.diff(x, axis=-1)
    k_tau = spec.tau_index(dt)

    theta_hat, _, _ = estimators.mle_batch(spec, t[:k_tau + 1], dx[:, :k_tau],
                                           config.theta_grid_n)
    t_after, theta_star, _, _ = onestep.onestep_arrays(spec, t, dx, theta_hat)
    theta_cl = np.clip(theta_star, spec.theta_lo, spec.theta_hi)

    gamma_h, gamma_hd = kalman.riccati_arrays(spec, theta_hat, t[:k_tau + 1])
    m_prelim, _ = kalman.filter_arrays(spec, theta_hat, t[:k_tau + 1],
                                       gamma_h, gamma_hd, dx[:, :k_tau])
    gamma0, gamma0_d = kalman.riccati_arrays(spec, theta0, t)
    m_theta0, _ = kalman.filter_arrays(spec, theta0, t, gamma0, gamma0_d, dx)
    table = kalman.build_riccati_table(spec, dt, config.theta_grid_n)

    thetas = np.linspace(spec.theta_lo, spec.theta_hi, config.theta_grid_n)
    fam_eps = pde.theta_family(config.problem, spec, spec.epsilon, thetas,
                               config.pde_grid)
    fam_lim = pde.theta_family(config.problem, spec, 0.0, thetas, config.pde_grid)

    batch = approx.approximate_arrays(
        spec, t, dx, fam_eps, theta_cl, np.clip(theta_hat, spec.theta_lo, spec.theta_hi),
        m_prelim[:, -1], table, m_theta0=m_theta0, theta0=theta0,
        y_values=y, limit_family=fam_lim)
    marks = tuple(spec.tau + (spec.T - spec.tau) * k / 3.0 for k in (1, 2))
    diag = approx.error_report(batch, spec, theta0, fam_lim, t_marks=marks,
                               m_theta0=m_theta0)
    return spec, batch, diag, fam_eps


def _suite_theorem1(config: ExperimentConfig) -> McReport:
    """Pointwise normalized mean-square error versus the quadrature limit."""
    spec, batch, diag, _ = _approx_study(config)
    report = McReport(suite="theorem1", seed=config.effective_seed(),
                      replicates=config.mc_replicates, epsilons=(spec.epsilon,))
    report.failures = config.mc_replicates - diag.n_replicates
    rows = []
    for tm, emp, ref, lim in zip(diag.t_marks, diag.eps_mse,
                                 diag.eps_mse_ref, diag.limit_values):
        ratio = float(emp / lim)
        rows.append({"t": float(tm), "eps_mse": float(emp),
                     "eps_mse_vs_filter_ref": float(ref), "limit": float(lim),
                     "ratio": ratio})
        report.checks.append(Check(f"eps^-1 MSE / limit at t={tm:g}", ratio,
                                   "[0.65, 1.35]", 0.65 <= ratio <= 1.35))
    report.tables["pointwise"] = rows
    report.statistics["filter_gap"] = diag.filter_gap
    term_gap = float(np.max(np.abs(
        batch["Z_hat"][batch["valid"], -1]
        - np.asarray(config.problem.terminal(batch["m_hat"][batch["valid"], -1])))))
    report.statistics["terminal_consistency"] = term_gap
    return report


def _suite_corollary1(config: ExperimentConfig) -> McReport:
    """Integrated error statistic: centering and limit-law variance."""
    spec, batch, diag, _ = _approx_study(config)
    report = McReport(suite="corollary1", seed=config.effective_seed(),
                      replicates=config.mc_replicates, epsilons=(spec.epsilon,))
    report.failures = config.mc_replicates - diag.n_replicates
    mean_ok = abs(diag.integrated_mean) <= 3.0 * diag.integrated_se
    var_ratio = diag.integrated_var / diag.limit_var
    report.statistics.update({
        "integrated_mean": diag.integrated_mean,
        "integrated_se": diag.integrated_se,
        "integrated_var": diag.integrated_var,
        "limit_var": diag.limit_var,
    })
    report.checks.append(Check("integrated statistic |mean| / (3 se)",
                               float(abs(diag.integrated_mean)
                                     / (3.0 * diag.integrated_se)),
                               "<= 1", bool(mean_ok)))
    report.checks.append(Check("integrated variance / limit variance",
                               float(var_ratio), "[0.6, 1.4]",
                               0.6 <= var_ratio <= 1.4))
    return report


_SUITE_FNS = {
    "lemma1": _suite_lemma1,
    "lemma2": _suite_lemma2,
    "prop1": _suite_prop1,
    "prop2": _suite_prop2,
    "prop3": _suite_prop3,
    "theorem1": _suite_theorem1,
    "corollary1": _suite_corollary1,
}


def run_experiment(config: ExperimentConfig, suite: str) -> McReport:
    """Execute one verification suite and return its report."""
    if suite not in _SUITE_FNS:
        raise ConfigError(f"unknown suite {suite!r}; choices: {sorted(_SUITE_FNS)}")
    start = time.perf_counter()
    report = _SUITE_FNS[suite](config)
    report.wall_clock = time.perf_counter() - start
    return report


def write_report(report: McReport, out_dir: str) -> list[str]:
    """Write canonical JSON, per-table CSVs and the timing sidecar."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, f"{report.suite}_report.json")
    with open(path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    written.append(path)
    for name, rows in report.tables.items():
        cpath = os.path.join(out_dir, f"{report.suite}_{name}.csv")
        with open(cpath, "w") as fh:
            if rows:
                cols = list(rows[0])
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(repr(float(row[c])) for c in cols) + "\n")
        written.append(cpath)
    tpath = os.path.join(out_dir, f"{report.suite}_timing.json")
    with open(tpath, "w") as fh:
        json.dump({"wall_clock_seconds": report.wall_clock}, fh)
        fh.write("\n")
    written.append(tpath)
    return written
