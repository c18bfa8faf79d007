"""Command-line interface.

Subcommands: simulate | filter | estimate | onestep | pde | approx | mc.
Every run is reproducible from (config, seed); the seed flag and the
HIDDENBSDE_SEED environment variable override the config seed.
Exit codes: 0 success / tolerances met, 1 tolerance failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import estimators, experiment, kalman, onestep, pde
from .model import ConfigError, ExperimentConfig, load_config_file
from .simulate import NoiseBundle, simulate_forward, simulate_observation


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the TOML config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="tabular output format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiddenbsde",
        description="estimation, filtering and backward-equation approximation "
                    "for a hidden linear diffusion observed in small noise")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="simulate hidden and observed paths")
    _add_common(p)
    p.add_argument("--theta", type=float, default=None,
                   help="volatility parameter (default: theta_true or midpoint)")

    p = sub.add_parser("filter", help="run the filter on a simulated path")
    _add_common(p)
    p.add_argument("--theta", type=float, default=None, help="filter parameter")
    p.add_argument("--theta-true", type=float, default=None,
                   help="data-generating parameter")

    p = sub.add_parser("estimate", help="preliminary estimate on [0, tau]")
    _add_common(p)
    p.add_argument("--method", choices=("mle", "substitution"), default="mle")

    p = sub.add_parser("onestep", help="one-step estimator process on (tau, T]")
    _add_common(p)

    p = sub.add_parser("pde", help="solve the backward equation")
    _add_common(p)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--epsilon-mode", type=float, default=0.0,
                   help="0 for the limit volatility, else the plug-in noise scale")
    p.add_argument("--family", action="store_true",
                   help="also emit the theta-derivative grid of the family")

    p = sub.add_parser("approx", help="full approximation pipeline over replicates")
    _add_common(p)
    p.add_argument("--max-paths-csv", type=int, default=5,
                   help="number of replicate paths written to CSV")

    p = sub.add_parser("mc", help="run a verification suite")
    _add_common(p)
    p.add_argument("--suite", required=True, choices=experiment.SUITES)
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config_file(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _default_theta(config: ExperimentConfig) -> float:
    if config.theta_true is not None:
        return float(config.theta_true)
    return 0.5 * (config.model.theta_lo + config.model.theta_hi)


def _write_table(path_base: str, fmt: str, columns: dict[str, np.ndarray]) -> str:
    arrays = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    n = len(next(iter(arrays.values())))
    if fmt == "json":
        path = path_base + ".json"
        with open(path, "w") as fh:
            json.dump({k: [float(x) for x in v] for k, v in arrays.items()},
                      fh, sort_keys=True, indent=1)
            fh.write("\n")
        return path
    path = path_base + ".csv"
    with open(path, "w") as fh:
        fh.write(",".join(arrays) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(v[i])) for v in arrays.values()) + "\n")
    return path


def _simulated_pair(config: ExperimentConfig, theta: float):
    spec = config.model
    n = int(round(spec.T / config.grid_dt))
    noise = NoiseBundle.from_seed(config.effective_seed(), n, spec.T / n)
    y_path = simulate_forward(spec, theta, spec.T / n, noise)
    x_path = simulate_observation(spec, y_path, noise)
    return y_path, x_path


def _cmd_simulate(args) -> int:
    config = _load(args)
    theta = args.theta if args.theta is not None else _default_theta(config)
    y_path, x_path = _simulated_pair(config, theta)
    os.makedirs(args.out_dir, exist_ok=True)
    path = _write_table(os.path.join(args.out_dir, "paths"), args.format,
                        {"t": y_path.t, "Y": y_path.v, "X": x_path.v})
    print(f"wrote {path} (theta = {theta:g}, seed = {config.effective_seed()})")
    return 0


def _cmd_filter(args) -> int:
    config = _load(args)
    spec = config.model
    theta_true = args.theta_true if args.theta_true is not None else _default_theta(config)
    theta = args.theta if args.theta is not None else theta_true
    _, x_path = _simulated_pair(config, theta_true)
    ric = kalman.solve_riccati(spec, theta, x_path.dt)
    flt = kalman.run_filter(spec, theta, ric, x_path)
    innov = kalman.innovation(spec, flt, x_path)
    os.makedirs(args.out_dir, exist_ok=True)
    path = _write_table(os.path.join(args.out_dir, "filter"), args.format, {
        "t": flt.t, "m": flt.m, "gamma": ric.gamma, "gamma_star": ric.gamma_star,
        "m_dtheta": flt.m_dtheta, "innovation": innov.v,
    })
    print(f"wrote {path} (filter theta = {theta:g}, data theta = {theta_true:g})")
    return 0


def _cmd_estimate(args) -> int:
    config = _load(args)
    spec = config.model
    theta_true = _default_theta(config)
    _, x_path = _simulated_pair(config, theta_true)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.method == "mle":
        theta_hat, curve = estimators.mle_preliminary(spec, x_path, config.theta_grid_n)
        path = _write_table(os.path.join(args.out_dir, "likelihood"), args.format,
                            {"theta": curve.thetas, "loglik": curve.values})
        print(f"mle estimate: {theta_hat:.6f} (diagnostics: {path})")
    else:
        theta_check, pieces = estimators.substitution_estimator(
            spec, x_path, bandwidth_exponent=config.bandwidth_exponent,
            bandwidth_scale=config.bandwidth_scale, spacing=config.qv_spacing,
            theta_grid_n=config.theta_grid_n)
        path = _write_table(os.path.join(args.out_dir, "substitution"), args.format,
                            {"t": pieces.node_times, "smoothed": pieces.node_values})
        meta = os.path.join(args.out_dir, "substitution_summary.json")
        with open(meta, "w") as fh:
            json.dump({"theta_check": theta_check, "psi_hat": pieces.psi_hat,
                       "psi_lo": pieces.psi_lo, "psi_hi": pieces.psi_hi,
                       "event": pieces.event, "bandwidth": pieces.bandwidth},
                      fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"substitution estimate: {theta_check:.6f} (event {pieces.event}; "
              f"diagnostics: {path}, {meta})")
    return 0


def _cmd_onestep(args) -> int:
    config = _load(args)
    spec = config.model
    theta_true = _default_theta(config)
    _, x_path = _simulated_pair(config, theta_true)
    theta_hat, _ = estimators.mle_preliminary(spec, x_path, config.theta_grid_n)
    traj = onestep.onestep_process(spec, x_path, theta_hat)
    cols = {"t": traj.t, "theta_star": traj.theta_star, "info": traj.info}
    if config.theta_true is not None:
        cols["eta"] = (traj.theta_star - config.theta_true) / np.sqrt(spec.epsilon)
    os.makedirs(args.out_dir, exist_ok=True)
    path = _write_table(os.path.join(args.out_dir, "onestep"), args.format, cols)
    print(f"wrote {path} (preliminary = {theta_hat:.6f})")
    return 0


def _cmd_pde(args) -> int:
    config = _load(args)
    spec = config.model
    theta = args.theta if args.theta is not None else _default_theta(config)
    sol = pde.solve_pde(config.problem, spec, theta, args.epsilon_mode,
                        config.pde_grid)
    tt, yy = np.meshgrid(sol.t, sol.y, indexing="ij")
    os.makedirs(args.out_dir, exist_ok=True)
    path = _write_table(os.path.join(args.out_dir, "pde_solution"), args.format, {
        "t": tt.ravel(), "y": yy.ravel(), "u": sol.u.ravel(), "u_y": sol.u_y.ravel(),
    })
    outputs = [path]
    if args.family:
        thetas = np.linspace(spec.theta_lo, spec.theta_hi, config.theta_grid_n)
        fam = pde.theta_family(config.problem, spec, args.epsilon_mode, thetas,
                               config.pde_grid)
        th3, tt3, yy3 = np.meshgrid(fam.thetas, fam.t, fam.y, indexing="ij")
        outputs.append(_write_table(
            os.path.join(args.out_dir, "pde_family_udot"), args.format,
            {"theta": th3.ravel(), "t": tt3.ravel(), "y": yy3.ravel(),
             "u_dot": fam.u_dot.ravel()}))
    print("wrote " + ", ".join(outputs))
    return 0


def _cmd_approx(args) -> int:
    config = _load(args)
    if config.theta_true is None:
        raise ConfigError("approx needs theta_true in the config (simulation mode)")
    spec, batch, diag, _ = experiment._approx_study(config)
    os.makedirs(args.out_dir, exist_ok=True)
    n_csv = min(args.max_paths_csv, batch["Z_hat"].shape[0])
    cols = {"t": np.tile(batch["t"], n_csv),
            "replicate": np.repeat(np.arange(n_csv), len(batch["t"]))}
    for key in ("m_hat", "Z_hat", "s_hat", "Z_ref"):
        cols[key] = batch[key][:n_csv].ravel()
    path = _write_table(os.path.join(args.out_dir, "approx_paths"), args.format, cols)
    agg = os.path.join(args.out_dir, "approx_report.json")
    with open(agg, "w") as fh:
        json.dump({
            "t_marks": [float(v) for v in diag.t_marks],
            "eps_mse": [float(v) for v in diag.eps_mse],
            "eps_mse_vs_filter_ref": [float(v) for v in diag.eps_mse_ref],
            "limit_values": [float(v) for v in diag.limit_values],
            "integrated_mean": diag.integrated_mean,
            "integrated_se": diag.integrated_se,
            "integrated_var": diag.integrated_var,
            "limit_var": diag.limit_var,
            "filter_gap": diag.filter_gap,
            "replicates": diag.n_replicates,
        }, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {path} and {agg}")
    return 0


def _cmd_mc(args) -> int:
    config = _load(args)
    report = experiment.run_experiment(config, args.suite)
    written = experiment.write_report(report, args.out_dir)
    print(report.summary())
    print("wrote " + ", ".join(written))
    return 0 if report.passed else 1


_COMMANDS = {
    "simulate": _cmd_simulate,
    "filter": _cmd_filter,
    "estimate": _cmd_estimate,
    "onestep": _cmd_onestep,
    "pde": _cmd_pde,
    "approx": _cmd_approx,
    "mc": _cmd_mc,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
