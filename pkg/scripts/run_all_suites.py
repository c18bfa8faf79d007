#!/usr/bin/env python3
"""Run every verification suite for one config and summarize the outcomes.

The pointwise/integrated suites share one cached replicate study.  Exit
status is 0 when all suite checks pass, 1 otherwise (the one-step
variance checks are expected to sit outside their bands at the default
noise scale; see the README).
"""

import argparse
import sys

from hiddenbsde import experiment
from hiddenbsde.model import load_config_file


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/cm1.toml")
    ap.add_argument("--out-dir", default="out/suites")
    ap.add_argument("--suites", nargs="*", default=list(experiment.SUITES))
    args = ap.parse_args()

    config = load_config_file(args.config)
    all_ok = True
    for suite in args.suites:
        report = experiment.run_experiment(config, suite)
        experiment.write_report(report, args.out_dir)
        print(report.summary())
        print(f"  ({report.wall_clock:.1f}s, {report.replicates} replicates)")
        all_ok &= report.passed
    return 0 if all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
