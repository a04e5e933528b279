"""Command-line interface: certify and simulate from a TOML experiment file."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness, rates
from .discretization import HermiteBasis, OperatorSet
from .potential import check_confinement_assumptions
from .steady_state import Grid1D, save_steady_state, solve_poisson_boltzmann


def _common(parser):
    parser.add_argument("--config", required=True, help="TOML experiment file")
    parser.add_argument("--out", default=None, help="output directory (default from config)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1, help="worker pool size for sweeps")
    parser.add_argument("--force", action="store_true", help="continue past assumption failures")


def build_parser():
    p = argparse.ArgumentParser(prog="vpfp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("check-assumptions", "steady-state", "certify-rate", "simulate", "eps-sweep", "full"):
        _common(sub.add_parser(name))
    return p


def _load(args):
    config = harness.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    return config, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config, out = _load(args)

    if args.command == "check-assumptions":
        report = check_confinement_assumptions(config.potential, config.mass)
        path = os.path.join(out, "assumptions.json")
        with open(path, "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        for name, entry in sorted(report.entries.items()):
            print(f"{name}: {entry.verdict}")
        print(f"wrote {path}")
        return 0 if (report.admissible or args.force) else 1

    if args.command == "steady-state":
        grid = Grid1D.make(config.grid_n, config.x_max)
        steady = solve_poisson_boltzmann(config.potential, config.mass, grid, tol=config.pb_tol)
        path = os.path.join(out, "steady_state.csv")
        save_steady_state(steady, path)
        print(f"mass={steady.mass:g} residual={steady.residual:.3e} iterations={steady.iterations}")
        print(f"wrote {path}")
        return 0

    if args.command == "certify-rate":
        grid = Grid1D.make(config.grid_n, config.x_max)
        steady = solve_poisson_boltzmann(config.potential, config.mass, grid, tol=config.pb_tol)
        ops = OperatorSet(steady, HermiteBasis.make(config.k_modes))
        constants = rates.certify(
            steady, ops, config.cm_method, config.delta_policy, config.explicit_delta
        )
        scan = rates.verify_rate_by_scan(
            constants.lambda_m,
            constants.lambda_M,
            constants.c_m,
            constants.chosen_delta,
            constants.decay_rate,
        )
        chain = rates.estimate_chain_constants(steady)
        payload = {"constants": constants.as_dict(), "scan": scan, "chain": chain.as_dict()}
        path = os.path.join(out, "rates.json")
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(
            f"lambda_m={constants.lambda_m:g} lambda_M={constants.lambda_M:.6g} "
            f"C_M={constants.c_m:.6g} delta={constants.chosen_delta:.6g} "
            f"lambda={constants.decay_rate:.6g}"
        )
        print(f"wrote {path}")
        return 0 if scan["nonnegative_at_rate"] else 1

    if args.command in ("simulate", "full"):
        report = harness.run_experiment(config, out_dir=out, force=args.force)
        if args.command == "full" and config.eps_list:
            sweep = harness.eps_sweep(config, out_dir=out, force=args.force, workers=args.workers)
            report.verdicts.update({f"sweep_{k}": v for k, v in sweep.verdicts.items()})
            report.write(os.path.join(out, "report.json"))
        for name, ok in sorted(report.verdicts.items()):
            print(f"{name}: {'pass' if ok else 'FAIL'}")
        if report.failed_stage:
            print(f"failed stage: {report.failed_stage}", file=sys.stderr)
        return 0 if report.all_pass else 1

    if args.command == "eps-sweep":
        report = harness.eps_sweep(config, out_dir=out, force=args.force, workers=args.workers)
        for name, ok in sorted(report.verdicts.items()):
            print(f"{name}: {'pass' if ok else 'FAIL'}")
        return 0 if report.all_pass else 1

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
