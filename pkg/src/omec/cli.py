"""Command line entry points.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 numerical
failure (integration blowup, filter divergence, failed solves).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .errors import (
    FilterDivergenceError,
    IntegrationBlowupError,
    NumericalFailureError,
    OmecError,
)
from .harness import (
    PRESET_NAMES,
    ScenarioConfig,
    load_config_file,
    preset,
    render_report,
    run_scenario,
    sweep,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _add_scenario_flags(p):
    p.add_argument("--preset", choices=PRESET_NAMES, help="scenario preset")
    p.add_argument("--config", metavar="FILE", help="key=value configuration file")
    p.add_argument("--seed-truth", type=int, help="truth seed (initial state, process noise)")
    p.add_argument("--seed-noise", type=int, help="observation noise seed")
    p.add_argument("--out", metavar="DIR", help="artifact output directory")
    p.add_argument("--max-iter", type=int, help="correction iterations cap")
    p.add_argument("--neighbors", type=int, help="nearest neighbors per step")
    p.add_argument("--delays", type=int, help="delay-coordinate count d")
    p.add_argument("--threshold", type=float, help="delta_g stopping threshold")
    p.add_argument(
        "--no-adaptive", action="store_true", help="freeze Q and R at initialization"
    )
    p.add_argument(
        "--diag-linear-system",
        action="store_true",
        help="also run the linear-system correction estimator diagnostic",
    )
    p.add_argument(
        "--save-covariances",
        action="store_true",
        help="write the posterior covariance binary sidecar",
    )
    p.add_argument("--no-svg", action="store_true", help="skip chart emission")


def _build_config(args) -> ScenarioConfig:
    file_values = load_config_file(args.config) if args.config else {}
    preset_name = args.preset or file_values.pop("preset", None)
    if preset_name and preset_name != "custom":
        cfg = preset(preset_name)
    else:
        cfg = ScenarioConfig()
    if file_values:
        cfg = dataclasses.replace(cfg, **file_values)
    overrides = {}
    if args.seed_truth is not None:
        overrides["seed_truth"] = args.seed_truth
    if args.seed_noise is not None:
        overrides["seed_noise"] = args.seed_noise
    if args.max_iter is not None:
        overrides["max_iter"] = args.max_iter
    if args.neighbors is not None:
        overrides["neighbors"] = args.neighbors
    if args.delays is not None:
        overrides["delays"] = args.delays
    if args.threshold is not None:
        overrides["threshold"] = args.threshold
    if args.no_adaptive:
        overrides["adaptive"] = False
    if args.diag_linear_system:
        overrides["diag_linear_system"] = True
    if args.save_covariances:
        overrides["save_covariances"] = True
    if args.no_svg:
        overrides["svg"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def main(argv=None) -> int:
    parser = _Parser(prog="omec", description="observation model error correction")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[], help="run one twin experiment")
    _add_scenario_flags(p_run)

    p_rep = sub.add_parser("report", help="re-render a run summary from its CSVs")
    p_rep.add_argument("dir", metavar="DIR")

    p_sweep = sub.add_parser("sweep", help="run a preset over a seed list")
    _add_scenario_flags(p_sweep)
    p_sweep.add_argument("--num-seeds", type=int, default=10)
    p_sweep.add_argument("--seed-base", type=int, help="first seed of the list")
    p_sweep.add_argument("--workers", type=int, help="parallel workers (OMEC_THREADS caps)")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = _build_config(args)
            report = run_scenario(cfg, args.out)
            unc = ", ".join(f"{v:.3f}" for v in report.rmse_uncorrected)
            cor = ", ".join(f"{v:.3f}" for v in report.rmse_corrected)
            print(
                f"{report.preset}: {report.iterations_run} iterations in "
                f"{report.runtime_seconds:.1f}s"
            )
            print(f"rmse uncorrected: {unc}")
            print(f"rmse corrected:   {cor}")
            if report.estimator_correlation is not None:
                ec = ", ".join(f"{v:.3f}" for v in report.estimator_correlation)
                print(f"estimator correlation: {ec}")
            if args.out:
                print(f"artifacts in {args.out}")
        elif args.command == "report":
            print(render_report(args.dir))
        else:
            cfg = _build_config(args)
            _, aggregate = sweep(
                cfg,
                num_seeds=args.num_seeds,
                out_dir=args.out,
                workers=args.workers,
                seed_base=args.seed_base,
            )
            unc = ", ".join(f"{v:.3f}" for v in aggregate["rmse_uncorrected_mean"])
            cor = ", ".join(f"{v:.3f}" for v in aggregate["rmse_corrected_mean"])
            print(f"{cfg.preset} over {args.num_seeds} seeds")
            print(f"mean rmse uncorrected: {unc}")
            print(f"mean rmse corrected:   {cor}")
            if args.out:
                print(f"artifacts in {args.out}")
    except (IntegrationBlowupError, FilterDivergenceError, NumericalFailureError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OmecError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
