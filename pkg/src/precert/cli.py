"""``precert`` command-line entry point.

Exit codes: 0 success, 2 spec parse error, 3 spec validation error,
4 estimation/calibration failure, 5 unreachable heralding threshold,
1 any other package error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .config import ExperimentSpec, ResultTable, TomographySpec, load_spec
from .errors import (
    CalibrationError,
    DomainError,
    EstimationError,
    PrecertError,
    SpecParseError,
    SpecValidationError,
    UnreachableThresholdError,
)
from .experiments import REFERENCE_FIDELITIES, fit_noise, run_fig4, run_fig5, run_heralding, run_proctomo

OUTPUT_DIR_ENV = "PRECERT_OUTPUT_DIR"

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_ESTIMATION = 4
EXIT_THRESHOLD = 5

log = logging.getLogger("precert")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", type=Path, help="experiment spec (TOML)")
    common.add_argument("--seed", type=int, help="master seed (overrides the spec)")
    common.add_argument("--engine", choices=("analytic", "montecarlo"), help="rate engine")
    common.add_argument("--out", type=Path, help="output file (default: spec output, "
                        f"${OUTPUT_DIR_ENV}/<command>.csv, or stdout)")
    common.add_argument("--duration", type=float, help="Monte Carlo integration time in seconds")
    common.add_argument("--workers", type=int, default=1, help="parallel sweep points / resamples")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="precert", description="Photonic qubit precertification experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fig4", parents=[common], help="rate and fidelity vs total loss")
    sub.add_parser("fig5", parents=[common], help="heralding efficiency vs channel loss")
    sub.add_parser("proctomo", parents=[common], help="simulated process tomography per mode")
    her = sub.add_parser("heralding", parents=[common], help="heralding efficiency at the spec's loss")
    her.add_argument("--threshold", type=float, help="also report the channel loss where eta_h drops to this")
    sub.add_parser("calibrate", parents=[common], help="fit noise parameters to quoted fidelities")
    sub.add_parser("validate-spec", parents=[common], help="parse and validate a spec, print its hash")
    return parser


def _resolve_spec(args) -> ExperimentSpec:
    spec = load_spec(args.spec) if args.spec else ExperimentSpec()
    if args.seed is not None:
        if args.seed < 0:
            raise SpecValidationError("seed", "must be a non-negative integer")
        spec = replace(spec, seed=args.seed)
    if args.engine:
        spec = replace(spec, engine=args.engine)
    if args.duration is not None:
        if args.duration <= 0:
            raise SpecValidationError("duration", "must be > 0")
        spec = replace(spec, duration=args.duration)
    return spec


def _destination(args, spec: ExperimentSpec) -> Optional[Path]:
    if args.out:
        return args.out
    if spec.output:
        return Path(spec.output)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env) / f"{args.command}.csv"
    return None


def _run(args) -> int:
    if args.command == "validate-spec" and not args.spec:
        raise SpecValidationError("--spec", "required for validate-spec")
    spec = _resolve_spec(args)
    if args.command == "validate-spec":
        print(f"ok {spec.hash()}")
        return EXIT_OK
    if args.command == "fig4":
        table = run_fig4(spec, workers=args.workers)
    elif args.command == "fig5":
        table = run_fig5(spec, workers=args.workers)
    elif args.command == "proctomo":
        if spec.tomography is None:
            spec = replace(spec, tomography=TomographySpec())
        table = run_proctomo(spec, workers=args.workers)
    elif args.command == "heralding":
        table = run_heralding(spec, threshold=args.threshold)
    else:
        result = fit_noise(REFERENCE_FIDELITIES)
        n = result.noise
        names = list(result.fitted)
        row = [n.interferometer_dephasing, n.pockels_phase_error, n.residual_rotation, result.max_residual]
        row += [result.fitted[k] for k in names]
        cols = ("interferometer_dephasing", "pockels_phase_error", "residual_rotation", "max_residual")
        table = ResultTable.build(cols + tuple(names), [row], spec)
    dest = _destination(args, spec)
    if dest is None:
        sys.stdout.write(table.to_csv())
    else:
        table.to_csv(dest)
        log.info("wrote %s", dest)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except SpecParseError as exc:
        where = f" (line {exc.line}, column {exc.column})" if exc.line else ""
        print(f"error: cannot parse spec{where}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (SpecValidationError, DomainError) as exc:
        print(f"error: invalid spec: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, CalibrationError) as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except UnreachableThresholdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except PrecertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
