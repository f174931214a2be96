"""Command-line interface: predict, table, simulate and analyze subcommands."""

import argparse
import csv
import logging
import math
import sys
from typing import Iterable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from config import RunConfig
from eventfile import EventFileError, atomic_open, write_stream
from montecarlo import CombSupportError, TimestampOverflowError, expected_counts, generate_stream
from observables import (
    REFERENCE_DELAYS_RT,
    DelaySetting,
    PhaseMode,
    coincidence_probability,
    fringe_visibility,
    postselected_coincidence,
    singles_fringe,
    singles_rate,
    visibility_table,
)
from physics import OracleConvergenceError, SourceParams, f_ee, numeric_f_oracle
from postprocess import FitConvergenceError, fit_fringe, histogram_file, reduce_histograms

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class UsageError(Exception):
    """Bad command line or configuration."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_csv(output: Optional[str], columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    if output is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
        return
    with atomic_open(output, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    logger.info(f"Wrote {output}")


def _delay_from_args(args, config: RunConfig, coarse: int, intermediate: float) -> DelaySetting:
    derived = args.derived or config.phase_mode == PhaseMode.DERIVED
    phase = config.locked_phase_rad if args.phase is None else args.phase
    return DelaySetting(
        coarse_half_roundtrips=coarse,
        intermediate=intermediate,
        fine_phase=0.0 if derived else phase,
        phase_mode=PhaseMode.DERIVED if derived else PhaseMode.LOCKED,
    )


def cmd_predict(args, config: RunConfig) -> int:
    params = config.source_params()
    coarse_list = [args.coarse] if args.coarse is not None else config.coarse_half_roundtrips

    if args.fringe:
        delay = _delay_from_args(args, config, coarse_list[0], (args.intermediate_ps or 0.0) * 1e-12)
        phases = np.linspace(0.0, 2 * math.pi, config.phase_points, endpoint=False)
        trace = singles_fringe(delay, phases, params, detector=1)
        counts = trace.values * config.pair_rate_hz * config.duration_s
        rows = [
            (f"{phi:.6f}", f"{s1:.8f}", f"{2.0 - s1:.8f}")
            for phi, s1 in zip(phases, trace.values)
        ]
        _write_csv(args.output, ["phase_rad", "singles1", "singles2"], rows)
        fit = fit_fringe(zip(phases, counts))
        print(
            f"fringe visibility at dt={delay.delta_t(params):.6e} s: "
            f"analytic {fringe_visibility(delay, params):.6f}, fitted {fit.visibility:.6f}"
        )
        return EXIT_OK

    start = (args.start_ps if args.start_ps is not None else config.intermediate_start_s * 1e12) * 1e-12
    stop = (args.stop_ps if args.stop_ps is not None else config.intermediate_stop_s * 1e12) * 1e-12
    step = (args.step_ps if args.step_ps is not None else config.intermediate_step_s * 1e12) * 1e-12
    if step <= 0 or stop < start:
        raise UsageError("need step > 0 and stop >= start")
    offsets = start + np.arange(int(round((stop - start) / step)) + 1) * step

    rows = []
    for coarse in coarse_list:
        for offset in offsets:
            d = _delay_from_args(args, config, coarse, float(offset))
            rows.append((
                f"{d.delta_t(params):.9e}",
                coarse,
                f"{d.phase(params):.6f}",
                f"{coincidence_probability(d, params):.8f}",
                f"{postselected_coincidence(d, params):.8f}",
                f"{singles_rate(1, d, params):.8f}",
                f"{singles_rate(2, d, params):.8f}",
            ))
    _write_csv(
        args.output,
        ["delay_s", "coarse_half_rt", "phase_rad", "p_coincidence", "p_postselected", "singles1", "singles2"],
        rows,
    )
    return EXIT_OK


def cmd_table(args, config: RunConfig) -> int:
    params = config.source_params()
    delays = list(args.delays)
    if args.reference:
        delays = list(REFERENCE_DELAYS_RT) + [d for d in delays if d not in REFERENCE_DELAYS_RT]
    try:
        table = visibility_table(delays, params)
    except ValueError as e:
        raise UsageError(str(e)) from e

    columns = ["delay_rt", "delta_t_s", "visibility"]
    if args.oracle:
        columns.append("oracle_visibility")
    rows = []
    for row in table:
        line = [str(row.delay_rt), f"{row.delta_t:.6e}", f"{row.visibility:.6f}"]
        if args.oracle:
            line.append(f"{numeric_f_oracle('ee', 2.0 * row.delta_t, params):.6f}")
        rows.append(line)
    _write_csv(args.output, columns, rows)
    if args.output:
        for line in rows:
            print("  ".join(f"{v:>12}" for v in line))
    return EXIT_OK


def cmd_simulate(args, config: RunConfig) -> int:
    overrides = {}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = RunConfig(**{**config.dict(), **overrides})

    coarse = args.coarse if args.coarse is not None else config.coarse_half_roundtrips[0]
    delay = _delay_from_args(args, config, coarse, args.intermediate_ps * 1e-12)
    cfg = config.sim_config(delay)
    stream = generate_stream(cfg)
    write_stream(args.output, stream, fmt=args.format)

    counts = stream.counts_per_channel()
    expected = expected_counts(cfg)
    print(
        f"{args.output}: seed={cfg.seed}, {len(stream)} events (ch0 {counts[0]}, ch1 {counts[1]}; "
        f"expected {expected['singles_per_channel']:.0f} per channel)"
    )
    return EXIT_OK


def _delay_of(header: dict, path: str) -> DelaySetting:
    try:
        return DelaySetting.parse_obj(header["delay"])
    except (KeyError, ValidationError) as e:
        raise EventFileError(f"{path}: header has no valid delay setting") from e


def _params_of(header: dict, path: str, fallback: SourceParams) -> SourceParams:
    if "params" not in header:
        logger.warning(f"{path}: header has no source parameters; using configured ones")
        return fallback
    try:
        return SourceParams.parse_obj(header["params"])
    except ValidationError as e:
        raise EventFileError(f"{path}: invalid source parameters in header") from e


def cmd_analyze(args, config: RunConfig) -> int:
    parity = args.parity or config.parity
    paths = list(args.files) + list(args.baseline or [])
    if not paths:
        raise UsageError("no event files given")
    configured = config.source_params()

    histograms, delays, used, params = [], [], [], None
    for path in paths:
        try:
            h = histogram_file(path, bin_width=config.bin_width_s, span=config.span_s)
            file_params = _params_of(h.header, path, configured)
            delay = _delay_of(h.header, path)
        except EventFileError as e:
            logger.warning(f"Skipping {path}: {e}")
            continue
        if params is None:
            params = file_params
        elif file_params != params:
            raise EventFileError(f"{path}: source parameters differ from {used[0]}")
        histograms.append(h)
        delays.append(delay)
        used.append(path)
        logger.debug(f"{path}: {int(h.counts.sum())} pairs in histogram, singles {h.singles}")
    if not used:
        raise EventFileError("no readable event files")
    if len(used) < len(paths):
        logger.warning(f"Analysed {len(used)} of {len(paths)} event files")

    baseline_paths = set(args.baseline or [])
    paths = used
    for path, d in zip(paths, delays):
        if path in baseline_paths and f_ee(2.0 * d.delta_t(params), params) >= 1e-6:
            raise ValueError(f"{path}: baseline file delay lies inside a dip")

    result = reduce_histograms(
        histograms, delays, params, parity, config.window_width_s, config.tail_tol,
        args.accidentals or config.accidental_method,
    )

    rows = []
    for path, (d, counts, same_pol, reduced) in zip(paths, result.points):
        rows.append((
            path,
            d.coarse_half_roundtrips,
            f"{d.intermediate:.6e}",
            f"{d.phase(params):.6f}",
            counts.coincidences,
            f"{counts.accidentals:.3f}",
            f"{same_pol:.3f}",
            f"{reduced.p:.6f}",
            f"{reduced.sigma:.6f}",
            int(reduced.clamped),
        ))
    _write_csv(
        args.output,
        ["file", "coarse_half_rt", "intermediate_s", "phase_rad", "coincidences", "accidentals",
         "same_pol_predicted", "p_postselected", "sigma", "clamped"],
        rows,
    )
    for coarse, (visibility, sigma) in sorted(result.visibilities.items()):
        predicted = f_ee(2.0 * coarse * params.t_round_physical, params)
        print(f"coarse {coarse} T_p: visibility {visibility:.4f} +/- {sigma:.4f} (closed form {predicted:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="combhom", description="Biphoton frequency comb HOM simulator")
    parser.add_argument("--config", help="key=value run configuration file")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)
    sub.required = True

    def add_delay_args(p):
        p.add_argument("--coarse", type=int, help="coarse delay in half round trips T_p")
        p.add_argument("--phase", type=float, help="locked NOON phase in rad")
        p.add_argument("--derived", action="store_true", help="phase follows the delay")

    predict = sub.add_parser("predict", help="analytic traces")
    add_delay_args(predict)
    predict.add_argument("--start-ps", type=float)
    predict.add_argument("--stop-ps", type=float)
    predict.add_argument("--step-ps", type=float)
    predict.add_argument("--fringe", action="store_true", help="singles versus phase at one delay")
    predict.add_argument("--intermediate-ps", type=float, help="stage offset for --fringe")
    predict.add_argument("--output")
    predict.set_defaults(handler=cmd_predict)

    table = sub.add_parser("table", help="HOM visibility at delays in round trips")
    table.add_argument("delays", nargs="*", help="e.g. 0 1/2 42")
    table.add_argument("--paper", "--reference", dest="reference", action="store_true",
                       help="include the seven reference delays")
    table.add_argument("--oracle", action="store_true", help="add the numeric overlap column")
    table.add_argument("--output")
    table.set_defaults(handler=cmd_table)

    simulate = sub.add_parser("simulate", help="Monte-Carlo event file")
    add_delay_args(simulate)
    simulate.add_argument("--intermediate-ps", type=float, default=0.0)
    simulate.add_argument("--duration", type=float)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--workers", type=int)
    simulate.add_argument("--format", choices=["binary", "csv"], help="default: from the output suffix")
    simulate.add_argument("--output", required=True)
    simulate.set_defaults(handler=cmd_simulate)

    analyze = sub.add_parser("analyze", help="reduce event files to a normalised trace")
    analyze.add_argument("files", nargs="*")
    analyze.add_argument("--parity", choices=["even", "odd"])
    analyze.add_argument("--accidentals", choices=["floor", "singles"], help="accidental estimator")
    analyze.add_argument("--baseline", nargs="+", metavar="FILE", help="files recorded outside the dip")
    analyze.add_argument("--output")
    analyze.set_defaults(handler=cmd_analyze)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = RunConfig.from_file(args.config) if args.config else RunConfig.from_env()
        if args.log_level:
            config = RunConfig(**{**config.dict(), "log_level": args.log_level})
    except (UsageError, ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=getattr(logging, config.log_level), format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(getattr(logging, config.log_level))

    try:
        return args.handler(args, config)
    except (UsageError, ValidationError, CombSupportError, TimestampOverflowError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (OracleConvergenceError, FitConvergenceError) as e:
        logger.error(str(e))
        return EXIT_NOT_CONVERGED
    except (EventFileError, ValueError, OSError) as e:
        logger.error(str(e))
        return EXIT_DATA
