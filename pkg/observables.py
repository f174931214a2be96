"""Measurable curves: coincidence probability, singles rates, visibilities, delay composition."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from physics import SPEED_OF_LIGHT, SourceParams, f_ee, f_eo_envelope

logger = logging.getLogger(__name__)

BASELINE_THRESHOLD = 1e-6  # f_ee below this counts as outside the dip
REFERENCE_DELAYS_RT = ("0", "1/2", "1", "2", "4", "40", "42")


class PhaseMode(str, Enum):
    DERIVED = "derived_from_delay"
    LOCKED = "locked"


class DelaySetting(BaseModel):
    """Coarse (fibre), intermediate (stage) and fine (piezo) delay of the V photon.

    In derived mode the NOON phase follows the delay, phi = omega0*dt + fine_phase;
    in locked mode phi = fine_phase regardless of the delay.
    """

    coarse_half_roundtrips: int = 0
    intermediate: float = 0.0  # s
    fine_phase: float = 0.0  # rad
    phase_mode: PhaseMode = PhaseMode.DERIVED

    class Config:
        frozen = True
        extra = "forbid"

    def delta_t(self, params: SourceParams) -> float:
        return self.coarse_half_roundtrips * params.t_round_physical + self.intermediate

    def phase(self, params: SourceParams) -> float:
        if self.phase_mode == PhaseMode.LOCKED:
            return self.fine_phase % (2.0 * math.pi)
        return (params.omega0 * self.delta_t(params) + self.fine_phase) % (2.0 * math.pi)

    def path_difference_m(self, params: SourceParams) -> float:
        """Free-space path difference equivalent to the envelope delay."""
        return SPEED_OF_LIGHT * self.delta_t(params)


class TraceKind(str, Enum):
    COINCIDENCE = "coincidence"
    SINGLES_DET1 = "singles_det1"
    SINGLES_DET2 = "singles_det2"
    POSTSELECTED = "postselected_coincidence"


@dataclass
class TraceResult:
    """An observable scanned over delay settings."""

    delays: List[DelaySetting]
    values: np.ndarray
    sigmas: np.ndarray
    kind: TraceKind

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        if not len(self.delays) == self.values.size == self.sigmas.size:
            raise ValueError(
                f"trace lengths differ: {len(self.delays)} delays, "
                f"{self.values.size} values, {self.sigmas.size} sigmas"
            )

    def delta_t(self, params: SourceParams) -> np.ndarray:
        return np.array([d.delta_t(params) for d in self.delays])


def coincidence_probability(d: DelaySetting, params: SourceParams) -> float:
    """Integrated coincidence signal 1/4(1 - f_ee(2dt)) + 1/2 sin^2(phi)."""
    dt = d.delta_t(params)
    return 0.25 * (1.0 - f_ee(2.0 * dt, params)) + 0.5 * math.sin(d.phase(params)) ** 2


def postselected_coincidence(d: DelaySetting, params: SourceParams) -> float:
    """Even-comb-only signal after peak filtering, rescaled to 0.5 outside the dip."""
    return 0.5 * (1.0 - f_ee(2.0 * d.delta_t(params), params))


def singles_rate(detector: int, d: DelaySetting, params: SourceParams) -> float:
    """Normalised singles rate 1 +/- cos(phi) * envelope(dt); detector 1 takes +."""
    if detector not in (1, 2):
        raise ValueError(f"detector must be 1 or 2, got {detector}")
    sign = 1.0 if detector == 1 else -1.0
    return 1.0 + sign * math.cos(d.phase(params)) * f_eo_envelope(d.delta_t(params), params)


def fringe_visibility(d: DelaySetting, params: SourceParams) -> float:
    """Analytic singles fringe visibility (max-min)/(max+min), i.e. the envelope."""
    return f_eo_envelope(d.delta_t(params), params)


_EVALUATORS = {
    TraceKind.COINCIDENCE: coincidence_probability,
    TraceKind.POSTSELECTED: postselected_coincidence,
    TraceKind.SINGLES_DET1: lambda d, p: singles_rate(1, d, p),
    TraceKind.SINGLES_DET2: lambda d, p: singles_rate(2, d, p),
}


def scan_trace(kind: TraceKind, delays: Sequence[DelaySetting], params: SourceParams) -> TraceResult:
    """Evaluate an analytic trace; sigmas are zero."""
    evaluate = _EVALUATORS[TraceKind(kind)]
    values = [evaluate(d, params) for d in delays]
    return TraceResult(delays=list(delays), values=values, sigmas=np.zeros(len(values)), kind=TraceKind(kind))


def dip_scan(coarse: int, offsets: Iterable[float], phase_mode: PhaseMode = PhaseMode.LOCKED,
             locked_phase: float = 0.0) -> List[DelaySetting]:
    """Delay settings scanning the intermediate stage across one revival."""
    return [
        DelaySetting(
            coarse_half_roundtrips=coarse,
            intermediate=float(offset),
            fine_phase=locked_phase if phase_mode == PhaseMode.LOCKED else 0.0,
            phase_mode=phase_mode,
        )
        for offset in offsets
    ]


def singles_fringe(d: DelaySetting, phases: Iterable[float], params: SourceParams,
                   detector: int = 1) -> TraceResult:
    """Singles rate at a fixed envelope delay while the piezo steps the phase."""
    delays = [
        DelaySetting(
            coarse_half_roundtrips=d.coarse_half_roundtrips,
            intermediate=d.intermediate,
            fine_phase=float(phi),
            phase_mode=PhaseMode.LOCKED,
        )
        for phi in phases
    ]
    kind = TraceKind.SINGLES_DET1 if detector == 1 else TraceKind.SINGLES_DET2
    return scan_trace(kind, delays, params)


def hom_visibility(trace: TraceResult, params: Optional[SourceParams] = None) -> Tuple[float, float]:
    """V = (P_max - P_min)/P_max with P_max the mean over points outside the dip kernel."""
    if trace.kind not in (TraceKind.POSTSELECTED, TraceKind.COINCIDENCE):
        raise ValueError(f"visibility needs a coincidence trace, got {trace.kind.value}")
    params = params or SourceParams()
    dips = np.asarray(f_ee(2.0 * trace.delta_t(params), params))
    baseline = dips < BASELINE_THRESHOLD
    if not np.any(baseline):
        raise ValueError("trace has no baseline points outside the dip; cannot estimate P_max")

    p_max = float(np.mean(trace.values[baseline]))
    sigma_max = float(np.sqrt(np.sum(trace.sigmas[baseline] ** 2)) / np.count_nonzero(baseline))
    i_min = int(np.argmin(trace.values))
    p_min = float(trace.values[i_min])
    sigma_min = float(trace.sigmas[i_min])
    if p_max <= 0:
        raise ValueError(f"baseline estimate {p_max} is not positive")

    visibility = (p_max - p_min) / p_max
    sigma = math.hypot(sigma_min / p_max, p_min * sigma_max / p_max ** 2)
    return visibility, sigma


@dataclass(frozen=True)
class VisibilityRow:
    delay_rt: Fraction
    delta_t: float
    visibility: float


def parse_round_trips(text: Union[str, Fraction, int, float]) -> Fraction:
    """Parse '1/2', '42', 0.5 into an exact number of effective round trips."""
    try:
        return Fraction(text).limit_denominator(1000) if isinstance(text, float) else Fraction(text)
    except (ValueError, ZeroDivisionError) as e:
        raise ValueError(f"invalid round-trip delay {text!r}: {e}") from e


def visibility_table(delays_rt: Iterable[Union[str, Fraction, int, float]],
                     params: SourceParams) -> List[VisibilityRow]:
    """Theoretical HOM visibility f_ee(2dt) for delays given in effective round trips T."""
    rows = []
    for raw in delays_rt:
        delay_rt = parse_round_trips(raw)
        delta_t = float(delay_rt) * params.round_trip
        rows.append(VisibilityRow(delay_rt=delay_rt, delta_t=delta_t, visibility=f_ee(2.0 * delta_t, params)))
    return rows


def compose_delay(coarse: int, stage_position: float, piezo_position: float, params: SourceParams,
                  locked_phase: Optional[float] = None) -> DelaySetting:
    """Combine fibre, translation stage and piezo into one delay setting.

    Stage and piezo are double-pass mirror pairs, so a displacement x adds 2x of
    path. The piezo contributes phase only.
    """
    intermediate = 2.0 * stage_position / SPEED_OF_LIGHT
    if locked_phase is not None:
        return DelaySetting(
            coarse_half_roundtrips=coarse,
            intermediate=intermediate,
            fine_phase=locked_phase % (2.0 * math.pi),
            phase_mode=PhaseMode.LOCKED,
        )
    piezo_phase = params.omega0 * 2.0 * piezo_position / SPEED_OF_LIGHT
    return DelaySetting(
        coarse_half_roundtrips=coarse,
        intermediate=intermediate,
        fine_phase=piezo_phase % (2.0 * math.pi),
        phase_mode=PhaseMode.DERIVED,
    )
