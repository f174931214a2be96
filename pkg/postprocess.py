"""Data reduction of time-tagged coincidences.

Start-stop histogram of detection time differences over +/-500 ns, 1.07 ns
windows over the comb peaks of one parity, background correction from the
floor between peaks, and rescaling so that points outside the dip sit at 0.5.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from eventfile import EventStream, get_format_chain
from eventfile.base import DEFAULT_CHUNK_RECORDS, PathLike
from observables import BASELINE_THRESHOLD, DelaySetting, TraceKind, TraceResult, hom_visibility
from physics import DEFAULT_TAIL_TOL, SourceParams, comb_weights, dip_kernel, f_ee

logger = logging.getLogger(__name__)

PS_PER_S = 1e12
DEFAULT_SPAN = 500e-9
DEFAULT_BIN_WIDTH = 107e-12  # 10 bins per window
DEFAULT_WINDOW_WIDTH = 1.07e-9
MIN_BASELINE_POINTS = 3
START_BLOCK = 1_000_000


@dataclass
class CoincidenceHistogram:
    """Counts of t(ch1) - t(ch0) in bins centred on origin + j*bin_width."""

    bin_width: float
    origin: float
    counts: np.ndarray
    span: float
    singles: Tuple[int, int] = (0, 0)
    header: Dict[str, Any] = field(default_factory=dict)
    acquisition_time: float = 0.0  # s

    @property
    def centers(self) -> np.ndarray:
        return self.origin + np.arange(self.counts.size) * self.bin_width

    def bin_index(self, delta: float) -> int:
        return int(math.floor((delta - self.origin) / self.bin_width + 0.5))

    def merge(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        """Bin-wise sum of two histograms with the same binning."""
        if (self.counts.size != other.counts.size or not math.isclose(self.bin_width, other.bin_width)
                or not math.isclose(self.origin, other.origin)):
            raise ValueError("cannot merge histograms with different binning")
        return CoincidenceHistogram(
            bin_width=self.bin_width,
            origin=self.origin,
            counts=self.counts + other.counts,
            span=self.span,
            singles=(self.singles[0] + other.singles[0], self.singles[1] + other.singles[1]),
            header=self.header,
            acquisition_time=self.acquisition_time + other.acquisition_time,
        )


def _empty_histogram(bin_width: float, span: float, header: Dict[str, Any]) -> CoincidenceHistogram:
    if bin_width <= 0 or span <= 0:
        raise ValueError(f"bin_width and span must be positive, got {bin_width}, {span}")
    half_bins = int(math.ceil(span / bin_width - 0.5))
    return CoincidenceHistogram(
        bin_width=bin_width,
        origin=-half_bins * bin_width,
        counts=np.zeros(2 * half_bins + 1, dtype=np.int64),
        span=span,
        header=dict(header),
    )


def _acquisition_time(header: Dict[str, Any], first, last) -> float:
    """Recorded duration from the header, else the span of the timestamps."""
    if header.get("duration"):
        return float(header["duration"])
    if first is None or last is None or np.size(first) == 0:
        return 0.0
    return float(np.max(last) - np.min(first)) / PS_PER_S


def _pair_differences(starts: np.ndarray, stops: np.ndarray, span_ps: float) -> np.ndarray:
    """All stop - start differences within +/-span_ps (every stop, not only the first)."""
    lo = np.searchsorted(stops, starts - span_ps, side="left")
    hi = np.searchsorted(stops, starts + span_ps, side="right")
    n = hi - lo
    total = int(n.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    first = np.repeat(lo, n)
    offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    return stops[first + offsets] - np.repeat(starts, n)


def _accumulate(h: CoincidenceHistogram, starts: np.ndarray, stops: np.ndarray) -> None:
    span_ps = h.span * PS_PER_S
    bin_ps = h.bin_width * PS_PER_S
    half_bins = (h.counts.size - 1) // 2
    for i in range(0, starts.size, START_BLOCK):
        diffs = _pair_differences(starts[i:i + START_BLOCK], stops, span_ps)
        if diffs.size == 0:
            continue
        index = np.floor(diffs / bin_ps + 0.5).astype(np.int64) + half_bins
        np.clip(index, 0, h.counts.size - 1, out=index)
        h.counts += np.bincount(index, minlength=h.counts.size)


def histogram(events: EventStream, bin_width: float = DEFAULT_BIN_WIDTH,
              span: float = DEFAULT_SPAN) -> CoincidenceHistogram:
    """Start-stop histogram: every channel-0 event against every channel-1 event within +/-span."""
    if not events.is_sorted():
        raise ValueError("events must be sorted by timestamp")
    h = _empty_histogram(bin_width, span, events.header)
    starts = events.timestamps[events.channels == 0]
    stops = events.timestamps[events.channels == 1]
    _accumulate(h, starts, stops)
    h.singles = (int(starts.size), int(stops.size))
    h.acquisition_time = _acquisition_time(events.header, events.timestamps[:1], events.timestamps[-1:])
    return h


def histogram_file(path: PathLike, bin_width: float = DEFAULT_BIN_WIDTH, span: float = DEFAULT_SPAN,
                   chunk_records: int = DEFAULT_CHUNK_RECORDS) -> CoincidenceHistogram:
    """Streaming variant of ``histogram`` over an event file.

    Starts closer than ``span`` to the end of the data read so far are held
    back, together with the stops they may still pair with, until the next
    chunk arrives.
    """
    fmt = get_format_chain().detect(path)
    h = _empty_histogram(bin_width, span, fmt.read_header(path))
    span_ps = span * PS_PER_S  # same bound as _accumulate
    carry = EventStream.empty()
    singles = [0, 0]
    first_stamp = last_stamp = None
    n_records = 0

    for chunk in fmt.iter_chunks(path, chunk_records):
        if not chunk.is_sorted() or (last_stamp is not None and chunk.timestamps[0] < last_stamp):
            raise ValueError(f"{path}: events must be sorted by timestamp")
        if first_stamp is None:
            first_stamp = int(chunk.timestamps[0])
        last_stamp = int(chunk.timestamps[-1])
        n_records += len(chunk)
        counts = chunk.counts_per_channel()
        singles[0] += counts[0]
        singles[1] += counts[1]

        # carry holds deferred starts and the stops they may still pair with
        channels = np.concatenate([carry.channels, chunk.channels])
        stamps = np.concatenate([carry.timestamps, chunk.timestamps])
        horizon = last_stamp - span_ps

        ready = (channels == 0) & (stamps < horizon)
        _accumulate(h, stamps[ready], stamps[channels == 1])

        keep = ((channels == 0) & (stamps >= horizon)) | ((channels == 1) & (stamps >= horizon - span_ps))
        carry = EventStream(channels[keep], stamps[keep])

    starts = carry.timestamps[carry.channels == 0]
    stops = carry.timestamps[carry.channels == 1]
    _accumulate(h, starts, stops)
    h.singles = (singles[0], singles[1])
    h.acquisition_time = _acquisition_time(h.header, first_stamp, last_stamp)
    if n_records == 0:
        logger.warning(f"{path}: no events")
    return h


@dataclass(frozen=True)
class PeakSelection:
    """Windows of ``window_width`` centred on comb peaks of one parity."""

    parity: str  # "even", "odd" or "all"
    window_width: float
    peak_centers: np.ndarray

    @classmethod
    def default(cls, params: SourceParams, parity: str = "even", window_width: float = DEFAULT_WINDOW_WIDTH,
                span: float = DEFAULT_SPAN) -> "PeakSelection":
        """Peaks at k*T_p (k even, odd or any) whose window fits inside +/-span."""
        if parity not in ("even", "odd", "all"):
            raise ValueError(f"parity must be 'even', 'odd' or 'all', got {parity!r}")
        tp = params.t_round_physical
        k_max = int(math.floor((span - 0.5 * window_width) / tp))
        k = np.arange(-k_max, k_max + 1)
        if parity == "even":
            k = k[k % 2 == 0]
        elif parity == "odd":
            k = k[k % 2 != 0]
        return cls(parity=parity, window_width=window_width, peak_centers=k * tp)

    @property
    def total_width(self) -> float:
        return self.peak_centers.size * self.window_width

    def contains(self, positions: np.ndarray) -> np.ndarray:
        """True where a position lies in some half-open window [c - w/2, c + w/2)."""
        positions = np.asarray(positions, dtype=float)
        centers = np.sort(self.peak_centers)
        inside = np.zeros(positions.shape, dtype=bool)
        if centers.size == 0:
            return inside
        half = 0.5 * self.window_width
        below = np.searchsorted(centers, positions, side="right") - 1
        for i in (below, below + 1):
            c = centers[np.clip(i, 0, centers.size - 1)]
            inside |= (positions >= c - half) & (positions < c + half)
        return inside


def _window_mask(h: CoincidenceHistogram, sel: PeakSelection) -> np.ndarray:
    """Bins whose centre lies in a window, decided on the bin lattice."""
    mask = np.zeros(h.counts.size, dtype=bool)
    half = 0.5 * sel.window_width
    for c in sel.peak_centers:
        lo = int(math.ceil(round((c - half - h.origin) / h.bin_width, 6)))
        hi = int(math.ceil(round((c + half - h.origin) / h.bin_width, 6)))
        mask[max(lo, 0):max(min(hi, h.counts.size), 0)] = True
    return mask


class PeakCounts(NamedTuple):
    coincidences: int
    accidentals: float


ACCIDENTAL_METHODS = ("floor", "singles")


def select_peaks(h: CoincidenceHistogram, sel: PeakSelection, params: Optional[SourceParams] = None,
                 method: str = "floor") -> PeakCounts:
    """Sum the windows and estimate the accidentals inside them.

    ``floor`` takes the mean density of bins outside the windows of every comb
    peak (both parities); ``singles`` uses N0*N1/T, which stays unbiased when
    detector jitter leaves no empty floor between peaks.
    """
    if sel.peak_centers.size == 0:
        raise ValueError("peak selection is empty")
    if method not in ACCIDENTAL_METHODS:
        raise ValueError(f"accidental method must be one of {ACCIDENTAL_METHODS}, got {method!r}")
    half = 0.5 * sel.window_width
    if np.any(np.abs(sel.peak_centers) + half > h.span * (1 + 1e-12)):
        raise ValueError("peak windows extend beyond the histogram span")

    selected = _window_mask(h, sel)
    coincidences = int(h.counts[selected].sum())
    selected_width = np.count_nonzero(selected) * h.bin_width

    if method == "singles":
        if h.acquisition_time <= 0:
            raise ValueError("singles-based accidentals need a positive acquisition time")
        rate = h.singles[0] * h.singles[1] / h.acquisition_time
        return PeakCounts(coincidences, float(rate * selected_width))

    params = params or SourceParams()
    every_peak = PeakSelection.default(params, "all", sel.window_width, h.span)
    floor = ~(_window_mask(h, every_peak) | selected)
    if not np.any(floor):
        logger.warning("No floor bins between peaks; accidental estimate set to 0")
        return PeakCounts(coincidences, 0.0)
    density = h.counts[floor].sum() / (np.count_nonzero(floor) * h.bin_width)
    return PeakCounts(coincidences, float(density * selected_width))


class ReducedPoint(NamedTuple):
    p: float
    sigma: float
    clamped: bool


def normalize_point(coincidences: float, accidentals: float, baseline_calib: float) -> ReducedPoint:
    """p = 0.5 (N - accidentals)/baseline, sigma = 0.5 sqrt(N)/baseline."""
    if baseline_calib <= 0:
        raise ValueError(f"baseline calibration must be positive, got {baseline_calib}")
    corrected = coincidences - accidentals
    clamped = corrected < 0
    if clamped:
        logger.warning(f"Background-corrected count {corrected:.1f} is negative; clamped to 0")
        corrected = 0.0
    p = 0.5 * corrected / baseline_calib
    sigma = 0.5 * math.sqrt(max(coincidences, 0)) / baseline_calib
    return ReducedPoint(p, sigma, clamped)


def baseline_calibration(corrected_counts: Sequence[float]) -> float:
    """Mean corrected count over baseline delays (outside every dip)."""
    if len(corrected_counts) < MIN_BASELINE_POINTS:
        raise ValueError(
            f"need at least {MIN_BASELINE_POINTS} baseline points, got {len(corrected_counts)}"
        )
    value = float(np.mean(corrected_counts))
    if value <= 0:
        raise ValueError(f"baseline calibration {value} is not positive")
    return value


def peak_capture_fraction(params: SourceParams, parity: str, sel: PeakSelection,
                          tail_tol: float = DEFAULT_TAIL_TOL) -> float:
    """Share of a comb's squared amplitude whose peaks fall inside the selection."""
    weights = comb_weights(parity, params, tail_tol)
    mass = weights.amplitudes ** 2
    return float(mass[sel.contains(weights.delays)].sum() / mass.sum())


def predicted_same_pol_counts(n_pairs: float, delay: DelaySetting, params: SourceParams,
                              sel: PeakSelection, tail_tol: float = DEFAULT_TAIL_TOL,
                              jitter_sigma: float = 0.0) -> float:
    """Expected HH/VV (odd-comb) opposite-channel counts inside the selection.

    With Gaussian jitter per detector the difference spreads by sqrt(2)*sigma
    and only erf(w/(4 sigma)) of each peak stays inside its window.
    """
    share = 0.5 * math.sin(delay.phase(params)) ** 2
    captured = peak_capture_fraction(params, "odd", sel, tail_tol)
    if jitter_sigma > 0:
        captured *= math.erf(sel.window_width / (4.0 * jitter_sigma))
    return n_pairs * share * captured


def half_roundtrip_reduce(h: CoincidenceHistogram, params: SourceParams, predicted_same_pol: float,
                          baseline_calib: float, sel: Optional[PeakSelection] = None) -> ReducedPoint:
    """Odd-parity reduction near dt = T_p: subtract HH/VV counts, rescale to 0.5."""
    sel = sel or PeakSelection.default(params, "odd", span=h.span)
    counts = select_peaks(h, sel, params)
    return normalize_point(counts.coincidences, counts.accidentals + predicted_same_pol, baseline_calib)


def windowed_postselected(delay: DelaySetting, params: SourceParams, sel: PeakSelection,
                          tail_tol: float = DEFAULT_TAIL_TOL) -> float:
    """Postselected coincidence expected from the finite window set.

    Equals ``postselected_coincidence`` when the windows hold the whole comb;
    at large delays the +/-span cut removes more of the uncorrelated comb tails
    than of the interfering overlap, which raises the apparent visibility.
    """
    weights = comb_weights("even", params, tail_tol)
    tp = params.t_round_physical
    d = delay.delta_t(params)
    k = weights.multiples
    w = weights.amplitudes
    mass_a = np.sum(w[sel.contains(k * tp - d)] ** 2)
    mass_b = np.sum(w[sel.contains(d - k * tp)] ** 2)

    kernel = dip_kernel(params)
    reach = int(math.ceil(kernel.half_width / tp)) + 2
    centre = int(round(2 * d / tp))
    overlap = 0.0
    for s in range(centre - reach, centre + reach + 1):
        if s % 2:
            continue
        h_value = kernel(2 * d - s * tp)
        if h_value == 0:
            continue
        partner = weights.amplitude_at(s - k)
        inside = sel.contains(0.5 * (2 * k - s) * tp)
        overlap += h_value * float(np.sum(w * partner * inside))

    denominator = mass_a + mass_b
    if denominator == 0:
        raise ValueError("selection captures none of the even comb at this delay")
    return 0.5 * (1.0 - 2.0 * overlap / denominator)


class FitConvergenceError(Exception):
    """The fringe fit did not converge."""

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        self.diagnostics = diagnostics
        super().__init__(f"{message} (diagnostics: {diagnostics})")


class FringeFit(NamedTuple):
    visibility: float
    phase0: float
    reduced_chi2: float
    amplitude: float


def _fringe_model(phi, amplitude, visibility, phase0):
    return amplitude * (1.0 + visibility * np.cos(phi - phase0))


def fit_fringe(singles_vs_phase: Iterable[Tuple[float, float]]) -> FringeFit:
    """Fit A(1 + V cos(phi - phi0)) with Poisson weights sqrt(count)."""
    data = np.asarray(list(singles_vs_phase), dtype=float)
    if data.ndim != 2 or data.shape[0] < 8:
        raise ValueError(f"need at least 8 (phase, count) points, got {len(data)}")
    phi, counts = data[:, 0], data[:, 1]
    n = phi.size
    if (phi.max() - phi.min()) * n / (n - 1) < 2 * math.pi - 1e-9:
        raise ValueError("phase points must cover at least one period")

    sigma = np.sqrt(np.maximum(counts, 1.0))
    amplitude0 = float(np.mean(counts))
    if counts.max() + counts.min() <= 0:
        raise ValueError("fringe has no counts")
    visibility0 = float((counts.max() - counts.min()) / (counts.max() + counts.min()))
    phase_guess = float(np.angle(np.sum((counts - amplitude0) * np.exp(1j * phi))))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        try:
            popt, _ = curve_fit(
                _fringe_model, phi, counts,
                p0=[amplitude0, visibility0, phase_guess],
                sigma=sigma, absolute_sigma=True, method="lm", maxfev=5000,
            )
        except RuntimeError as e:
            raise FitConvergenceError(
                "fringe fit did not converge",
                {"points": n, "initial": [amplitude0, visibility0, phase_guess], "error": str(e)},
            ) from e

    amplitude, visibility, phase0 = (float(v) for v in popt)
    if visibility < 0:
        visibility, phase0 = -visibility, phase0 + math.pi
    if visibility > 1:
        logger.warning(f"Fitted visibility {visibility:.4f} above 1; clipped")
        visibility = 1.0
    phase0 = (phase0 + math.pi) % (2 * math.pi) - math.pi
    residuals = (counts - _fringe_model(phi, *popt)) / sigma
    reduced_chi2 = float(np.sum(residuals ** 2) / max(n - 3, 1))
    return FringeFit(visibility, phase0, reduced_chi2, amplitude)


@dataclass
class AnalysisResult:
    """Reduced points of a set of histograms plus a visibility per coarse delay."""

    points: List[Tuple[DelaySetting, PeakCounts, float, ReducedPoint]]
    trace: TraceResult
    visibilities: Dict[int, Tuple[float, float]]
    baselines: Dict[int, float]


def reduce_trace(points: Sequence[Tuple[DelaySetting, ReducedPoint]]) -> TraceResult:
    return TraceResult(
        delays=[d for d, _ in points],
        values=[r.p for _, r in points],
        sigmas=[r.sigma for _, r in points],
        kind=TraceKind.POSTSELECTED,
    )


def reduce_histograms(histograms: Sequence[CoincidenceHistogram], delays: Sequence[DelaySetting],
                      params: SourceParams, parity: str = "even",
                      window_width: float = DEFAULT_WINDOW_WIDTH,
                      tail_tol: float = DEFAULT_TAIL_TOL,
                      accidental_method: str = "floor") -> AnalysisResult:
    """Reduce one histogram per delay into a normalised trace.

    Points are grouped by coarse delay; each group needs at least three
    baseline points (f_ee < 1e-6) to fix its 0.5 level. With odd parity the
    predicted HH/VV counts are subtracted first, using the mean singles count
    as the pair-number estimate and the jitter recorded in the header.
    """
    if len(histograms) != len(delays):
        raise ValueError("one delay setting per histogram required")
    groups: Dict[int, List[int]] = {}
    corrected: List[float] = []
    peak_counts: List[PeakCounts] = []
    predicted: List[float] = []
    for i, (h, d) in enumerate(zip(histograms, delays)):
        sel = PeakSelection.default(params, parity, window_width, h.span)
        counts = select_peaks(h, sel, params, accidental_method)
        same_pol = 0.0
        if parity == "odd":
            same_pol = predicted_same_pol_counts(
                0.5 * sum(h.singles), d, params, sel, tail_tol, float(h.header.get("jitter_sigma") or 0.0)
            )
        peak_counts.append(counts)
        predicted.append(same_pol)
        corrected.append(counts.coincidences - counts.accidentals - same_pol)
        groups.setdefault(d.coarse_half_roundtrips, []).append(i)

    baselines: Dict[int, float] = {}
    for coarse, members in groups.items():
        outside = [
            corrected[i] for i in members
            if f_ee(2.0 * delays[i].delta_t(params), params) < BASELINE_THRESHOLD
        ]
        try:
            baselines[coarse] = baseline_calibration(outside)
        except ValueError as e:
            raise ValueError(f"coarse delay {coarse} T_p: {e}") from e
        logger.info(f"Coarse delay {coarse} T_p: baseline {baselines[coarse]:.1f} counts from {len(outside)} points")

    points = []
    for i, d in enumerate(delays):
        counts = peak_counts[i]
        reduced = normalize_point(
            counts.coincidences, counts.accidentals + predicted[i], baselines[d.coarse_half_roundtrips]
        )
        points.append((d, counts, predicted[i], reduced))

    trace = reduce_trace([(d, r) for d, _, _, r in points])
    visibilities = {}
    for coarse, members in groups.items():
        sub = reduce_trace([(points[i][0], points[i][3]) for i in members])
        visibilities[coarse] = hom_visibility(sub, params)
    return AnalysisResult(points=points, trace=trace, visibilities=visibilities, baselines=baselines)
