"""Closed-form amplitude and envelope functions of the cavity-enhanced biphoton comb.

The source emits an even comb (orthogonally polarised pairs, detection time
differences at even multiples of the physical round trip T_p) and an odd comb
(co-polarised NOON pairs at odd multiples). Everything here is a pure function
of ``SourceParams``; times are in seconds, frequencies in Hz.

Decay envelopes use the cavity linewidth (666 kHz), not the mode linewidth
(429 kHz): only the cavity value reproduces the published visibilities, e.g.
e^{-x}(1+x) = 0.573 at 42 round trips with x = 2*pi*666e3*347.76e-9.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator
from scipy.signal import correlate, correlation_lags, fftconvolve

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0  # m/s
TRIANGLE_CONSTANT = 2.783  # zero crossing of the sinc^2 dip, in units of 1/(pi*dnu)
DEFAULT_TAIL_TOL = 1e-9
FILTER_TABLE_POINTS = 4096

ArrayLike = Union[float, np.ndarray]


class SourceParams(BaseModel):
    """Physical constants of the source."""

    gamma_cavity: float = Field(default=666e3, gt=0)  # Hz, used in every decay envelope
    gamma_mode: float = Field(default=429e3, gt=0)  # Hz, coherence-time report only
    fsr: float = Field(default=120.8e6, gt=0)  # Hz
    t_round_physical: float = Field(default=4.14e-9, gt=0)  # s, T_p
    lambda0: float = Field(default=795e-9, gt=0)  # m
    pm_bandwidth: float = Field(default=100e9, gt=0)  # Hz, FWHM of sinc^2
    filter_fwhm: Optional[float] = Field(default=None, gt=0)  # Hz, None = no filter
    round_trip_rtol: float = Field(default=1e-3, gt=0)

    class Config:
        frozen = True
        extra = "forbid"

    @validator("gamma_mode")
    def mode_narrower_than_cavity(cls, v, values):
        """Mode linewidth cannot exceed the cavity linewidth."""
        cavity = values.get("gamma_cavity")
        if cavity is not None and v > cavity:
            raise ValueError(f"gamma_mode ({v} Hz) exceeds gamma_cavity ({cavity} Hz)")
        return v

    @root_validator(skip_on_failure=True)
    def round_trip_matches_fsr(cls, values):
        """T_p must equal 1/(2 FSR) within round_trip_rtol."""
        expected = 1.0 / (2.0 * values["fsr"])
        mismatch = abs(values["t_round_physical"] - expected) / expected
        if mismatch > values["round_trip_rtol"]:
            raise ValueError(
                f"t_round_physical={values['t_round_physical']} s inconsistent with "
                f"fsr={values['fsr']} Hz (relative mismatch {mismatch:.2e})"
            )
        return values

    @property
    def round_trip(self) -> float:
        """Effective round trip T = 2 T_p."""
        return 2.0 * self.t_round_physical

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi * SPEED_OF_LIGHT / self.lambda0

    @property
    def coherence_time(self) -> float:
        """Heralded single-photon coherence time 1/(pi gamma_mode)."""
        return 1.0 / (math.pi * self.gamma_mode)

    @property
    def mode_count(self) -> float:
        """Number of comb lines inside the phase-matching bandwidth."""
        return self.pm_bandwidth / self.fsr

    @property
    def dip_half_width(self) -> float:
        """Zero crossing of the unfiltered triangular dip kernel."""
        return TRIANGLE_CONSTANT / (math.pi * self.pm_bandwidth)


def _as_output(values: np.ndarray) -> ArrayLike:
    return float(values) if np.ndim(values) == 0 else values


def h_triangular(t: ArrayLike, params: SourceParams) -> ArrayLike:
    """Unfiltered dip shape max(0, 1 - pi*dnu*|t|/2.783)."""
    t = np.abs(np.asarray(t, dtype=float))
    h = np.clip(1.0 - math.pi * params.pm_bandwidth * t / TRIANGLE_CONSTANT, 0.0, None)
    return _as_output(h)


@dataclass(frozen=True)
class DipKernel:
    """Single-dip shape h(t); triangular in closed form or tabulated when filtered."""

    half_width: float
    shape: str  # "triangular" or "filtered"
    pm_bandwidth: float
    samples: Optional[Tuple[np.ndarray, np.ndarray]] = None  # (|t| grid, h) for t >= 0

    def __call__(self, t: ArrayLike) -> ArrayLike:
        t = np.abs(np.asarray(t, dtype=float))
        if self.shape == "triangular":
            h = np.clip(1.0 - math.pi * self.pm_bandwidth * t / TRIANGLE_CONSTANT, 0.0, None)
        else:
            grid, table = self.samples
            h = np.interp(t, grid, table, right=0.0)
        return _as_output(h)


@lru_cache(maxsize=32)
def dip_kernel(params: SourceParams) -> DipKernel:
    """Build the dip kernel for ``params``.

    With a filter the triangle is convolved with the two-sided exponential
    e^{-pi*fwhm*|t|} (autocorrelation of a single-pole filter response, i.e. a
    Lorentzian spectrum) and renormalised to h(0) = 1. The table holds
    FILTER_TABLE_POINTS samples on t >= 0 over four broadened half widths.
    """
    tri_half = params.dip_half_width
    if params.filter_fwhm is None:
        return DipKernel(half_width=tri_half, shape="triangular", pm_bandwidth=params.pm_bandwidth)

    tau = 1.0 / (math.pi * params.filter_fwhm)
    extent = 4.0 * (tri_half + tau)
    t = np.linspace(-extent, extent, 2 * FILTER_TABLE_POINTS - 1)
    triangle = h_triangular(t, params)
    response = np.exp(-np.abs(t) / tau)
    broadened = fftconvolve(triangle, response, mode="same")
    half = broadened[FILTER_TABLE_POINTS - 1:]
    half = np.clip(half / half[0], 0.0, 1.0)
    half = np.minimum.accumulate(half)
    grid = t[FILTER_TABLE_POINTS - 1:]
    logger.debug(f"Tabulated filtered dip kernel: tau={tau:.3e} s, extent={extent:.3e} s")
    return DipKernel(
        half_width=extent,
        shape="filtered",
        pm_bandwidth=params.pm_bandwidth,
        samples=(grid, half),
    )


@dataclass(frozen=True)
class CombWeights:
    """Truncated comb amplitudes e^{-pi*gamma*|k|*T_p} at delays k*T_p."""

    parity: str
    indices: np.ndarray  # m
    multiples: np.ndarray  # k = 2m (even) or 2m+1 (odd)
    amplitudes: np.ndarray
    t_round_physical: float
    decay_per_multiple: float  # pi*gamma*T_p

    @property
    def entries(self) -> List[Tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.amplitudes.tolist()))

    @property
    def delays(self) -> np.ndarray:
        return self.multiples * self.t_round_physical

    @property
    def extent(self) -> float:
        """Largest |delay| kept after truncation."""
        return float(np.max(np.abs(self.multiples))) * self.t_round_physical

    def amplitude_at(self, k: np.ndarray) -> np.ndarray:
        """Amplitude for integer multiples ``k``; zero outside the truncated comb."""
        k = np.asarray(k)
        kmax = int(np.max(np.abs(self.multiples)))
        amp = np.exp(-self.decay_per_multiple * np.abs(k))
        return np.where(np.abs(k) <= kmax, amp, 0.0)


def comb_weights(parity: str, params: SourceParams, tail_tol: float = DEFAULT_TAIL_TOL) -> CombWeights:
    """Even or odd comb amplitudes, truncated once the dropped squared mass < tail_tol."""
    if not 0.0 < tail_tol < 1.0:
        raise ValueError(f"tail_tol must lie in (0, 1), got {tail_tol}")
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")

    b = math.pi * params.gamma_cavity * params.t_round_physical
    q = math.exp(-4.0 * b)
    # squared-mass tail ratio beyond index M: even 2q^{M+1}/(1+q), odd q^{M+1}
    prefactor = 2.0 / (1.0 + q) if parity == "even" else 1.0
    m_max = max(0, math.ceil(math.log(tail_tol / prefactor) / math.log(q)) - 1)
    while prefactor * q ** (m_max + 1) >= tail_tol:
        m_max += 1

    if parity == "even":
        indices = np.arange(-m_max, m_max + 1)
        multiples = 2 * indices
    else:
        indices = np.arange(-m_max - 1, m_max + 1)
        multiples = 2 * indices + 1
    amplitudes = np.exp(-b * np.abs(multiples))
    return CombWeights(
        parity=parity,
        indices=indices,
        multiples=multiples,
        amplitudes=amplitudes,
        t_round_physical=params.t_round_physical,
        decay_per_multiple=b,
    )


def _kernel_comb_sum(delta_t: np.ndarray, params: SourceParams, scale: float, odd_only: bool) -> np.ndarray:
    """Sum_m h(scale*(delta_t - m*T_p)) over all m (or odd m only)."""
    kernel = dip_kernel(params)
    tp = params.t_round_physical
    reach = int(math.ceil(kernel.half_width / (scale * tp))) + 1
    nearest = np.rint(delta_t / tp).astype(np.int64)
    total = np.zeros_like(delta_t)
    for offset in range(-reach, reach + 1):
        m = nearest + offset
        contribution = np.asarray(kernel(scale * (delta_t - m * tp)))
        if odd_only:
            contribution = np.where(np.mod(m, 2) == 1, contribution, 0.0)
        total += contribution
    return total


def f_ee(two_delta_t: ArrayLike, params: SourceParams) -> ArrayLike:
    """HOM dip function e^{-2pi*gamma|dt|}(1+2pi*gamma|dt|) * sum_m h(2(dt - m*T_p)).

    The argument is the relative shift 2*dt of the two detection amplitudes.
    Normalised so f_ee(0) = 1.
    """
    delta_t = 0.5 * np.asarray(two_delta_t, dtype=float)
    x = 2.0 * math.pi * params.gamma_cavity * np.abs(delta_t)
    envelope = np.exp(-x) * (1.0 + x)
    value = envelope * _kernel_comb_sum(delta_t, params, scale=2.0, odd_only=False)
    return _as_output(np.clip(value, 0.0, 1.0))


def f_eo_envelope(delta_t: ArrayLike, params: SourceParams) -> ArrayLike:
    """Singles-fringe envelope e^{-pi*gamma|dt|}(1+pi*gamma|dt|) * sum_{m odd} h(dt - m*T_p)."""
    delta_t = np.asarray(delta_t, dtype=float)
    x = math.pi * params.gamma_cavity * np.abs(delta_t)
    envelope = np.exp(-x) * (1.0 + x)
    value = envelope * _kernel_comb_sum(delta_t, params, scale=1.0, odd_only=True)
    return _as_output(np.clip(value, 0.0, 1.0))


class OracleConvergenceError(Exception):
    """Halving the oracle step changed the result by more than the tolerance."""

    def __init__(self, kind: str, shift: float, coarse: float, fine: float, step: float):
        self.kind = kind
        self.shift = shift
        self.coarse = coarse
        self.fine = fine
        self.step = step
        super().__init__(
            f"numeric f_{kind}({shift:.6e} s) did not converge: {coarse:.9f} at step "
            f"{step:.3e} s vs {fine:.9f} at step {step / 2:.3e} s"
        )


class OracleGrid(BaseModel):
    """Resolution settings for ``numeric_f_oracle``."""

    step: Optional[float] = Field(default=None, gt=0)  # s; None = 1/(20*dnu)
    tail_tol: float = Field(default=DEFAULT_TAIL_TOL, gt=0, lt=1)
    tolerance: float = Field(default=1e-6, gt=0)
    filter_decay_lengths: float = Field(default=30.0, gt=0)


ORACLE_PAIRS = {"ee": ("even", "even"), "eo": ("even", "odd"), "oo": ("odd", "odd")}


def rect_width(params: SourceParams) -> float:
    """Full width of the rectangular two-photon amplitude Phi.

    Its autocorrelation is a triangle reaching zero at 2.783/(pi*dnu).
    """
    return params.dip_half_width


def _phi_autocorrelation(params: SourceParams, step: float, decay_lengths: float) -> Tuple[np.ndarray, np.ndarray]:
    """Sampled Phi (rect, optionally filtered) and its autocorrelation R on a lag grid."""
    width = rect_width(params)
    n = max(1, int(math.ceil(width / step)))
    ds = width / n  # rect edges fall on grid points
    phi = np.ones(n)
    if params.filter_fwhm is not None:
        tau = 1.0 / (math.pi * params.filter_fwhm)
        t = (np.arange(int(math.ceil(decay_lengths * tau / ds))) + 0.5) * ds
        phi = fftconvolve(phi, np.exp(-t / tau)) * ds
    phi = np.pad(phi, 1)
    r = correlate(phi, phi, mode="full") * ds
    lags = correlation_lags(phi.size, phi.size, mode="full") * ds
    return lags, r


def _comb_overlap(first: CombWeights, second: CombWeights, shift: float,
                  lags: np.ndarray, r: np.ndarray, tp: float) -> float:
    """Integral of A_first(s + shift) * A_second(s) ds for A = F (x) Phi."""
    s = correlate(first.amplitudes, second.amplitudes, mode="full")
    offsets = correlation_lags(first.amplitudes.size, second.amplitudes.size, mode="full")
    separation = (first.multiples[0] - second.multiples[0]) + 2 * offsets
    terms = np.interp(shift - separation * tp, lags, r, left=0.0, right=0.0)
    return float(np.dot(s, terms))


def _numeric_f(kind: str, shift: float, params: SourceParams, step: float, grid: OracleGrid) -> float:
    first_parity, second_parity = ORACLE_PAIRS[kind]
    first = comb_weights(first_parity, params, grid.tail_tol)
    second = comb_weights(second_parity, params, grid.tail_tol)
    lags, r = _phi_autocorrelation(params, step, grid.filter_decay_lengths)
    tp = params.t_round_physical
    value = _comb_overlap(first, second, shift, lags, r, tp)
    norm = math.sqrt(
        _comb_overlap(first, first, 0.0, lags, r, tp) * _comb_overlap(second, second, 0.0, lags, r, tp)
    )
    return value / norm


def numeric_f_oracle(kind: str, shift: float, params: SourceParams,
                     grid: Optional[OracleGrid] = None) -> float:
    """Evaluate f_ee / f_eo / f_oo from their defining overlap integrals.

    The comb part is a discrete correlation of the truncated comb amplitudes,
    the Phi part a sampled autocorrelation; the result is normalised by the
    zero-shift overlaps. Used as an independent check of the closed forms.
    """
    if kind not in ORACLE_PAIRS:
        raise ValueError(f"kind must be one of {sorted(ORACLE_PAIRS)}, got {kind!r}")
    grid = grid or OracleGrid()
    max_step = 1.0 / (20.0 * params.pm_bandwidth)
    step = grid.step or max_step
    if step > max_step:
        raise ValueError(f"oracle step {step:.3e} s coarser than 1/(20*dnu) = {max_step:.3e} s")

    coarse = _numeric_f(kind, shift, params, step, grid)
    fine = _numeric_f(kind, shift, params, step / 2.0, grid)
    if abs(fine - coarse) > grid.tolerance:
        raise OracleConvergenceError(kind, shift, coarse, fine, step)
    return fine
