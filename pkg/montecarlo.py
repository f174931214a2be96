"""Synthetic time-tagged detections from the biphoton comb model.

Each pair is even-comb (H and V photon) or odd-comb (NOON pair) with
probability 1/2. For even pairs the signed detection time difference
tau = t(ch1) - t(ch0) has opposite-channel density |a - b|^2 and same-channel
density |a + b|^2, where a = A_e(tau + dt) and b = A_e(dt - tau). Their sum is
2(a^2 + b^2), so tau is drawn from a^2 + b^2 (a shifted or mirrored draw from
|A_e|^2) and the channel outcome from (a - b)^2 / (2(a^2 + b^2)).
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, Field

from eventfile import EventStream
from observables import DelaySetting, coincidence_probability
from physics import DEFAULT_TAIL_TOL, CombWeights, SourceParams, comb_weights, rect_width

logger = logging.getLogger(__name__)

PS_PER_S = 1e12
INT64_MAX = np.iinfo(np.int64).max


class CombSupportError(ValueError):
    """The delay lies outside the truncated comb, so its tail tolerance no longer holds."""


class TimestampOverflowError(OverflowError):
    """Timestamps would exceed the 64-bit picosecond counter."""


class SimConfig(BaseModel):
    """Monte-Carlo run settings."""

    params: SourceParams = Field(default_factory=SourceParams)
    delay: DelaySetting = Field(default_factory=DelaySetting)
    pair_rate: float = Field(default=40e3, ge=0)  # pairs/s, ~40 kHz singles per detector
    background_rate: float = Field(default=100.0, ge=0)  # events/s per channel
    jitter_sigma: float = Field(default=350e-12, ge=0)  # s
    duration: float = Field(default=7.5, ge=0)  # s
    seed: int = 0
    chunk_duration: float = Field(default=1.0, gt=0)  # s, RNG substream granularity
    workers: int = Field(default=1, ge=1)
    tail_tol: float = Field(default=DEFAULT_TAIL_TOL, gt=0, lt=1)

    class Config:
        extra = "forbid"

    def header(self) -> Dict:
        """JSON-safe snapshot stored with the generated events."""
        snapshot = json.loads(self.json())
        snapshot["format"] = "combhom-events"
        return snapshot


class PairSample(NamedTuple):
    """First record on channel_a at t, second on channel_b at t + tau."""

    channel_a: np.ndarray
    channel_b: np.ndarray
    tau: np.ndarray  # s
    even: np.ndarray  # bool, True for even-comb pairs


def _draw_comb_positions(weights: CombWeights, n: int, width: float, rng: np.random.Generator) -> np.ndarray:
    """Positions distributed as |F (x) Phi|^2: peak from squared weights, uniform inside the rect."""
    probabilities = weights.amplitudes ** 2
    probabilities /= probabilities.sum()
    peaks = rng.choice(weights.multiples, size=n, p=probabilities)
    # inverse CDF of a uniform rect: linear in the random number
    return peaks * weights.t_round_physical + (rng.random(n) - 0.5) * width


def _comb_amplitude(weights: CombWeights, x: np.ndarray, width: float) -> np.ndarray:
    """A(x) for rect-shaped peaks that never overlap."""
    tp = weights.t_round_physical
    if weights.parity == "even":
        k = 2 * np.rint(x / (2 * tp)).astype(np.int64)
    else:
        k = 2 * np.rint((x / tp - 1) / 2).astype(np.int64) + 1
    # relative slack absorbs round-off for draws at the rect edge
    inside = np.abs(x - k * tp) <= 0.5 * width * (1 + 1e-9)
    return np.where(inside, weights.amplitude_at(k), 0.0)


def sample_pairs(n: int, delay: DelaySetting, params: SourceParams, rng: np.random.Generator,
                 tail_tol: float = DEFAULT_TAIL_TOL) -> PairSample:
    """Vectorised pair sampler; see the module docstring for the densities."""
    even_w = comb_weights("even", params, tail_tol)
    odd_w = comb_weights("odd", params, tail_tol)
    dt = delay.delta_t(params)
    if abs(dt) > even_w.extent:
        raise CombSupportError(
            f"delay {dt:.4e} s beyond the truncated comb extent {even_w.extent:.4e} s (tail_tol={tail_tol})"
        )
    phi = delay.phase(params)
    width = rect_width(params)

    channel_a = np.zeros(n, dtype=np.uint8)
    channel_b = np.zeros(n, dtype=np.uint8)
    tau = np.zeros(n)
    even = rng.random(n) < 0.5

    n_even = int(np.count_nonzero(even))
    x = _draw_comb_positions(even_w, n_even, width, rng)
    shifted = rng.random(n_even) < 0.5
    tau_even = np.where(shifted, x - dt, dt - x)
    a = _comb_amplitude(even_w, tau_even + dt, width)
    b = _comb_amplitude(even_w, dt - tau_even, width)
    p_opposite = (a - b) ** 2 / (2.0 * (a ** 2 + b ** 2))
    opposite_even = rng.random(n_even) < p_opposite

    n_odd = n - n_even
    tau_odd = _draw_comb_positions(odd_w, n_odd, width, rng)
    opposite_odd = rng.random(n_odd) < math.sin(phi) ** 2

    opposite = np.empty(n, dtype=bool)
    opposite[even] = opposite_even
    opposite[~even] = opposite_odd
    tau[even] = tau_even
    tau[~even] = tau_odd

    bunched_channel = (rng.random(n) < 0.5).astype(np.uint8)
    channel_a[:] = np.where(opposite, 0, bunched_channel)
    channel_b[:] = np.where(opposite, 1, bunched_channel)
    return PairSample(channel_a, channel_b, tau, even)


def sample_pair(delay: DelaySetting, params: SourceParams, rng: np.random.Generator,
                tail_tol: float = DEFAULT_TAIL_TOL) -> Tuple[Tuple[int, int], float]:
    """Single pair: ((channel_a, channel_b), tau) with tau = t_b - t_a in seconds."""
    sample = sample_pairs(1, delay, params, rng, tail_tol)
    return (int(sample.channel_a[0]), int(sample.channel_b[0])), float(sample.tau[0])


def _chunk_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _generate_chunk(cfg: SimConfig, index: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = _chunk_rng(cfg.seed, index)
    start = index * cfg.chunk_duration
    span = min(cfg.chunk_duration, cfg.duration - start)

    n_pairs = int(rng.poisson(cfg.pair_rate * span))
    t = start + rng.random(n_pairs) * span
    pairs = sample_pairs(n_pairs, cfg.delay, cfg.params, rng, cfg.tail_tol)
    t_a = t + np.maximum(0.0, -pairs.tau)
    t_b = t_a + pairs.tau

    channels = [pairs.channel_a, pairs.channel_b]
    times = [t_a, t_b]
    for channel in (0, 1):
        n_background = int(rng.poisson(cfg.background_rate * span))
        channels.append(np.full(n_background, channel, dtype=np.uint8))
        times.append(start + rng.random(n_background) * span)

    channels = np.concatenate(channels)
    times = np.concatenate(times)
    if cfg.jitter_sigma > 0:
        times = times + rng.normal(0.0, cfg.jitter_sigma, times.size)
    stamps = np.rint(np.maximum(times, 0.0) * PS_PER_S).astype(np.int64)
    return channels, stamps


def _check_counter_range(cfg: SimConfig) -> None:
    extent = comb_weights("odd", cfg.params, cfg.tail_tol).extent
    latest = cfg.duration + 2 * extent + abs(cfg.delay.delta_t(cfg.params)) + 10 * cfg.jitter_sigma
    if latest * PS_PER_S >= INT64_MAX:
        raise TimestampOverflowError(
            f"duration {cfg.duration} s overflows the 64-bit picosecond counter"
        )


def generate_stream(cfg: SimConfig) -> EventStream:
    """Poisson pairs plus uniform background on two channels, sorted by timestamp.

    The run is cut into ``chunk_duration`` intervals, each with its own RNG
    substream derived from (seed, interval index), so the result does not
    depend on ``workers``.
    """
    _check_counter_range(cfg)
    header = cfg.header()
    if cfg.duration == 0:
        return EventStream.empty(header)

    n_chunks = int(math.ceil(cfg.duration / cfg.chunk_duration))
    logger.info(
        f"Generating {cfg.duration} s of events in {n_chunks} chunks "
        f"(seed={cfg.seed}, workers={cfg.workers})"
    )
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        parts = list(pool.map(lambda i: _generate_chunk(cfg, i), range(n_chunks)))

    channels = np.concatenate([p[0] for p in parts])
    stamps = np.concatenate([p[1] for p in parts])
    order = np.argsort(stamps, kind="stable")
    stream = EventStream(channels[order], stamps[order], header)
    counts = stream.counts_per_channel()
    logger.info(f"Generated {len(stream)} events: {counts[0]} on channel 0, {counts[1]} on channel 1")
    return stream


def expected_counts(cfg: SimConfig) -> Dict[str, float]:
    """Expected totals for plausibility reports."""
    pairs = cfg.pair_rate * cfg.duration
    singles = pairs + cfg.background_rate * cfg.duration
    return {
        "pairs": pairs,
        "singles_per_channel": singles,
        "opposite_channel_pairs": pairs * coincidence_probability(cfg.delay, cfg.params),
    }
