"""Unit tests for the Monte-Carlo event generator."""

import math
import unittest

import numpy as np
from pydantic import ValidationError

from montecarlo import (
    CombSupportError,
    SimConfig,
    TimestampOverflowError,
    expected_counts,
    generate_stream,
    sample_pair,
    sample_pairs,
)
from observables import DelaySetting, PhaseMode, coincidence_probability
from physics import SourceParams, rect_width


def _opposite_fraction(sample) -> float:
    return float(np.mean(sample.channel_a != sample.channel_b))


class TestSamplePairs(unittest.TestCase):
    """Test cases for the pair sampler."""

    def setUp(self):
        """Set up test fixtures."""
        self.params = SourceParams()
        self.rng = np.random.default_rng(1234)
        self.n = 100_000

    def assertWithinSigma(self, observed: float, expected: float, n: int, k: float = 4.0):
        sigma = math.sqrt(max(expected * (1 - expected), 1e-12) / n)
        self.assertLessEqual(abs(observed - expected), k * sigma + 1e-12,
                             f"{observed} differs from {expected} by more than {k} sigma")

    def test_full_overlap_no_coincidences(self):
        """Test that dt = 0 with phi = 0 never sends a pair to opposite detectors."""
        d = DelaySetting(phase_mode=PhaseMode.LOCKED)
        sample = sample_pairs(self.n, d, self.params, self.rng)
        self.assertEqual(_opposite_fraction(sample), 0.0)

    def test_coincidence_fraction_matches_probability(self):
        """Test the opposite-channel fraction against the analytic probability."""
        settings = [
            DelaySetting(intermediate=100e-12, phase_mode=PhaseMode.LOCKED),
            DelaySetting(fine_phase=math.pi / 2, phase_mode=PhaseMode.LOCKED),
            DelaySetting(coarse_half_roundtrips=84, phase_mode=PhaseMode.LOCKED),
            DelaySetting(coarse_half_roundtrips=2, intermediate=3e-12, fine_phase=1.0,
                         phase_mode=PhaseMode.LOCKED),
        ]
        for d in settings:
            with self.subTest(delay=d):
                sample = sample_pairs(self.n, d, self.params, self.rng)
                self.assertWithinSigma(
                    _opposite_fraction(sample), coincidence_probability(d, self.params), self.n
                )

    def test_odd_pairs_sit_on_odd_multiples(self):
        """Test that NOON pairs land on odd multiples of T_p within the rect width."""
        sample = sample_pairs(20_000, DelaySetting(), self.params, self.rng)
        tp = self.params.t_round_physical
        tau = sample.tau[~sample.even]
        k = np.rint(tau / tp).astype(np.int64)
        self.assertTrue(np.all(k % 2 == 1))
        self.assertTrue(np.all(np.abs(tau - k * tp) <= 0.5 * rect_width(self.params) * (1 + 1e-9)))

    def test_even_pairs_sit_on_even_multiples(self):
        """Test that even-comb pairs at dt = 0 land on even multiples of T_p."""
        sample = sample_pairs(20_000, DelaySetting(), self.params, self.rng)
        tp = self.params.t_round_physical
        k = np.rint(sample.tau[sample.even] / tp).astype(np.int64)
        self.assertTrue(np.all(k % 2 == 0))

    def test_peak_mass_decays_at_cavity_rate(self):
        """Test that the comb peak populations fall off as exp(-2 pi gamma |tau|)."""
        sample = sample_pairs(200_000, DelaySetting(), self.params, self.rng)
        tp = self.params.t_round_physical
        k = np.abs(np.rint(sample.tau[~sample.even] / tp)).astype(np.int64)
        levels, counts = np.unique(k, return_counts=True)
        use = counts >= 50
        slope, _ = np.polyfit(levels[use] * tp, np.log(counts[use]), 1, w=np.sqrt(counts[use]))
        rate = 2 * math.pi * self.params.gamma_cavity
        self.assertAlmostEqual(-slope / rate, 1.0, delta=0.05)

    def test_single_pair(self):
        """Test that sample_pair returns channels and a delay."""
        channels, tau = sample_pair(DelaySetting(), self.params, self.rng)
        self.assertIn(channels[0], (0, 1))
        self.assertIn(channels[1], (0, 1))
        self.assertIsInstance(tau, float)

    def test_delay_beyond_comb(self):
        """Test that a delay outside the truncated comb is rejected."""
        with self.assertRaises(CombSupportError):
            sample_pairs(10, DelaySetting(coarse_half_roundtrips=10_000), self.params, self.rng)


class TestGenerateStream(unittest.TestCase):
    """Test cases for time-tagged stream generation."""

    def setUp(self):
        """Set up test fixtures."""
        self.cfg = SimConfig(
            delay=DelaySetting(coarse_half_roundtrips=2, phase_mode=PhaseMode.LOCKED),
            pair_rate=20e3,
            duration=0.05,
            chunk_duration=0.01,
            seed=7,
        )

    def test_stream_is_sorted_and_labelled(self):
        """Test ordering, channel range and header snapshot."""
        stream = generate_stream(self.cfg)
        self.assertTrue(stream.is_sorted())
        self.assertTrue(set(np.unique(stream.channels)) <= {0, 1})
        self.assertEqual(stream.header["seed"], 7)
        self.assertEqual(stream.header["delay"]["coarse_half_roundtrips"], 2)

    def test_deterministic_for_any_worker_count(self):
        """Test that the output depends on the seed only, not on the thread count."""
        single = generate_stream(self.cfg)
        parallel = generate_stream(self.cfg.copy(update={"workers": 3}))
        np.testing.assert_array_equal(single.timestamps, parallel.timestamps)
        np.testing.assert_array_equal(single.channels, parallel.channels)

    def test_seed_changes_output(self):
        """Test that a different seed gives a different stream."""
        a = generate_stream(self.cfg)
        b = generate_stream(self.cfg.copy(update={"seed": 8}))
        self.assertFalse(len(a) == len(b) and np.array_equal(a.timestamps, b.timestamps))

    def test_background_only(self):
        """Test that 1 kHz of background for 10 s gives about 1e4 events per channel."""
        cfg = SimConfig(pair_rate=0.0, background_rate=1e3, duration=10.0, seed=3)
        counts = generate_stream(cfg).counts_per_channel()
        for channel in (0, 1):
            self.assertLess(abs(counts[channel] - 1e4), 4 * 100)

    def test_singles_match_expected_counts(self):
        """Test that event totals agree with expected_counts within 4 sigma."""
        stream = generate_stream(self.cfg)
        expected = expected_counts(self.cfg)
        total = 2 * expected["singles_per_channel"]
        self.assertLess(abs(len(stream) - total), 4 * math.sqrt(2 * total))

    def test_zero_duration(self):
        """Test that an empty run gives an empty stream."""
        stream = generate_stream(self.cfg.copy(update={"duration": 0.0}))
        self.assertEqual(len(stream), 0)

    def test_counter_overflow(self):
        """Test that a run longer than the picosecond counter is rejected."""
        with self.assertRaises(TimestampOverflowError):
            generate_stream(self.cfg.copy(update={"duration": 1e8}))

    def test_invalid_config(self):
        """Test that negative rates are rejected."""
        with self.assertRaises(ValidationError):
            SimConfig(pair_rate=-1.0)
        with self.assertRaises(ValidationError):
            SimConfig(jitter_sigma=-1e-12)


if __name__ == "__main__":
    unittest.main()
