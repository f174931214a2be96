"""End-to-end tests: simulate events, histogram them and reduce to visibilities."""

import math
import os
import unittest

import numpy as np

from montecarlo import SimConfig, generate_stream
from observables import DelaySetting, PhaseMode, postselected_coincidence
from physics import SourceParams
from postprocess import PeakSelection, histogram, reduce_histograms, windowed_postselected

SLOW = os.getenv("COMBHOM_SLOW_TESTS") == "1"
BASELINE_OFFSETS = (50e-12, 60e-12, 70e-12)


def run_points(coarse: int, duration: float, parity: str = "even", phase: float = 0.0,
               span: float = 500e-9, seed: int = 0, dip_offset: float = 0.0):
    """Simulate a dip point plus three baselines and reduce them together."""
    params = SourceParams()
    delays = [
        DelaySetting(coarse_half_roundtrips=coarse, intermediate=offset, fine_phase=phase,
                     phase_mode=PhaseMode.LOCKED)
        for offset in (dip_offset,) + BASELINE_OFFSETS
    ]
    histograms = []
    for i, delay in enumerate(delays):
        cfg = SimConfig(params=params, delay=delay, jitter_sigma=0.0, duration=duration, seed=seed + i)
        histograms.append(histogram(generate_stream(cfg), span=span))
    return params, delays, reduce_histograms(histograms, delays, params, parity)


class TestPipeline(unittest.TestCase):
    """Test cases for the simulate-analyze chain at small counts."""

    def test_zero_delay_even_parity(self):
        """Test that full overlap gives a visibility close to 1."""
        _, _, result = run_points(0, duration=0.5)
        visibility, sigma = result.visibilities[0]
        self.assertGreater(visibility, 0.95)
        self.assertGreater(sigma, 0.0)
        for _, _, _, point in result.points[1:]:
            self.assertAlmostEqual(point.p, 0.5, delta=0.05)

    def test_half_round_trip_odd_parity(self):
        """Test that subtracting the HH/VV counts recovers the dip at dt = T_p."""
        _, _, result = run_points(1, duration=0.5, parity="odd", phase=math.pi / 2, seed=100)
        visibility, _ = result.visibilities[1]
        self.assertGreater(visibility, 0.9)
        self.assertGreater(result.points[0][2], 0.0)

    def test_even_windows_suppress_noon_phase(self):
        """Test that sweeping the locked phase over 8 values leaves the reduced point unchanged."""
        params = SourceParams()
        expected = None
        for i, phase in enumerate(np.linspace(0, 2 * math.pi, 8, endpoint=False)):
            _, delays, result = run_points(0, duration=0.5, phase=float(phase), seed=200 + 10 * i,
                                           dip_offset=2.2e-12)
            if expected is None:
                expected = postselected_coincidence(delays[0], params)
            point = result.points[0][3]
            # counting error of the point plus that of the three-file calibration
            sigma = math.hypot(point.sigma, expected / math.sqrt(3 * result.baselines[0]))
            with self.subTest(phase=phase):
                self.assertLessEqual(abs(point.p - expected), 4 * sigma,
                                     f"p {point.p:.4f} +/- {sigma:.4f} vs {expected:.4f}")


@unittest.skipUnless(SLOW, "set COMBHOM_SLOW_TESTS=1 for acceptance-scale runs")
class TestAcceptance(unittest.TestCase):
    """Acceptance runs with about 3e5 counts per detector."""

    duration = 7.5

    def assertDipMatches(self, coarse: int, span: float, expected: float):
        _, _, result = run_points(coarse, self.duration, span=span, seed=1000 + coarse)
        point = result.points[0][3]
        self.assertLessEqual(abs(point.p - expected), 4 * point.sigma,
                             f"dip {point.p:.4f} +/- {point.sigma:.4f} vs {expected:.4f}")
        return result

    def test_zero_delay(self):
        """Test the dip at dt = 0 and the visibility band."""
        params = SourceParams()
        d = DelaySetting(phase_mode=PhaseMode.LOCKED)
        result = self.assertDipMatches(0, 500e-9, postselected_coincidence(d, params))
        visibility, _ = result.visibilities[0]
        self.assertLessEqual(abs(visibility - 0.984), 4 * 0.017)

    def test_one_round_trip(self):
        """Test the dip at dt = T."""
        params = SourceParams()
        d = DelaySetting(coarse_half_roundtrips=2, phase_mode=PhaseMode.LOCKED)
        self.assertDipMatches(2, 500e-9, postselected_coincidence(d, params))

    def test_42_round_trips_finite_windows(self):
        """Test the dip at 42 T against the prediction for +/-500 ns windows."""
        params = SourceParams()
        d = DelaySetting(coarse_half_roundtrips=84, phase_mode=PhaseMode.LOCKED)
        expected = windowed_postselected(d, params, PeakSelection.default(params, "even"))
        self.assertDipMatches(84, 500e-9, expected)

    def test_42_round_trips_wide_span(self):
        """Test the dip at 42 T against the closed form with +/-2 us windows."""
        params = SourceParams()
        d = DelaySetting(coarse_half_roundtrips=84, phase_mode=PhaseMode.LOCKED)
        expected = windowed_postselected(d, params, PeakSelection.default(params, "even", span=2e-6))
        self.assertAlmostEqual(expected, postselected_coincidence(d, params), delta=2e-3)
        self.assertDipMatches(84, 2e-6, expected)


if __name__ == "__main__":
    unittest.main()
