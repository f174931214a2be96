"""Run configuration using Pydantic and environment variables."""

import os
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, validator

from montecarlo import SimConfig
from observables import DelaySetting, PhaseMode, dip_scan
from physics import DEFAULT_TAIL_TOL, SourceParams
from postprocess import ACCIDENTAL_METHODS, DEFAULT_BIN_WIDTH, DEFAULT_SPAN, DEFAULT_WINDOW_WIDTH, PeakSelection

load_dotenv()

CONFIG_ENV_VAR = "COMBHOM_CONFIG"


class RunConfig(BaseModel):
    """Settings shared by every subcommand; units are part of the key names."""

    # Source
    gamma_cavity_hz: float = Field(default=666e3, gt=0)
    gamma_mode_hz: float = Field(default=429e3, gt=0)
    fsr_hz: float = Field(default=120.8e6, gt=0)
    t_round_physical_s: float = Field(default=4.14e-9, gt=0)
    lambda0_m: float = Field(default=795e-9, gt=0)
    pm_bandwidth_hz: float = Field(default=100e9, gt=0)
    filter_fwhm_hz: Optional[float] = Field(default=None, gt=0)

    # Delay scan
    coarse_half_roundtrips: List[int] = Field(default_factory=lambda: [0])
    intermediate_start_s: float = -30e-12
    intermediate_stop_s: float = 30e-12
    intermediate_step_s: float = Field(default=1e-12, gt=0)
    phase_mode: PhaseMode = PhaseMode.LOCKED
    locked_phase_rad: float = 0.0
    phase_points: int = Field(default=32, ge=8)

    # Monte Carlo
    pair_rate_hz: float = Field(default=40e3, ge=0)
    background_rate_hz: float = Field(default=100.0, ge=0)
    jitter_sigma_s: float = Field(default=350e-12, ge=0)
    duration_s: float = Field(default=7.5, ge=0)
    seed: int = 0
    chunk_duration_s: float = Field(default=1.0, gt=0)
    workers: int = Field(default=1, ge=1)

    # Analysis
    bin_width_s: float = Field(default=DEFAULT_BIN_WIDTH, gt=0)
    window_width_s: float = Field(default=DEFAULT_WINDOW_WIDTH, gt=0)
    span_s: float = Field(default=DEFAULT_SPAN, gt=0)
    parity: str = "even"
    accidental_method: str = "floor"
    tail_tol: float = Field(default=DEFAULT_TAIL_TOL, gt=0, lt=1)

    # Application
    log_level: str = "INFO"

    class Config:
        extra = "forbid"

    @validator("filter_fwhm_hz", pre=True)
    def parse_optional_filter(cls, v):
        """Empty or 'none' means no spectral filter."""
        if isinstance(v, str) and v.strip().lower() in ("", "none"):
            return None
        return v

    @validator("coarse_half_roundtrips", pre=True)
    def parse_coarse(cls, v):
        """Parse comma-separated coarse delays."""
        if isinstance(v, str):
            return [int(item.strip()) for item in v.split(",") if item.strip()]
        if isinstance(v, int):
            return [v]
        return v

    @validator("parity")
    def validate_parity(cls, v):
        if v.lower() not in ("even", "odd"):
            raise ValueError("parity must be 'even' or 'odd'")
        return v.lower()

    @validator("accidental_method")
    def validate_accidental_method(cls, v):
        if v.lower() not in ACCIDENTAL_METHODS:
            raise ValueError(f"accidental_method must be one of {ACCIDENTAL_METHODS}")
        return v.lower()

    @validator("log_level")
    def validate_log_level(cls, v):
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Invalid log level. Must be one of: {valid_levels}")
        return v.upper()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Load flat key=value settings; unknown keys are rejected."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        values = {key.strip().lower(): value for key, value in dotenv_values(path).items() if value is not None}
        return cls(**values)

    @classmethod
    def from_env(cls) -> "RunConfig":
        """Read the file named by COMBHOM_CONFIG, else defaults; LOG_LEVEL overrides."""
        path = os.getenv(CONFIG_ENV_VAR)
        config = cls.from_file(path) if path else cls()
        if os.getenv("LOG_LEVEL"):
            config = cls(**{**config.dict(), "log_level": os.getenv("LOG_LEVEL")})
        return config

    def source_params(self) -> SourceParams:
        return SourceParams(
            gamma_cavity=self.gamma_cavity_hz,
            gamma_mode=self.gamma_mode_hz,
            fsr=self.fsr_hz,
            t_round_physical=self.t_round_physical_s,
            lambda0=self.lambda0_m,
            pm_bandwidth=self.pm_bandwidth_hz,
            filter_fwhm=self.filter_fwhm_hz,
        )

    def scan_offsets(self) -> np.ndarray:
        """Intermediate-stage offsets from start to stop inclusive."""
        if self.intermediate_stop_s < self.intermediate_start_s:
            raise ValueError("intermediate_stop_s must not be below intermediate_start_s")
        n = int(round((self.intermediate_stop_s - self.intermediate_start_s) / self.intermediate_step_s)) + 1
        return self.intermediate_start_s + np.arange(n) * self.intermediate_step_s

    def delays(self) -> List[DelaySetting]:
        settings = []
        for coarse in self.coarse_half_roundtrips:
            settings.extend(dip_scan(coarse, self.scan_offsets(), self.phase_mode, self.locked_phase_rad))
        return settings

    def sim_config(self, delay: DelaySetting) -> SimConfig:
        return SimConfig(
            params=self.source_params(),
            delay=delay,
            pair_rate=self.pair_rate_hz,
            background_rate=self.background_rate_hz,
            jitter_sigma=self.jitter_sigma_s,
            duration=self.duration_s,
            seed=self.seed,
            chunk_duration=self.chunk_duration_s,
            workers=self.workers,
            tail_tol=self.tail_tol,
        )

    def peak_selection(self, params: Optional[SourceParams] = None) -> PeakSelection:
        return PeakSelection.default(
            params or self.source_params(), self.parity, self.window_width_s, self.span_s
        )
