"""Discretized diffusion noise schedules.

All schedule arithmetic is float64 so cumulative products stay consistent
to ~1e-15 relative; model code downcasts per-step coefficients as needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StepRangeError

SCHEDULE_KINDS = ("linear", "cosine")

# 4-step schedule used by the distilled student.  Betas are large because the
# whole forward process has to reach near-pure noise in four steps
# (alpha_bar[3] ~ 1.5e-3 with these values).
STUDENT_STEPS = 4
STUDENT_BETA_MIN = 0.4
STUDENT_BETA_MAX = 0.95


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta sequence plus derived cumulative-alpha products.

    ``timestep_values`` maps the integer step index to continuous time in
    (0, 1]; the student (T=4) and teacher (large T) schedules share this
    parameterization so one denoiser can serve both.
    """

    T: int
    kind: str
    beta_min: float
    beta_max: float
    betas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    timestep_values: np.ndarray = field(repr=False)

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise StepRangeError(f"timestep {t} outside schedule of length {self.T}")
        return float(self.alpha_bar[t])

    def time_value(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise StepRangeError(f"timestep {t} outside schedule of length {self.T}")
        return float(self.timestep_values[t])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
        }

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        return make_schedule(d["T"], d["beta_min"], d["beta_max"], d["kind"])


def _linear_betas(T: int, beta_min: float, beta_max: float) -> np.ndarray:
    return np.linspace(beta_min, beta_max, T, dtype=np.float64)


def _cosine_betas(T: int, beta_min: float, beta_max: float, s: float = 0.008) -> np.ndarray:
    # Squared-cosine alpha_bar curve; betas derived from consecutive ratios
    # and clamped into [beta_min, beta_max] so the type invariants hold.
    steps = np.arange(T + 1, dtype=np.float64) / T
    curve = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    curve = curve / curve[0]
    betas = 1.0 - curve[1:] / curve[:-1]
    return np.clip(betas, beta_min, beta_max)


def make_schedule(T: int, beta_min: float, beta_max: float, kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule with T steps and the given beta spacing."""
    if not isinstance(T, int) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_min <= beta_max:
        raise ConfigError(f"beta_min must satisfy 0 < beta_min <= beta_max, got beta_min={beta_min}")
    if beta_max >= 1.0:
        raise ConfigError(f"beta_max must be < 1, got beta_max={beta_max}")
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"kind must be one of {SCHEDULE_KINDS}, got kind={kind!r}")

    if kind == "linear":
        betas = _linear_betas(T, beta_min, beta_max)
    else:
        betas = _cosine_betas(T, beta_min, beta_max)

    alpha_bar = np.cumprod(1.0 - betas)
    timestep_values = (np.arange(T, dtype=np.float64) + 1.0) / T
    return NoiseSchedule(
        T=T,
        kind=kind,
        beta_min=float(beta_min),
        beta_max=float(beta_max),
        betas=betas,
        alpha_bar=alpha_bar,
        timestep_values=timestep_values,
    )


def student_schedule() -> NoiseSchedule:
    """Default 4-step schedule for the distilled student."""
    return make_schedule(STUDENT_STEPS, STUDENT_BETA_MIN, STUDENT_BETA_MAX, "linear")
