"""Analytic per-inference energy and battery-life estimates.

Units: power in mW, time in ms, energy in mJ, battery capacity in mWh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..config import from_mapping
from ..errors import ConfigError

UNBOUNDED = math.inf


@dataclass(frozen=True)
class EnergyProfile:
    active_power_mw: float = 316.0
    baseline_power_mw: float = 300.0
    inference_ms: float = 27.0

    def __post_init__(self):
        if self.active_power_mw <= 0 or self.baseline_power_mw <= 0:
            raise ConfigError("power figures must be positive")
        if self.inference_ms <= 0:
            raise ConfigError("inference duration must be positive")

    @classmethod
    def from_mapping(cls, mapping) -> EnergyProfile:
        return from_mapping(cls, mapping, "energy")


@dataclass(frozen=True)
class InferenceEnergy:
    energy_mj: float
    marginal_mj: float
    baseline_mj: float


def estimate_inference_energy(profile: EnergyProfile) -> InferenceEnergy:
    """energy = P_active * t / 1000; marginal uses (P_active - P_baseline)."""
    return InferenceEnergy(
        energy_mj=profile.active_power_mw * profile.inference_ms / 1000,
        marginal_mj=(profile.active_power_mw - profile.baseline_power_mw) * profile.inference_ms / 1000,
        baseline_mj=profile.baseline_power_mw * profile.inference_ms / 1000,
    )


def estimate_wake_budget(profile: EnergyProfile, wakes_per_day: float = 100,
                         awake_overhead_ms: float = 500, battery_mwh: float = 4000) -> float:
    """Days of operation on one battery.

    Each wake costs one inference plus ``awake_overhead_ms`` at baseline
    power. Returns ``math.inf`` when the device never wakes.
    """
    if battery_mwh <= 0:
        raise ConfigError("battery capacity must be positive")
    if wakes_per_day < 0 or awake_overhead_ms < 0:
        raise ConfigError("wake rate and overhead must be non-negative")
    if wakes_per_day == 0:
        return UNBOUNDED
    per_wake = (estimate_inference_energy(profile).energy_mj
                + profile.baseline_power_mw * awake_overhead_ms / 1000)
    return battery_mwh * 3600 / (wakes_per_day * per_wake)
