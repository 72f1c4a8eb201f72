"""Operational and embodied carbon/water arithmetic, plus equivalency rendering.

Everything here is computed in kg, liters and kWh. Tonnes and kL only show up
in :func:`equivalize` and the display helpers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .profiles import EquivalencyTable, FacilityProfile, HardwareProfile

HOURS_PER_YEAR = 8760


@dataclass(frozen=True)
class EnergyQuantity:
    kwh: float
    pue_folded: bool = False

    def __post_init__(self):
        if not self.kwh >= 0:
            raise ValueError(f"energy must be non-negative (got {self.kwh})")


@dataclass
class ImpactResult:
    co2: float = 0.0  # kg
    water: float = 0.0  # L
    energy: float = 0.0  # kWh
    breakdown: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def single(cls, label: str, co2: float, water: float, energy: float = 0.0) -> "ImpactResult":
        return cls(co2, water, energy, {label: (co2, water)})

    @classmethod
    def combine(cls, parts: list["ImpactResult"]) -> "ImpactResult":
        labels: dict[str, tuple[list[float], list[float]]] = {}
        for p in parts:
            for k, (c, w) in p.breakdown.items():
                cs, ws = labels.setdefault(k, ([], []))
                cs.append(c)
                ws.append(w)
        breakdown = {k: (math.fsum(c), math.fsum(w)) for k, (c, w) in sorted(labels.items())}
        return cls(
            math.fsum(p.co2 for p in parts),
            math.fsum(p.water for p in parts),
            math.fsum(p.energy for p in parts),
            breakdown,
        )


def _effective_pue(energy: EnergyQuantity, profile: FacilityProfile) -> float:
    return 1.0 if energy.pue_folded else profile.pue


def operational_co2(energy: EnergyQuantity, profile: FacilityProfile) -> float:
    """kg CO2eq = energy x PUE x carbon intensity."""
    return energy.kwh * _effective_pue(energy, profile) * profile.carbon_intensity


def operational_water(energy: EnergyQuantity, profile: FacilityProfile) -> float:
    """Liters = energy x PUE x (onsite + offsite WUE)."""
    return energy.kwh * _effective_pue(energy, profile) * (profile.wue_onsite + profile.wue_offsite)


def operational_impact(energy: EnergyQuantity, profile: FacilityProfile) -> ImpactResult:
    return ImpactResult.single(
        "operational",
        operational_co2(energy, profile),
        operational_water(energy, profile),
        energy.kwh,
    )


def embodied_per_gpu(hw: HardwareProfile) -> dict[str, float]:
    co2 = hw.server_embodied_co2 / hw.gpus_per_server + hw.rare_earth_mass * hw.rare_earth_co2_rate
    water = hw.per_gpu_water + hw.rare_earth_mass * hw.rare_earth_water_rate
    return {"co2": co2, "water": water}


def amortized_rate(hw: HardwareProfile) -> dict[str, float]:
    """Embodied impact per GPU-hour over the hardware lifespan."""
    per_gpu = embodied_per_gpu(hw)
    return {k: v / hw.lifespan_hours for k, v in per_gpu.items()}


def embodied_total(gpu_hours: float, hw: HardwareProfile) -> ImpactResult:
    if gpu_hours < 0:
        raise ValueError("gpu_hours must be non-negative")
    rate = amortized_rate(hw)
    return ImpactResult.single("embodied", rate["co2"] * gpu_hours, rate["water"] * gpu_hours)


# -- display -------------------------------------------------------------------


def round_half_up(x: float, places: int = 0) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def display_places(x: float) -> int:
    """Decimal places used for tonnes/kL/MWh cells: one below 10, none above."""
    return 1 if abs(x) < 10 else 0


def fmt_quantity(x: float | None) -> str:
    if x is None:
        return "-"
    v = round_half_up(x, display_places(x))
    if v == int(v):
        return str(int(v))
    return f"{v:.1f}"


def fmt_count(x: float | None) -> str:
    if x is None:
        return "-"
    if x >= 1000:
        return f"{int(round_half_up(x / 1000))}k"
    return str(int(round_half_up(x)))


def fmt_duration(years: float) -> str:
    """'7 yrs, 10 mo' style, months rounded to nearest with ties up."""
    months = int(round_half_up(years * 12))
    y, m = divmod(months, 12)
    if y == 0:
        return f"{m} mo"
    unit = "year" if y == 1 else "years"
    if m == 0:
        return f"{y} {unit}"
    return f"{y} {'yr' if y == 1 else 'yrs'}, {m} mo"


@dataclass(frozen=True)
class Equivalencies:
    home_years: float
    tanker_trucks: float
    forest_acre_years: float
    person_years: float

    @property
    def homes(self) -> str:
        return fmt_duration(self.home_years)

    @property
    def persons(self) -> str:
        return fmt_duration(self.person_years)


def equivalize(impact: ImpactResult, table: EquivalencyTable) -> Equivalencies:
    t = impact.co2 / 1000.0
    kl = impact.water / 1000.0
    return Equivalencies(
        home_years=t / table.co2_per_home_year,
        tanker_trucks=t / table.co2_per_tanker_truck,
        forest_acre_years=t / table.co2_per_forest_acre_year,
        person_years=kl / table.water_per_person_year,
    )
