"""Facility, hardware and equivalency profiles loaded from INI-style config.

Sections are ``[facility.<name>]``, ``[hardware.<name>]``, ``[equivalencies]``
and ``[scenario.<name>]``; keys are exactly the dataclass field names.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

PROFILE_PATH_ENV = "MLFOOTPRINT_PROFILE_PATH"


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class FacilityProfile:
    name: str
    pue: float
    carbon_intensity: float  # kg CO2eq / kWh
    wue_onsite: float  # L / kWh
    wue_offsite: float  # L / kWh

    def __post_init__(self):
        if not self.pue >= 1.0:
            raise ProfileError(f"facility {self.name}: pue must be >= 1 (got {self.pue})")
        for k in ("carbon_intensity", "wue_onsite", "wue_offsite"):
            v = getattr(self, k)
            if not (v >= 0 and math.isfinite(v)):
                raise ProfileError(f"facility {self.name}: {k} must be non-negative (got {v})")

    @property
    def wue_total(self) -> float:
        return self.wue_onsite + self.wue_offsite


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    gpus_per_server: int
    server_embodied_co2: float  # kg per server
    per_gpu_water: float  # L per GPU
    rare_earth_mass: float  # kg per GPU
    rare_earth_co2_rate: float  # kg CO2eq per kg mined
    rare_earth_water_rate: float  # L per kg mined
    lifespan_hours: float

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name == "name":
                continue
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ProfileError(f"hardware {self.name}: {f.name} must be positive (got {v})")


@dataclass(frozen=True)
class EquivalencyTable:
    co2_per_home_year: float = 4.81  # t
    co2_per_tanker_truck: float = 75.8  # t
    co2_per_forest_acre_year: float = 1.044  # t
    water_per_person_year: float = 113.5  # kL

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ProfileError(f"equivalencies: {f.name} must be positive (got {v})")


def default_equivalencies() -> EquivalencyTable:
    return EquivalencyTable()


@dataclass
class Profiles:
    facilities: dict[str, FacilityProfile] = field(default_factory=dict)
    hardware: dict[str, HardwareProfile] = field(default_factory=dict)
    equivalencies: EquivalencyTable = field(default_factory=default_equivalencies)
    scenarios: dict[str, dict[str, str]] = field(default_factory=dict)

    def facility(self, name: str) -> FacilityProfile:
        try:
            return self.facilities[name]
        except KeyError:
            known = ", ".join(sorted(self.facilities))
            raise ProfileError(f"unknown facility {name!r} (known: {known})") from None

    def hw(self, name: str) -> HardwareProfile:
        try:
            return self.hardware[name]
        except KeyError:
            raise ProfileError(f"unknown hardware profile {name!r}") from None

    def merge(self, other: "Profiles") -> "Profiles":
        merged = Profiles(
            {**self.facilities, **other.facilities},
            {**self.hardware, **other.hardware},
            other.equivalencies if other._has_equiv else self.equivalencies,
            {**self.scenarios, **other.scenarios},
        )
        merged._has_equiv = self._has_equiv or other._has_equiv
        return merged

    _has_equiv: bool = field(default=False, repr=False, compare=False)


def _number(section: str, key: str, raw: str, integer: bool = False):
    try:
        v = float(raw)
    except ValueError:
        raise ProfileError(f"[{section}] {key}: not a number: {raw!r}") from None
    if integer:
        if v != int(v):
            raise ProfileError(f"[{section}] {key}: expected an integer, got {raw!r}")
        return int(v)
    return v


def _build(cls, section: str, name: str | None, items: dict[str, str]):
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "name"}
    unknown = sorted(set(items) - set(fields))
    if unknown:
        raise ProfileError(f"[{section}] unknown key {unknown[0]!r}")
    missing = [k for k, f in fields.items() if k not in items and f.default is dataclasses.MISSING]
    if missing:
        raise ProfileError(f"[{section}] missing required key {missing[0]!r}")
    kw = {k: _number(section, k, v, integer=fields[k].type == "int") for k, v in items.items()}
    if name is not None:
        kw["name"] = name
    return cls(**kw)


def loads_profiles(text: str) -> Profiles:
    cp = configparser.ConfigParser(
        comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    cp.optionxform = str  # keys are case-sensitive field names
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ProfileError(f"cannot parse profile config: {exc}") from None
    out = Profiles()
    for section in cp.sections():
        items = dict(cp.items(section))
        kind, _, name = section.partition(".")
        if kind == "facility" and name:
            out.facilities[name] = _build(FacilityProfile, section, name, items)
        elif kind == "hardware" and name:
            out.hardware[name] = _build(HardwareProfile, section, name, items)
        elif section == "equivalencies":
            out.equivalencies = _build(EquivalencyTable, section, None, items)
            out._has_equiv = True
        elif kind == "scenario" and name:
            out.scenarios[name] = items
        else:
            raise ProfileError(f"unknown section [{section}]")
    return out


def load_profiles(path) -> Profiles:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ProfileError(f"cannot read {path}: {exc}") from exc
    return loads_profiles(text)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def dumps_profiles(p: Profiles) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, fac in sorted(p.facilities.items()):
        cp[f"facility.{name}"] = {
            f.name: _fmt(getattr(fac, f.name)) for f in dataclasses.fields(fac) if f.name != "name"
        }
    for name, hw in sorted(p.hardware.items()):
        cp[f"hardware.{name}"] = {
            f.name: _fmt(getattr(hw, f.name)) for f in dataclasses.fields(hw) if f.name != "name"
        }
    cp["equivalencies"] = {
        f.name: _fmt(getattr(p.equivalencies, f.name)) for f in dataclasses.fields(p.equivalencies)
    }
    for name, items in sorted(p.scenarios.items()):
        cp[f"scenario.{name}"] = dict(items)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def preset_profiles() -> Profiles:
    text = resources.files("mlfootprint.data").joinpath("presets.ini").read_text(encoding="utf-8")
    return loads_profiles(text)


def default_profiles(extra: list | tuple = ()) -> Profiles:
    """Presets, then files on ``$MLFOOTPRINT_PROFILE_PATH``, then ``extra``."""
    prof = preset_profiles()
    env = os.environ.get(PROFILE_PATH_ENV, "")
    paths = [p for p in env.split(os.pathsep) if p] + [str(e) for e in extra]
    for path in paths:
        prof = prof.merge(load_profiles(path))
    return prof


def resolve_facility(ref: str, profiles: Profiles | None = None) -> FacilityProfile:
    """A facility by preset name, or the single facility defined in a file."""
    profiles = profiles or default_profiles()
    if ref in profiles.facilities:
        return profiles.facilities[ref]
    if os.path.exists(ref):
        loaded = load_profiles(ref)
        if len(loaded.facilities) != 1:
            raise ProfileError(f"{ref}: expected exactly one facility section")
        return next(iter(loaded.facilities.values()))
    return profiles.facility(ref)


def resolve_hardware(ref: str, profiles: Profiles | None = None) -> HardwareProfile:
    profiles = profiles or default_profiles()
    if ref in profiles.hardware:
        return profiles.hardware[ref]
    if os.path.exists(ref):
        loaded = load_profiles(ref)
        if len(loaded.hardware) != 1:
            raise ProfileError(f"{ref}: expected exactly one hardware section")
        return next(iter(loaded.hardware.values()))
    return profiles.hw(ref)


def resolve_equivalencies(ref: str | None, profiles: Profiles | None = None) -> EquivalencyTable:
    if ref is None or ref == "default":
        return (profiles or default_profiles()).equivalencies
    loaded = load_profiles(ref)
    if not loaded._has_equiv:
        raise ProfileError(f"{ref}: no [equivalencies] section")
    return loaded.equivalencies
