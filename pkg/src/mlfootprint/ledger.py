"""Campaign ledger: run records, append-only persistence, aggregation, audit.

A ledger file is JSONL. Each line is either a run record (keys are the
:class:`RunRecord` field names; extra keys are kept verbatim) or a campaign
metadata line ``{"campaign": {...}}``. A later line with the same ``id``
supersedes an earlier one, so edits never rewrite history.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

from .impact import (
    EnergyQuantity,
    ImpactResult,
    embodied_total,
    operational_co2,
    operational_water,
)
from .profiles import EquivalencyTable, FacilityProfile, HardwareProfile, Profiles, ProfileError

KINDS = ("development", "final", "external")
EXTERNAL = "external"
DEFAULT_CLUSTER = "default"
AUDIT_TOLERANCE = 0.02


class LedgerError(ValueError):
    pass


@dataclass
class RunRecord:
    id: str
    kind: str
    model_name: str
    cluster: str = DEFAULT_CLUSTER
    gpu_hours: float | None = None
    energy_mwh: float | None = None
    tokens_trained: float | None = None
    co2_t: float | None = None
    water_kl: float | None = None
    pue_folded: bool = False
    group: str | None = None
    declared_run_count: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LedgerError(f"record {self.id}: kind must be one of {', '.join(KINDS)}")
        if self.energy_mwh is None and self.co2_t is None:
            raise LedgerError(f"record {self.id}: needs energy_mwh or co2_t")
        for k in ("gpu_hours", "energy_mwh", "co2_t", "water_kl", "tokens_trained"):
            v = getattr(self, k)
            if v is not None and not v >= 0:
                raise LedgerError(f"record {self.id}: {k} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        names = {f.name for f in dataclasses.fields(cls)} - {"extra"}
        known = {k: v for k, v in d.items() if k in names}
        extra = {k: v for k, v in d.items() if k not in names}
        try:
            return cls(**known, extra=extra)
        except TypeError as exc:
            raise LedgerError(f"bad record {d.get('id', '?')}: {exc}") from None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "extra"}
        d.update(self.extra)
        return d


@dataclass
class DevGroup:
    name: str
    runs: list[RunRecord]
    declared_run_count: int
    inferred: bool = False

    def __post_init__(self):
        if self.declared_run_count < len(self.runs) and not self.inferred:
            raise LedgerError(f"group {self.name}: declared_run_count below recorded runs")


@dataclass
class Campaign:
    dev_groups: list[DevGroup] = field(default_factory=list)
    final_runs: list[RunRecord] = field(default_factory=list)
    hardware: HardwareProfile | None = None
    total_gpu_hours: float | None = None
    external_runs: list[RunRecord] = field(default_factory=list)
    dev_totals: dict | None = None

    @property
    def recorded_gpu_hours(self) -> float:
        runs = [r for g in self.dev_groups for r in g.runs] + self.final_runs
        return math.fsum(r.gpu_hours for r in runs if r.gpu_hours is not None)

    @property
    def embodied_gpu_hours(self) -> float:
        if self.total_gpu_hours is None:
            return self.recorded_gpu_hours
        if self.total_gpu_hours < self.recorded_gpu_hours:
            raise LedgerError("total_gpu_hours is below the recorded GPU hours")
        return self.total_gpu_hours


# -- persistence -------------------------------------------------------------


@dataclass
class LedgerSnapshot:
    records: dict[str, RunRecord]
    meta: dict
    lines: int


class Ledger:
    """Append-only record file; :meth:`load` reads a snapshot as of the call."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: RunRecord | dict) -> None:
        if isinstance(record, RunRecord):
            record = record.to_dict()
        elif "campaign" not in record:
            RunRecord.from_dict(record)  # validate before writing
        line = json.dumps(record, separators=(",", ":"), sort_keys=False)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load(self) -> LedgerSnapshot:
        with open(self.path, "r", encoding="utf-8") as fh:
            text = fh.read()
        return loads_ledger(text)

    def rewrite(self) -> None:
        """Compact to one line per id, keeping unknown fields."""
        snap = self.load()
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(dumps_ledger(snap))
        os.replace(tmp, self.path)


def loads_ledger(text: str) -> LedgerSnapshot:
    records: dict[str, RunRecord] = {}
    meta: dict = {}
    n = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        n += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LedgerError(f"ledger line {lineno}: {exc}") from None
        if "campaign" in obj:
            meta.update(obj["campaign"])
            continue
        rec = RunRecord.from_dict(obj)
        records.pop(rec.id, None)  # superseding record moves to the end
        records[rec.id] = rec
    return LedgerSnapshot(records, meta, n)


def dumps_ledger(snap: LedgerSnapshot) -> str:
    out = []
    if snap.meta:
        out.append(json.dumps({"campaign": snap.meta}, separators=(",", ":")))
    for rec in snap.records.values():
        out.append(json.dumps(rec.to_dict(), separators=(",", ":")))
    return "".join(l + "\n" for l in out)


def campaign_from_snapshot(snap: LedgerSnapshot, profiles: Profiles | None = None) -> Campaign:
    groups: dict[str, list[RunRecord]] = {}
    finals, externals = [], []
    for rec in snap.records.values():
        if rec.kind == "development":
            groups.setdefault(rec.group or rec.model_name, []).append(rec)
        elif rec.kind == "final":
            finals.append(rec)
        else:
            externals.append(rec)
    dev_groups = []
    for name, runs in groups.items():
        declared = max([r.declared_run_count or 0 for r in runs] + [len(runs)])
        dev_groups.append(DevGroup(name, runs, declared))
    hw = None
    if profiles is not None and snap.meta.get("hardware"):
        hw = profiles.hw(snap.meta["hardware"])
    return Campaign(
        dev_groups=dev_groups,
        final_runs=finals,
        hardware=hw,
        total_gpu_hours=snap.meta.get("total_gpu_hours"),
        external_runs=externals,
        dev_totals=snap.meta.get("dev_totals"),
    )


# -- reconciliation -------------------------------------------------------------

RECONCILE_COLUMNS = ("gpu_hours", "energy_mwh", "runs", "co2_t", "water_kl")


@dataclass
class Finding:
    row: str
    quantity: str
    message: str
    implied: float | None = None
    expected: float | None = None
    deviation: float | None = None
    convention: str | None = None


def _group_column(g: DevGroup, col: str) -> float | None:
    if col == "runs":
        return float(g.declared_run_count)
    vals = [getattr(r, col) for r in g.runs]
    if any(v is None for v in vals):
        return None
    return math.fsum(vals)


def reconcile_groups(totals: dict, groups: list[DevGroup], name: str = "inferred") -> DevGroup | Finding:
    """Column residual between a table's totals row and its listed groups.

    Returns a synthetic group flagged ``inferred`` holding the residual, or a
    :class:`Finding` when any residual is negative.
    """
    if not groups:
        raise LedgerError("reconcile_groups needs at least one listed group")
    residual: dict[str, float] = {}
    for col in RECONCILE_COLUMNS:
        if totals.get(col) is None:
            continue
        parts = [_group_column(g, col) for g in groups]
        if any(p is None for p in parts):
            continue
        r = round(totals[col] - math.fsum(parts), 9)
        residual[col] = 0.0 if r == 0 else r
    negative = [c for c, v in residual.items() if v < 0]
    if negative:
        cols = ", ".join(f"{c} {residual[c]:g}" for c in negative)
        return Finding("dev_totals", "reconcile", f"listed groups exceed table totals: {cols}")
    runs = int(residual.pop("runs", 0))
    rec = RunRecord(
        id=f"{name}-residual",
        kind="development",
        model_name=name,
        cluster=totals.get("cluster", DEFAULT_CLUSTER),
        gpu_hours=residual.get("gpu_hours"),
        energy_mwh=residual.get("energy_mwh", 0.0),
        co2_t=residual.get("co2_t"),
        water_kl=residual.get("water_kl"),
        pue_folded=bool(totals.get("pue_folded", False)),
        group=name,
        declared_run_count=runs,
        extra={"inferred": True},
    )
    return DevGroup(name, [rec], runs, inferred=True)


def inferred_groups(campaign: Campaign) -> list[DevGroup]:
    if not campaign.dev_totals or not campaign.dev_groups:
        return []
    out = reconcile_groups(
        campaign.dev_totals, campaign.dev_groups, campaign.dev_totals.get("residual_name", "inferred")
    )
    if isinstance(out, Finding):
        return []
    rec = out.runs[0]
    if out.declared_run_count == 0 and not any(
        (getattr(rec, c) or 0) > 0 for c in ("gpu_hours", "energy_mwh", "co2_t", "water_kl")
    ):
        return []
    return [out]


# -- aggregation ---------------------------------------------------------------


@dataclass
class RowImpact:
    """Per-run figures in kg / L / kWh; ``None`` means unknown (external rows)."""

    co2: float | None
    water: float | None
    energy: float | None
    source: str  # "reported", "computed" or "mixed"
    facility: str | None = None


@dataclass
class CampaignImpact:
    rows: dict[str, RowImpact]
    groups: dict[str, ImpactResult]
    development: ImpactResult
    final: ImpactResult
    embodied: ImpactResult
    total: ImpactResult
    facilities: dict[str, FacilityProfile]
    source: str
    pue_mode: str | None
    inferred: list[str]


def _facility_for(rec: RunRecord, profiles: Profiles, default_facility: str | None) -> FacilityProfile | None:
    cluster = rec.cluster
    if cluster in (None, "", DEFAULT_CLUSTER):
        if default_facility is None:
            if rec.kind == "external":
                return None
            raise LedgerError(f"record {rec.id}: no cluster and no default facility")
        cluster = default_facility
    if cluster == EXTERNAL:
        return None
    try:
        return profiles.facility(cluster)
    except ProfileError as exc:
        raise LedgerError(f"record {rec.id}: {exc}") from None


def _folded(rec: RunRecord, pue_mode: str | None) -> bool:
    if pue_mode is None:
        return rec.pue_folded
    if pue_mode not in ("folded", "applied"):
        raise ValueError(f"pue_mode must be 'folded' or 'applied', not {pue_mode!r}")
    return pue_mode == "folded"


def row_impact(
    rec: RunRecord,
    profiles: Profiles,
    source: str = "reported",
    pue_mode: str | None = None,
    default_facility: str | None = None,
) -> RowImpact:
    if source not in ("reported", "computed"):
        raise ValueError("source must be 'reported' or 'computed'")
    fac = _facility_for(rec, profiles, default_facility)
    kwh = None if rec.energy_mwh is None else rec.energy_mwh * 1000.0
    comp_co2 = comp_water = None
    if fac is not None and kwh is not None:
        e = EnergyQuantity(kwh, _folded(rec, pue_mode))
        comp_co2, comp_water = operational_co2(e, fac), operational_water(e, fac)
    rep_co2 = None if rec.co2_t is None else rec.co2_t * 1000.0
    rep_water = None if rec.water_kl is None else rec.water_kl * 1000.0

    if rec.kind != "external" and comp_co2 is None and (rep_co2 is None or source == "computed"):
        raise LedgerError(f"record {rec.id}: missing energy on a non-external row")
    if source == "reported":
        pick = [(rep_co2, comp_co2), (rep_water, comp_water)]
    else:
        pick = [(comp_co2, rep_co2), (comp_water, rep_water)]
    vals, srcs = [], set()
    for first, second in pick:
        if first is not None:
            vals.append(first)
            srcs.add(source)
        elif second is not None:
            vals.append(second)
            srcs.add("computed" if source == "reported" else "reported")
        else:
            vals.append(None)
    tag = srcs.pop() if len(srcs) == 1 else ("mixed" if srcs else source)
    return RowImpact(vals[0], vals[1], kwh, tag, fac.name if fac else None)


def _sum(rows: list[RowImpact], label: str) -> ImpactResult:
    co2 = math.fsum(r.co2 or 0.0 for r in rows)
    water = math.fsum(r.water or 0.0 for r in rows)
    energy = math.fsum(r.energy or 0.0 for r in rows)
    return ImpactResult(co2, water, energy, {label: (co2, water)})


def aggregate(
    campaign: Campaign,
    profiles: Profiles,
    source: str = "reported",
    pue_mode: str | None = None,
    default_facility: str | None = None,
    include_inferred: bool = True,
) -> CampaignImpact:
    """Sum operational impacts per group and for final runs, add embodied.

    ``source="reported"`` uses a record's published co2_t/water_kl when
    present and computes the rest from energy; ``"computed"`` always
    recomputes from energy when a facility and energy are available.
    Rows are visited in id order and summed with :func:`math.fsum`, so totals
    do not depend on record order.
    """
    groups = list(campaign.dev_groups)
    inferred = inferred_groups(campaign) if include_inferred else []
    groups += inferred
    rows: dict[str, RowImpact] = {}
    group_results: dict[str, ImpactResult] = {}
    facilities: dict[str, FacilityProfile] = {}

    def visit(recs: list[RunRecord]) -> list[RowImpact]:
        out = []
        for rec in sorted(recs, key=lambda r: r.id):
            ri = row_impact(rec, profiles, source, pue_mode, default_facility)
            rows[rec.id] = ri
            if ri.facility:
                facilities[ri.facility] = profiles.facility(ri.facility)
            out.append(ri)
        return out

    dev_rows = []
    for g in sorted(groups, key=lambda g: g.name):
        gr = visit(g.runs)
        group_results[g.name] = _sum(gr, "development")
        dev_rows += gr
    development = _sum(dev_rows, "development")
    final = _sum(visit(campaign.final_runs), "final")
    visit(campaign.external_runs)

    if campaign.hardware is not None:
        embodied = embodied_total(campaign.embodied_gpu_hours, campaign.hardware)
    else:
        embodied = ImpactResult.single("embodied", 0.0, 0.0)
    total = ImpactResult.combine([development, final, embodied])
    return CampaignImpact(
        rows, group_results, development, final, embodied, total, facilities,
        source, pue_mode, [g.name for g in inferred],
    )


# -- audit ---------------------------------------------------------------------


def _unit(x: float) -> float:
    """Half-width of the rounding interval implied by how ``x`` is written."""
    exp = Decimal(repr(float(x))).normalize().as_tuple().exponent
    decimals = max(0, -int(exp))
    if float(x) == int(x):
        decimals = 0
    return 0.5 * 10.0 ** (-decimals)


def _implied_range(published: float, energy: float) -> tuple[float, float]:
    du, eu = _unit(published), _unit(energy)
    lo = max(published - du, 0.0) / (energy + eu)
    hi = (published + du) / (energy - eu) if energy - eu > 0 else math.inf
    return lo, hi


def _range_deviation(lo: float, hi: float, expected: float) -> float:
    if lo <= expected <= hi:
        return 0.0
    if expected == 0:
        return math.inf
    return min(abs(expected - lo), abs(expected - hi)) / expected


def _check_factor(rec, quantity, published, energy_mwh, folded_expected, applied_expected) -> Finding | None:
    implied = published / energy_mwh
    lo, hi = _implied_range(published, energy_mwh)
    best = None
    for conv, exp in (("folded", folded_expected), ("applied", applied_expected)):
        point = abs(implied - exp) / exp if exp else (0.0 if implied == 0 else math.inf)
        cand = (_range_deviation(lo, hi, exp), point, conv, exp)
        if best is None or cand[:2] < best[:2]:
            best = cand
    slack_dev, point, conv, exp = best
    if slack_dev <= AUDIT_TOLERANCE:
        return None
    label = {"co2": "carbon intensity", "water": "WUE"}[quantity]
    return Finding(
        rec.id, quantity,
        f"{rec.model_name}: implied {label} {implied:.4g} vs profile {exp:.4g} "
        f"({conv} PUE), deviation {100 * point:.1f}%",
        implied, exp, point, conv,
    )


_DUR = re.compile(r"(\d+(?:\.\d+)?)\s*(years?|yrs?|months?|mo|weeks?|wk|days?)\b")
_UNIT_YEARS = {"y": 1.0, "m": 1 / 12, "w": 7 / 365.25, "d": 1 / 365.25}


def parse_duration(text: str) -> tuple[float, float] | None:
    """Years and half-width of rounding for strings like '7 yrs, 10 mo'."""
    parts = _DUR.findall(text or "")
    if not parts:
        return None
    years = 0.0
    smallest = 1.0
    for num, unit in parts:
        scale = _UNIT_YEARS[unit[0]]
        years += float(num) * scale
        smallest = min(smallest, scale)
    return years, 0.5 * smallest


def _check_equivalency(rec: RunRecord, quantity: str, value: float | None, text, factor: float) -> Finding | None:
    if value is None or not text:
        return None
    parsed = parse_duration(text)
    if parsed is None or parsed[0] <= 0:
        return None
    years, slack = parsed
    implied = value / years
    du = _unit(value)
    lo = max(value - du, 0) / (years + slack)
    hi = (value + du) / (years - slack) if years > slack else math.inf
    if _range_deviation(lo, hi, factor) <= AUDIT_TOLERANCE:
        return None
    what = "t CO2/home-yr" if quantity == "co2_equiv" else "kL/person-yr"
    return Finding(
        rec.id, quantity,
        f"{rec.model_name}: '{text}' implies {implied:.3g} {what} vs table {factor:g}",
        implied, factor, abs(implied - factor) / factor, None,
    )


def audit(
    campaign: Campaign,
    profiles: Profiles,
    equivalencies: EquivalencyTable | None = None,
    default_facility: str | None = None,
) -> list[Finding]:
    """Cross-check published impacts against the facility they claim.

    Implied carbon intensity and WUE are compared with the profile under both
    PUE conventions; the closer one is kept, and a finding is raised when it is
    still more than 2% off after allowing for the rounding of the published
    figures.
    """
    table = equivalencies or profiles.equivalencies
    findings: list[Finding] = []
    runs = [r for g in campaign.dev_groups for r in g.runs] + campaign.final_runs + campaign.external_runs
    for rec in sorted(runs, key=lambda r: r.id):
        try:
            fac = _facility_for(rec, profiles, default_facility)
        except LedgerError:
            fac = None
        if fac is not None and rec.energy_mwh:
            if rec.co2_t is not None:
                f = _check_factor(rec, "co2", rec.co2_t, rec.energy_mwh,
                                  fac.carbon_intensity, fac.pue * fac.carbon_intensity)
                if f:
                    findings.append(f)
            if rec.water_kl is not None:
                f = _check_factor(rec, "water", rec.water_kl, rec.energy_mwh,
                                  fac.wue_total, fac.pue * fac.wue_total)
                if f:
                    findings.append(f)
        for f in (
            _check_equivalency(rec, "co2_equiv", rec.co2_t, rec.extra.get("co2_equiv"), table.co2_per_home_year),
            _check_equivalency(rec, "water_equiv", rec.water_kl, rec.extra.get("water_equiv"), table.water_per_person_year),
        ):
            if f:
                findings.append(f)
    if campaign.dev_totals and campaign.dev_groups:
        out = reconcile_groups(campaign.dev_totals, campaign.dev_groups)
        if isinstance(out, Finding):
            findings.append(out)
    return findings
