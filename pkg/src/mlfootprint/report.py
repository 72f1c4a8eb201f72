"""Render campaign aggregates as markdown, CSV or JSON tables.

Rows are built once as display strings; every output format is produced from
those same cells, so numbers agree across formats by construction.
"""
from __future__ import annotations

import csv
import io
import json

from .impact import ImpactResult, equivalize, fmt_count, fmt_quantity
from .ledger import Campaign, CampaignImpact, Finding, RowImpact, inferred_groups
from .profiles import EquivalencyTable

COLUMNS = ("section", "name", "gpu_hours", "mwh", "runs", "co2_t", "co2_equiv", "water_kl", "water_equiv")
HEADERS = {
    "section": "Section",
    "name": "",
    "gpu_hours": "GPU Hours",
    "mwh": "MWh",
    "runs": "# Runs",
    "co2_t": "CO2 (t)",
    "co2_equiv": "Equiv. (home-years)",
    "water_kl": "Water (kL)",
    "water_equiv": "Equiv. (person-years)",
}
NUMERIC = ("gpu_hours", "mwh", "runs", "co2_t", "water_kl")


def _equiv_cells(co2_kg: float | None, water_l: float | None, table: EquivalencyTable):
    eq = equivalize(ImpactResult(co2_kg or 0.0, water_l or 0.0), table)
    return (
        "-" if co2_kg is None else eq.homes,
        "-" if water_l is None else eq.persons,
    )


def _row(section, name, gpu_hours, mwh, runs, co2_kg, water_l, table) -> dict:
    ce, we = _equiv_cells(co2_kg, water_l, table)
    return {
        "section": section,
        "name": name,
        "gpu_hours": fmt_count(gpu_hours),
        "mwh": fmt_quantity(mwh),
        "runs": "-" if runs is None else str(int(runs)),
        "co2_t": fmt_quantity(None if co2_kg is None else co2_kg / 1000.0),
        "co2_equiv": ce,
        "water_kl": fmt_quantity(None if water_l is None else water_l / 1000.0),
        "water_equiv": we,
    }


def _opt_sum(vals):
    vals = [v for v in vals if v is not None]
    return sum(vals) if vals else None


def report_rows(campaign: Campaign, result: CampaignImpact, table: EquivalencyTable) -> list[dict]:
    rows = []
    groups = sorted(campaign.dev_groups + [g for g in inferred_groups(campaign) if g.name in result.inferred],
                    key=lambda g: g.name)
    for g in groups:
        res = result.groups[g.name]
        label = f"{g.name} (inferred)" if g.inferred else g.name
        rows.append(_row("development", label, _opt_sum(r.gpu_hours for r in g.runs),
                         _opt_sum(r.energy_mwh for r in g.runs), g.declared_run_count,
                         res.co2, res.water, table))
    dev = result.development
    rows.append(_row("development", "Total (development)",
                     _opt_sum(r.gpu_hours for g in groups for r in g.runs),
                     dev.energy / 1000.0, sum(g.declared_run_count for g in groups),
                     dev.co2, dev.water, table))

    for r in campaign.external_runs:
        ri: RowImpact = result.rows[r.id]
        rows.append(_row("external", r.model_name, r.gpu_hours, r.energy_mwh, None, ri.co2, ri.water, table))

    for r in campaign.final_runs:
        ri = result.rows[r.id]
        rows.append(_row("final", r.model_name, r.gpu_hours, r.energy_mwh, None, ri.co2, ri.water, table))
    fin = result.final
    rows.append(_row("final", "Total (Ours)", _opt_sum(r.gpu_hours for r in campaign.final_runs),
                     fin.energy / 1000.0, None, fin.co2, fin.water, table))

    emb = result.embodied
    rows.append(_row("embodied", "Hardware manufacturing",
                     campaign.embodied_gpu_hours if campaign.hardware else None,
                     None, None, emb.co2, emb.water, table))
    tot = result.total
    rows.append(_row("total", "Grand total", None, tot.energy / 1000.0, None, tot.co2, tot.water, table))
    return rows


def footer_lines(result: CampaignImpact, campaign: Campaign, table: EquivalencyTable) -> list[str]:
    lines = [f"impact source: {result.source}; PUE convention: {result.pue_mode or 'per record'}"]
    for name, f in sorted(result.facilities.items()):
        lines.append(
            f"facility {name}: PUE {f.pue:g}, CI {f.carbon_intensity:g} kg/kWh, "
            f"WUE onsite {f.wue_onsite:g} + offsite {f.wue_offsite:g} L/kWh"
        )
    if campaign.hardware is not None:
        hw = campaign.hardware
        lines.append(
            f"hardware {hw.name}: {hw.server_embodied_co2:g} kg per {hw.gpus_per_server}-GPU server, "
            f"{hw.per_gpu_water:g} L per GPU, lifespan {hw.lifespan_hours:g} h"
        )
    lines.append(
        f"equivalencies: {table.co2_per_home_year:g} t/home-yr, {table.co2_per_tanker_truck:g} t/tanker, "
        f"{table.co2_per_forest_acre_year:g} t/forest-acre-yr, {table.water_per_person_year:g} kL/person-yr"
    )
    if result.inferred:
        lines.append("inferred groups (table totals minus listed rows): " + ", ".join(result.inferred))
    return lines


def cell_value(cell: str):
    """Numeric value of a display cell, or the string itself."""
    if cell == "-":
        return None
    if cell.endswith("k"):
        try:
            return float(cell[:-1]) * 1000
        except ValueError:
            return cell
    try:
        return float(cell)
    except ValueError:
        return cell


def _md_cell(x) -> str:
    return str(x).replace("|", "\\|")


def render_table(rows: list[dict], style: str, columns=COLUMNS, footer: list[str] = ()) -> str:
    if style == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])
        for line in footer:
            w.writerow(["# " + line])
        return buf.getvalue()
    if style == "json":
        doc = {
            "rows": [{c: (cell_value(r[c]) if c in NUMERIC else r[c]) for c in columns} for r in rows],
            "footer": list(footer),
        }
        return json.dumps(doc, indent=2) + "\n"
    if style == "markdown":
        heads = [HEADERS.get(c, c) for c in columns]
        out = ["| " + " | ".join(heads) + " |", "|" + "|".join("---" for _ in columns) + "|"]
        for r in rows:
            out.append("| " + " | ".join(_md_cell(r[c]) for c in columns) + " |")
        if footer:
            out.append("")
            out.extend(f"- {line}" for line in footer)
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown style {style!r}")


def render_report(campaign: Campaign, result: CampaignImpact, table: EquivalencyTable, style: str = "markdown") -> str:
    return render_table(report_rows(campaign, result, table), style, footer=footer_lines(result, campaign, table))


def render_findings(findings: list[Finding], style: str = "markdown") -> str:
    cols = ("row", "quantity", "implied", "expected", "deviation", "convention", "message")
    rows = []
    for f in findings:
        rows.append({
            "row": f.row,
            "quantity": f.quantity,
            "implied": "-" if f.implied is None else f"{f.implied:.4g}",
            "expected": "-" if f.expected is None else f"{f.expected:.4g}",
            "deviation": "-" if f.deviation is None else f"{100 * f.deviation:.1f}%",
            "convention": f.convention or "-",
            "message": f.message,
        })
    if style == "json":
        return json.dumps([f.__dict__ for f in findings], indent=2) + "\n"
    return render_table(rows, style, columns=cols)
