from __future__ import annotations

import csv
import io
import json
import re

import pytest

from mlfootprint import ledger as L, report as R
from mlfootprint.report import cell_value


@pytest.fixture()
def rendered(olmo_campaign, presets):
    res = L.aggregate(olmo_campaign, presets, pue_mode="folded", default_facility="jupiter")
    rows = R.report_rows(olmo_campaign, res, presets.equivalencies)
    return rows, {s: R.render_report(olmo_campaign, res, presets.equivalencies, s) for s in ("csv", "json", "markdown")}


def test_formats_agree_on_every_number(rendered):
    rows, out = rendered
    js = json.loads(out["json"])["rows"]
    cs = [r for r in csv.DictReader(io.StringIO(out["csv"])) if not r["section"].startswith("#")]
    md = [l for l in out["markdown"].splitlines() if l.startswith("| ") and not l.startswith("| Section")]
    assert len(js) == len(cs) == len(md) == len(rows)
    for r, j, c, m in zip(rows, js, cs, md):
        cells = [x.strip().replace("\\|", "|") for x in re.split(r"(?<!\\)\|", m.strip("|"))]
        for k, col in enumerate(R.COLUMNS):
            assert cell_value(c[col]) == cell_value(cells[k]) == (j[col] if col in R.NUMERIC else cell_value(j[col]))


def test_report_totals(rendered):
    rows, _ = rendered
    by = {r["name"]: r for r in rows}
    assert (by["Total (Ours)"]["mwh"], by["Total (Ours)"]["co2_t"], by["Total (Ours)"]["water_kl"]) == ("913", "312", "1921")
    assert by["1B (inferred)"]["gpu_hours"] == "164k"
    assert by["Total (development)"]["runs"] == "813"


def test_footer_lists_profiles(rendered):
    _, out = rendered
    assert "facility jupiter: PUE 1.2" in out["markdown"]
    assert "hardware h100" in out["markdown"]


def test_unknown_style():
    with pytest.raises(ValueError):
        R.render_table([], "yaml")


def test_findings_render(olmo_campaign, presets):
    f = L.audit(olmo_campaign, presets)
    assert "final-olmo-2-13b" in R.render_findings(f)
    assert json.loads(R.render_findings(f, "json"))[0]["row"]
