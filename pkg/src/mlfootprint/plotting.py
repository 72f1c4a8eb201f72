"""Figures written next to the tabular reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ledger import Campaign, CampaignImpact  # noqa: E402
from .telemetry import FluctuationReport, PowerTrace, mean_power_series  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_power_trace(trace: PowerTrace, report: FluctuationReport, path, device_max: float = 700.0):
    t, p = mean_power_series(trace)
    secs = (t - t[0]) / 1000.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(secs, p, lw=0.8, color="tab:blue", label="mean GPU power")
        ax.axhline(report.hi_threshold, color="tab:green", ls="--", lw=0.8,
                   label=f"active ({report.hi_threshold:.0f} W)")
        ax.axhline(report.lo_threshold, color="tab:red", ls="--", lw=0.8,
                   label=f"dip ({report.lo_threshold:.0f} W)")
        for start, end, _, _ in report.events:
            ax.axvspan((start - t[0]) / 1000.0, (end - t[0]) / 1000.0, color="tab:red", alpha=0.12)
        ax.set_ylim(0, device_max * 1.05)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("power (W)")
        ax.set_title(f"{report.event_count} dips, active duty cycle {100 * report.duty_cycle_active:.1f}%")
        ax.legend(loc="lower right", fontsize=7, frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_campaign(campaign: Campaign, result: CampaignImpact, path):
    """Per-run CO2 and water for the final runs, largest first."""
    runs = sorted(campaign.final_runs, key=lambda r: result.rows[r.id].co2 or 0.0)
    names = [r.model_name for r in runs]
    co2 = [(result.rows[r.id].co2 or 0.0) / 1000.0 for r in runs]
    water = [(result.rows[r.id].water or 0.0) / 1000.0 for r in runs]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, sharey=True, figsize=(8, 0.3 * len(runs) + 1.2))
        a1.barh(names, co2, color="tab:gray")
        a1.set_xlabel("tCO2eq")
        a2.barh(names, water, color="tab:blue")
        a2.set_xlabel("water (kL)")
        fig.suptitle("Final training runs")
        fig.savefig(path)
        plt.close(fig)
