from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from mlfootprint import ledger, profiles
from mlfootprint.telemetry import PowerSample, PowerTrace


def data_path(name: str) -> Path:
    return Path(str(resources.files("mlfootprint.data").joinpath(name)))


def checkpoint_trace(n_dips=12, active_s=55, dip_s=6, step_ms=500, n_dev=8, seed=3):
    """Eight GPUs near 620-690 W with synchronized ~100 W checkpoint dips.

    Returns (trace, n_dips, expected active fraction). Dip edges carry a
    one-sample ramp through the middle band so thresholds see real
    transitions, and the trace starts and ends active.
    """
    rng = np.random.default_rng(seed)
    seg = []
    for k in range(n_dips):
        seg += [("hi", active_s), ("ramp", 1), ("lo", dip_s), ("ramp", 1)]
    seg.append(("hi", active_s))
    per_s = 1000 // step_ms
    levels = []
    for kind, secs in seg:
        levels += [kind] * (secs * per_s)
    t = np.arange(len(levels), dtype=np.int64) * step_ms
    samples = []
    for d in range(n_dev):
        w = np.array([
            rng.uniform(620, 690) if k == "hi" else rng.uniform(90, 110) if k == "lo" else 380.0
            for k in levels
        ])
        for ti, wi in zip(t.tolist(), w.tolist()):
            samples.append(PowerSample(ti, f"gpu{d}", wi))
    trace = PowerTrace.from_samples(samples)
    hold = np.append(np.diff(t), 0)
    active = sum(h for h, k in zip(hold, levels) if k == "hi") / (t[-1] - t[0])
    return trace, n_dips, float(active)


@pytest.fixture(scope="session")
def dip_trace():
    return checkpoint_trace()


@pytest.fixture(scope="session")
def presets():
    return profiles.preset_profiles()


@pytest.fixture()
def olmo_campaign(presets):
    snap = ledger.Ledger(data_path("olmo_campaign.jsonl")).load()
    return ledger.campaign_from_snapshot(snap, presets)


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
