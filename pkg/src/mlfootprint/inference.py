"""Inference deployment costs: per-request impact, breakeven, fitting, simulation."""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np
from scipy.optimize import nnls

from .impact import EnergyQuantity, operational_co2, operational_water
from .profiles import FacilityProfile

BATCH = math.inf
MEASUREMENT_COLUMNS = (
    "model_name", "request_rate", "n_requests", "energy_kwh",
    "makespan_s", "mean_input_tokens", "mean_output_tokens",
)


class FitError(ValueError):
    pass


def parse_rate(raw) -> float:
    if isinstance(raw, (int, float)):
        rate = float(raw)
    else:
        s = str(raw).strip().lower()
        rate = BATCH if s in ("batch", "inf", "infinity", "∞") else float(s)
    if not rate > 0:
        raise ValueError(f"request rate must be positive or 'batch' (got {raw!r})")
    return rate


def rate_label(rate: float) -> str:
    return "batch" if math.isinf(rate) else f"{rate:g}"


@dataclass(frozen=True)
class InferenceMeasurement:
    model_name: str
    request_rate: float  # req/s, inf for batch
    n_requests: int
    energy_kwh: float
    makespan_s: float
    mean_input_tokens: float
    mean_output_tokens: float

    def __post_init__(self):
        if self.n_requests <= 0:
            raise ValueError("n_requests must be positive")
        if self.energy_kwh < 0:
            raise ValueError("energy_kwh must be non-negative")
        if not self.makespan_s > 0:
            raise ValueError("makespan_s must be positive")

    @property
    def total_input_tokens(self) -> float:
        return self.n_requests * self.mean_input_tokens

    @property
    def total_output_tokens(self) -> float:
        return self.n_requests * self.mean_output_tokens


def read_measurements(fh: IO[str]) -> list[InferenceMeasurement]:
    reader = csv.DictReader(fh)
    missing = set(MEASUREMENT_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"measurement CSV missing columns: {', '.join(sorted(missing))}")
    out = []
    for i, row in enumerate(reader, start=2):
        try:
            out.append(InferenceMeasurement(
                model_name=row["model_name"].strip(),
                request_rate=parse_rate(row["request_rate"]),
                n_requests=int(row["n_requests"]),
                energy_kwh=float(row["energy_kwh"]),
                makespan_s=float(row["makespan_s"]),
                mean_input_tokens=float(row["mean_input_tokens"]),
                mean_output_tokens=float(row["mean_output_tokens"]),
            ))
        except ValueError as exc:
            raise ValueError(f"measurement line {i}: {exc}") from None
    return out


def write_measurements(ms: Iterable[InferenceMeasurement], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MEASUREMENT_COLUMNS)
    for m in ms:
        w.writerow([m.model_name, rate_label(m.request_rate), m.n_requests, repr(m.energy_kwh),
                    repr(m.makespan_s), repr(m.mean_input_tokens), repr(m.mean_output_tokens)])


# -- per-request impacts and breakeven --------------------------------------------


def per_request_impact(m: InferenceMeasurement, profile: FacilityProfile, pue_folded: bool = True) -> dict[str, float]:
    """Energy (kWh), CO2 (g) and water (L) per request.

    Defaults to the folded convention: the measured kWh is taken as-is,
    which is how the published inference tables are computed.
    """
    e = EnergyQuantity(m.energy_kwh, pue_folded)
    n = m.n_requests
    return {
        "energy_kwh": m.energy_kwh / n,
        "co2_g": operational_co2(e, profile) * 1000.0 / n,
        "water_l": operational_water(e, profile) / n,
    }


def breakeven(training_co2_t: float, per_request_co2_g: float) -> int | None:
    """Requests needed for inference CO2 to equal or exceed training CO2.

    ``None`` means not computable (no positive per-request impact).
    """
    if not per_request_co2_g > 0 or not training_co2_t >= 0:
        return None
    return math.ceil(training_co2_t * 1e6 / per_request_co2_g)


def fmt_big_count(n: int | None) -> str:
    if n is None:
        return "not computable"
    for scale, word in ((1e12, "tril."), (1e9, "bil."), (1e6, "mil."), (1e3, "k")):
        if n >= scale:
            return f"{float(f'{n / scale:.3g}'):g} {word}"
    return str(n)


@dataclass
class BreakevenResult:
    model_name: str
    scenario: str
    per_request_co2: float  # g
    per_request_water: float  # L
    breakeven_count: int | None
    training_basis: str = "final"


def breakeven_for(m: InferenceMeasurement, training_co2_t: float | None, profile: FacilityProfile,
                  pue_folded: bool = True, training_basis: str = "final") -> BreakevenResult:
    pr = per_request_impact(m, profile, pue_folded)
    count = None if training_co2_t is None else breakeven(training_co2_t, pr["co2_g"])
    return BreakevenResult(m.model_name, rate_label(m.request_rate), pr["co2_g"], pr["water_l"],
                           count, training_basis)


# -- energy model ------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyCoeffs:
    per_input_token_kwh: float = 0.0
    per_output_token_kwh: float = 0.0
    per_active_second_kwh: float = 0.0
    shared_token_coeff: bool = False

    def __post_init__(self):
        if min(self.per_input_token_kwh, self.per_output_token_kwh, self.per_active_second_kwh) < 0:
            raise ValueError("energy coefficients must be non-negative")

    def energy(self, input_tokens: float, output_tokens: float, active_s: float) -> float:
        return (self.per_input_token_kwh * input_tokens
                + self.per_output_token_kwh * output_tokens
                + self.per_active_second_kwh * active_s)

    def predict(self, m: InferenceMeasurement) -> float:
        return self.energy(m.total_input_tokens, m.total_output_tokens, m.makespan_s)


def _rank(cols: np.ndarray) -> int:
    norms = np.linalg.norm(cols, axis=0)
    if np.any(norms == 0):
        cols = cols[:, norms > 0]
        norms = norms[norms > 0]
    if cols.shape[1] == 0:
        return 0
    return int(np.linalg.matrix_rank(cols / norms, tol=1e-9))


def fit_energy_model(measurements: list[InferenceMeasurement]) -> EnergyCoeffs:
    """Non-negative least squares of energy on (input tokens, output tokens, makespan).

    When the token mix never changes across measurements (the usual case
    for one model replayed at several rates) the input/output split is not
    identifiable; a single per-token coefficient is fitted and reported for
    both, with ``shared_token_coeff`` set.
    """
    if len(measurements) < 2:
        raise FitError("need at least two measurements")
    y = np.array([m.energy_kwh for m in measurements])
    tin = np.array([m.total_input_tokens for m in measurements], dtype=float)
    tout = np.array([m.total_output_tokens for m in measurements], dtype=float)
    span = np.array([m.makespan_s for m in measurements], dtype=float)

    full = np.column_stack([tin, tout, span])
    if _rank(full) == 3:
        X, shared = full, False
    else:
        tokens = tin + tout
        X = np.column_stack([tokens, span])
        if _rank(np.column_stack([tin, tout])) == 2:
            raise FitError("rank-deficient: makespan is a linear combination of the token totals")
        if _rank(X) < 2:
            varies = [name for name, col in (("token totals", tokens), ("makespan", span))
                      if np.ptp(col) > 0]
            if not varies:
                raise FitError("rank-deficient: no variation in token totals or makespan")
            raise FitError("rank-deficient: token totals and makespan are proportional; "
                           "makespan must vary independently of tokens")
        shared = True
    if len({m.request_rate for m in measurements}) < 2:
        raise FitError("measurements must span at least two distinct request rates")
    scale = np.linalg.norm(X, axis=0)
    coef, _ = nnls(X / scale, y)
    coef = coef / scale
    if shared:
        return EnergyCoeffs(coef[0], coef[0], coef[1], shared_token_coeff=True)
    return EnergyCoeffs(coef[0], coef[1], coef[2])


# -- workload simulation -------------------------------------------------------------


@dataclass(frozen=True)
class LengthDist:
    """Log-normal token-length distribution given by its mean and log-sd."""

    mean: float
    dispersion: float = 0.6

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.dispersion == 0:
            return np.full(n, max(1, int(round(self.mean))), dtype=np.int64)
        mu = math.log(self.mean) - 0.5 * self.dispersion ** 2
        x = rng.lognormal(mu, self.dispersion, n)
        return np.maximum(1, np.rint(x)).astype(np.int64)


@dataclass(frozen=True)
class WorkloadScenario:
    request_rate: float
    n_requests: int = 2400
    seed: int = 0
    input_len_dist: LengthDist = field(default_factory=lambda: LengthDist(237.0))
    output_len_dist: LengthDist = field(default_factory=lambda: LengthDist(210.0))
    energy_coeffs: EnergyCoeffs = field(default_factory=EnergyCoeffs)
    model_name: str = "simulated"
    max_concurrency: int = 128
    prefill_tokens_per_s: float = 8000.0
    decode_tokens_per_s: float = 50.0

    def __post_init__(self):
        if not self.request_rate > 0:
            raise ValueError("request_rate must be positive (use inf for batch)")
        if self.n_requests <= 0 or self.max_concurrency <= 0:
            raise ValueError("n_requests and max_concurrency must be positive")
        if min(self.input_len_dist.mean, self.output_len_dist.mean) <= 0:
            raise ValueError("token length means must be positive")
        if min(self.input_len_dist.dispersion, self.output_len_dist.dispersion) < 0:
            raise ValueError("dispersion must be non-negative")
        if min(self.prefill_tokens_per_s, self.decode_tokens_per_s) <= 0:
            raise ValueError("server throughput must be positive")


SCENARIO_KEYS = {
    "request_rate", "n_requests", "seed", "model_name",
    "input_mean", "input_dispersion", "output_mean", "output_dispersion",
    "coeff_input_kwh", "coeff_output_kwh", "coeff_active_kwh",
    "max_concurrency", "prefill_tokens_per_s", "decode_tokens_per_s",
}


def scenario_from_config(items: dict[str, str]) -> WorkloadScenario:
    unknown = sorted(set(items) - SCENARIO_KEYS)
    if unknown:
        raise ValueError(f"unknown scenario key {unknown[0]!r}")
    if "request_rate" not in items:
        raise ValueError("scenario needs request_rate")
    g = items.get
    return WorkloadScenario(
        request_rate=parse_rate(items["request_rate"]),
        n_requests=int(g("n_requests", 2400)),
        seed=int(g("seed", 0)),
        input_len_dist=LengthDist(float(g("input_mean", 237)), float(g("input_dispersion", 0.6))),
        output_len_dist=LengthDist(float(g("output_mean", 210)), float(g("output_dispersion", 0.6))),
        energy_coeffs=EnergyCoeffs(float(g("coeff_input_kwh", 0)), float(g("coeff_output_kwh", 0)),
                                   float(g("coeff_active_kwh", 0))),
        model_name=g("model_name", "simulated"),
        max_concurrency=int(g("max_concurrency", 128)),
        prefill_tokens_per_s=float(g("prefill_tokens_per_s", 8000)),
        decode_tokens_per_s=float(g("decode_tokens_per_s", 50)),
    )


def arrival_times(rate: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Poisson arrival epochs (cumulative exponential gaps); all zero for batch."""
    if math.isinf(rate):
        return np.zeros(n)
    return np.cumsum(rng.exponential(1.0 / rate, n))


def simulate_workload(s: WorkloadScenario) -> InferenceMeasurement:
    """Replay a Poisson (or all-at-once) request stream through a slot server.

    The server runs up to ``max_concurrency`` requests at once, FIFO. Each
    request takes ``in/prefill + out/decode`` seconds once it holds a slot.
    Token lengths and arrivals come from independent child streams of the
    seed, so the same seed gives the same prompts at every rate.
    """
    len_ss, arr_ss = np.random.SeedSequence(s.seed).spawn(2)
    len_rng = np.random.default_rng(len_ss)
    ins = s.input_len_dist.sample(len_rng, s.n_requests)
    outs = s.output_len_dist.sample(len_rng, s.n_requests)
    arrivals = arrival_times(s.request_rate, s.n_requests, np.random.default_rng(arr_ss))
    service = ins / s.prefill_tokens_per_s + outs / s.decode_tokens_per_s

    free = [0.0] * min(s.max_concurrency, s.n_requests)
    heapq.heapify(free)
    makespan = 0.0
    for a, d in zip(arrivals.tolist(), service.tolist()):
        start = max(a, heapq.heappop(free))
        done = start + d
        heapq.heappush(free, done)
        makespan = max(makespan, done)

    tin, tout = float(ins.sum()), float(outs.sum())
    energy = s.energy_coeffs.energy(tin, tout, makespan)
    return InferenceMeasurement(
        model_name=s.model_name,
        request_rate=s.request_rate,
        n_requests=s.n_requests,
        energy_kwh=energy,
        makespan_s=makespan,
        mean_input_tokens=tin / s.n_requests,
        mean_output_tokens=tout / s.n_requests,
    )
