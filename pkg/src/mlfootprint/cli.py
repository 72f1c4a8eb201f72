"""``mlfootprint`` command line: one subcommand per accounting operation.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error. Data goes to
stdout (or ``--out``); diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import impact, inference, ledger, profiles, report, telemetry

log = logging.getLogger("mlfootprint")

BUILTIN = "builtin:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _path(ref: str) -> Path:
    """Filesystem path, or a packaged data file via ``builtin:<name>``."""
    if ref.startswith(BUILTIN):
        name = ref[len(BUILTIN):]
        data = resources.files("mlfootprint.data")
        for cand in (name, name + ".jsonl", name + ".csv", name + ".ini"):
            if data.joinpath(cand).is_file():
                return Path(str(data.joinpath(cand)))
        raise FileNotFoundError(f"no packaged data file {name!r}")
    return Path(ref)


def _emit(text: str, args) -> None:
    if getattr(args, "out", None):
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _num(x: float) -> str:
    return f"{x:.10g}"


def _kv(pairs: list[tuple[str, object]], style: str) -> str:
    """Two-column quantity/value table; numbers are formatted once."""
    rows = [{"quantity": k, "value": _num(v) if isinstance(v, float) else str(v)} for k, v in pairs]
    return report.render_table(rows, style, columns=("quantity", "value"))


def _profiles(args) -> profiles.Profiles:
    return profiles.default_profiles([str(_path(p)) for p in (args.profiles or [])])


def _load_trace(args) -> telemetry.PowerTrace:
    fmt = args.input_format
    return telemetry.read_trace(_path(args.trace), args.measured_nodes, args.gpus_per_node, fmt)


# -- commands -------------------------------------------------------------------


def cmd_ingest(args):
    trace = _load_trace(args)
    print(f"{trace.sample_count} samples on {len(trace.devices)} devices; "
          f"{len(trace.malformed_lines)} malformed lines; {len(trace.flagged)} flagged samples",
          file=sys.stderr)
    _emit(telemetry.dumps_trace(trace) + "\n", args)


def cmd_energy(args):
    trace = _load_trace(args)
    node = telemetry.integrate_energy(trace, node_overhead=args.overhead)
    total_nodes = args.nodes if args.nodes is not None else trace.measured_node_count
    total = telemetry.extrapolate_energy(node, trace.measured_node_count, total_nodes)
    _emit(_kv([
        ("measured_energy_kwh", node),
        ("measured_nodes", trace.measured_node_count),
        ("total_nodes", total_nodes),
        ("total_energy_kwh", total),
    ], args.format), args)


def cmd_fluct(args):
    trace = _load_trace(args)
    rep = telemetry.detect_fluctuations(trace, args.device_max, args.hi, args.lo, args.min_dwell_ms)
    if args.format == "json":
        _emit(json.dumps(rep.__dict__, indent=2) + "\n", args)
    else:
        rows = [{"start_ms": str(s), "end_ms": str(e), "pre_dip_mean_w": _num(a), "dip_mean_w": _num(b)}
                for s, e, a, b in rep.events]
        head = _kv([
            ("event_count", rep.event_count),
            ("duty_cycle_active", rep.duty_cycle_active),
            ("max_ramp_w_per_s", rep.max_ramp),
            ("hi_threshold_w", rep.hi_threshold),
            ("lo_threshold_w", rep.lo_threshold),
        ], args.format)
        body = report.render_table(rows, args.format,
                                   columns=("start_ms", "end_ms", "pre_dip_mean_w", "dip_mean_w"))
        _emit(head + "\n" + body, args)
    if args.figure:
        from .plotting import plot_power_trace
        plot_power_trace(trace, rep, args.figure, args.device_max)
        print(f"figure written to {args.figure}", file=sys.stderr)


def cmd_impact(args):
    prof = _profiles(args)
    fac = profiles.resolve_facility(args.profile, prof)
    if args.trace:
        trace = _load_trace(args)
        node = telemetry.integrate_energy(trace)
        nodes = args.nodes if args.nodes is not None else trace.measured_node_count
        kwh = telemetry.extrapolate_energy(node, trace.measured_node_count, nodes)
    elif args.energy_kwh is not None:
        kwh = args.energy_kwh
    elif args.energy_mwh is not None:
        kwh = args.energy_mwh * 1000.0
    else:
        raise UsageError("impact: give --energy-kwh, --energy-mwh or --trace")
    e = impact.EnergyQuantity(kwh, pue_folded=(args.pue_mode == "folded"))
    res = impact.operational_impact(e, fac)
    eq = impact.equivalize(res, prof.equivalencies if args.equiv is None
                           else profiles.resolve_equivalencies(str(_path(args.equiv))))
    _emit(_kv([
        ("energy_kwh", kwh),
        ("facility", fac.name),
        ("pue_mode", args.pue_mode),
        ("co2_kg", res.co2),
        ("water_l", res.water),
        ("home_energy_equiv", eq.homes),
        ("person_water_equiv", eq.persons),
    ], args.format), args)


def cmd_embodied(args):
    prof = _profiles(args)
    hw = profiles.resolve_hardware(args.hardware, prof)
    per = impact.embodied_per_gpu(hw)
    rate = impact.amortized_rate(hw)
    pairs = [
        ("hardware", hw.name),
        ("co2_kg_per_gpu", per["co2"]),
        ("water_l_per_gpu", per["water"]),
        ("co2_kg_per_gpu_hour", rate["co2"]),
        ("water_l_per_gpu_hour", rate["water"]),
    ]
    if args.gpu_hours is not None:
        tot = impact.embodied_total(args.gpu_hours, hw)
        pairs += [("gpu_hours", float(args.gpu_hours)), ("co2_kg", tot.co2), ("water_l", tot.water)]
    _emit(_kv(pairs, args.format), args)


_RECORD_FLAGS = ("id", "kind", "model_name", "cluster", "gpu_hours", "energy_mwh", "tokens_trained",
                 "co2_t", "water_kl", "group", "declared_run_count")


def cmd_ledger_add(args):
    if args.record:
        rec = json.loads(args.record)
        if not isinstance(rec, dict):
            raise ValueError("--record must be a JSON object")
    else:
        rec = {k: getattr(args, k) for k in _RECORD_FLAGS if getattr(args, k) is not None}
        rec["pue_folded"] = args.pue_folded
    rec = ledger.RunRecord.from_dict(rec)
    ledger.Ledger(_path(args.ledger)).append(rec)
    print(f"appended {rec.id} to {args.ledger}", file=sys.stderr)


def _campaign(args, prof):
    snap = ledger.Ledger(_path(args.ledger)).load()
    camp = ledger.campaign_from_snapshot(snap, prof)
    if getattr(args, "hardware", None):
        camp.hardware = profiles.resolve_hardware(args.hardware, prof)
    if getattr(args, "total_gpu_hours", None) is not None:
        camp.total_gpu_hours = args.total_gpu_hours
    return camp


def cmd_ledger_report(args):
    prof = _profiles(args)
    camp = _campaign(args, prof)
    if args.profile:
        prof.facilities.setdefault(args.profile, profiles.resolve_facility(args.profile, prof))
    table = profiles.resolve_equivalencies(None if args.equiv is None else str(_path(args.equiv)), prof)
    res = ledger.aggregate(camp, prof, source=args.source, pue_mode=args.pue_mode,
                           default_facility=args.profile)
    _emit(report.render_report(camp, res, table, args.format), args)
    if args.figure:
        from .plotting import plot_campaign
        plot_campaign(camp, res, args.figure)
        print(f"figure written to {args.figure}", file=sys.stderr)


def cmd_ledger_audit(args):
    prof = _profiles(args)
    camp = _campaign(args, prof)
    table = profiles.resolve_equivalencies(None if args.equiv is None else str(_path(args.equiv)), prof)
    findings = ledger.audit(camp, prof, table, default_facility=args.profile)
    text = report.render_findings(findings, args.format)
    if camp.dev_totals and camp.dev_groups:
        out = ledger.reconcile_groups(camp.dev_totals, camp.dev_groups,
                                      camp.dev_totals.get("residual_name", "inferred"))
        if isinstance(out, ledger.DevGroup):
            r = out.runs[0]
            pairs = [("group", out.name), ("gpu_hours", r.gpu_hours), ("energy_mwh", r.energy_mwh),
                     ("runs", out.declared_run_count), ("co2_t", r.co2_t), ("water_kl", r.water_kl)]
            pairs = [(k, "-" if v is None else v) for k, v in pairs]
            if args.format == "json":
                doc = {"findings": json.loads(text), "inferred_group": dict(pairs)}
                text = json.dumps(doc, indent=2) + "\n"
            else:
                text += "\ninferred residual group:\n" + _kv(pairs, args.format)
    print(f"{len(findings)} findings", file=sys.stderr)
    _emit(text, args)


def cmd_breakeven(args):
    prof = _profiles(args)
    fac = profiles.resolve_facility(args.profile, prof)
    with open(_path(args.measurement), encoding="utf-8") as fh:
        ms = inference.read_measurements(fh)
    if args.model:
        ms = [m for m in ms if m.model_name == args.model]
        if not ms:
            raise ValueError(f"no measurement rows for model {args.model!r}")
    if args.rate:
        want = inference.parse_rate(args.rate)
        ms = [m for m in ms if m.request_rate == want]
    rows = []
    for m in ms:
        b = inference.breakeven_for(m, args.training_co2, fac, args.pue_mode == "folded", args.training_basis)
        rows.append({
            "model": b.model_name,
            "scenario": b.scenario,
            "co2_g_per_request": f"{b.per_request_co2:.4g}",
            "water_l_per_request": f"{b.per_request_water:.4g}",
            "training_basis": b.training_basis,
            "breakeven": inference.fmt_big_count(b.breakeven_count),
            "breakeven_exact": "-" if b.breakeven_count is None else str(b.breakeven_count),
        })
    cols = ("model", "scenario", "co2_g_per_request", "water_l_per_request", "training_basis",
            "breakeven", "breakeven_exact")
    _emit(report.render_table(rows, args.format, columns=cols), args)


def _scenario(args) -> inference.WorkloadScenario:
    if args.scenario:
        path, _, section = args.scenario.partition(":")
        prof = profiles.load_profiles(_path(path))
        if not section:
            if len(prof.scenarios) != 1:
                raise ValueError("scenario file has several sections; use FILE:NAME")
            section = next(iter(prof.scenarios))
        items = dict(prof.scenarios[section])
        if args.seed is not None:
            items["seed"] = str(args.seed)
        return inference.scenario_from_config(items)
    if args.rate is None:
        raise UsageError("simulate: give --scenario or --rate")
    a, b, c = args.coeffs
    return inference.WorkloadScenario(
        request_rate=inference.parse_rate(args.rate),
        n_requests=args.n,
        seed=0 if args.seed is None else args.seed,
        input_len_dist=inference.LengthDist(args.input_mean, args.dispersion),
        output_len_dist=inference.LengthDist(args.output_mean, args.dispersion),
        energy_coeffs=inference.EnergyCoeffs(a, b, c),
    )


def cmd_simulate(args):
    m = _scenario_run(args)
    if args.format == "csv":
        import io
        buf = io.StringIO()
        inference.write_measurements([m], buf)
        _emit(buf.getvalue(), args)
        return
    _emit(_kv([
        ("model_name", m.model_name),
        ("request_rate", inference.rate_label(m.request_rate)),
        ("n_requests", m.n_requests),
        ("energy_kwh", m.energy_kwh),
        ("makespan_s", m.makespan_s),
        ("seconds_per_100_requests", 100.0 * m.makespan_s / m.n_requests),
        ("mean_input_tokens", m.mean_input_tokens),
        ("mean_output_tokens", m.mean_output_tokens),
    ], args.format), args)


def _scenario_run(args):
    return inference.simulate_workload(_scenario(args))


def cmd_fit(args):
    with open(_path(args.measurements), encoding="utf-8") as fh:
        ms = inference.read_measurements(fh)
    if args.model:
        ms = [m for m in ms if m.model_name == args.model]
    coeffs = inference.fit_energy_model(ms)
    pairs = [
        ("per_input_token_kwh", coeffs.per_input_token_kwh),
        ("per_output_token_kwh", coeffs.per_output_token_kwh),
        ("per_active_second_kwh", coeffs.per_active_second_kwh),
        ("shared_token_coeff", str(coeffs.shared_token_coeff).lower()),
    ]
    for m in ms:
        pred = coeffs.predict(m)
        pairs.append((f"residual[{m.model_name} @ {inference.rate_label(m.request_rate)}]",
                      (pred - m.energy_kwh) / m.energy_kwh if m.energy_kwh else pred))
    _emit(_kv(pairs, args.format), args)


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--profiles", action="append", metavar="FILE",
                        help="extra profile config (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    tr = _Parser(add_help=False)
    tr.add_argument("--trace", required=True, help="CSV, JSONL or canonical JSON power trace")
    tr.add_argument("--input-format", choices=("csv", "jsonl"), help="default: from the file extension")
    tr.add_argument("--measured-nodes", type=int, default=1)
    tr.add_argument("--gpus-per-node", type=int, default=8)

    p = _Parser(prog="mlfootprint", description="Energy, carbon and water accounting for ML campaigns.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common, tr], help="validate a trace and emit canonical JSON")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("energy", parents=[common, tr], help="integrate a trace to kWh and extrapolate")
    s.add_argument("--nodes", type=int, help="total nodes in the run")
    s.add_argument("--overhead", type=float, default=1.0, help="node overhead multiplier")
    s.set_defaults(func=cmd_energy)

    s = sub.add_parser("fluct", parents=[common, tr], help="detect checkpoint power dips")
    s.add_argument("--device-max", type=float, default=telemetry.H100_MAX_W)
    s.add_argument("--hi", type=float, default=0.85)
    s.add_argument("--lo", type=float, default=0.25)
    s.add_argument("--min-dwell-ms", type=int, default=2000)
    s.add_argument("--figure", help="write a power plot (png/pdf/svg)")
    s.set_defaults(func=cmd_fluct)

    s = sub.add_parser("impact", parents=[common], help="operational CO2 and water for an energy figure")
    s.add_argument("--energy-kwh", type=float)
    s.add_argument("--energy-mwh", type=float)
    s.add_argument("--trace")
    s.add_argument("--input-format", choices=("csv", "jsonl"))
    s.add_argument("--measured-nodes", type=int, default=1)
    s.add_argument("--gpus-per-node", type=int, default=8)
    s.add_argument("--nodes", type=int)
    s.add_argument("--profile", default="jupiter")
    s.add_argument("--pue-mode", choices=("applied", "folded"), default="applied")
    s.add_argument("--equiv")
    s.set_defaults(func=cmd_impact)

    s = sub.add_parser("embodied", parents=[common], help="embodied hardware impact")
    s.add_argument("--hardware", default="h100")
    s.add_argument("--gpu-hours", type=float)
    s.set_defaults(func=cmd_embodied)

    s = sub.add_parser("ledger-add", parents=[common], help="append a run record")
    s.add_argument("--ledger", required=True)
    s.add_argument("--record", help="full record as a JSON object")
    for flag in _RECORD_FLAGS:
        typ = str
        if flag in ("gpu_hours", "energy_mwh", "tokens_trained", "co2_t", "water_kl"):
            typ = float
        elif flag == "declared_run_count":
            typ = int
        s.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    s.add_argument("--pue-folded", action="store_true")
    s.set_defaults(func=cmd_ledger_add)

    for name, func, helptext in (
        ("ledger-report", cmd_ledger_report, "render campaign tables"),
        ("ledger-audit", cmd_ledger_audit, "check published rows for inconsistent factors"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--ledger", required=True, help="ledger JSONL (builtin:olmo_campaign ships)")
        s.add_argument("--profile", help="facility for records without a cluster")
        s.add_argument("--hardware", help="hardware profile (default: from the ledger)")
        s.add_argument("--equiv", help="equivalency config file")
        s.add_argument("--total-gpu-hours", type=float)
        if name == "ledger-report":
            s.add_argument("--pue-mode", choices=("applied", "folded"),
                           help="override every record's PUE convention")
            s.add_argument("--source", choices=("reported", "computed"), default="reported")
            s.add_argument("--figure")
        s.set_defaults(func=func)

    s = sub.add_parser("breakeven", parents=[common], help="inferences needed to match training CO2")
    s.add_argument("--training-co2", type=float, required=True, help="tonnes CO2eq")
    s.add_argument("--training-basis", default="final", help="label for the training figure used")
    s.add_argument("--measurement", required=True, help="measurement CSV")
    s.add_argument("--model")
    s.add_argument("--rate")
    s.add_argument("--profile", default="jupiter")
    s.add_argument("--pue-mode", choices=("applied", "folded"), default="folded")
    s.set_defaults(func=cmd_breakeven)

    s = sub.add_parser("simulate", parents=[common], help="simulate an inference workload")
    s.add_argument("--scenario", help="FILE[:NAME] with a [scenario.NAME] section")
    s.add_argument("--rate", help="requests/s or 'batch'")
    s.add_argument("--n", type=int, default=2400)
    s.add_argument("--seed", type=int)
    s.add_argument("--coeffs", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                   metavar=("IN_KWH", "OUT_KWH", "SEC_KWH"))
    s.add_argument("--input-mean", type=float, default=237.0)
    s.add_argument("--output-mean", type=float, default=210.0)
    s.add_argument("--dispersion", type=float, default=0.6)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="fit the inference energy model")
    s.add_argument("--measurements", required=True)
    s.add_argument("--model")
    s.set_defaults(func=cmd_fit)
    return p


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
