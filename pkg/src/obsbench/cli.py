"""``obsbench`` command line.

Exit codes: 0 success, 1 domain/format/usage error, 2 design error (gains
that cannot be placed or are not Hurwitz).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import DesignError, DomainError, FormatError, ObsbenchError
from .profiles import DEFAULT_CELL, DEFAULT_OCV, PROFILES, make_profile

CONFIG_ENV = "OBSBENCH_CONFIG"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config() -> dict:
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    from .fileio import read_json
    return read_json(path)


def _params(args):
    from .fileio import read_params
    path = args.params or _config().get("params")
    return read_params(path) if path else DEFAULT_CELL


def _ocv(args):
    from .fileio import read_ocv
    path = getattr(args, "ocv", None) or _config().get("ocv")
    return read_ocv(path) if path else DEFAULT_OCV


def _parse_poles(text: str) -> list:
    try:
        return [complex(tok.strip().replace("i", "j")) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise DomainError(f"cannot parse pole list {text!r}") from None


def _emit_json(data, out):
    if out:
        from .fileio import write_json
        write_json(out, data)
    else:
        json.dump(data, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def _loadfile(args):
    from .fileio import parse_loadfile
    if args.loadfile:
        return parse_loadfile(args.loadfile)
    return make_profile(args.profile, duration_s=args.duration, dt=args.dt)


def _add_model_args(p, ocv=True):
    p.add_argument("--params", help="cell parameter JSON (default: bundled cell)")
    if ocv:
        p.add_argument("--ocv", help="OCV curve JSON (default: bundled curve)")


def _add_profile_args(p):
    p.add_argument("--loadfile", help="loadfile CSV")
    p.add_argument("--profile", choices=sorted(PROFILES), default="dst",
                   help="synthetic profile when no loadfile is given")
    p.add_argument("--duration", type=float, default=7200.0)
    p.add_argument("--dt", type=float, default=1.0)


def _scenario(args, kind):
    from .fileio import read_scenario
    from .harness import default_scenario
    if getattr(args, "scenario", None):
        s = read_scenario(args.scenario)
        if s.kind != kind and kind is not None:
            s = s.replace(kind=kind)
        return s
    return default_scenario(kind)


def _manifest(args, scenario=None, extra_inputs=()):
    from .fileio import RunManifest
    inputs = [getattr(args, "scenario", None)] + list(extra_inputs)
    if scenario is not None:
        for ref in (scenario.loadfile, scenario.params, scenario.ocv, *scenario.gains.values()):
            if ref:
                inputs.append(scenario.resolve(ref))
    return RunManifest.create(
        inputs=[p for p in inputs if p],
        scenario=scenario.to_dict() if scenario is not None else None,
        seed=scenario.seed if scenario is not None else None,
        command=args.command,
    )


# --------------------------------------------------------------------------- commands

def cmd_simulate(args):
    from .fileio import write_loadfile
    from .model import simulate
    lf = _loadfile(args)
    tr = simulate(_params(args), _ocv(args), args.soc0, lf, method=args.method, first_dt=args.dt)
    out = lf.replace(voltage_v=tr.voltage)
    write_loadfile(args.out, out)
    if args.truth:
        with open(args.truth, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "v_a", "v_b", "soc", "saturated"])
            for k in range(len(lf)):
                va, vb, s = tr.states[k + 1]
                w.writerow([repr(float(lf.time_s[k])), repr(float(va)), repr(float(vb)),
                            repr(float(s)), int(tr.saturated[k])])
    print(f"wrote {len(lf)} samples to {args.out}")


def cmd_design(args):
    from .observers import default_gains, place_poles, preset_poles
    p, ocv = _params(args), _ocv(args)
    slope = args.slope if args.slope is not None else ocv.mean_slope
    poles = _parse_poles(args.poles) if args.poles else None
    if poles is None:
        if args.slope is None:
            g = default_gains(args.variant, p, ocv, args.dt)
            _emit_json(g.to_dict(), args.out)
            return
        poles = preset_poles(args.variant, p)
    g = place_poles(args.variant, p, slope, poles, dt=args.dt if args.variant == "pid" else None,
                    ocv=ocv, k_dc=args.k_dc, boundary_layer_phi=args.phi,
                    d_ratio=args.d_ratio, d_filter_tau=args.d_filter_tau)
    _emit_json(g.to_dict(), args.out)


def cmd_estimate(args):
    from .fileio import parse_loadfile, read_gains
    from .harness import run_estimator
    from .observers import default_gains, verify_segments
    p, ocv = _params(args), _ocv(args)
    lf = parse_loadfile(args.loadfile)
    if lf.voltage_v is None:
        raise FormatError(f"{args.loadfile}: estimation needs a voltage_v column")
    if args.estimator == "srckf":
        gains = None
    elif args.gains:
        gains = read_gains(args.gains)
        verify_segments(gains, p, ocv, gains.design_dt or args.dt)
    else:
        gains = default_gains(args.estimator, p, ocv, args.dt)
    name = gains.variant if gains is not None else "srckf"
    soc_hat, v_hat, e, _ = run_estimator(name, gains, p, ocv, lf.current_a, lf.voltage_v,
                                         lf.intervals(args.dt), args.soc0)
    rows = zip(lf.time_s, soc_hat, lf.voltage_v, v_hat, e)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "soc_hat", "v_meas", "v_hat", "e"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    finally:
        if args.out:
            fh.close()


def _print_table(rows, columns):
    print(",".join(columns))
    for r in rows:
        print(",".join("" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                       for c in columns))


def cmd_bench(args, kind=None):
    from .fileio import write_bundle
    from .harness import run_scenario
    s = _scenario(args, kind)
    res = run_scenario(s)
    rows = res.comparison_rows()
    if args.out:
        write_bundle(args.out, res, _manifest(args, s))
    _print_table(rows, list(rows[0]))


def cmd_convergence(args):
    cmd_bench(args, "convergence")


def cmd_identify(args):
    from .characterization import PsoConfig, fit_pulse_pso
    from .fileio import parse_loadfile, read_json, write_json
    pulse = parse_loadfile(args.pulse)
    ocv = _ocv(args)
    cfg_doc = read_json(args.pso) if args.pso else {}
    capacity_c = cfg_doc.pop("capacity_c", None)
    if args.capacity_ah is not None:
        capacity_c = args.capacity_ah * 3600.0
    if capacity_c is None:
        raise DomainError("cell capacity is required (--capacity-ah or capacity_c in the PSO file)")
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    cfg = PsoConfig.from_dict(cfg_doc)
    fit = fit_pulse_pso(pulse, ocv, cfg, capacity_c=float(capacity_c), eta=args.eta)
    doc = fit.params.to_dict()
    _emit_json(doc, args.out)
    print(f"fit RMSE {fit.rmse_v * 1000:.4g} mV", file=sys.stderr)


def _read_low_current(path):
    from .characterization import LowCurrentTest
    branches = {"charge": [], "discharge": []}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"branch", "soc", "voltage_v"}:
            raise FormatError(f"{path}: header must be branch,soc,voltage_v")
        for lineno, rec in enumerate(reader, start=2):
            b = rec["branch"].strip()
            if b not in branches:
                raise FormatError(f"{path}: row {lineno} has unknown branch {b!r}")
            try:
                branches[b].append((float(rec["soc"]), float(rec["voltage_v"])))
            except ValueError:
                raise FormatError(f"{path}: row {lineno} has a non-numeric field") from None
    return LowCurrentTest(tuple(branches["charge"]), tuple(branches["discharge"]))


def cmd_ocv(args):
    from .characterization import extract_ocv
    test = _read_low_current(args.test)
    grid = np.linspace(0.0, 1.0, args.points)
    _emit_json(extract_ocv(test, grid).to_dict(), args.out)


def cmd_observability(args):
    from .model import build_linear_system
    from .observability import (SCENARIOS, controllability_matrix, lie_observability_matrix,
                                observability_matrix, ocv_derivatives, rank_report)
    p, ocv = _params(args), _ocv(args)
    sys_ = build_linear_system(p, ocv, args.soc)
    q = tuple(float(x) for x in args.q.split(",")) if args.q else (0.0, 0.0, 0.0)
    if len(q) != 3:
        raise DomainError("--q needs three comma-separated values")
    out = {}
    wanted = SCENARIOS + ("linear",) if args.scenario == "all" else (args.scenario,)
    if "linear" in wanted:
        for kind, fn in (("controllability", controllability_matrix),
                         ("observability", observability_matrix)):
            m = fn(sys_)
            out[kind] = {"matrix": m.tolist(), "report": rank_report(kind, m).to_dict()}
    derivs = ocv_derivatives(ocv, args.soc, args.k)
    for sc in SCENARIOS:
        if sc in wanted:
            m, rep = lie_observability_matrix(sc, p, derivs, q, args.k)
            out[sc] = {"matrix": np.asarray(m).tolist(), "report": rep.to_dict()}
    _emit_json(out, args.out)


def cmd_sensitivity(args):
    from .fileio import write_comparison, write_json
    from .harness import PERTURBABLE, sensitivity_sweep
    s = _scenario(args, "sensitivity")
    rows = sensitivity_sweep(s, PERTURBABLE, (args.amplitude, -args.amplitude))
    flat = []
    for r in rows:
        row = {"parameter": r["parameter"], "relative_amp": r["relative_amp"],
               "model_voltage_rmse_mv": 1000.0 * r["model_voltage_rmse_v"]}
        row.update({f"{k}_soc_rmse_increase_pct": v for k, v in r["soc_rmse_increase_pct"].items()})
        flat.append(row)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_comparison(os.path.join(args.out, "sensitivity.csv"), flat)
        write_json(os.path.join(args.out, "manifest.json"), _manifest(args, s).to_dict())
    _print_table(flat, list(flat[0]))


def cmd_noise_sweep(args):
    from .fileio import write_comparison, write_json
    from .harness import noise_sweep
    kind, field_name = {"current": ("current_noise", "bias_mean_a"),
                        "voltage": ("voltage_noise", "voltage_sd_v")}[args.kind]
    s = _scenario(args, kind)
    levels = [float(x) for x in args.levels.split(",")] if args.levels else (
        [0.5, 1.0, 2.5, 5.0] if args.kind == "current" else [0.005, 0.01, 0.1, 0.2])
    points = noise_sweep(s, field_name, levels, n_seeds=args.seeds,
                         antithetic=not args.no_antithetic)
    rows = []
    for pt in points:
        for name, m in pt.metrics.items():
            rows.append({"level": pt.level, "estimator": name, "max_ae_pct": m.max_ae,
                         "rmse_pct": m.rmse, "mae_pct": m.mae})
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_comparison(os.path.join(args.out, "noise_sweep.csv"), rows)
        write_json(os.path.join(args.out, "manifest.json"), _manifest(args, s).to_dict())
    _print_table(rows, list(rows[0]))


def cmd_timing(args):
    from .fileio import write_comparison
    from .harness import timing_report
    s = _scenario(args, "timing")
    rows = [e.to_dict() for e in timing_report(s, args.repetitions)]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_comparison(os.path.join(args.out, "timing.csv"), rows)
    _print_table(rows, list(rows[0]))


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="obsbench", description="Observer-based SOC estimation workbench.")
    ap.add_argument("--version", action="version", version=f"obsbench {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("simulate", help="ground-truth simulation of a loadfile")
    _add_model_args(p)
    _add_profile_args(p)
    p.add_argument("--soc0", type=float, default=0.8)
    p.add_argument("--method", choices=("zoh", "euler"), default="zoh")
    p.add_argument("--out", required=True, help="output loadfile CSV with voltage_v")
    p.add_argument("--truth", help="optional CSV of the simulated states")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("design", help="pole-placement gain design")
    _add_model_args(p)
    p.add_argument("--variant", required=True, choices=("luenberger", "sliding_mode", "pi", "pid"))
    p.add_argument("--poles", help="comma-separated poles, e.g. -0.15,-0.005,-0.003")
    p.add_argument("--slope", type=float, help="design OCV slope (default: mean slope)")
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--k-dc", dest="k_dc", type=float, default=0.0)
    p.add_argument("--phi", type=float, default=0.010)
    p.add_argument("--d-ratio", dest="d_ratio", type=float, default=0.05)
    p.add_argument("--d-filter-tau", dest="d_filter_tau", type=float, default=0.0)
    p.add_argument("--out", help="gains JSON (default: stdout)")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("estimate", help="run one estimator over a measured loadfile")
    _add_model_args(p)
    p.add_argument("--loadfile", required=True)
    p.add_argument("--gains", help="gains JSON (default: preset design)")
    p.add_argument("--estimator", default="pid",
                   choices=("luenberger", "sliding_mode", "pi", "pid", "srckf"))
    p.add_argument("--soc0", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--out", help="trajectory CSV (default: stdout)")
    p.set_defaults(func=cmd_estimate)

    for name, func, hlp in (("bench", cmd_bench, "run a scenario file"),
                            ("convergence", cmd_convergence, "convergence race")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--scenario", required=(name == "bench"))
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("identify", help="PSO fit of ECM parameters to a pulse")
    p.add_argument("--pulse", required=True, help="pulse loadfile CSV with voltage_v")
    p.add_argument("--ocv", help="OCV curve JSON")
    p.add_argument("--pso", help="PSO config JSON")
    p.add_argument("--capacity-ah", dest="capacity_ah", type=float)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="params JSON (default: stdout)")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("ocv", help="OCV curve from a low-current test")
    p.add_argument("--test", required=True, help="CSV with branch,soc,voltage_v")
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--out", help="curve JSON (default: stdout)")
    p.set_defaults(func=cmd_ocv)

    p = sub.add_parser("observability", help="rank tests at an operating point")
    _add_model_args(p)
    p.add_argument("--scenario", default="all",
                   choices=("all", "linear", "input_nl", "state_nl", "measurement_nl"))
    p.add_argument("--soc", type=float, default=0.5)
    p.add_argument("--q", help="nonlinearity influence Q1,Q2,Q3")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("sensitivity", help="single-parameter perturbation sweep")
    p.add_argument("--scenario")
    p.add_argument("--amplitude", type=float, default=0.8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("noise-sweep", help="current-bias or voltage-noise sweep")
    p.add_argument("--kind", choices=("current", "voltage"), required=True)
    p.add_argument("--scenario")
    p.add_argument("--levels", help="comma-separated bias means (A) or noise sd (V)")
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--no-antithetic", dest="no_antithetic", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("timing", help="per-estimator wall-clock")
    p.add_argument("--scenario")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_timing)
    return ap


def _fold_values(argv):
    """Join ``--poles``/``--levels``/``--q`` with a value that starts with '-'."""
    out, k = [], 0
    while k < len(argv):
        tok = argv[k]
        if tok in ("--poles", "--levels", "--q") and k + 1 < len(argv):
            out.append(f"{tok}={argv[k + 1]}")
            k += 2
            continue
        out.append(tok)
        k += 1
    return out


def main(argv=None) -> int:
    argv = _fold_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("obsbench: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except DesignError as exc:
        print(f"obsbench: design error: {exc}", file=sys.stderr)
        return 2
    except (ObsbenchError, OSError) as exc:
        print(f"obsbench: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
