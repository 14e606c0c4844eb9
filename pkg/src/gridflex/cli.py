"""Command-line front end.

Exit status: 0 success, 2 usage error (argparse), 3 infeasible target,
4 configuration error, 5 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .domain import ConfigError, FlexTier, GridflexError
from .gridsig import SeriesError, find_peak_window, load_series
from .planner import PRESETS, Infeasible, Policy, sla_check
from .scenario import load_scenario, plan_scenario, run_scenario, trace_timestamps
from .simengine import trace_csv_text

EXIT_OK = 0
EXIT_INFEASIBLE = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5


def _err(msg):
    print(f"gridflex: {msg}", file=sys.stderr)


def _load(path, policy=None):
    scenario = load_scenario(path)
    if policy:
        scenario = scenario.with_policy(Policy.parse(policy))
    return scenario


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def plot_csv_text(trace, averaging_window=300.0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "series", "value"])
    for t, series, value in trace.plot_rows(averaging_window):
        w.writerow([f"{t:g}", series, repr(value)])
    return buf.getvalue()


# -- subcommands ----------------------------------------------------------


def cmd_plan(args) -> int:
    scenario = _load(args.scenario, args.policy)
    p = plan_scenario(scenario)
    sla = sla_check(p, scenario.ensemble, sla_window=scenario.window)
    env = p.envelope
    base = env.baseline_watts
    hold = env.indices("hold_")
    worst = max((p.predicted_trace[k] - env.targets[k] for k in hold), default=0.0)
    flex0 = [j.id for j in scenario.ensemble if j.flex is FlexTier.FLEX0]
    summary = {
        "scenario": scenario.name,
        "policy": p.policy.name,
        "baseline_watts": base,
        "jobs_impacted": p.jobs_impacted,
        "impacted_jobs": p.impacted_jobs,
        "flex0_untouched": not set(flex0) & set(p.impacted_jobs),
        "predicted_avg_throughput": p.average_throughput(),
        "predicted_worst_hold_excess_pp": 100.0 * worst / base if base else 0.0,
        "sla_ok": all(sla.values()),
    }
    doc = {"summary": summary, "plan": p.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    print(
        f"{scenario.name}: feasible, {p.jobs_impacted} job(s) impacted, "
        f"predicted avg throughput {summary['predicted_avg_throughput']:.4f}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_run(args) -> int:
    scenario = _load(args.scenario, args.policy)
    result = run_scenario(scenario, seed=args.seed)
    out = Path(args.out) if args.out else Path(f"{scenario.name.replace('@', '_').replace('/', '-')}_out")
    trace = result.trace
    csv_text = trace_csv_text(trace)
    stamps = trace_timestamps(result.scenario, trace)
    if stamps is not None:
        lines = csv_text.splitlines()
        lines = [lines[0] + ",timestamp"] + [f"{l},{ts.isoformat()}" for l, ts in zip(lines[1:], stamps)]
        csv_text = "\n".join(lines) + "\n"
    _write(out / "plan.json", json.dumps(result.plan.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(out / "trace.csv", csv_text)
    _write(out / "trace.json", json.dumps(trace.to_dict(), sort_keys=True) + "\n")
    _write(out / "report.json", result.report.to_json() + "\n")
    _write(out / "plot.csv", plot_csv_text(trace, result.scenario.sim.averaging_window))
    rep = result.report
    devs = ", ".join(f"step {s.step}: {100 * s.achieved_fraction:.2f}% (max dev {s.max_deviation_pp:.2f} pp)" for s in rep.compliance.steps)
    print(f"{result.scenario.name}: {devs}")
    print(
        f"  snapback_ok={rep.snapback_ok} qos_failures={len(rep.qos_failures)} "
        f"jobs_impacted={rep.jobs_impacted} rmse={rep.rmse_percent:.2f}% -> {out}"
    )
    return EXIT_OK


SWEEP_FIELDS = [
    "scenario", "policy", "status", "jobs_impacted", "avg_throughput",
    "max_hold_dev_pp", "compliant", "snapback_ok", "qos_failures", "rmse_percent", "error",
]


def _sweep_one(task):
    path, policy, seed = task
    row = {k: "" for k in SWEEP_FIELDS}
    row["scenario"] = str(path)
    row["policy"] = policy or ""
    try:
        scenario = _load(path, policy)
        row["scenario"] = scenario.name
        row["policy"] = scenario.policy.name
        rep = run_scenario(scenario, seed=seed).report
    except Infeasible as exc:
        row.update(status="infeasible", error=str(exc))
        return row
    except GridflexError as exc:
        row.update(status="failed", error=str(exc))
        return row
    except Exception as exc:  # keep the sweep going
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(
        status="ok",
        jobs_impacted=rep.jobs_impacted,
        avg_throughput=f"{rep.avg_norm_throughput:.6f}",
        max_hold_dev_pp=f"{max((s.max_deviation_pp for s in rep.compliance.steps), default=0.0):.4f}",
        compliant=rep.compliance.compliant,
        snapback_ok=rep.snapback_ok,
        qos_failures=len(rep.qos_failures),
        rmse_percent=f"{rep.rmse_percent:.4f}",
    )
    return row


def _scenario_paths(targets) -> list[Path]:
    paths = []
    for t in targets:
        t = Path(t)
        if t.is_dir():
            paths.extend(sorted(t.glob("*.toml")))
        else:
            paths.append(t)
    return paths


def sweep(targets, all_policies=False, policy=None, seed=None, jobs=1) -> list[dict]:
    """Run every scenario (times every preset) and return rows in input order."""
    policies = list(PRESETS) if all_policies else [policy]
    tasks = [(p, pol, seed) for p in _scenario_paths(targets) for pol in policies]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_one, tasks))
    return [_sweep_one(t) for t in tasks]


def cmd_sweep(args) -> int:
    rows = sweep(args.targets, args.all_policies, args.policy, args.seed, args.jobs)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.output:
        _write(Path(args.output), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} run(s), {failed} not ok", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for path in _scenario_paths(args.targets):
        try:
            s = load_scenario(path)
        except ConfigError as exc:
            _err(str(exc))
            status = EXIT_CONFIG
            continue
        print(f"{path}: ok ({s.name}, {len(s.ensemble)} jobs, policy {s.policy.name})")
    return status


def cmd_peak(args) -> int:
    series = load_series(args.series)
    win = find_peak_window(series, args.duration * 3600.0)
    print(json.dumps({
        "start": win.start.isoformat(),
        "duration_s": win.duration,
        "avg_load_mw": win.avg_load,
        "start_index": win.start_index,
    }, indent=2))
    return EXIT_OK


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridflex", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    presets = ", ".join(PRESETS)

    p = sub.add_parser("plan", help="plan a scenario and write the control plan as JSON")
    p.add_argument("scenario")
    p.add_argument("--policy", help=f"override the scenario policy ({presets})")
    p.add_argument("-o", "--output", help="output file (default: stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="plan, simulate and report one scenario")
    p.add_argument("scenario")
    p.add_argument("--policy", help=f"override the scenario policy ({presets})")
    p.add_argument("--seed", type=int, help="override the simulation seed")
    p.add_argument("--out", help="output directory (default: <name>_out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run many scenarios and tabulate results as CSV")
    p.add_argument("targets", nargs="+", help="scenario files or directories of *.toml")
    p.add_argument("--all-policies", action="store_true", help="run each scenario under every preset")
    p.add_argument("--policy", help="override the policy of every scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="check scenario files")
    p.add_argument("targets", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("peak", help="find the highest-load window of a load series")
    p.add_argument("series", help="CSV with timestamp,mw columns")
    p.add_argument("--duration", type=float, default=3.0, help="window length in hours")
    p.set_defaults(func=cmd_peak)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Infeasible as exc:
        frac = exc.max_reduction_fraction
        extra = f" (max reachable reduction {100 * frac:.2f}%)" if frac is not None else ""
        _err(f"infeasible: {exc}{extra}")
        return EXIT_INFEASIBLE
    except (ConfigError, SeriesError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except Exception as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
