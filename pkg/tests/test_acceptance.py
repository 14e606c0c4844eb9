"""Acceptance gate: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
"""

import itertools
import math
import sys
import time
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest

from gridflex import data_path
from gridflex.domain import ClusterSpec, ControlAction, EventSpec, EventStep, FlexTier, JobKind, JobSpec, JobState
from gridflex.gridsig import LoadSeries, compute_baseline, find_peak_window
from gridflex.planner import PRESETS, Infeasible, build_envelope, greedy_assign, plan, sla_check
from gridflex.powerperf import ResponseCurve, default_curves, predict_cluster
from gridflex.scenario import load_curves, load_scenario, run_scenario
from gridflex.simengine import SimConfig, TelemetryTrace, rmse_percent, run, trace_csv_text

SHIPPED = Path(str(data_path()))

# tolerances
HOLD_BAND_PP = 2.0
RUNTIME_LIMIT_S = 10.0
RMSE_BAND = (1.5, 2.5)
RMSE_SEEDS, RMSE_INTERVALS, RMSE_MIN_SHARE = 100, 200, 0.95
ORACLE_INSTANCES, ORACLE_MAX_JOBS = 500, 5
PEAK_SERIES = 1000
TIE_EPS = 1e-9


def report(capsys, number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return ok


def _max_dev(rep):
    return max(s.max_deviation_pp for s in rep.compliance.steps)


# -- 1 ---------------------------------------------------------------------


def check_replay_ensembles():
    parts, ok = [], True
    for idx in range(1, 5):
        scenario = load_scenario(SHIPPED / "scenarios" / f"srp_ensemble{idx}_fair.toml")
        assert scenario.policy == PRESETS["cap+pause/fair"]
        t0 = time.perf_counter()
        result = run_scenario(scenario)
        elapsed = time.perf_counter() - t0
        rep = result.report
        sla_ok = all(sla_check(result.plan, scenario.ensemble).values()) and not rep.qos_failures
        target_ok = all(s.target_fraction == pytest.approx(0.25) for s in rep.compliance.steps)
        this = _max_dev(rep) <= HOLD_BAND_PP and rep.snapback_ok and sla_ok and target_ok and elapsed < RUNTIME_LIMIT_S
        ok &= this
        parts.append(f"E{idx} dev {_max_dev(rep):.2f}pp post<=base {rep.snapback_ok} sla {sla_ok} {elapsed:.2f}s")
    return ok, "; ".join(parts)


def replay_seed_pass_rate(seeds=50):
    """Share of seeds for which every ensemble stays inside the hold band (informational)."""
    scenarios = [load_scenario(SHIPPED / "scenarios" / f"srp_ensemble{i}_fair.toml") for i in range(1, 5)]
    passed = 0
    for seed in range(seeds):
        passed += all(
            _max_dev(r.report) <= HOLD_BAND_PP and r.report.snapback_ok and not r.report.qos_failures
            for r in (run_scenario(s, seed=seed) for s in scenarios)
        )
    return passed / seeds


# -- 2 ---------------------------------------------------------------------


def check_two_step():
    scenario = load_scenario(SHIPPED / "scenarios" / "caiso_ensemble1_fair.toml")
    result = run_scenario(scenario)
    rep, env, p = result.report, result.plan.envelope, result.plan
    steps = rep.compliance.steps
    targets_ok = [s.target_fraction for s in steps] == pytest.approx([0.15, 0.25])
    devs = [s.max_deviation_pp for s in steps]
    ramp = env.phase("ramp_down_2")
    ramp_len = ramp.stop - ramp.start
    level = env.phase("hold_2").level_to
    reached = next(
        (k for k in range(ramp.start, len(env)) if p.predicted_trace[k] <= level + p.tolerance_watts + 1e-6),
        None,
    )
    within = reached is not None and reached - ramp.start <= ramp_len
    ramp_s = ramp_len * env.interval
    ok = targets_ok and len(steps) == 2 and all(d <= HOLD_BAND_PP for d in devs) and within
    detail = (
        f"step devs {devs[0]:.2f}pp/{devs[1]:.2f}pp, second level reached "
        f"{(reached - ramp.start) * env.interval:.0f}s into a {ramp_s:.0f}s ramp"
        if reached is not None else "second level never reached"
    )
    return ok, detail


# -- 3 ---------------------------------------------------------------------


def check_policy_ordering():
    ok, parts = True, []
    for idx in range(1, 5):
        base = load_scenario(SHIPPED / "sweep" / f"ensemble{idx}_25pct.toml")
        reps = {name: run_scenario(base.with_policy(name)).report for name in PRESETS}
        impacted = {n: r.jobs_impacted for n, r in reps.items()}
        thr = {n: r.avg_norm_throughput for n, r in reps.items()}
        min_ok = impacted["pause/greedy"] <= min(impacted.values())
        max_ok = thr["cap/fair"] >= max(thr.values()) - TIE_EPS
        ok &= min_ok and max_ok
        parts.append(
            f"E{idx} impacted {impacted['pause/greedy']}<=min{sorted(impacted.values())} "
            f"thr {thr['cap/fair']:.4f}>=max {max(thr.values()):.4f}"
        )
    return ok, "; ".join(parts)


# -- 4 ---------------------------------------------------------------------


def _rmse_ensemble():
    return [
        JobSpec("pt", JobKind.PRETRAINING, "m", 8, FlexTier.FLEX3, "pretrain"),
        JobSpec("ft", JobKind.FINETUNING, "m", 6, FlexTier.FLEX2, "finetune"),
        JobSpec("inf", JobKind.INFERENCE, "m", 4, FlexTier.FLEX0, "inference"),
    ]


def check_rmse():
    ones = np.full(RMSE_INTERVALS, 1000.0)
    identity = rmse_percent(TelemetryTrace.from_arrays(ones, ones))
    offset = rmse_percent(TelemetryTrace.from_arrays(ones + 40.0, ones))
    exact_ok = identity == 0.0 and math.isclose(offset, 4.0, rel_tol=0, abs_tol=1e-12)

    curves, cluster, jobs = default_curves(), ClusterSpec(), _rmse_ensemble()
    full = predict_cluster([JobState.fresh(j) for j in jobs], curves, cluster).cluster_watts
    # 15 + 140 + 15 + 30 = 200 one-minute intervals
    ev = EventSpec(full, (EventStep(0.2, 900, 8400),), recovery_ramp=900, snapback_window=1800)
    env = build_envelope(ev, 60.0)
    assert len(env) == RMSE_INTERVALS
    p = plan(jobs, cluster, curves, env, PRESETS["cap+pause/fair"], sla_window=6 * 3600)
    values = [
        rmse_percent(run(jobs, cluster, curves, p, env, SimConfig(noise_std_fraction=0.02, rng_seed=s)))
        for s in range(RMSE_SEEDS)
    ]
    share = float(np.mean([RMSE_BAND[0] <= v <= RMSE_BAND[1] for v in values]))
    ok = exact_ok and share >= RMSE_MIN_SHARE
    return ok, f"identity {identity:.3f}%, offset {offset:.3f}%, noisy runs in band {share:.0%} (median {np.median(values):.2f}%)"


# -- 5 ---------------------------------------------------------------------


def _three_level_curve(rng, cid):
    # response defined at three cap levels: floor, mid and TDP
    lo = rng.uniform(0.3, 0.7)
    mid = rng.uniform(lo, 1.0)
    return ResponseCurve(cid, ((0.375, lo), (0.6875, mid), (1.0, 1.0)))


def _random_instance(rng):
    n = int(rng.integers(1, ORACLE_MAX_JOBS + 1))
    curves = {f"c{i}": _three_level_curve(rng, f"c{i}") for i in range(n)}
    jobs = [
        JobSpec(f"j{i}", JobKind.PRETRAINING, "m", int(rng.integers(1, 7)), FlexTier(int(rng.integers(0, 4))),
                f"c{i}", utilization=float(rng.uniform(0.5, 1.0)))
        for i in range(n)
    ]
    return jobs, curves


def _exhaustive_pause(jobs, cluster, need):
    flexible = [j for j in jobs if j.flex is not FlexTier.FLEX0]
    shed = {j.id: j.nodes * cluster.gpus_per_node * (cluster.gpu_tdp_watts * j.utilization - cluster.gpu_idle_watts) for j in flexible}
    for k in range(len(flexible) + 1):
        covers = [c for c in itertools.combinations(flexible, k) if sum(shed[j.id] for j in c) >= need - 1e-9]
        if covers:
            return k, len(covers)
    return None, 0


def check_planner_oracle():
    rng = np.random.default_rng(20250503)
    cluster = ClusterSpec()
    sound = plans = infeasible = 0
    greedy_equal = greedy_bad = greedy_checked = 0
    flex0_touched = 0
    for _ in range(ORACLE_INSTANCES):
        jobs, curves = _random_instance(rng)
        full = predict_cluster([JobState.fresh(j) for j in jobs], curves, cluster).cluster_watts
        reduction = float(rng.uniform(0.0, 0.35))
        ev = EventSpec(full, (EventStep(reduction, 300, 1200),), recovery_ramp=300, snapback_window=600)
        env = build_envelope(ev, 60.0)
        for name, policy in PRESETS.items():
            try:
                p = plan(jobs, cluster, curves, env, policy, sla_window=6 * 3600)
            except Infeasible:
                infeasible += 1
                continue
            plans += 1
            states = {j.id: JobState.fresh(j) for j in jobs}
            meets = True
            for k in range(len(env)):
                for a in p.schedule.get(k, []):
                    states[a.job_id].apply(a)
                w = predict_cluster(list(states.values()), curves, cluster).cluster_watts
                meets &= w <= env.targets[k] + p.tolerance_watts + 1e-6
            sound += meets and all(sla_check(p, jobs).values())
            flex0_touched += bool({j.id for j in jobs if j.flex is FlexTier.FLEX0} & set(p.impacted_jobs))

        # single-interval pause-only greedy against the exhaustive minimum
        need = reduction * full
        best, n_opt = _exhaustive_pause(jobs, cluster, need)
        if best is None:
            continue
        got = len({a.job_id for a in greedy_assign(jobs, curves, cluster, need, {"pause"})})
        greedy_checked += 1
        greedy_equal += got == best
        # equality is required where the optimum is unique, +1 slack otherwise
        greedy_bad += (got != best) if n_opt == 1 else (got > best + 1)
    ok = sound == plans and flex0_touched == 0 and greedy_bad == 0
    return ok, (
        f"{sound}/{plans} returned plans sound ({infeasible} infeasible), flex0 touched {flex0_touched}; "
        f"greedy = exhaustive min on {greedy_equal}/{greedy_checked}"
    )


# -- 6 ---------------------------------------------------------------------


def _brute_peak(values, w):
    best_i, best = 0, None
    for i in range(len(values) - w + 1):
        total = math.fsum(values[i : i + w])
        if best is None or total > best:
            best_i, best = i, total
    return best_i


def check_properties():
    rng = np.random.default_rng(6)
    failures = []
    cluster = ClusterSpec()
    curves = load_curves(SHIPPED / "curves" / "default.toml")

    # response curves and cluster power are monotone in caps
    grid = np.linspace(0, 1, 401)
    if any(np.any(np.diff(c(grid)) < 0) for c in curves.values()):
        failures.append("curve monotonicity")
    jobs = [JobSpec(f"j{i}", JobKind.PRETRAINING, "m", 4, FlexTier.FLEX3, cid) for i, cid in enumerate(curves)]
    for _ in range(200):
        caps = rng.uniform(150, 400, len(jobs))
        bumped = caps.copy()
        i = rng.integers(len(jobs))
        bumped[i] = min(400.0, bumped[i] + rng.uniform(0, 50))
        watts = []
        for cs in (caps, bumped):
            states = [JobState.fresh(j) for j in jobs]
            for st, c in zip(states, cs):
                st.apply(ControlAction.set_cap(st.spec.id, float(c)))
            watts.append(predict_cluster(states, curves, cluster).cluster_watts)
        if watts[0] > watts[1] + 1e-9:
            failures.append("cluster power monotonicity")
            break

    # Flex0 never acted upon, and seed-fixed runs are byte-identical
    for path in sorted((SHIPPED / "scenarios").glob("*.toml")):
        s = load_scenario(path)
        a, b = run_scenario(s, seed=11), run_scenario(s, seed=11)
        flex0 = {j.id for j in s.ensemble if j.flex is FlexTier.FLEX0}
        if flex0 & set(a.plan.impacted_jobs):
            failures.append(f"flex0 acted on in {path.name}")
        if trace_csv_text(a.trace) != trace_csv_text(b.trace) or a.report.to_json() != b.report.to_json():
            failures.append(f"nondeterminism in {path.name}")

    # peak window equals a brute-force scan
    t0 = datetime(2025, 1, 1)
    for _ in range(PEAK_SERIES):
        n = int(rng.integers(2, 97))
        values = list(rng.integers(0, 20, n).astype(float)) if rng.random() < 0.5 else list(rng.uniform(0, 1e4, n))
        w = int(rng.integers(1, n + 1))
        s = LoadSeries([t0 + timedelta(minutes=5 * i) for i in range(n)], np.array(values))
        if find_peak_window(s, w * 300.0).start_index != _brute_peak(values, w):
            failures.append("peak window")
            break

    # baseline equals the direct mean over the lookback window
    for _ in range(PEAK_SERIES):
        n = int(rng.integers(2, 200))
        times = [60.0 * i for i in range(n)]
        watts = rng.uniform(0, 1e5, n)
        start = 60.0 * int(rng.integers(1, n + 1))
        lookback = 60.0 * int(rng.integers(1, start / 60 + 1))
        direct = np.mean([w for t, w in zip(times, watts) if start - lookback <= t < start])
        if not math.isclose(compute_baseline(times, watts, start, lookback), direct, rel_tol=1e-12):
            failures.append("baseline")
            break
    return not failures, "all property checks hold" if not failures else "failed: " + ", ".join(failures)


# -- 7 ---------------------------------------------------------------------


def check_curve_shape():
    curves = load_curves(SHIPPED / "curves" / "default.toml")
    grid = np.linspace(0.0, 1.0, 401)
    top_ok = all(c(1.0) == 1.0 for c in curves.values())
    mono_ok = all(np.all(np.diff(c(grid)) >= 0) for c in curves.values())
    mid = np.linspace(0.45, 0.8, 36)
    pt = curves["pretrain"](mid)
    order_ok = bool(np.all(pt < curves["finetune"](mid)) and np.all(pt < curves["inference"](mid)))
    synthetic = all("synthetic" in c.description for c in curves.values())
    ok = top_ok and mono_ok and order_ok and synthetic
    return ok, f"t(1)=1 {top_ok}, monotone {mono_ok}, pretrain below others mid-range {order_ok}, marked synthetic {synthetic}"


CHECKS = [
    (1, check_replay_ensembles),
    (2, check_two_step),
    (3, check_policy_ordering),
    (4, check_rmse),
    (5, check_planner_oracle),
    (6, check_properties),
    (7, check_curve_shape),
]


@pytest.mark.parametrize("number,check", CHECKS, ids=[f"criterion_{n}" for n, _ in CHECKS])
def test_criterion(number, check, capsys):
    ok, detail = check()
    assert report(capsys, number, ok, detail), detail


def test_replay_seed_pass_rate(capsys):
    """Informational: the hold band is met for most but not all noise seeds."""
    rate = replay_seed_pass_rate()
    with capsys.disabled():
        print(f"\n[INFO] criterion 1 across 50 noise seeds: {rate:.0%} of seeds pass on all four ensembles")
    assert rate > 0.5


if __name__ == "__main__":
    results = [report(None, n, *check()) for n, check in CHECKS]
    sys.exit(0 if all(results) else 1)
