"""Discrete-time execution of a control plan and the event metrics.

The engine replays a plan's actions against a ground-truth cluster model,
adds seeded Gaussian measurement noise, and records one telemetry row per
control interval. Metrics (compliance, QoS, RMSE, snap-back) are computed
from the recorded trace only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import (
    ClusterSpec,
    FlexTier,
    GridflexError,
    JobSpec,
    JobState,
    flex_budget,
)
from .planner import ControlPlan, PowerEnvelope
from .powerperf import ResponseCurve, ScalingModel, job_power, job_throughput, predict_cluster


class SimError(GridflexError):
    pass


class ActionOnUnknownJob(SimError):
    pass


class NegativeTime(SimError):
    pass


class EmptyTrace(SimError):
    pass


@dataclass(frozen=True)
class SimConfig:
    interval: float = 60.0
    noise_std_fraction: float = 0.02
    rng_seed: int = 0
    averaging_window: float = 300.0
    # relative std of a per-job multiplicative error on true power
    model_mismatch: float = 0.0

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("interval must be > 0")
        if self.noise_std_fraction < 0 or self.model_mismatch < 0:
            raise ValueError("noise parameters must be >= 0")
        if not self.averaging_window > 0:
            raise ValueError("averaging_window must be > 0")


@dataclass
class JobSeries:
    status: list[str]
    cap: np.ndarray
    nodes: np.ndarray
    norm_throughput: np.ndarray
    cumulative_work: np.ndarray


@dataclass
class TelemetryTrace:
    """Per-interval telemetry; every array is indexed by interval."""

    interval: float
    times: np.ndarray
    predicted_watts: np.ndarray
    true_watts: np.ndarray
    measured_watts: np.ndarray
    phases: list[str] = field(default_factory=list)
    target_watts: Optional[np.ndarray] = None
    jobs: dict[str, JobSeries] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def from_arrays(cls, predicted, measured, interval=60.0, true=None, phases=None, targets=None):
        predicted = np.asarray(predicted, dtype=float)
        measured = np.asarray(measured, dtype=float)
        true = measured if true is None else np.asarray(true, dtype=float)
        times = np.arange(len(measured)) * interval
        return cls(interval, times, predicted, true, measured, list(phases or []),
                   None if targets is None else np.asarray(targets, dtype=float))

    def averaged(self, window: float, values=None):
        """Non-overlapping block means aligned to t=0; returns (block start indices, means)."""
        return block_average(self.measured_watts if values is None else values, self.interval, window)

    # -- export ---------------------------------------------------------

    def wide_rows(self) -> list[dict]:
        rows = []
        for k in range(len(self)):
            row = {
                "t": float(self.times[k]),
                "phase": self.phases[k] if self.phases else "",
                "target_watts": "" if self.target_watts is None else float(self.target_watts[k]),
                "predicted_watts": float(self.predicted_watts[k]),
                "true_watts": float(self.true_watts[k]),
                "measured_watts": float(self.measured_watts[k]),
            }
            for jid, js in self.jobs.items():
                row[f"{jid}.status"] = js.status[k]
                row[f"{jid}.cap"] = float(js.cap[k])
                row[f"{jid}.nodes"] = int(js.nodes[k])
                row[f"{jid}.norm_throughput"] = float(js.norm_throughput[k])
                row[f"{jid}.cumulative_work"] = float(js.cumulative_work[k])
            rows.append(row)
        return rows

    def to_csv(self, fh) -> None:
        rows = self.wide_rows()
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    def to_dict(self) -> dict:
        return {
            "interval": self.interval,
            "records": [
                {
                    "t": float(self.times[k]),
                    "phase": self.phases[k] if self.phases else "",
                    "target_watts": None if self.target_watts is None else float(self.target_watts[k]),
                    "predicted_watts": float(self.predicted_watts[k]),
                    "true_watts": float(self.true_watts[k]),
                    "measured_watts": float(self.measured_watts[k]),
                    "jobs": {
                        jid: {
                            "status": js.status[k],
                            "cap": float(js.cap[k]),
                            "nodes": int(js.nodes[k]),
                            "norm_throughput": float(js.norm_throughput[k]),
                            "cumulative_work": float(js.cumulative_work[k]),
                        }
                        for jid, js in self.jobs.items()
                    },
                }
                for k in range(len(self))
            ],
        }

    def plot_rows(self, averaging_window: float = 300.0) -> list[tuple[float, str, float]]:
        """Long-format ``(time, series, value)`` rows for overlay plots."""
        rows = []
        for k in range(len(self)):
            t = float(self.times[k])
            if self.target_watts is not None:
                rows.append((t, "target", float(self.target_watts[k])))
            rows.append((t, "predicted", float(self.predicted_watts[k])))
            rows.append((t, "measured", float(self.measured_watts[k])))
        starts, means = self.averaged(averaging_window)
        for i, m in zip(starts, means):
            rows.append((float(self.times[i]), "measured_avg", float(m)))
        for jid, js in self.jobs.items():
            for k in range(len(self)):
                rows.append((float(self.times[k]), f"throughput:{jid}", float(js.norm_throughput[k])))
        return rows


def block_average(values, interval: float, window: float):
    """Means of consecutive non-overlapping windows; a trailing partial block is dropped."""
    values = np.asarray(values, dtype=float)
    w = max(1, int(round(window / interval)))
    n_blocks = len(values) // w
    starts = np.arange(n_blocks) * w
    means = values[: n_blocks * w].reshape(n_blocks, w).mean(axis=1) if n_blocks else np.empty(0)
    return starts, means


def run(
    ensemble: Sequence[JobSpec],
    cluster: ClusterSpec,
    curves: Mapping[str, ResponseCurve],
    plan: ControlPlan,
    envelope: PowerEnvelope,
    sim_config: SimConfig = SimConfig(),
    scaling: Optional[ScalingModel] = None,
    truth_curves: Optional[Mapping[str, ResponseCurve]] = None,
) -> TelemetryTrace:
    """Execute ``plan`` interval by interval.

    Actions scheduled at interval ``k`` take effect for the whole of ``k``.
    ``predicted_watts`` comes from the planning model, ``true_watts`` from the
    ground truth (``truth_curves`` and per-job power mismatch, when set), and
    ``measured_watts = true_watts * (1 + noise_std_fraction * z)``.
    """
    scaling = scaling or ScalingModel()
    truth_curves = truth_curves or curves
    if abs(sim_config.interval - envelope.interval) > 1e-9:
        raise ValueError("sim interval must match the envelope interval")
    dt = envelope.interval
    n = len(envelope)
    states = {j.id: JobState.fresh(j) for j in ensemble}
    for k in plan.schedule:
        if k < 0:
            raise NegativeTime(f"action scheduled at negative interval {k}")
        for a in plan.schedule[k]:
            if a.job_id not in states:
                raise ActionOnUnknownJob(a.job_id)

    rng = np.random.default_rng(sim_config.rng_seed)
    z = rng.standard_normal(n)
    mismatch_rng = np.random.default_rng([sim_config.rng_seed, 1])
    factors = {
        j.id: max(0.0, 1.0 + sim_config.model_mismatch * mismatch_rng.standard_normal()) if sim_config.model_mismatch else 1.0
        for j in ensemble
    }

    predicted = np.empty(n)
    true = np.empty(n)
    series = {
        j.id: JobSeries([], np.empty(n), np.empty(n, dtype=int), np.empty(n), np.empty(n))
        for j in ensemble
    }
    order = [j.id for j in ensemble]
    for k in range(n):
        for a in plan.schedule.get(k, []):
            states[a.job_id].apply(a)
        current = [states[jid] for jid in order]
        pred = predict_cluster(current, curves, cluster, scaling)
        predicted[k] = pred.cluster_watts
        truth_jobs = 0.0
        for st in current:
            truth_jobs += job_power(st, cluster) * factors[st.spec.id]
        true[k] = truth_jobs + pred.idle_watts + pred.overhead_watts
        for st in current:
            thr = job_throughput(st, truth_curves[st.spec.curve_class], scaling, cluster)
            st.cumulative_work += st.spec.baseline_throughput * thr * dt
            st.throughput_history.append(thr)
            js = series[st.spec.id]
            js.status.append(st.status.value)
            js.cap[k] = st.cap_or(cluster.gpu_tdp_watts)
            js.nodes[k] = st.current_nodes
            js.norm_throughput[k] = thr
            js.cumulative_work[k] = st.cumulative_work
    measured = true * (1.0 + sim_config.noise_std_fraction * z)
    return TelemetryTrace(
        interval=dt,
        times=np.arange(n) * dt,
        predicted_watts=predicted,
        true_watts=true,
        measured_watts=measured,
        phases=envelope.labels(),
        target_watts=envelope.targets.copy(),
        jobs=series,
    )


# --------------------------------------------------------------------------
# Metrics


@dataclass
class StepCompliance:
    step: int
    target_fraction: float
    achieved_fraction: float
    margins: list[float]  # target - averaged measured, per averaging block
    max_deviation_pp: float  # largest |averaged measured - target| in % of baseline


@dataclass
class ComplianceRecord:
    achieved_reduction_fraction: float
    target_fraction: float
    margins: list[float]
    compliant: bool
    steps: list[StepCompliance]


def compliance(
    trace: TelemetryTrace,
    envelope: PowerEnvelope,
    tolerance_fraction: float = 0.01,
    averaging_window: float = 300.0,
) -> ComplianceRecord:
    """Hold-phase compliance of averaged measured power against the envelope.

    Only averaging blocks that lie entirely inside a hold phase count.
    """
    base = envelope.baseline_watts
    tol = tolerance_fraction * base
    labels = envelope.labels()
    w = max(1, int(round(averaging_window / trace.interval)))
    starts, means = block_average(trace.measured_watts, trace.interval, averaging_window)
    _, target_means = block_average(envelope.targets[: len(trace)], trace.interval, averaging_window)

    steps = []
    all_margins = []
    hold_samples = []
    for ph in envelope.phases:
        if not ph.label.startswith("hold_"):
            continue
        idx = [i for i, s in enumerate(starts) if ph.start <= s and s + w <= ph.stop]
        margins = [float(target_means[i] - means[i]) for i in idx]
        target_fraction = 1.0 - ph.level_to / base
        seg = trace.measured_watts[ph.start : min(ph.stop, len(trace))]
        achieved = 1.0 - float(np.mean(seg)) / base if len(seg) else float("nan")
        dev = max((abs(m) for m in margins), default=0.0) / base * 100.0
        steps.append(StepCompliance(int(ph.label.split("_")[1]), target_fraction, achieved, margins, dev))
        all_margins.extend(margins)
        hold_samples.append(seg)
    hold = np.concatenate(hold_samples) if hold_samples else np.empty(0)
    achieved = 1.0 - float(np.mean(hold)) / base if len(hold) else 0.0
    target_fraction = steps[-1].target_fraction if steps else 0.0
    compliant = all(m >= -tol - 1e-9 for m in all_margins)
    return ComplianceRecord(achieved, target_fraction, all_margins, compliant, steps)


def rmse_percent(trace: TelemetryTrace) -> float:
    """Root-mean-square prediction error relative to mean measured power, in percent."""
    if len(trace) == 0:
        raise EmptyTrace("rmse of an empty trace")
    err = trace.predicted_watts - trace.measured_watts
    return 100.0 * math.sqrt(float(np.mean(err * err))) / float(np.mean(trace.measured_watts))


@dataclass
class JobQoS:
    avg_norm_throughput: float
    budget: float
    passed: bool


def qos_report(trace: TelemetryTrace, ensemble: Sequence[JobSpec], sla_window: Optional[float] = None) -> dict[str, JobQoS]:
    """Realized average normalized throughput per job against its flex budget.

    Time in the SLA window beyond the trace counts as full-speed running.
    Flex0 jobs pass only if every sample is exactly 1.
    """
    span = len(trace) * trace.interval
    window = span if sla_window is None else sla_window
    if span > window + 1e-9:
        raise ValueError("trace is longer than the SLA window")
    out = {}
    for job in ensemble:
        thr = trace.jobs[job.id].norm_throughput
        avg = (math.fsum(float(x) * trace.interval for x in thr) + (window - span)) / window
        budget = flex_budget(job)
        if job.flex is FlexTier.FLEX0:
            passed = bool(np.all(thr == 1.0))
        else:
            passed = avg >= 1.0 - budget - 1e-9
        out[job.id] = JobQoS(avg, budget, passed)
    return out


def snapback_check(
    trace: TelemetryTrace,
    envelope: PowerEnvelope,
    tolerance_fraction: float = 0.0,
    averaging_window: float = 300.0,
) -> bool:
    """True iff every averaged post-phase measured block stays at or below baseline (+ tolerance)."""
    limit = envelope.baseline_watts * (1.0 + tolerance_fraction)
    try:
        post = envelope.phase("post")
    except KeyError:
        return True
    w = max(1, int(round(averaging_window / trace.interval)))
    starts, means = block_average(trace.measured_watts, trace.interval, averaging_window)
    vals = [m for s, m in zip(starts, means) if post.start <= s and s + w <= post.stop]
    return all(v <= limit + 1e-9 for v in vals)


@dataclass
class EventReport:
    policy: str
    compliance: ComplianceRecord
    qos: dict[str, JobQoS]
    rmse_percent: float
    snapback_ok: bool
    jobs_impacted: int
    avg_norm_throughput: float
    baseline_watts: float
    measured_baseline_watts: Optional[float] = None

    @property
    def qos_failures(self) -> list[str]:
        return sorted(jid for jid, q in self.qos.items() if not q.passed)

    def to_dict(self) -> dict:
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, list):
                return [clean(v) for v in obj]
            if isinstance(obj, float):
                return round(obj, 9)
            return obj

        out = asdict(self)
        out["qos_failures"] = self.qos_failures
        return clean(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def make_report(
    trace: TelemetryTrace,
    envelope: PowerEnvelope,
    plan: ControlPlan,
    ensemble: Sequence[JobSpec],
    sla_window: Optional[float] = None,
    tolerance_fraction: float = 0.01,
    averaging_window: float = 300.0,
) -> EventReport:
    qos = qos_report(trace, ensemble, sla_window)
    measured_baseline = None
    try:
        pre = envelope.phase("pre")
        measured_baseline = float(np.mean(trace.measured_watts[pre.start : pre.stop]))
    except KeyError:
        pass
    return EventReport(
        policy=plan.policy.name,
        compliance=compliance(trace, envelope, tolerance_fraction, averaging_window),
        qos=qos,
        rmse_percent=rmse_percent(trace),
        snapback_ok=snapback_check(trace, envelope, 0.0, averaging_window),
        jobs_impacted=plan.jobs_impacted,
        avg_norm_throughput=float(np.mean([q.avg_norm_throughput for q in qos.values()])) if qos else 1.0,
        baseline_watts=envelope.baseline_watts,
        measured_baseline_watts=measured_baseline,
    )


def trace_csv_text(trace: TelemetryTrace) -> str:
    buf = io.StringIO()
    trace.to_csv(buf)
    return buf.getvalue()
