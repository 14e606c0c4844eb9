"""Scenario files (TOML) and the plan -> run -> report pipeline.

A scenario names a cluster, an ensemble file, a curve library, an event and
a policy. Paths inside a scenario are resolved relative to the scenario file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

import tomli
import tomli_w

from .domain import (
    ClusterSpec,
    ConfigError,
    EventSpec,
    FlexTier,
    JobKind,
    JobSpec,
    JobState,
    validate_ensemble,
)
from .gridsig import find_peak_window, load_series, make_event
from .planner import ControlPlan, Policy, PowerEnvelope, build_envelope, plan
from .powerperf import ResponseCurve, ScalingModel, default_curves, predict_cluster
from .simengine import EventReport, SimConfig, TelemetryTrace, make_report, run


def _read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _where(path, section):
    return f"{path}: [{section}]"


# -- ensembles ------------------------------------------------------------


def ensemble_to_dict(jobs, name: str = "", description: str = "") -> dict:
    out = {}
    if name:
        out["name"] = name
    if description:
        out["description"] = description
    out["jobs"] = [
        {
            "id": j.id,
            "kind": j.kind.value,
            "model": j.model_label,
            "nodes": j.nodes,
            "flex": str(j.flex),
            "curve": j.curve_class,
            "baseline_throughput": j.baseline_throughput,
            "utilization": j.utilization,
        }
        for j in jobs
    ]
    return out


def ensemble_from_dict(data: dict, source="<ensemble>") -> list[JobSpec]:
    jobs = []
    for i, row in enumerate(data.get("jobs", [])):
        where = f"{source}: jobs[{i}]"
        try:
            jobs.append(
                JobSpec(
                    id=str(row["id"]),
                    kind=JobKind.parse(row["kind"]),
                    model_label=str(row.get("model", "")),
                    nodes=int(row["nodes"]),
                    flex=FlexTier.parse(row["flex"]),
                    curve_class=str(row["curve"]),
                    baseline_throughput=float(row.get("baseline_throughput", 1.0)),
                    utilization=float(row.get("utilization", 1.0)),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"{where}: missing field {exc.args[0]!r}") from None
        except (ConfigError, ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return jobs


def load_ensemble(path) -> list[JobSpec]:
    path = Path(path)
    return ensemble_from_dict(_read_toml(path), path)


def save_ensemble(jobs, path, name: str = "", description: str = "") -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(ensemble_to_dict(jobs, name, description), fh)


# -- curves ---------------------------------------------------------------


def curves_from_dict(data: dict, source="<curves>") -> dict[str, ResponseCurve]:
    out = {}
    for cid, body in data.get("curves", {}).items():
        try:
            out[cid] = ResponseCurve(cid, tuple(tuple(k) for k in body["knots"]), body.get("description", ""))
        except KeyError:
            raise ConfigError(f"{_where(source, 'curves.' + cid)}: missing 'knots'") from None
        except Exception as exc:
            raise ConfigError(f"{_where(source, 'curves.' + cid)}: {exc}") from None
    return out


def load_curves(path) -> dict[str, ResponseCurve]:
    path = Path(path)
    return curves_from_dict(_read_toml(path), path)


def save_curves(curves, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump({"curves": {cid: c.to_dict() for cid, c in curves.items()}}, fh)


# -- scenarios ------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    cluster: ClusterSpec
    ensemble: list[JobSpec]
    curves: dict[str, ResponseCurve]
    event: EventSpec
    policy: Policy
    sim: SimConfig = field(default_factory=SimConfig)
    lead_in: float = 0.0
    sla_window: Optional[float] = None
    tolerance_fraction: float = 0.01
    scaling: ScalingModel = field(default_factory=ScalingModel)
    event_start: Optional[datetime] = None
    path: Optional[Path] = None

    def envelope(self) -> PowerEnvelope:
        return build_envelope(self.event, self.sim.interval, self.lead_in)

    @property
    def window(self) -> float:
        return self.sla_window if self.sla_window is not None else self.envelope().span

    def with_policy(self, policy) -> "Scenario":
        policy = Policy.parse(policy) if isinstance(policy, str) else policy
        return replace(self, policy=policy, name=f"{self.name}@{policy.name}")


def _cluster_from(data, source) -> ClusterSpec:
    allowed = set(ClusterSpec.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{_where(source, 'cluster')}: unknown keys {sorted(unknown)}")
    try:
        return ClusterSpec(**data)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{_where(source, 'cluster')}: {exc}") from None


def full_power(ensemble, curves, cluster, scaling=None) -> float:
    return predict_cluster([JobState.fresh(j) for j in ensemble], curves, cluster, scaling).cluster_watts


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file."""
    path = Path(path)
    data = _read_toml(path)
    base = path.parent

    def rel(key, section=None):
        src = data if section is None else data.get(section, {})
        value = src.get(key)
        return None if value is None else (base / value)

    try:
        name = str(data.get("name", path.stem))
        cluster = _cluster_from(data.get("cluster", {}), path)
        if "ensemble" not in data:
            raise ConfigError(f"{path}: missing 'ensemble'")
        ensemble = load_ensemble(rel("ensemble"))
        curves = load_curves(rel("curves")) if "curves" in data else default_curves()
        validate_ensemble(ensemble, cluster, curves)
        policy = Policy.parse(str(data.get("policy", "cap+pause/fair")))

        planner_cfg = data.get("planner", {})
        scaling = ScalingModel(float(planner_cfg.get("scaling_exponent", 0.9)))
        tolerance = float(planner_cfg.get("tolerance_fraction", 0.01))

        sim_cfg = dict(data.get("sim", {}))
        if "seed" in sim_cfg:
            sim_cfg["rng_seed"] = sim_cfg.pop("seed")
        unknown = set(sim_cfg) - set(SimConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{_where(path, 'sim')}: unknown keys {sorted(unknown)}")
        sim = SimConfig(**sim_cfg)

        ev = dict(data.get("event", {}))
        template = ev.pop("template", "peak_shave")
        lead_in = float(ev.pop("lead_in", 0.0))
        baseline = ev.pop("baseline_watts", "auto")
        series_path = ev.pop("load_series", None)
        peak_duration = ev.pop("peak_duration", None)
        if baseline == "auto":
            baseline = full_power(ensemble, curves, cluster, scaling)
        event = make_event(template, float(baseline), **ev)

        event_start = None
        if series_path is not None:
            series = load_series(base / series_path)
            duration = float(peak_duration) if peak_duration is not None else sum(
                s.hold_duration for s in event.steps
            )
            event_start = find_peak_window(series, duration).start
        sla_window = data.get("sla_window")
        scenario = Scenario(
            name=name,
            cluster=cluster,
            ensemble=ensemble,
            curves=curves,
            event=event,
            policy=policy,
            sim=sim,
            lead_in=lead_in,
            sla_window=None if sla_window is None else float(sla_window),
            tolerance_fraction=tolerance,
            scaling=scaling,
            event_start=event_start,
            path=path,
        )
    except ConfigError as exc:
        msg = str(exc)
        # errors from referenced files already carry their own path
        raise ConfigError(msg if msg.startswith(str(base)) else f"{path}: {msg}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if scenario.window < scenario.envelope().span:
        raise ConfigError(f"{path}: sla_window shorter than the simulated span")
    return scenario


# -- pipeline -------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    plan: ControlPlan
    trace: TelemetryTrace
    report: EventReport


def plan_scenario(scenario: Scenario) -> ControlPlan:
    return plan(
        scenario.ensemble,
        scenario.cluster,
        scenario.curves,
        scenario.envelope(),
        scenario.policy,
        sla_window=scenario.window,
        tolerance_fraction=scenario.tolerance_fraction,
        scaling=scenario.scaling,
    )


def run_scenario(scenario: Scenario, seed: Optional[int] = None) -> RunResult:
    if seed is not None:
        scenario = replace(scenario, sim=replace(scenario.sim, rng_seed=int(seed)))
    envelope = scenario.envelope()
    p = plan_scenario(scenario)
    trace = run(scenario.ensemble, scenario.cluster, scenario.curves, p, envelope, scenario.sim, scenario.scaling)
    report = make_report(
        trace,
        envelope,
        p,
        scenario.ensemble,
        sla_window=scenario.window,
        tolerance_fraction=scenario.tolerance_fraction,
        averaging_window=scenario.sim.averaging_window,
    )
    return RunResult(scenario, p, trace, report)


def trace_timestamps(scenario: Scenario, trace: TelemetryTrace) -> Optional[list[datetime]]:
    """Wall-clock stamps for trace rows when the event start is known."""
    if scenario.event_start is None:
        return None
    origin = scenario.event_start - timedelta(seconds=scenario.lead_in)
    return [origin + timedelta(seconds=float(t)) for t in trace.times]
