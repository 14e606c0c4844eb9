"""Event planning: target envelopes, Greedy and Fair knob assignment, SLA checks.

The planner works on a fixed control interval. For every interval it knows
the target cluster power from the envelope and asks a strategy for a set of
per-job settings whose predicted cluster power meets it. SLAs are averages
over a window, so each job carries a throughput-deficit allowance (seconds of
lost full-speed work) that the strategies must not overdraw.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .domain import (
    ActionKind,
    ClusterSpec,
    ControlAction,
    EventSpec,
    FlexTier,
    GridflexError,
    JobSpec,
    JobState,
    JobStatus,
    flex_budget,
)
from .powerperf import ResponseCurve, ScalingModel, job_power, job_throughput, predict_cluster

BISECTION_TOL = 1e-6
MAX_BISECTION_ITERS = 60
_EPS = 1e-9


class EmptyEvent(GridflexError):
    pass


class Infeasible(GridflexError):
    """No SLA-safe assignment meets the target.

    ``max_reduction_watts`` is the largest reduction the strategy could reach
    at the failing interval; ``max_reduction_fraction`` expresses it against
    the baseline when one is known.
    """

    def __init__(self, message, max_reduction_watts=0.0, max_reduction_fraction=None, time=None):
        super().__init__(message)
        self.max_reduction_watts = max_reduction_watts
        self.max_reduction_fraction = max_reduction_fraction
        self.time = time


class Knob(str, enum.Enum):
    CAP = "cap"
    PAUSE = "pause"
    RESIZE = "resize"


class Strategy(str, enum.Enum):
    GREEDY = "greedy"
    FAIR = "fair"


@dataclass(frozen=True)
class Policy:
    knobs: frozenset
    strategy: Strategy

    def __post_init__(self):
        object.__setattr__(self, "knobs", frozenset(Knob(k) for k in self.knobs))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.knobs:
            raise ValueError("a policy needs at least one knob")

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Parse ``"cap+pause/fair"`` style names."""
        try:
            knob_part, strategy = text.strip().lower().split("/")
            knobs = frozenset(Knob(k.strip()) for k in knob_part.split("+"))
            return cls(knobs, Strategy(strategy.strip()))
        except ValueError:
            raise ValueError(f"bad policy name {text!r}; expected e.g. 'cap+pause/fair'") from None

    @property
    def name(self) -> str:
        order = [Knob.CAP, Knob.PAUSE, Knob.RESIZE]
        return "+".join(k.value for k in order if k in self.knobs) + "/" + self.strategy.value

    def __str__(self) -> str:
        return self.name


PRESETS = {
    name: Policy.parse(name)
    for name in ("cap+pause/fair", "cap/fair", "pause/greedy", "pause+resize/fair")
}


# --------------------------------------------------------------------------
# Envelope


@dataclass(frozen=True)
class Phase:
    label: str
    start: int  # first interval index
    stop: int  # one past the last interval index
    level_from: float
    level_to: float


@dataclass
class PowerEnvelope:
    """Target cluster power sampled at the start of every control interval."""

    interval: float
    baseline_watts: float
    targets: np.ndarray
    phases: list[Phase]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.targets)) * self.interval

    @property
    def span(self) -> float:
        return len(self.targets) * self.interval

    def __len__(self) -> int:
        return len(self.targets)

    def labels(self) -> list[str]:
        out = [""] * len(self.targets)
        for ph in self.phases:
            for k in range(ph.start, ph.stop):
                out[k] = ph.label
        return out

    def phase(self, label: str) -> Phase:
        for ph in self.phases:
            if ph.label == label:
                return ph
        raise KeyError(label)

    def indices(self, prefix: str) -> list[int]:
        """Interval indices of every phase whose label starts with ``prefix``."""
        return [k for ph in self.phases if ph.label.startswith(prefix) for k in range(ph.start, ph.stop)]

    def target_at(self, t: float) -> float:
        """Continuous-time target (linear inside ramps)."""
        for ph in self.phases:
            t0 = ph.start * self.interval
            t1 = ph.stop * self.interval
            if t0 <= t < t1:
                return ph.level_from + (ph.level_to - ph.level_from) * (t - t0) / (t1 - t0)
        return float(self.targets[-1])


def _n_intervals(duration: float, interval: float) -> int:
    # durations are rounded to the nearest whole interval, halves rounding up
    return int(math.floor(duration / interval + 0.5))


def build_envelope(event: EventSpec, interval: float, lead_in: float = 0.0) -> PowerEnvelope:
    """Sample the event's target trajectory on the control grid.

    Phase durations are rounded to whole intervals. A ramp of ``n`` intervals
    from level ``a`` to ``b`` has sample ``i`` at ``a + (b - a) * i / n``.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if not event.steps:
        raise EmptyEvent("event has no steps")
    base = event.baseline_watts
    phases: list[Phase] = []
    cursor = 0

    def add(label, duration, a, b):
        nonlocal cursor
        n = _n_intervals(duration, interval)
        if n > 0:
            phases.append(Phase(label, cursor, cursor + n, a, b))
            cursor += n

    add("pre", lead_in, base, base)
    level = base
    for k, step in enumerate(event.steps, start=1):
        new_level = base * (1.0 - step.target_reduction_fraction)
        add(f"ramp_down_{k}", step.ramp_duration, level, new_level)
        add(f"hold_{k}", step.hold_duration, new_level, new_level)
        level = new_level
    add("ramp_up", event.recovery_ramp, level, event.snapback_limit_watts)
    add("post", event.snapback_window, event.snapback_limit_watts, event.snapback_limit_watts)
    if cursor == 0:
        raise EmptyEvent("event spans zero intervals")

    targets = np.empty(cursor)
    for ph in phases:
        n = ph.stop - ph.start
        i = np.arange(n)
        targets[ph.start : ph.stop] = ph.level_from + (ph.level_to - ph.level_from) * i / n
    return PowerEnvelope(interval, base, targets, phases)


# --------------------------------------------------------------------------
# Per-job operating points


@dataclass(frozen=True)
class Setting:
    """Absolute control state of one job; ``nodes=None`` means full allocation."""

    paused: bool = False
    cap: Optional[float] = None
    nodes: Optional[int] = None

    @property
    def is_default(self) -> bool:
        return not self.paused and self.cap is None and self.nodes is None


FULL = Setting()


class _JobModel:
    """Power and throughput of one job under any Setting, in cluster terms.

    ``watts`` includes the idle draw of nodes released by a resize so that
    reductions add up to the cluster-level prediction.
    """

    def __init__(self, job, curve, cluster, scaling):
        self.job = job
        self.curve = curve
        self.cluster = cluster
        self.scaling = scaling
        self.budget = flex_budget(job)
        self.p_floor = max(curve.p_min, cluster.min_power_fraction)
        self.full_watts = self.watts(FULL)

    def state(self, s: Setting) -> JobState:
        return JobState(
            spec=self.job,
            status=JobStatus.PAUSED if s.paused else JobStatus.RUNNING,
            current_cap_watts=s.cap,
            current_nodes=self.job.nodes if s.nodes is None else s.nodes,
        )

    def watts(self, s: Setting) -> float:
        released = 0 if s.nodes is None else self.job.nodes - s.nodes
        idle = released * self.cluster.gpus_per_node * self.cluster.gpu_idle_watts
        return job_power(self.state(s), self.cluster) + idle

    def throughput(self, s: Setting) -> float:
        return job_throughput(self.state(s), self.curve, self.scaling, self.cluster)

    def reduction(self, s: Setting) -> float:
        return self.full_watts - self.watts(s)

    def slowdown(self, s: Setting) -> float:
        return 1.0 - self.throughput(s)

    def cap_for_slowdown(self, s: float) -> Setting:
        """Lowest cap whose throughput loss does not exceed ``s``."""
        if s <= 0:
            return FULL
        p = max(self.curve.inverse(1.0 - s), self.p_floor)
        if p >= 1.0:
            return FULL
        return Setting(cap=p * self.cluster.gpu_tdp_watts)

    def cap_for_reduction(self, need: float) -> Optional[Setting]:
        """Highest cap that still sheds ``need`` watts, or None if unreachable."""
        if need <= 0:
            return FULL
        gpus = self.job.nodes * self.cluster.gpus_per_node
        cap = (self.full_watts - need) / (gpus * self.job.utilization)
        if cap < self.p_floor * self.cluster.gpu_tdp_watts - _EPS:
            return None
        return Setting(cap=min(cap, self.cluster.gpu_tdp_watts))

    def nodes_for_slowdown(self, s: float) -> Setting:
        """Fewest nodes whose throughput loss does not exceed ``s``."""
        n_orig = self.job.nodes
        best = n_orig
        for n in range(n_orig - 1, 0, -1):
            if 1.0 - self.scaling(n, n_orig) <= s + _EPS:
                best = n
            else:
                break
        return FULL if best == n_orig else Setting(nodes=best)

    def options(self, knobs, max_slowdown: float) -> list[Setting]:
        """Discrete SLA-safe settings, one per knob depth (cap gives its floor)."""
        out = []
        if Knob.PAUSE in knobs and max_slowdown >= 1.0 - _EPS:
            out.append(Setting(paused=True))
        if Knob.RESIZE in knobs:
            for n in range(1, self.job.nodes):
                st = Setting(nodes=n)
                if self.slowdown(st) <= max_slowdown + _EPS:
                    out.append(st)
        if Knob.CAP in knobs:
            st = self.cap_for_slowdown(max_slowdown)
            if not st.is_default:
                out.append(st)
        return out


def _models(jobs, curves, cluster, scaling):
    return {j.id: _JobModel(j, curves[j.curve_class], cluster, scaling) for j in jobs}


def _max_slowdown(model: _JobModel, allowance, interval) -> float:
    if model.budget <= 0:
        return 0.0
    if allowance is None or model.job.id not in allowance:
        return 1.0
    if interval is None or interval <= 0:
        raise ValueError("interval is required when allowances are given")
    return max(0.0, min(1.0, allowance[model.job.id] / interval))


def _greedy_order(models, prefer, allowance=None, balance=False):
    if balance:
        # fallback ordering: spend from whoever has the most allowance left
        return sorted(
            models,
            key=lambda m: (-allowance.get(m.job.id, 0.0), -int(m.job.flex), -m.full_watts, m.job.id),
        )
    return sorted(
        models,
        key=lambda m: (m.job.id not in prefer, -int(m.job.flex), -m.full_watts, m.job.id),
    )


def _greedy_settings(models, reduction_watts, knobs, allowance, interval, prefer=(), balance=False):
    """Minimum-count cover preferring flexible jobs; returns ({id: Setting}, reduction)."""
    if reduction_watts <= _EPS:
        return {}, 0.0
    deepest = {}
    for m in models:
        if m.budget <= 0:
            continue
        opts = m.options(knobs, _max_slowdown(m, allowance, interval))
        if opts:
            best = max(opts, key=m.reduction)
            if m.reduction(best) > _EPS:
                deepest[m.job.id] = (best, m.reduction(best))
    total = sum(r for _, r in deepest.values())
    if total < reduction_watts - _EPS:
        raise Infeasible(
            f"greedy: at most {total:.1f} W can be shed, {reduction_watts:.1f} W requested",
            max_reduction_watts=total,
        )
    sizes = sorted((r for _, r in deepest.values()), reverse=True)
    k_star = next(k for k in range(1, len(sizes) + 1) if sum(sizes[:k]) >= reduction_watts - _EPS)

    ordered = [m for m in _greedy_order(models, set(prefer), allowance, balance and allowance is not None) if m.job.id in deepest]
    pool = [m.job.id for m in ordered]
    chosen = []
    need, k_rem = reduction_watts, k_star
    for m in ordered:
        if k_rem == 0 or need <= _EPS:
            break
        jid = m.job.id
        rest = sorted((deepest[o][1] for o in pool if o != jid), reverse=True)
        r = deepest[jid][1]
        if r + sum(rest[: k_rem - 1]) >= need - _EPS:
            chosen.append(m)
            need -= r
            k_rem -= 1
        pool.remove(jid)

    settings = {m.job.id: deepest[m.job.id][0] for m in chosen}
    # the last job only sheds what is still missing, at the gentlest depth that does it
    last = chosen[-1]
    remainder = reduction_watts - sum(deepest[m.job.id][1] for m in chosen[:-1])
    max_s = _max_slowdown(last, allowance, interval)
    candidates = [s for s in last.options(knobs, max_s) if last.reduction(s) >= remainder - _EPS]
    if Knob.CAP in knobs:
        st = last.cap_for_reduction(remainder)
        if st is not None and last.slowdown(st) <= max_s + _EPS:
            candidates.append(st)
    if candidates:
        settings[last.job.id] = min(candidates, key=lambda s: (last.slowdown(s), -last.reduction(s)))
    by_id = {m.job.id: m for m in models}
    achieved = sum(by_id[j].reduction(s) for j, s in settings.items())
    return settings, achieved


@dataclass
class FairResult:
    actions: list[ControlAction]
    scale: float
    reduction_watts: float
    paused: list[str] = field(default_factory=list)
    iterations: int = 0


def _fair_settings(models, reduction_watts, knobs, allowance, interval, usage=None, max_scale=1.0):
    """Proportional slowdowns ``scale * budget``; returns (settings, reduction, scale, paused, iters)."""
    if reduction_watts <= _EPS:
        return {}, 0.0, 0.0, [], 0
    usage = usage or {}
    flexible = [m for m in models if m.budget > 0]
    limits = {m.job.id: _max_slowdown(m, allowance, interval) for m in flexible}
    cont = Knob.CAP if Knob.CAP in knobs else Knob.RESIZE if Knob.RESIZE in knobs else None

    def realize(scale, paused):
        out = {}
        red = 0.0
        for m in flexible:
            jid = m.job.id
            if jid in paused:
                st = Setting(paused=True)
            elif cont is None:
                continue
            else:
                s = min(scale * m.budget, limits[jid], 1.0)
                st = m.cap_for_slowdown(s) if cont is Knob.CAP else m.nodes_for_slowdown(s)
            if not st.is_default:
                out[jid] = st
                red += m.reduction(st)
        return out, red

    pause_order = []
    if Knob.PAUSE in knobs:
        pause_order = [
            m.job.id
            for m in sorted(
                flexible,
                key=lambda m: (usage.get(m.job.id, 0.0), -int(m.job.flex), -m.full_watts, m.job.id),
            )
            if limits[m.job.id] >= 1.0 - _EPS
        ]

    best_red = 0.0
    for n_paused in range(len(pause_order) + 1):
        paused = set(pause_order[:n_paused])
        top_scale = max_scale if cont is not None else 0.0
        settings, red = realize(top_scale, paused)
        best_red = max(best_red, red)
        if red < reduction_watts - _EPS:
            continue
        if cont is None:
            return settings, red, 0.0, sorted(paused), 0
        lo, hi, iters = 0.0, top_scale, 0
        if realize(0.0, paused)[1] >= reduction_watts - _EPS:
            hi = 0.0
        while hi - lo > BISECTION_TOL and iters < MAX_BISECTION_ITERS:
            mid = 0.5 * (lo + hi)
            if realize(mid, paused)[1] >= reduction_watts - _EPS:
                hi = mid
            else:
                lo = mid
            iters += 1
        settings, red = realize(hi, paused)
        return settings, red, hi, sorted(paused), iters
    raise Infeasible(
        f"fair: at most {best_red:.1f} W can be shed, {reduction_watts:.1f} W requested",
        max_reduction_watts=best_red,
    )


def _actions(settings, previous, jobs_by_id):
    raw = []
    for jid in sorted(set(settings) | set(previous)):
        old = previous.get(jid, FULL)
        new = settings.get(jid, FULL)
        if old == new:
            continue
        if new.nodes != old.nodes:
            target = jobs_by_id[jid].nodes if new.nodes is None else new.nodes
            raw.append(ControlAction.resize(jid, target))
        if new.cap != old.cap:
            if new.cap is None:
                raw.append(ControlAction(jid, ActionKind.CLEAR_CAP))
            else:
                raw.append(ControlAction.set_cap(jid, new.cap))
        if new.paused != old.paused:
            raw.append(ControlAction(jid, ActionKind.PAUSE if new.paused else ActionKind.RESUME))
    return raw


def greedy_assign(
    jobs: Sequence[JobSpec],
    curves: Mapping[str, ResponseCurve],
    cluster: ClusterSpec,
    reduction_watts: float,
    knobs: Iterable,
    *,
    allowance: Optional[Mapping[str, float]] = None,
    interval: Optional[float] = None,
    prefer: Iterable[str] = (),
    scaling: Optional[ScalingModel] = None,
) -> list[ControlAction]:
    """Shed ``reduction_watts`` from full power touching as few jobs as possible.

    Jobs are visited most-flexible first (then higher power, then id); a job
    is taken only if the target stays reachable with the minimum possible
    number of jobs, so the result is a minimum-count cover that prefers
    flexible jobs. Taken jobs get their deepest SLA-safe action, except the
    last one which gets the gentlest action that closes the gap.

    ``allowance`` maps job id to remaining deficit seconds; without it every
    non-Flex0 job may take any action.
    """
    if reduction_watts < 0:
        raise ValueError("reduction_watts must be >= 0")
    models = list(_models(jobs, curves, cluster, scaling or ScalingModel()).values())
    settings, _ = _greedy_settings(models, reduction_watts, frozenset(Knob(k) for k in knobs), allowance, interval, prefer)
    return _actions(settings, {}, {j.id: j for j in jobs})


def fair_assign(
    jobs: Sequence[JobSpec],
    curves: Mapping[str, ResponseCurve],
    cluster: ClusterSpec,
    reduction_watts: float,
    knobs: Iterable,
    *,
    allowance: Optional[Mapping[str, float]] = None,
    interval: Optional[float] = None,
    usage: Optional[Mapping[str, float]] = None,
    max_scale: float = 1.0,
    scaling: Optional[ScalingModel] = None,
) -> FairResult:
    """Spread the slowdown in proportion to each job's flex budget.

    Bisects a scale in ``[0, max_scale]`` so that every flexible job slows by
    ``scale * budget``. Caps are preferred, then whole-node resizes (rounded
    towards the smaller slowdown). When those saturate and pausing is allowed,
    jobs with the least budget used so far (``usage``) are paused one at a time.
    """
    if reduction_watts < 0:
        raise ValueError("reduction_watts must be >= 0")
    models = list(_models(jobs, curves, cluster, scaling or ScalingModel()).values())
    settings, red, scale, paused, iters = _fair_settings(
        models, reduction_watts, frozenset(Knob(k) for k in knobs), allowance, interval, usage, max_scale
    )
    actions = _actions(settings, {}, {j.id: j for j in jobs})
    return FairResult(actions, scale, red, paused, iters)


# --------------------------------------------------------------------------
# Plans


@dataclass
class ControlPlan:
    policy: Policy
    envelope: PowerEnvelope
    settings: list[dict]  # per interval: {job_id: Setting}, FULL omitted
    schedule: dict[int, list[ControlAction]]
    predicted_trace: np.ndarray
    predicted_throughput: dict[str, np.ndarray]
    predicted_sla: dict[str, float]
    sla_window: float
    tolerance_watts: float
    scales: np.ndarray = None

    @property
    def interval(self) -> float:
        return self.envelope.interval

    @property
    def impacted_jobs(self) -> list[str]:
        return sorted({a.job_id for acts in self.schedule.values() for a in acts})

    @property
    def jobs_impacted(self) -> int:
        return len(self.impacted_jobs)

    def actions(self):
        """Yield ``(time_seconds, action)`` in time order."""
        for k in sorted(self.schedule):
            for a in self.schedule[k]:
                yield k * self.interval, a

    def average_throughput(self) -> float:
        return float(np.mean(list(self.predicted_sla.values()))) if self.predicted_sla else 1.0

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.name,
            "interval": self.interval,
            "baseline_watts": self.envelope.baseline_watts,
            "sla_window": self.sla_window,
            "jobs_impacted": self.jobs_impacted,
            "predicted_sla": self.predicted_sla,
            "schedule": [
                {"t": k * self.interval, "actions": [a.to_dict() for a in self.schedule[k]]}
                for k in sorted(self.schedule)
            ],
            "predicted_watts": [round(float(w), 6) for w in self.predicted_trace],
            "target_watts": [round(float(w), 6) for w in self.envelope.targets],
        }


def evaluate_settings(ensemble, curves, cluster, settings_per_interval, scaling=None):
    """Predicted cluster watts and per-job throughput for a settings sequence."""
    scaling = scaling or ScalingModel()
    models = _models(ensemble, curves, cluster, scaling)
    watts = np.empty(len(settings_per_interval))
    thr = {j.id: np.empty(len(settings_per_interval)) for j in ensemble}
    for k, settings in enumerate(settings_per_interval):
        states = [models[j.id].state(settings.get(j.id, FULL)) for j in ensemble]
        pred = predict_cluster(states, curves, cluster, scaling)
        watts[k] = pred.cluster_watts
        for jid, t in pred.per_job_norm_throughput.items():
            thr[jid][k] = t
    return watts, thr


def settings_from_schedule(ensemble, schedule, n_intervals):
    """Replay a ``{interval: [actions]}`` schedule into per-interval settings."""
    jobs = {j.id: j for j in ensemble}
    current = {j.id: FULL for j in ensemble}
    out = []
    for k in range(n_intervals):
        for a in schedule.get(k, []):
            if a.job_id not in jobs:
                raise KeyError(a.job_id)
            s = current[a.job_id]
            if a.kind is ActionKind.SET_CAP:
                s = Setting(s.paused, float(a.value), s.nodes)
            elif a.kind is ActionKind.CLEAR_CAP:
                s = Setting(s.paused, None, s.nodes)
            elif a.kind is ActionKind.PAUSE:
                s = Setting(True, s.cap, s.nodes)
            elif a.kind is ActionKind.RESUME:
                s = Setting(False, s.cap, s.nodes)
            elif a.kind is ActionKind.RESIZE:
                n = int(a.value)
                s = Setting(s.paused, s.cap, None if n == jobs[a.job_id].nodes else n)
            current[a.job_id] = s
        out.append({jid: s for jid, s in current.items() if not s.is_default})
    return out


def plan_from_schedule(ensemble, cluster, curves, envelope, schedule, policy=None, sla_window=None, scaling=None, tolerance_fraction=0.01):
    """Wrap a hand-written schedule as a ControlPlan with predictions."""
    settings = settings_from_schedule(ensemble, schedule, len(envelope))
    watts, thr = evaluate_settings(ensemble, curves, cluster, settings, scaling)
    window = sla_window or envelope.span
    sla = {jid: _window_average(series, envelope.interval, window) for jid, series in thr.items()}
    return ControlPlan(
        policy=policy or PRESETS["cap+pause/fair"],
        envelope=envelope,
        settings=settings,
        schedule={k: v for k, v in schedule.items() if v},
        predicted_trace=watts,
        predicted_throughput=thr,
        predicted_sla=sla,
        sla_window=window,
        tolerance_watts=tolerance_fraction * envelope.baseline_watts,
    )


def _window_average(series, interval, window) -> float:
    # time outside the simulated span runs at full speed
    covered = len(series) * interval
    if covered > window + _EPS:
        raise ValueError(f"series spans {covered} s, longer than the SLA window {window} s")
    return (math.fsum(float(x) * interval for x in series) + (window - covered)) / window


def _plan_intervals(envelope, needs, tol, policy, model_list, models, total_allow, max_scale, balance):
    dt = envelope.interval
    deficit = {jid: 0.0 for jid in total_allow}
    n = len(envelope)
    settings: list[dict] = [{} for _ in range(n)]
    scales = np.zeros(n)
    touched: set[str] = set()
    order = sorted(range(n), key=lambda k: (-needs[k], k))
    for k in order:
        need = float(needs[k])
        if need <= _EPS:
            continue
        allowance = {jid: total_allow[jid] - deficit[jid] for jid in deficit}
        usage = {
            jid: deficit[jid] / total_allow[jid] if total_allow[jid] > 0 else 0.0 for jid in deficit
        }
        chosen = None
        failure = None
        for attempt in (need, need - tol):
            if attempt <= _EPS:
                chosen = ({}, 0.0)
                break
            try:
                if policy.strategy is Strategy.GREEDY:
                    st, _ = _greedy_settings(model_list, attempt, policy.knobs, allowance, dt, touched, balance)
                    chosen = (st, 0.0)
                else:
                    st, _, scale, _, _ = _fair_settings(
                        model_list, attempt, policy.knobs, allowance, dt, usage, max_scale
                    )
                    chosen = (st, scale)
                break
            except Infeasible as exc:
                failure = exc
        if chosen is None:
            raise Infeasible(
                f"{policy.name}: cannot meet target at t={k * dt:.0f} s "
                f"(need {need:.0f} W, at most {failure.max_reduction_watts:.0f} W available)",
                max_reduction_watts=failure.max_reduction_watts,
                max_reduction_fraction=failure.max_reduction_watts / envelope.baseline_watts,
                time=k * dt,
            )
        settings[k], scales[k] = chosen
        for jid, st in settings[k].items():
            deficit[jid] += models[jid].slowdown(st) * dt
            touched.add(jid)

    return settings, scales


def _touched(settings) -> set:
    return {jid for st in settings for jid in st}


def _prune_jobs(settings, scales, model_list, models, dt, attempt):
    """Drop jobs from a greedy plan while a replan without them stays feasible.

    Per-interval covers can exhaust the allowance of their favourite jobs and
    pull extra jobs in for the leftover intervals; rotating among fewer jobs
    is often possible. Least-used jobs are tried first.
    """
    excluded: set = set()
    current = _touched(settings)
    used = {jid: sum(models[jid].slowdown(st[jid]) * dt for st in settings if jid in st) for jid in current}
    for jid in sorted(current, key=lambda j: (used[j], j)):
        if jid not in current:
            continue
        trial = excluded | {jid}
        try:
            cand_settings, cand_scales = attempt([m for m in model_list if m.job.id not in trial])
        except Infeasible:
            continue
        touched = _touched(cand_settings)
        if len(touched) < len(current):
            excluded, settings, scales, current = trial, cand_settings, cand_scales, touched
    return settings, scales


def plan(
    ensemble: Sequence[JobSpec],
    cluster: ClusterSpec,
    curves: Mapping[str, ResponseCurve],
    event,
    policy: Policy,
    *,
    interval: float = 60.0,
    lead_in: float = 0.0,
    sla_window: Optional[float] = None,
    tolerance_fraction: float = 0.01,
    scaling: Optional[ScalingModel] = None,
) -> ControlPlan:
    """Plan an event under ``policy``; raises Infeasible when SLAs forbid it.

    ``event`` is an EventSpec or a prebuilt PowerEnvelope. Every interval aims
    at its exact target; if that is out of reach the tolerance band
    (``tolerance_fraction`` of baseline) is used before giving up. Intervals
    are planned from the most demanding down so that deficit allowances go
    where they are needed most; the SLA only constrains totals, so the order
    does not affect validity.
    """
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    scaling = scaling or ScalingModel()
    envelope = event if isinstance(event, PowerEnvelope) else build_envelope(event, interval, lead_in)
    dt = envelope.interval
    window = sla_window if sla_window is not None else envelope.span
    if envelope.span > window + _EPS:
        raise ValueError(f"plan spans {envelope.span} s but the SLA window is {window} s")

    models = _models(ensemble, curves, cluster, scaling)
    model_list = [models[j.id] for j in ensemble]
    full_watts = predict_cluster([JobState.fresh(j) for j in ensemble], curves, cluster, scaling).cluster_watts
    tol = tolerance_fraction * envelope.baseline_watts
    needs = full_watts - envelope.targets

    total_allow = {j.id: flex_budget(j) * window for j in ensemble}
    budgets = [m.budget for m in model_list if m.budget > 0]
    max_scale = max(1.0 / b for b in budgets) if budgets else 1.0

    def attempt(candidates):
        modes = (False, True) if policy.strategy is Strategy.GREEDY else (False,)
        for n, balance in enumerate(modes, start=1):
            try:
                return _plan_intervals(envelope, needs, tol, policy, candidates, models, total_allow, max_scale, balance)
            except Infeasible:
                if n == len(modes):
                    raise

    settings, scales = attempt(model_list)
    if policy.strategy is Strategy.GREEDY:
        settings, scales = _prune_jobs(settings, scales, model_list, models, dt, attempt)

    jobs_by_id = {j.id: j for j in ensemble}
    schedule = {}
    previous: dict = {}
    for k in range(len(envelope)):
        acts = _actions(settings[k], previous, jobs_by_id)
        if acts:
            schedule[k] = acts
        previous = settings[k]

    watts, thr = evaluate_settings(ensemble, curves, cluster, settings, scaling)
    sla = {jid: _window_average(series, dt, window) for jid, series in thr.items()}
    result = ControlPlan(
        policy=policy,
        envelope=envelope,
        settings=settings,
        schedule=schedule,
        predicted_trace=watts,
        predicted_throughput=thr,
        predicted_sla=sla,
        sla_window=window,
        tolerance_watts=tol,
        scales=scales,
    )
    _check_plan(result, ensemble, cluster)
    return result


def _check_plan(p: ControlPlan, ensemble, cluster) -> None:
    jobs = {j.id: j for j in ensemble}
    for _, a in p.actions():
        a.validate(jobs[a.job_id], cluster)
    over = p.predicted_trace - (p.envelope.targets + p.tolerance_watts)
    if np.any(over > 1e-6):
        k = int(np.argmax(over))
        raise AssertionError(f"planned power exceeds target at interval {k} by {over[k]:.3f} W")
    failing = [jid for jid, ok in sla_check(p, ensemble).items() if not ok]
    if failing:
        raise AssertionError(f"planned SLAs violated for {failing}")


def sla_check(plan: ControlPlan, ensemble: Sequence[JobSpec], curves=None, sla_window: Optional[float] = None) -> dict[str, bool]:
    """Per-job pass/fail of predicted average throughput against the flex budget.

    Flex0 jobs pass only if their throughput is exactly 1 at every interval.
    ``curves`` is accepted for signature symmetry; predictions are already in
    the plan.
    """
    window = sla_window if sla_window is not None else plan.sla_window
    out = {}
    for job in ensemble:
        series = plan.predicted_throughput[job.id]
        if job.flex is FlexTier.FLEX0:
            out[job.id] = bool(np.all(series == 1.0))
        else:
            avg = _window_average(series, plan.interval, window)
            out[job.id] = avg >= 1.0 - flex_budget(job) - _EPS
    return out
