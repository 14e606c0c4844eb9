"""Core vocabulary: flexibility tiers, jobs, cluster geometry, control actions, events."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence


class GridflexError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GridflexError):
    """A configuration file or object failed validation."""


class OverAllocated(ConfigError):
    pass


class DuplicateId(ConfigError):
    pass


class UnknownCurveClass(ConfigError):
    pass


class FlexTier(enum.IntEnum):
    """Flexibility tier. Integer value doubles as the sort key (Flex0 is strict)."""

    FLEX0 = 0
    FLEX1 = 1
    FLEX2 = 2
    FLEX3 = 3

    @property
    def max_avg_throughput_reduction(self) -> float:
        return _TIER_BUDGETS[self]

    @classmethod
    def parse(cls, value) -> "FlexTier":
        if isinstance(value, FlexTier):
            return value
        text = str(value).strip().lower().replace(" ", "").replace("_", "")
        if text.startswith("flex"):
            text = text[4:]
        try:
            return cls(int(text))
        except ValueError:
            raise ConfigError(f"unknown flex tier {value!r}") from None

    def __str__(self) -> str:
        return f"Flex{int(self)}"


_TIER_BUDGETS = {
    FlexTier.FLEX0: 0.0,
    FlexTier.FLEX1: 0.10,
    FlexTier.FLEX2: 0.25,
    FlexTier.FLEX3: 0.50,
}


class JobKind(str, enum.Enum):
    PRETRAINING = "pretraining"
    FINETUNING = "finetuning"
    INFERENCE = "inference"

    @classmethod
    def parse(cls, value) -> "JobKind":
        text = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "pretraining": cls.PRETRAINING,
            "pretrain": cls.PRETRAINING,
            "training": cls.PRETRAINING,
            "pt": cls.PRETRAINING,
            "finetuning": cls.FINETUNING,
            "finetune": cls.FINETUNING,
            "ft": cls.FINETUNING,
            "inference": cls.INFERENCE,
            "infer": cls.INFERENCE,
        }
        if text not in aliases:
            raise ConfigError(f"unknown job kind {value!r}")
        return aliases[text]


@dataclass(frozen=True)
class JobSpec:
    """A workload as submitted: allocation, tier and response-curve class.

    ``baseline_throughput`` is in abstract work units per second at full power
    on the full allocation. ``utilization`` scales the draw of a running job
    relative to its cap (1.0 means the job draws its cap).
    """

    id: str
    kind: JobKind
    model_label: str
    nodes: int
    flex: FlexTier
    curve_class: str
    baseline_throughput: float = 1.0
    utilization: float = 1.0

    def __post_init__(self):
        if not self.id:
            raise ConfigError("job id must be non-empty")
        if self.nodes < 1:
            raise ConfigError(f"job {self.id}: nodes must be >= 1, got {self.nodes}")
        if not self.baseline_throughput > 0:
            raise ConfigError(f"job {self.id}: baseline_throughput must be > 0")
        if not 0 < self.utilization <= 1:
            raise ConfigError(f"job {self.id}: utilization must be in (0, 1]")


@dataclass(frozen=True)
class ClusterSpec:
    total_nodes: int = 32
    gpus_per_node: int = 8
    gpu_tdp_watts: float = 400.0
    gpu_min_cap_watts: float = 150.0
    gpu_idle_watts: float = 90.0
    node_overhead_watts: float = 0.0

    def __post_init__(self):
        if self.total_nodes < 1 or self.gpus_per_node < 1:
            raise ConfigError("cluster node and GPU counts must be positive")
        if not self.gpu_tdp_watts > 0 or not self.gpu_min_cap_watts > 0:
            raise ConfigError("GPU power limits must be positive")
        if not 0 <= self.gpu_idle_watts <= self.gpu_min_cap_watts <= self.gpu_tdp_watts:
            raise ConfigError("require 0 <= gpu_idle_watts <= gpu_min_cap_watts <= gpu_tdp_watts")
        if self.node_overhead_watts < 0:
            raise ConfigError("node_overhead_watts must be >= 0")

    @property
    def total_gpus(self) -> int:
        return self.total_nodes * self.gpus_per_node

    @property
    def min_power_fraction(self) -> float:
        return self.gpu_min_cap_watts / self.gpu_tdp_watts


class ActionKind(str, enum.Enum):
    SET_CAP = "set_cap"
    CLEAR_CAP = "clear_cap"
    PAUSE = "pause"
    RESUME = "resume"
    RESIZE = "resize"


@dataclass(frozen=True)
class ControlAction:
    """One knob change on one job. ``value`` is watts/GPU for SET_CAP, nodes for RESIZE."""

    job_id: str
    kind: ActionKind
    value: Optional[float] = None

    def __post_init__(self):
        needs_value = self.kind in (ActionKind.SET_CAP, ActionKind.RESIZE)
        if needs_value and self.value is None:
            raise ValueError(f"{self.kind.value} requires a value")
        if self.kind is ActionKind.RESIZE and (self.value < 1 or self.value != int(self.value)):
            raise ValueError("resize target must be a positive integer node count")

    @classmethod
    def set_cap(cls, job_id: str, watts: float) -> "ControlAction":
        return cls(job_id, ActionKind.SET_CAP, float(watts))

    @classmethod
    def resize(cls, job_id: str, nodes: int) -> "ControlAction":
        return cls(job_id, ActionKind.RESIZE, int(nodes))

    def validate(self, job: JobSpec, cluster: ClusterSpec) -> None:
        if job.flex is FlexTier.FLEX0:
            raise ValueError(f"action {self.kind.value} targets Flex0 job {job.id}")
        if self.kind is ActionKind.SET_CAP:
            lo, hi = cluster.gpu_min_cap_watts, cluster.gpu_tdp_watts
            if not lo - 1e-9 <= self.value <= hi + 1e-9:
                raise ValueError(f"cap {self.value} W outside [{lo}, {hi}]")
        if self.kind is ActionKind.RESIZE and self.value > job.nodes:
            raise ValueError(f"resize of {job.id} to {self.value} exceeds original {job.nodes} nodes")

    def to_dict(self) -> dict:
        out = {"job_id": self.job_id, "action": self.kind.value}
        if self.kind is ActionKind.SET_CAP:
            out["watts_per_gpu"] = self.value
        elif self.kind is ActionKind.RESIZE:
            out["new_nodes"] = int(self.value)
        return out


@dataclass(frozen=True)
class EventStep:
    target_reduction_fraction: float
    ramp_duration: float
    hold_duration: float


@dataclass(frozen=True)
class EventSpec:
    """A curtailment request.

    Step reductions are cumulative fractions of ``baseline_watts``. After the
    last hold the target ramps to ``snapback_limit_watts`` over
    ``recovery_ramp`` seconds and stays there for ``snapback_window`` seconds.
    """

    baseline_watts: float
    steps: tuple[EventStep, ...]
    recovery_ramp: float = 900.0
    snapback_window: float = 3600.0
    snapback_limit_watts: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.snapback_limit_watts is None:
            object.__setattr__(self, "snapback_limit_watts", self.baseline_watts)
        if not self.baseline_watts > 0:
            raise ConfigError("baseline_watts must be > 0")
        if not self.steps:
            raise ConfigError("an event needs at least one step")
        previous = 0.0
        for step in self.steps:
            if not 0 <= step.target_reduction_fraction <= 1:
                raise ConfigError("step reduction must lie in [0, 1]")
            if step.target_reduction_fraction < previous:
                raise ConfigError("step reductions must be cumulative-monotone")
            if step.ramp_duration < 0 or step.hold_duration < 0:
                raise ConfigError("durations must be >= 0")
            previous = step.target_reduction_fraction
        if self.recovery_ramp < 0 or self.snapback_window < 0:
            raise ConfigError("durations must be >= 0")
        if self.snapback_limit_watts > self.baseline_watts:
            raise ConfigError("snapback_limit_watts cannot exceed baseline_watts")

    @property
    def max_reduction(self) -> float:
        return self.steps[-1].target_reduction_fraction

    @property
    def duration(self) -> float:
        return (
            sum(s.ramp_duration + s.hold_duration for s in self.steps)
            + self.recovery_ramp
            + self.snapback_window
        )


class JobStatus(str, enum.Enum):
    RUNNING = "running"
    PAUSED = "paused"


@dataclass
class JobState:
    """Mutable runtime state of one job."""

    spec: JobSpec
    status: JobStatus = JobStatus.RUNNING
    current_cap_watts: Optional[float] = None  # None = uncapped (TDP)
    current_nodes: int = 0
    cumulative_work: float = 0.0
    throughput_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.current_nodes == 0:
            self.current_nodes = self.spec.nodes
        if not 1 <= self.current_nodes <= self.spec.nodes:
            raise ValueError(f"{self.spec.id}: current_nodes out of range")

    @classmethod
    def fresh(cls, spec: JobSpec) -> "JobState":
        return cls(spec=spec)

    @property
    def paused(self) -> bool:
        return self.status is JobStatus.PAUSED

    def cap_or(self, tdp: float) -> float:
        return tdp if self.current_cap_watts is None else min(self.current_cap_watts, tdp)

    def apply(self, action: ControlAction) -> None:
        if action.job_id != self.spec.id:
            raise ValueError(f"action for {action.job_id} applied to {self.spec.id}")
        kind = action.kind
        if kind is ActionKind.SET_CAP:
            self.current_cap_watts = float(action.value)
        elif kind is ActionKind.CLEAR_CAP:
            self.current_cap_watts = None
        elif kind is ActionKind.PAUSE:
            self.status = JobStatus.PAUSED
        elif kind is ActionKind.RESUME:
            self.status = JobStatus.RUNNING
        elif kind is ActionKind.RESIZE:
            new_nodes = int(action.value)
            if not 1 <= new_nodes <= self.spec.nodes:
                raise ValueError(f"{self.spec.id}: cannot resize to {new_nodes} nodes")
            self.current_nodes = new_nodes

    def copy(self) -> "JobState":
        return copy.deepcopy(self)


def flex_budget(job: JobSpec) -> float:
    """Maximum allowed average throughput reduction for the job's tier."""
    return job.flex.max_avg_throughput_reduction


def validate_ensemble(
    jobs: Sequence[JobSpec],
    cluster: ClusterSpec,
    curve_classes: Optional[Iterable[str]] = None,
) -> list[JobSpec]:
    """Check an ensemble against a cluster; returns the jobs as a list.

    ``curve_classes`` is the set of known response-curve class ids. When it is
    None the curve check is skipped.
    """
    seen = set()
    for job in jobs:
        if job.id in seen:
            raise DuplicateId(f"duplicate job id {job.id!r}")
        seen.add(job.id)
    used = sum(job.nodes for job in jobs)
    if used > cluster.total_nodes:
        raise OverAllocated(f"ensemble uses {used} nodes, cluster has {cluster.total_nodes}")
    if curve_classes is not None:
        known = set(curve_classes)
        for job in jobs:
            if job.curve_class not in known:
                raise UnknownCurveClass(f"job {job.id}: unknown curve class {job.curve_class!r}")
    return list(jobs)
