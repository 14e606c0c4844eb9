"""Power-performance response model.

Maps a job's control state (cap, pause, allocation) to its power draw and
normalized throughput, and aggregates jobs into a cluster prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .domain import ClusterSpec, GridflexError, JobState, JobStatus


class CurveError(GridflexError):
    pass


class InsufficientSamples(CurveError):
    pass


class NonPositiveThroughput(CurveError):
    pass


@dataclass(frozen=True)
class ResponseCurve:
    """Monotone piecewise-linear map from per-GPU power fraction to throughput.

    Knots are ``(power_fraction, normalized_throughput)`` pairs with strictly
    increasing power fraction, ending at ``(1.0, 1.0)``. Evaluation below the
    first knot clamps to the first knot's throughput.
    """

    class_id: str
    knots: tuple[tuple[float, float], ...]
    description: str = ""

    def __post_init__(self):
        knots = tuple((float(p), float(t)) for p, t in self.knots)
        object.__setattr__(self, "knots", knots)
        if len(knots) < 2:
            raise CurveError(f"curve {self.class_id}: need at least two knots")
        ps = [p for p, _ in knots]
        ts = [t for _, t in knots]
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise CurveError(f"curve {self.class_id}: power fractions must strictly increase")
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise CurveError(f"curve {self.class_id}: throughput must be nondecreasing")
        if ps[-1] != 1.0 or ts[-1] != 1.0:
            raise CurveError(f"curve {self.class_id}: last knot must be (1.0, 1.0)")
        if ps[0] <= 0 or ts[0] <= 0:
            raise CurveError(f"curve {self.class_id}: knots must be strictly positive")

    @property
    def p_min(self) -> float:
        return self.knots[0][0]

    @property
    def t_min(self) -> float:
        return self.knots[0][1]

    def __call__(self, p):
        ps, ts = zip(*self.knots)
        out = np.interp(p, ps, ts)
        return float(out) if np.ndim(out) == 0 else out

    def inverse(self, throughput: float) -> float:
        """Smallest power fraction whose throughput is at least ``throughput``."""
        if throughput <= self.t_min:
            return self.p_min
        if throughput >= 1.0:
            # flat top segments can reach 1.0 before p = 1
            for p, t in self.knots:
                if t >= 1.0:
                    return p
        for (p0, t0), (p1, t1) in zip(self.knots, self.knots[1:]):
            if t1 >= throughput:
                if t1 == t0:
                    return p0
                return p0 + (throughput - t0) * (p1 - p0) / (t1 - t0)
        return 1.0

    def to_dict(self) -> dict:
        out = {"knots": [list(k) for k in self.knots]}
        if self.description:
            out["description"] = self.description
        return out


@dataclass(frozen=True)
class ScalingModel:
    """Throughput of a job resized from ``n_orig`` to ``n_new`` nodes."""

    efficiency_exponent: float = 0.9

    def __post_init__(self):
        if not 0 < self.efficiency_exponent <= 1:
            raise ValueError("efficiency_exponent must lie in (0, 1]")

    def __call__(self, n_new: int, n_orig: int) -> float:
        return (n_new / n_orig) ** self.efficiency_exponent


@dataclass
class PowerPrediction:
    per_job_watts: dict[str, float]
    cluster_watts: float
    per_job_norm_throughput: dict[str, float]
    idle_watts: float = 0.0
    overhead_watts: float = 0.0


# Synthetic calibration: the qualitative ordering (pretraining loses the most
# throughput at mid-range caps, modest loss near TDP, steep loss near the
# floor) is what these knots encode. The numbers themselves are not measured.
DEFAULT_CURVE_KNOTS = {
    "pretrain": ((0.375, 0.42), (0.5, 0.58), (0.625, 0.72), (0.75, 0.84), (0.875, 0.94), (1.0, 1.0)),
    "finetune": ((0.375, 0.55), (0.5, 0.74), (0.625, 0.86), (0.75, 0.94), (0.875, 0.98), (1.0, 1.0)),
    "inference": ((0.375, 0.58), (0.5, 0.76), (0.625, 0.88), (0.75, 0.95), (0.875, 0.985), (1.0, 1.0)),
}


def default_curves() -> dict[str, ResponseCurve]:
    return {
        cid: ResponseCurve(cid, knots, description="synthetic default")
        for cid, knots in DEFAULT_CURVE_KNOTS.items()
    }


def job_power(state: JobState, cluster: ClusterSpec) -> float:
    gpus = state.current_nodes * cluster.gpus_per_node
    if state.status is JobStatus.PAUSED:
        return gpus * cluster.gpu_idle_watts
    cap = state.cap_or(cluster.gpu_tdp_watts)
    return gpus * cap * state.spec.utilization


def job_throughput(
    state: JobState,
    curve: ResponseCurve,
    scaling: ScalingModel,
    cluster: ClusterSpec,
) -> float:
    """Normalized throughput; knobs compose multiplicatively."""
    if state.status is JobStatus.PAUSED:
        return 0.0
    p = state.cap_or(cluster.gpu_tdp_watts) / cluster.gpu_tdp_watts
    return curve(p) * scaling(state.current_nodes, state.spec.nodes)


def predict_cluster(
    states: Sequence[JobState],
    curves: Mapping[str, ResponseCurve],
    cluster: ClusterSpec,
    scaling: Optional[ScalingModel] = None,
) -> PowerPrediction:
    """Cluster power = job draws + idle GPUs not held by any job + node overhead.

    GPUs released by a resize or never allocated sit idle in the cluster and
    draw ``gpu_idle_watts``; paused jobs keep their GPUs attached.
    """
    scaling = scaling or ScalingModel()
    per_job = {}
    per_thr = {}
    held_nodes = 0
    for st in states:
        per_job[st.spec.id] = job_power(st, cluster)
        per_thr[st.spec.id] = job_throughput(st, curves[st.spec.curve_class], scaling, cluster)
        held_nodes += st.current_nodes
    free_nodes = max(cluster.total_nodes - held_nodes, 0)
    idle = free_nodes * cluster.gpus_per_node * cluster.gpu_idle_watts
    overhead = held_nodes * cluster.node_overhead_watts
    total = sum(per_job.values()) + idle + overhead
    return PowerPrediction(per_job, total, per_thr, idle_watts=idle, overhead_watts=overhead)


def pool_adjacent_violators(y: Sequence[float], w: Optional[Sequence[float]] = None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit of ``y``."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    # each block: [mean, weight, count]
    blocks: list[list[float]] = []
    for yi, wi in zip(y, w):
        blocks.append([yi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            wt = w1 + w2
            blocks.append([(m1 * w1 + m2 * w2) / wt, wt, c1 + c2])
    return np.concatenate([np.full(int(c), m) for m, _, c in blocks])


def fit_curve(
    profile_samples: Iterable[tuple[float, float]],
    class_id: str = "fitted",
) -> ResponseCurve:
    """Fit a monotone response curve to profiled ``(power_fraction, throughput)`` samples.

    Repeated power fractions are averaged first. Throughput at full power is
    pinned to 1; fitted values above 1 are clipped, which is the constrained
    least-squares solution given the pin.
    """
    samples = [(float(p), float(t)) for p, t in profile_samples]
    if len({p for p, _ in samples}) < 2:
        raise InsufficientSamples("need samples at two or more distinct power fractions")
    if any(not 0 < p <= 1 for p, _ in samples):
        raise CurveError("power fractions must lie in (0, 1]")
    grouped: dict[float, list[float]] = {}
    for p, t in samples:
        grouped.setdefault(p, []).append(t)
    ps = sorted(p for p in grouped if p < 1.0)
    if not ps:
        raise InsufficientSamples("need at least one sample below full power")
    means = [float(np.mean(grouped[p])) for p in ps]
    weights = [len(grouped[p]) for p in ps]
    fitted = np.minimum(pool_adjacent_violators(means, weights), 1.0)
    if fitted[0] <= 0:
        raise NonPositiveThroughput(f"fitted throughput {fitted[0]:.4g} at p={ps[0]} is not positive")
    knots = [(p, float(t)) for p, t in zip(ps, fitted)] + [(1.0, 1.0)]
    return ResponseCurve(class_id, tuple(knots), description="fitted from profile")


def read_profile_csv(path) -> list[tuple[float, float]]:
    """Read ``power_fraction,norm_throughput`` rows from a CSV file."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"power_fraction", "norm_throughput"} - set(reader.fieldnames or [])
        if missing:
            raise CurveError(f"{path}: missing columns {sorted(missing)}")
        return [(float(r["power_fraction"]), float(r["norm_throughput"])) for r in reader]
