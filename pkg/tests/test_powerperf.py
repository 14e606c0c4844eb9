import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridflex.domain import ActionKind, ClusterSpec, ControlAction, JobState
from gridflex.powerperf import (
    CurveError,
    InsufficientSamples,
    NonPositiveThroughput,
    ResponseCurve,
    ScalingModel,
    default_curves,
    fit_curve,
    job_power,
    job_throughput,
    pool_adjacent_violators,
    predict_cluster,
    read_profile_csv,
)

from conftest import make_job


def lerp_oracle(knots, p):
    """Straight-line interpolation written out by hand, clamped at both ends."""
    if p <= knots[0][0]:
        return knots[0][1]
    for (p0, t0), (p1, t1) in zip(knots, knots[1:]):
        if p0 <= p <= p1:
            return t0 + (t1 - t0) * (p - p0) / (p1 - p0)
    return knots[-1][1]


def isotonic_oracle(y, w):
    """Nondecreasing least-squares fit via the max-min formula."""
    n = len(y)
    out = []
    for i in range(n):
        best = -np.inf
        for j in range(i + 1):
            worst = np.inf
            for k in range(i, n):
                m = np.dot(w[j : k + 1], y[j : k + 1]) / np.sum(w[j : k + 1])
                worst = min(worst, m)
            best = max(best, worst)
        out.append(best)
    return np.array(out)


knot_lists = st.lists(
    st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 1.0)), min_size=1, max_size=6
).map(lambda pts: sorted({round(p, 6): t for p, t in pts}.items()))


def make_curve(pts):
    ts = np.maximum.accumulate([t for _, t in pts])
    ts = np.minimum(ts, 1.0)
    return ResponseCurve("h", tuple(zip([p for p, _ in pts], ts)) + ((1.0, 1.0),))


@pytest.mark.parametrize(
    "knots,msg",
    [
        (((1.0, 1.0),), "two knots"),
        (((0.5, 0.6), (0.5, 0.7), (1.0, 1.0)), "strictly increase"),
        (((0.5, 0.9), (0.7, 0.8), (1.0, 1.0)), "nondecreasing"),
        (((0.5, 0.6), (0.9, 0.95)), "last knot"),
        (((0.0, 0.5), (1.0, 1.0)), "positive"),
    ],
)
def test_curve_validation(knots, msg):
    with pytest.raises(CurveError, match=msg):
        ResponseCurve("x", knots)


@given(knot_lists, st.floats(0.0, 1.2))
def test_curve_matches_interpolation_oracle(pts, p):
    curve = make_curve(pts)
    assert curve(p) == pytest.approx(lerp_oracle(curve.knots, p), abs=1e-12)


@given(knot_lists, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_curve_monotone(pts, a, b):
    curve = make_curve(pts)
    lo, hi = sorted((a, b))
    assert curve(lo) <= curve(hi) + 1e-12


@given(knot_lists, st.floats(0.0, 1.0))
def test_inverse_is_smallest_sufficient_power(pts, y):
    curve = make_curve(pts)
    p = curve.inverse(y)
    assert curve.p_min <= p <= 1.0
    assert curve(p) >= min(y, 1.0) - 1e-9
    if p > curve.p_min + 1e-6:
        assert curve(p - 1e-6) < y + 1e-9


def test_default_curve_shape():
    curves = default_curves()
    for c in curves.values():
        assert c(1.0) == 1.0
        grid = np.linspace(0.0, 1.0, 201)
        assert np.all(np.diff(c(grid)) >= 0)
    for p in (0.5, 0.625, 0.75):
        assert curves["pretrain"](p) < curves["finetune"](p)
        assert curves["pretrain"](p) < curves["inference"](p)


def test_scaling_model():
    s = ScalingModel()
    assert s(4, 4) == 1.0
    assert s(2, 4) == pytest.approx(0.5 ** 0.9)
    with pytest.raises(ValueError):
        ScalingModel(1.5)


def test_job_power_and_throughput(cluster, curves):
    job = make_job("a", nodes=2, utilization=0.9)
    st = JobState.fresh(job)
    assert job_power(st, cluster) == pytest.approx(16 * 400 * 0.9)
    st.apply(ControlAction.set_cap("a", 200.0))
    assert job_power(st, cluster) == pytest.approx(16 * 200 * 0.9)
    assert job_throughput(st, curves["pretrain"], ScalingModel(), cluster) == pytest.approx(0.58)
    st.apply(ControlAction("a", ActionKind.PAUSE))
    assert job_power(st, cluster) == 16 * 90
    assert job_throughput(st, curves["pretrain"], ScalingModel(), cluster) == 0.0


def test_predict_cluster_idle_accounting(cluster, curves):
    jobs = [make_job("a", nodes=8), make_job("b", nodes=4)]
    states = [JobState.fresh(j) for j in jobs]
    pred = predict_cluster(states, curves, cluster)
    free = (32 - 12) * 8 * 90
    assert pred.idle_watts == free
    assert pred.cluster_watts == pytest.approx(12 * 8 * 400 + free)
    # released nodes fall back to idle draw
    states[0].apply(ControlAction.resize("a", 5))
    pred2 = predict_cluster(states, curves, cluster)
    assert pred2.cluster_watts == pytest.approx(9 * 8 * 400 + (32 - 9) * 8 * 90)
    assert pred2.per_job_norm_throughput["a"] == pytest.approx((5 / 8) ** 0.9)


def test_overhead_counts_held_nodes(curves):
    c = ClusterSpec(node_overhead_watts=100.0)
    pred = predict_cluster([JobState.fresh(make_job("a", nodes=3))], curves, c)
    assert pred.overhead_watts == 300.0


@given(st.lists(st.floats(150.0, 400.0), min_size=3, max_size=3), st.integers(0, 2), st.floats(0.0, 100.0))
def test_cluster_power_monotone_in_caps(caps, which, delta):
    cluster = ClusterSpec()
    curves = default_curves()
    jobs = [make_job(f"j{i}", nodes=3) for i in range(3)]

    def total(cs):
        states = [JobState.fresh(j) for j in jobs]
        for s, c in zip(states, cs):
            s.apply(ControlAction.set_cap(s.spec.id, c))
        return predict_cluster(states, curves, cluster).cluster_watts

    raised = list(caps)
    raised[which] = min(400.0, raised[which] + delta)
    assert total(caps) <= total(raised) + 1e-9


@given(st.lists(st.tuples(st.floats(-1, 2), st.floats(0.1, 5)), min_size=1, max_size=7))
def test_pav_matches_isotonic_oracle(pairs):
    y = np.array([a for a, _ in pairs])
    w = np.array([b for _, b in pairs])
    np.testing.assert_allclose(pool_adjacent_violators(y, w), isotonic_oracle(y, w), atol=1e-9)


def test_fit_curve_recovers_clean_profile():
    truth = default_curves()["finetune"]
    samples = [(p, truth(p)) for p, _ in truth.knots[:-1]]
    fitted = fit_curve(samples, "finetune")
    assert fitted.knots == truth.knots


def test_fit_curve_pools_violations_and_repeats():
    samples = [(0.5, 0.7), (0.5, 0.5), (0.6, 0.55), (0.8, 1.2), (1.0, 0.97)]
    fitted = fit_curve(samples)
    # 0.5 -> mean 0.6 (weight 2) pools with 0.55 -> 1.75/3
    assert fitted.knots[0][1] == pytest.approx(1.75 / 3)
    assert fitted.knots[1][1] == pytest.approx(1.75 / 3)
    assert fitted.knots[2] == (0.8, 1.0)
    assert fitted.knots[-1] == (1.0, 1.0)


def test_fit_curve_errors():
    with pytest.raises(InsufficientSamples):
        fit_curve([(0.5, 0.5), (0.5, 0.6)])
    with pytest.raises(InsufficientSamples):
        fit_curve([(1.0, 1.0), (1.0, 0.9)])
    with pytest.raises(NonPositiveThroughput):
        fit_curve([(0.4, -0.2), (0.6, -0.1), (1.0, 1.0)])
    with pytest.raises(CurveError):
        fit_curve([(0.0, 0.1), (0.5, 0.5)])


def test_read_profile_csv(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("power_fraction,norm_throughput\n0.5,0.6\n0.75,0.9\n")
    assert read_profile_csv(f) == [(0.5, 0.6), (0.75, 0.9)]
    g = tmp_path / "bad.csv"
    g.write_text("p,t\n0.5,0.6\n")
    with pytest.raises(CurveError, match="missing columns"):
        read_profile_csv(g)
