import pytest

from gridflex.domain import (
    ActionKind,
    ClusterSpec,
    ConfigError,
    ControlAction,
    DuplicateId,
    EventSpec,
    EventStep,
    FlexTier,
    JobKind,
    JobSpec,
    JobState,
    JobStatus,
    OverAllocated,
    UnknownCurveClass,
    flex_budget,
    validate_ensemble,
)

from conftest import make_job


@pytest.mark.parametrize("tier,budget", [(0, 0.0), (1, 0.10), (2, 0.25), (3, 0.50)])
def test_flex_budgets(tier, budget):
    assert FlexTier(tier).max_avg_throughput_reduction == budget
    assert flex_budget(make_job("x", flex=tier)) == budget


@pytest.mark.parametrize("text", ["Flex2", "flex2", "2", 2, FlexTier.FLEX2])
def test_flex_parse(text):
    assert FlexTier.parse(text) is FlexTier.FLEX2
    assert str(FlexTier.FLEX2) == "Flex2"


@pytest.mark.parametrize("bad", ["Flex4", "x", -1, 7])
def test_flex_parse_rejects(bad):
    with pytest.raises(ConfigError):
        FlexTier.parse(bad)


def test_job_kind_aliases():
    assert JobKind.parse("pretraining") is JobKind.PRETRAINING
    assert JobKind.parse("inference") is JobKind.INFERENCE
    with pytest.raises(ConfigError):
        JobKind.parse("sleeping")


@pytest.mark.parametrize("kw", [{"nodes": 0}, {"baseline_throughput": 0.0}, {"utilization": 1.5}, {"utilization": 0.0}])
def test_jobspec_validation(kw):
    with pytest.raises(ConfigError):
        make_job("x", **kw)
    with pytest.raises(ConfigError):
        JobSpec("", JobKind.PRETRAINING, "m", 1, FlexTier.FLEX1, "pretrain")


def test_cluster_defaults_and_validation():
    c = ClusterSpec()
    assert c.total_gpus == 256
    assert c.min_power_fraction == pytest.approx(150 / 400)
    with pytest.raises(ConfigError):
        ClusterSpec(gpu_min_cap_watts=500.0)
    with pytest.raises(ConfigError):
        ClusterSpec(gpu_idle_watts=200.0)


def test_action_validation(cluster):
    flexible = make_job("a", nodes=4, flex=2)
    rigid = make_job("r", flex=0)
    ControlAction.set_cap("a", 200.0).validate(flexible, cluster)
    ControlAction.resize("a", 2).validate(flexible, cluster)
    with pytest.raises(ValueError):
        ControlAction.set_cap("a", 100.0).validate(flexible, cluster)
    with pytest.raises(ValueError):
        ControlAction.resize("a", 5).validate(flexible, cluster)
    with pytest.raises(ValueError):
        ControlAction("r", ActionKind.PAUSE).validate(rigid, cluster)
    with pytest.raises(ValueError):
        ControlAction("a", ActionKind.SET_CAP)
    with pytest.raises(ValueError):
        ControlAction("a", ActionKind.RESIZE, 1.5)


def test_job_state_apply():
    st = JobState.fresh(make_job("a", nodes=4))
    assert st.current_nodes == 4 and st.cap_or(400) == 400
    st.apply(ControlAction.set_cap("a", 250))
    assert st.cap_or(400) == 250
    st.apply(ControlAction("a", ActionKind.PAUSE))
    assert st.paused
    st.apply(ControlAction("a", ActionKind.RESUME))
    assert st.status is JobStatus.RUNNING
    st.apply(ControlAction.resize("a", 2))
    assert st.current_nodes == 2
    st.apply(ControlAction("a", ActionKind.CLEAR_CAP))
    assert st.current_cap_watts is None
    with pytest.raises(ValueError):
        st.apply(ControlAction.set_cap("b", 200))
    copy = st.copy()
    copy.apply(ControlAction.resize("a", 1))
    assert st.current_nodes == 2


def test_event_spec_validation():
    ev = EventSpec(1000.0, (EventStep(0.15, 900, 3600), EventStep(0.25, 900, 7200)))
    assert ev.max_reduction == 0.25
    assert ev.snapback_limit_watts == 1000.0
    assert ev.duration == 900 + 3600 + 900 + 7200 + 900 + 3600
    with pytest.raises(ConfigError):
        EventSpec(1000.0, (EventStep(0.25, 0, 1), EventStep(0.15, 0, 1)))
    with pytest.raises(ConfigError):
        EventSpec(1000.0, ())
    with pytest.raises(ConfigError):
        EventSpec(0.0, (EventStep(0.1, 0, 1),))
    with pytest.raises(ConfigError):
        EventSpec(1000.0, (EventStep(0.1, 0, 1),), snapback_limit_watts=1001.0)


def test_validate_ensemble(cluster):
    jobs = [make_job("a", nodes=20), make_job("b", nodes=12)]
    assert validate_ensemble(jobs, cluster, {"pretrain"}) == jobs
    with pytest.raises(OverAllocated):
        validate_ensemble(jobs + [make_job("c", nodes=1)], cluster)
    with pytest.raises(DuplicateId):
        validate_ensemble([make_job("a"), make_job("a")], cluster)
    with pytest.raises(UnknownCurveClass):
        validate_ensemble([make_job("a", curve="nope")], cluster, {"pretrain"})
