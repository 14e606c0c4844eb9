import os

import pytest
from hypothesis import HealthCheck, settings

from gridflex.domain import ClusterSpec, FlexTier, JobKind, JobSpec
from gridflex.powerperf import ResponseCurve, default_curves

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=1000, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_job(jid, nodes=4, flex=3, curve="pretrain", kind=JobKind.PRETRAINING, **kw):
    return JobSpec(jid, kind, "test", nodes, FlexTier(flex), curve, **kw)


@pytest.fixture
def cluster():
    return ClusterSpec()


@pytest.fixture
def curves():
    return default_curves()


@pytest.fixture
def linear_curves():
    # throughput proportional to power above the floor: closed-form inverses
    return {"lin": ResponseCurve("lin", ((0.375, 0.375), (1.0, 1.0)))}


@pytest.fixture
def small_ensemble():
    return [
        make_job("a", nodes=8, flex=3),
        make_job("b", nodes=6, flex=2, curve="finetune", kind=JobKind.FINETUNING),
        make_job("c", nodes=4, flex=1, curve="inference", kind=JobKind.INFERENCE),
        make_job("d", nodes=4, flex=0, curve="inference", kind=JobKind.INFERENCE),
    ]
