import dataclasses

import pytest

from xrsim.config import default_scenario


def small_config(**kw):
    """Default scenario shortened for fast engine tests."""
    base = dict(sim_duration_s=0.25, warmup_slots=100, n_runs=1)
    base.update(kw)
    return dataclasses.replace(default_scenario(), **base)


@pytest.fixture
def cfg():
    return default_scenario()
