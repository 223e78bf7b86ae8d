import sys

import numpy as np
import pytest
from hypothesis import settings

from nfris.scenario import SystemConfig, desk_config

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tiny(**kw):
    base = dict(B=2, M=4, N1=2, N2=2, U=1, M_RF=2, K=2, S1=2, S2=1, Q_tr=4, N_s=1, Q=64, t_max=5e-11)
    base.update(kw)
    return SystemConfig(**base)


def small(**kw):
    base = dict(B=2, M=4, N1=2, N2=2, U=2, M_RF=2, K=2, S1=1, S2=1, Q_tr=4, N_s=1, Q=64, C_s=1, S_c=2)
    base.update(kw)
    return SystemConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny()


@pytest.fixture
def desk_cfg():
    return desk_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
