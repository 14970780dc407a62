from sidlab import _tuning

_tuning.set_runtime_defaults()

import numpy as np
import pytest

from sidlab import diffusion, mixture
from sidlab.nn import NetArch

SMALL_ARCH = dict(hidden_width=16, depth=2, time_dim=8, cond_dim=4)


@pytest.fixture(scope="session")
def world():
    return mixture.default_world()


@pytest.fixture(scope="session")
def sched():
    return diffusion.make_schedule(1000)


@pytest.fixture(scope="session")
def time_range():
    return diffusion.DEFAULT_TIME_RANGE


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_arch():
    return NetArch(input_dim=2, n_conditions=4, **SMALL_ARCH)


@pytest.fixture(scope="session")
def teacher(world, sched):
    """Fully pretrained teacher, shared by the guided-direction check and
    the end-to-end acceptance criteria (trains once per session)."""
    from sidlab import distill

    arch = NetArch(input_dim=world.d, n_conditions=world.n_conditions)
    rng = np.random.default_rng(2024)
    net, _ = distill.teacher_pretrain(world, sched, arch, steps=20_000,
                                      batch=256, lr=1e-4, dropout_rate=0.1,
                                      rng=rng)
    return net
