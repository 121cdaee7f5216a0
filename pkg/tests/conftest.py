import os

# Keep BLAS single-threaded before numpy loads: small matrices, and
# reproducibility checks depend on a fixed reduction order.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from dndfilter.rng import Rng
from dndfilter.simulators import (DiskWorldConfig, OdometryConfig,
                                  gen_disk_episode, gen_odometry_episode)


@pytest.fixture(scope="session")
def disk_cfg():
    return DiskWorldConfig()


@pytest.fixture(scope="session")
def odom_cfg():
    return OdometryConfig()


@pytest.fixture(scope="session")
def disk_episodes(disk_cfg):
    return [gen_disk_episode(disk_cfg, 100 + i) for i in range(8)]


@pytest.fixture(scope="session")
def odom_episodes(odom_cfg):
    return [gen_odometry_episode(odom_cfg, 200 + i) for i in range(8)]


@pytest.fixture()
def rng():
    return Rng(1234)


def finite(x):
    return np.all(np.isfinite(x))
