import numpy as np
import pytest

from pcltta.network import Arch, init_network
from pcltta.pointcloud import PointCloud, SphereBatch, combine_spheres


def random_batch(rng, n=24, in_features=6, spheres=1):
    parts = []
    for s in range(spheres):
        pos = rng.normal(0.0, 2.0, size=(n, 3))
        feats = pos if in_features == 3 else np.hstack([pos, rng.random((n, 3))])
        parts.append(SphereBatch(np.arange(s * n, (s + 1) * n), pos, feats))
    return combine_spheres(parts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    return Arch(in_features=6, num_classes=4, encoder=(8, 12), head=(10,))


@pytest.fixture
def small_net(small_arch):
    return init_network(small_arch, seed=3)


@pytest.fixture
def slab():
    rng = np.random.default_rng(7)
    xy = rng.uniform(0, 40, size=(10000, 2))
    pos = np.column_stack([xy, rng.normal(0, 0.05, 10000)])
    return PointCloud(pos, rng.random((10000, 3)), rng.integers(0, 3, 10000))


_CRITERIA = {}


def record_criterion(number, ok, detail):
    _CRITERIA[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
