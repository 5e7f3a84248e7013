import numpy as np
import pytest

from cmas.skeleton import SkeletonTopology, default_topology


def finite_difference_gradient(f, x, step=1e-5):
    """Central finite differences of a scalar function over every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def relative_gradient_error(analytic, numeric):
    scale = max(float(np.abs(numeric).max()), 1e-10)
    return float(np.abs(analytic - numeric).max()) / scale


@pytest.fixture(scope="session")
def topo() -> SkeletonTopology:
    return default_topology()


@pytest.fixture(scope="session")
def tiny_topo() -> SkeletonTopology:
    # 4 joints in a Y: root-0 -> 1 -> {2, 3}
    return SkeletonTopology(joint_count=4, bones=((0, 1), (1, 2), (1, 3)))
