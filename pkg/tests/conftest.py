import numpy as np
import pytest

from dispatchmdp.instance import Instance, generate_instance


@pytest.fixture
def single_unit():
    """N=1, J=1, lambda=mu=1, tau=3."""
    return Instance(lam=[1.0], mu=[1.0], t=[[3.0]])


@pytest.fixture
def two_by_two():
    return Instance(lam=[1.0, 1.0], mu=[1.0, 1.0], t=[[2.0, 5.0], [4.0, 3.0]])


@pytest.fixture
def small_random():
    return generate_instance(11, 5, 3)


def homogeneous(N, lam_total, J=3, seed=0):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 1.5, J)
    lam *= lam_total / lam.sum()
    return Instance(lam=lam, mu=np.ones(N), t=rng.uniform(1, 20, (N, J)))
