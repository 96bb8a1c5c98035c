import numpy as np
import pytest

from config import TESTBEDS
from models import ClusterProfile, LinearCostModel, PhaseInputs, TaskVolumes


def _model(rng, alpha_range, beta_range):
    return LinearCostModel(alpha=rng.uniform(*alpha_range), beta=rng.uniform(*beta_range))


def random_profile(rng, symmetric: bool = False) -> ClusterProfile:
    """Costs in the range of the two testbeds; ``symmetric`` makes ReduceScatter cost what AllGather does."""
    ag = _model(rng, (0.01, 0.4), (1e-7, 2.5e-6))
    return ClusterProfile(
        name="random",
        a2a=_model(rng, (0.05, 0.4), (1e-7, 5e-7)),
        ag=ag,
        rs=ag if symmetric else _model(rng, (0.01, 0.4), (1e-7, 2.5e-6)),
        ar=_model(rng, (0.05, 0.6), (1e-7, 5e-6)),
        gemm=LinearCostModel(alpha=rng.uniform(0.01, 0.1), beta=rng.uniform(1e-11, 5e-11), unit="mac-ops"),
    )


def random_volumes(rng) -> TaskVolumes:
    tokens = int(rng.integers(256, 16384))
    M = int(rng.choice([1024, 2048, 4096]))
    H = M * int(rng.integers(2, 5))
    n_ag = tokens * M
    return TaskVolumes(
        n_a2a=n_ag * float(rng.uniform(0.5, 2.0)),
        n_ag=n_ag,
        n_rs=n_ag,
        n_exp=tokens * M * H,
        gemm_count=int(rng.choice([2, 3])),
        n_grad=float(rng.integers(1, 8)) * M * H,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def testbed_a() -> ClusterProfile:
    return TESTBEDS["testbed-a"]["profile"]


@pytest.fixture
def testbed_b() -> ClusterProfile:
    return TESTBEDS["testbed-b"]["profile"]


@pytest.fixture
def make_inputs():
    """Factory for random PhaseInputs: ``make_inputs(rng, symmetric=..., exp_multiplier=..., t_gar=...)``."""

    def factory(rng, symmetric: bool = False, exp_multiplier: int = 1, t_gar: float = 0.0,
                profile: ClusterProfile = None) -> PhaseInputs:
        return PhaseInputs(
            volumes=random_volumes(rng),
            profile=profile or random_profile(rng, symmetric),
            t_gar=t_gar,
            exp_multiplier=exp_multiplier,
        )

    return factory


@pytest.fixture
def unit_profile() -> ClusterProfile:
    """Startup-free unit costs, handy for hand-checked arithmetic."""
    one = LinearCostModel(alpha=0.0, beta=1.0)
    return ClusterProfile(name="unit", a2a=one, ag=one, rs=one, ar=one, gemm=LinearCostModel(alpha=0.0, beta=1.0, unit="mac-ops"))
