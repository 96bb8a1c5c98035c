from typing import Any, Callable, Optional

from environs import Env

from gates.expert_choice import ec_gate
from gates.gshard import gshard_gate
from gates.sigmoid import sigmoid_gate
from gates.xmoe import xmoe_gate
from models import ClusterProfile, LinearCostModel, ParallelConfig
from pipeline_optimizer import R_MAX_DEFAULT
from schedule_sim import BASELINE_STYLES, baseline_builder, build_fsmoe_dag

env = Env()
env.read_env()

DEFAULT_R_MAX = env.int("MOE_PLAN_R_MAX", R_MAX_DEFAULT)
DEFAULT_DE_SEED = env.int("MOE_PLAN_DE_SEED", 0)
DEFAULT_JOBS = env.int("MOE_PLAN_JOBS", 1)
DEFAULT_R2_THRESHOLD = env.float("MOE_PLAN_R2_THRESHOLD", 0.99)

SWEEP_CONFIRM_LIMIT = 10_000
LINA_CHUNK_BYTES = 30 * 1024 * 1024

SCHEDULE_STYLES = ("fsmoe", "fsmoe_no_iio", "pipemoe", "tutel", "sequential")
SIMULATION_POLICIES = ("stream", "ready_fifo")


def _model(alpha: float, beta: float, unit: str = "elements") -> LinearCostModel:
    return LinearCostModel(alpha=alpha, beta=beta, unit=unit)


# coefficients from the fitted performance models, taken by subscript
TESTBEDS = {
    "testbed-a": {
        "profile": ClusterProfile(
            name="testbed-a",
            gemm=_model(4.26e-2, 2.29e-11, "mac-ops"),
            a2a=_model(2.87e-1, 2.21e-7),
            ag=_model(3.37e-1, 2.32e-6),
            rs=_model(3.95e-1, 2.34e-7),
            ar=_model(5.11e-1, 4.95e-6),
        ),
        "parallel": ParallelConfig(P=48, n_dp=6, n_mp=8, n_ep=6, n_esp=8, gpus_per_node=8),
        "L": (512, 1024, 2048),
    },
    "testbed-b": {
        "profile": ClusterProfile(
            name="testbed-b",
            gemm=_model(9.24e-2, 4.42e-11, "mac-ops"),
            a2a=_model(1.75e-1, 3.06e-7),
            ag=_model(3.20e-2, 1.68e-7),
            rs=_model(3.91e-2, 1.67e-7),
            ar=_model(8.37e-2, 5.99e-7),
        ),
        "parallel": ParallelConfig(P=32, n_dp=8, n_mp=4, n_ep=8, n_esp=4, gpus_per_node=4),
        "L": (256, 512, 1024),
    },
}

# candidate values of the attention and MoE configuration table
grid_values = {
    "B": (1, 2, 4),
    "n_heads": (8, 16, 32),
    "M": (1024, 2048, 4096),
    "hscale": (2, 3, 4),
    "f": (1.2, 2.4, None),
    "ffn_type": ("simple", "mixtral"),
}

gate_functions = {
    "gshard": gshard_gate,
    "sigmoid": sigmoid_gate,
    "xmoe": xmoe_gate,
    "ec": ec_gate,
}

schedule_builders = {
    "fsmoe": build_fsmoe_dag,
    **{style: baseline_builder(style) for style in BASELINE_STYLES},
}


def get_gate_function(name: str) -> Optional[Callable]:
    """Get the gating function registered under ``name``."""
    return gate_functions.get(name.lower())


def get_schedule_builder(style: str) -> Optional[Callable]:
    """Get the DAG builder for a schedule style."""
    return schedule_builders.get(style.lower())


def get_testbed(name: str) -> dict:
    return TESTBEDS.get(name.lower())


def resolve_setting(flag: Any, env_name: str, file_value: Any, default: Any, cast: Callable = int) -> Any:
    """Command-line flag, then environment, then RunSpec file, then default."""
    if flag is not None:
        return cast(flag)
    env_value = env.str(env_name, None)
    if env_value:
        return cast(env_value)
    if file_value is not None:
        return cast(file_value)
    return default
