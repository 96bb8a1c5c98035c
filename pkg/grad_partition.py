"""Two-step partitioning of gradient AllReduce traffic over backward windows.

Step 1 greedily fills each generalized layer's overlappable window with the
gradients produced by the layer before it. Step 2 spreads what is left over
the MoE windows with differential evolution, paying for anything that still
does not fit as exposed AllReduce time after the last layer.
"""
import logging
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import differential_evolution

from cost_models import inverse, predict
from errors import ConfigError, InvariantViolation
from models import ClusterProfile, DEParams, GeneralizedLayer, PartitionPlan, PhaseInputs
from pipeline_optimizer import R_MAX_DEFAULT, find_optimal_pipeline_degree, inter_link_idle_time, plan_layer

logger = logging.getLogger(__name__)

EPSILON_MS = 1e-9
MIN_POPULATION = 5


class Step1Result(NamedTuple):
    n_first: list[float]
    carry: list[float]
    windows: list[float]
    n_dense: list[float]
    n_moe: list[float]


class Step2Result(NamedTuple):
    x_g: list[float]
    objective: Optional[float]


def allreduce_time(profile: ClusterProfile, n: float) -> float:
    """AllReduce time of n elements; nothing to reduce costs nothing."""
    return float(predict(profile.ar, n)) if n > 0 else 0.0


def overlappable_moe_time(case: int, inputs: PhaseInputs, r: float) -> float:
    if case == 1:
        raise InvariantViolation("case 1 cannot occur without gradient traffic")
    return inter_link_idle_time(case, inputs, r)


def moe_windows(layers: Sequence[GeneralizedLayer], profile: ClusterProfile, r_max: int = R_MAX_DEFAULT) -> list[float]:
    """Backward MoE window of every layer at its gradient-free degree."""
    return [plan_layer(layer.volumes, profile, 0.0, r_max).t_olp_moe_bwd for layer in layers]


def _fill(profile: ClusterProfile, n: float, window: float) -> float:
    """Elements of ``n`` whose AllReduce fits inside ``window``."""
    if n <= 0:
        return 0.0
    if allreduce_time(profile, n) <= window:
        return n
    return min(n, inverse(profile.ar, window))


def step1_assign(
    layers: Sequence[GeneralizedLayer],
    profile: ClusterProfile,
    r_max: int = R_MAX_DEFAULT,
    incoming: float = 0.0,
    windows: Optional[Sequence[float]] = None,
) -> Step1Result:
    """Overlap each layer's predecessor gradient (plus earlier leftovers) with its windows.

    The dense window is filled first and the MoE window takes what is left;
    each is its own AllReduce launch and must fit on its own. ``windows``
    overrides the MoE windows. ``incoming`` is the gradient waiting before
    layer 0, normally none.
    """
    if windows is None:
        windows = moe_windows(layers, profile, r_max)
    n_first, carry, n_dense, n_moe = [], [], [], []
    pending = incoming
    for layer, window in zip(layers, windows):
        dense = _fill(profile, pending, layer.t_olp_dense)
        moe = _fill(profile, pending - dense, window)
        n_dense.append(dense)
        n_moe.append(moe)
        n_first.append(dense + moe)
        carry.append(pending - n_first[-1])
        pending = layer.n_grad + carry[-1]
    logger.debug(f"step 1: n_first={n_first} carry={carry}")
    return Step1Result(n_first=n_first, carry=carry, windows=list(windows), n_dense=n_dense, n_moe=n_moe)


def availability_caps(carry: Sequence[float]) -> np.ndarray:
    """Upper bound on the cumulative Step-2 assignment up to each layer.

    Gradient taken at layer i is gone from every later carry, so the running
    total up to i is bounded by the smallest carry from i onwards.
    """
    caps = np.minimum.accumulate(np.asarray(carry, dtype=float)[::-1])[::-1]
    return np.maximum(caps, 0.0)


def repair(x, caps: np.ndarray) -> np.ndarray:
    """Project a candidate onto the availability constraints, first layer first."""
    repaired = np.zeros(len(caps))
    used = 0.0
    for i, value in enumerate(np.asarray(x, dtype=float)):
        repaired[i] = min(max(value, 0.0), max(caps[i] - used, 0.0))
        used += repaired[i]
    return repaired


class Step2Objective:
    """Backward MoE time of every layer with its window load, plus the exposed tail."""

    def __init__(self, layers, profile, caps, moe_first, tail_base, r_max):
        self.inputs = [
            PhaseInputs(volumes=layer.volumes, profile=profile, t_gar=0.0, exp_multiplier=2) for layer in layers
        ]
        self.profile = profile
        self.caps = np.asarray(caps, dtype=float)
        self.moe_first = list(moe_first)
        self.tail_base = tail_base
        self.r_max = r_max

    def __call__(self, x) -> float:
        x = repair(x, self.caps)
        total = 0.0
        for inputs, first, extra in zip(self.inputs, self.moe_first, x):
            t_gar = allreduce_time(self.profile, first) + allreduce_time(self.profile, extra)
            loaded = inputs.model_copy(update={"t_gar": t_gar})
            total += find_optimal_pipeline_degree(loaded, self.r_max).t_moe
        return total + allreduce_time(self.profile, self.tail_base - float(x.sum()))


class ActiveObjective:
    """Step2Objective over the layers that can take any gradient at all."""

    def __init__(self, objective: Step2Objective, active: np.ndarray):
        self.objective = objective
        self.active = active

    def expand(self, sub) -> np.ndarray:
        full = np.zeros(len(self.active))
        full[self.active] = sub
        return full

    def __call__(self, sub) -> float:
        return self.objective(self.expand(sub))


def _initial_population(objective: Step2Objective, active: np.ndarray, de_params: DEParams) -> np.ndarray:
    caps = objective.caps
    dims = len(caps)
    size = de_params.population or max(MIN_POPULATION, de_params.popsize_per_dim * int(active.sum()))
    if size < MIN_POPULATION:
        raise ConfigError(f"DE population {size} is below the minimum of {MIN_POPULATION}")

    weights = np.array([find_optimal_pipeline_degree(inputs, objective.r_max).t_moe for inputs in objective.inputs])
    weights = np.where(active, weights, 0.0)
    proportional = caps[-1] * weights / weights.sum() if weights.sum() > 0 else np.zeros(dims)

    baselines = [np.zeros(dims), repair(proportional, caps)]
    for j in np.flatnonzero(active):
        everything = np.zeros(dims)
        everything[j] = caps[j]
        baselines.append(repair(everything, caps))

    rng = np.random.default_rng(de_params.seed)
    population = np.array(baselines[:size])
    if len(population) < size:
        population = np.vstack([population, rng.uniform(0.0, caps, size=(size - len(population), dims))])
    return population[:, active]


def step2_optimize(
    layers: Sequence[GeneralizedLayer],
    carry: Sequence[float],
    profile: ClusterProfile,
    de_params: DEParams = DEParams(),
    r_max: int = R_MAX_DEFAULT,
    moe_first: Optional[Sequence[float]] = None,
) -> Step2Result:
    """Differential evolution over the per-layer Step-2 loads x_g."""
    if not layers:
        return Step2Result(x_g=[], objective=0.0)
    if de_params.population is not None and de_params.population < MIN_POPULATION:
        raise ConfigError(f"DE population {de_params.population} is below the minimum of {MIN_POPULATION}")

    caps = availability_caps(carry)
    moe_first = list(moe_first) if moe_first is not None else [0.0] * len(layers)
    tail_base = layers[-1].n_grad + carry[-1]
    objective = Step2Objective(layers, profile, caps, moe_first, tail_base, r_max)

    zeros = np.zeros(len(layers))
    active = caps > 0
    if not active.any():
        return Step2Result(x_g=zeros.tolist(), objective=objective(zeros))

    init = _initial_population(objective, active, de_params)
    wrapped = ActiveObjective(objective, active)
    result = differential_evolution(
        wrapped,
        bounds=[(0.0, cap) for cap in caps[active]],
        strategy="rand1bin",
        maxiter=de_params.generations,
        mutation=de_params.F,
        recombination=de_params.CR,
        seed=de_params.seed,
        init=init,
        tol=0,
        polish=False,
        workers=de_params.workers,
        updating="deferred" if de_params.workers > 1 else "immediate",
    )
    best = repair(wrapped.expand(result.x), caps)
    best_value = objective(best)
    # the returned loads never lose to a seeded baseline
    for candidate in init:
        value = wrapped(candidate)
        if value < best_value:
            best, best_value = repair(wrapped.expand(candidate), caps), value
    logger.info(f"step 2: objective {best_value:.4f} ms after {result.nit} generations")
    return Step2Result(x_g=best.tolist(), objective=best_value)


def build_partition_plan(
    layers: Sequence[GeneralizedLayer],
    profile: ClusterProfile,
    de_params: DEParams = DEParams(),
    r_max: int = R_MAX_DEFAULT,
    incoming: float = 0.0,
) -> PartitionPlan:
    if not layers:
        return PartitionPlan(n_first=[], x_g=[], t_gar=[], unassigned_tail=incoming, dense_launches=[],
                             moe_launches=[], tail_launches=[incoming] if incoming > 0 else [])
    step1 = step1_assign(layers, profile, r_max, incoming)
    dense_part, moe_part = step1.n_dense, step1.n_moe

    if max(step1.carry) > 0:
        step2 = step2_optimize(layers, step1.carry, profile, de_params, r_max, moe_part)
    else:
        logger.info("step 1 absorbed every overlappable gradient, step 2 skipped")
        step2 = Step2Result(x_g=[0.0] * len(layers), objective=None)

    tail = layers[-1].n_grad + step1.carry[-1] - sum(step2.x_g)
    if tail < -EPSILON_MS * max(1.0, sum(layer.n_grad for layer in layers)):
        raise InvariantViolation(f"step 2 assigned more gradient than exists (tail {tail})")
    tail = max(tail, 0.0)

    return PartitionPlan(
        n_first=step1.n_first,
        x_g=step2.x_g,
        t_gar=[allreduce_time(profile, m) + allreduce_time(profile, x) for m, x in zip(moe_part, step2.x_g)],
        unassigned_tail=tail,
        dense_launches=[[n] if n > 0 else [] for n in dense_part],
        moe_launches=[[n for n in (m, x) if n > 0] for m, x in zip(moe_part, step2.x_g)],
        tail_launches=[tail] if tail > 0 else [],
        objective=step2.objective,
    )


def lina_partition_plan(
    layers: Sequence[GeneralizedLayer],
    profile: ClusterProfile,
    chunk_bytes: int = 30 * 1024 * 1024,
    incoming: float = 0.0,
) -> PartitionPlan:
    """Fixed-size chunking: each chunk of layer i-1's gradient is its own AllReduce.

    Chunks fill layer i's dense window while they fit and run in its MoE
    window otherwise; the last layer's chunks trail the backward pass.
    """
    chunk = chunk_bytes / 4
    if chunk <= 0:
        raise ConfigError(f"chunk size must be positive, got {chunk_bytes} bytes")

    def split(n: float) -> list[float]:
        full = int(n // chunk)
        rest = n - full * chunk
        return [chunk] * full + ([rest] if rest > 0 else [])

    n_first, t_gar, dense_launches, moe_launches = [], [], [], []
    pending = incoming
    for layer in layers:
        dense, moe, used = [], [], 0.0
        for piece in split(pending):
            cost = allreduce_time(profile, piece)
            if not moe and used + cost <= layer.t_olp_dense + EPSILON_MS:
                dense.append(piece)
                used += cost
            else:
                moe.append(piece)
        dense_launches.append(dense)
        moe_launches.append(moe)
        n_first.append(pending)
        t_gar.append(sum(allreduce_time(profile, piece) for piece in moe))
        pending = layer.n_grad

    tail_launches = split(pending)
    return PartitionPlan(
        n_first=n_first,
        x_g=[0.0] * len(layers),
        t_gar=t_gar,
        unassigned_tail=pending,
        dense_launches=dense_launches,
        moe_launches=moe_launches,
        tail_launches=tail_launches,
        label="lina",
    )


def no_overlap_partition_plan(layers: Sequence[GeneralizedLayer], incoming: float = 0.0) -> PartitionPlan:
    """Every layer's gradient reduced after the backward pass, one launch per layer."""
    launches = [n for n in [incoming] + [layer.n_grad for layer in layers] if n > 0]
    zeros = [0.0] * len(layers)
    return PartitionPlan(
        n_first=zeros,
        x_g=zeros,
        t_gar=zeros,
        unassigned_tail=math.fsum(launches),
        dense_launches=[[] for _ in layers],
        moe_launches=[[] for _ in layers],
        tail_launches=launches,
        label="no_overlap",
    )


def check_partition(plan: PartitionPlan, layers: Sequence[GeneralizedLayer], incoming: float = 0.0,
                    rel_tol: float = 1e-9) -> None:
    """Raise InvariantViolation unless assigned plus tail equals the total gradient."""
    total = incoming + math.fsum(layer.n_grad for layer in layers)
    placed = math.fsum(plan.n_first) + math.fsum(plan.x_g) + plan.unassigned_tail
    if abs(placed - total) > rel_tol * max(1.0, total):
        raise InvariantViolation(f"partition places {placed} of {total} gradient elements")
