"""Pipeline-degree selection for one MoE layer.

Every case cost is a*r + b/r + c in the degree r, so each case is minimised
over a small candidate set of integers instead of a general solver.
"""
import logging
import math
from typing import NamedTuple, Optional

import numpy as np

from cost_models import chunk_time
from errors import ConfigError, InvariantViolation
from models import ClusterProfile, LinearCostModel, PhaseInputs, PipelinePlan, TaskVolumes

logger = logging.getLogger(__name__)

R_MAX_DEFAULT = 16
CASES = (1, 2, 3, 4)
EXACT_TOLERANCE = 1e-9


class DegreeChoice(NamedTuple):
    r: int
    t_moe: float
    case: int


class PhaseTimes(NamedTuple):
    """Per-chunk times at degree r plus the phase's gradient AllReduce time."""

    a2a: np.ndarray
    ag: np.ndarray
    rs: np.ndarray
    exp: np.ndarray
    gar: float


def effective_exp_model(profile: ClusterProfile, volumes: TaskVolumes, exp_multiplier: int = 1) -> LinearCostModel:
    scale = volumes.gemm_count * exp_multiplier
    return LinearCostModel(alpha=scale * profile.gemm.alpha, beta=scale * profile.gemm.beta, unit="mac-ops")


def phase_times(inputs: PhaseInputs, r) -> PhaseTimes:
    v, p = inputs.volumes, inputs.profile
    exp_model = effective_exp_model(p, v, inputs.exp_multiplier)
    return PhaseTimes(
        a2a=chunk_time(p.a2a, v.n_a2a, r),
        ag=chunk_time(p.ag, v.n_ag, r),
        rs=chunk_time(p.rs, v.n_rs, r),
        exp=chunk_time(exp_model, v.n_exp, r),
        gar=inputs.t_gar,
    )


def _predicates(inputs: PhaseInputs, r):
    a, g, s, e, G = phase_times(inputs, r)
    overlap = 2 * (r - 1) * a
    return (
        a > g,
        r * e > overlap,
        r * e > (r - 1) * (g + s),
        G > g + s,
        G > r * e - overlap + g + s,
        G > r * g + r * s - overlap,
        G > g + s + r * e - overlap,
    )


def q_predicates(inputs: PhaseInputs, r: float) -> tuple[bool, ...]:
    """Q1..Q7 evaluated at degree r."""
    if r < 1:
        raise ConfigError(f"pipeline degree must be >= 1, got {r}")
    return tuple(bool(q) for q in _predicates(inputs, r))


def _feasible_mask(case: int, q):
    q1, q2, q3, q4, q5, q6, q7 = (np.asarray(x, dtype=bool) for x in q)
    if case == 1:
        return (q1 & ~q2 & q4) | (q1 & q2 & q5) | (~q1 & ~q3 & q6) | (~q1 & q3 & q7)
    if case == 2:
        return (q1 & q2 & ~q5) | (~q1 & q3 & ~q7)
    if case == 3:
        return q1 & ~q2 & ~q4
    if case == 4:
        return ~q1 & ~q3 & ~q6
    raise ConfigError(f"unknown case {case}")


def case_feasible(case: int, inputs: PhaseInputs, r: float) -> bool:
    return bool(_feasible_mask(case, _predicates(inputs, r)))


def feasible_case(inputs: PhaseInputs, r: float) -> int:
    """The case whose predicate conjunction holds at r; the four partition the space."""
    q = _predicates(inputs, r)
    for case in CASES:
        if _feasible_mask(case, q):
            return case
    raise InvariantViolation(f"no case holds at r={r}; predicates {q}")


def case_cost(case: int, inputs: PhaseInputs, r):
    a, g, s, e, G = phase_times(inputs, r)
    if case == 1:
        return 2 * r * a + G
    if case == 2:
        return 2 * a + g + s + r * e
    if case == 3:
        return 2 * r * a + g + s
    if case == 4:
        return 2 * a + r * g + r * s
    raise ConfigError(f"unknown case {case}")


def case_coefficients(case: int, inputs: PhaseInputs) -> tuple[float, float, float]:
    """(a, b, c) with case_cost(case, inputs, r) = a*r + b/r + c."""
    v, p = inputs.volumes, inputs.profile
    exp_model = effective_exp_model(p, v, inputs.exp_multiplier)
    a2a_var = 2 * v.n_a2a * p.a2a.beta
    intra_var = v.n_ag * p.ag.beta + v.n_rs * p.rs.beta
    if case == 1:
        return 2 * p.a2a.alpha, 0.0, a2a_var + inputs.t_gar
    if case == 2:
        return (
            exp_model.alpha,
            a2a_var + intra_var,
            2 * p.a2a.alpha + p.ag.alpha + p.rs.alpha + v.n_exp * exp_model.beta,
        )
    if case == 3:
        return 2 * p.a2a.alpha, intra_var, a2a_var + p.ag.alpha + p.rs.alpha
    if case == 4:
        return p.ag.alpha + p.rs.alpha, a2a_var, 2 * p.a2a.alpha + intra_var
    raise ConfigError(f"unknown case {case}")


def _candidates(case: int, inputs: PhaseInputs, r_max: int, feasible: np.ndarray) -> set[int]:
    a, b, _ = case_coefficients(case, inputs)
    candidates = {1, r_max}
    if a > 0 and b > 0:
        stationary = min(max(math.sqrt(b / a), 1.0), float(r_max))
        candidates.update((math.floor(stationary), math.ceil(stationary)))
    # both integers on either side of every feasibility flip
    for i in np.flatnonzero(feasible[1:] != feasible[:-1]):
        candidates.update((int(i) + 1, int(i) + 2))
    return candidates


def minimize_case(case: int, inputs: PhaseInputs, r_max: int = R_MAX_DEFAULT) -> Optional[tuple[int, float]]:
    """Cheapest integer r in [1, r_max] where ``case`` is feasible, or None."""
    if r_max < 1:
        raise ConfigError(f"r_max must be >= 1, got {r_max}")
    degrees = np.arange(1, r_max + 1, dtype=float)
    feasible = _feasible_mask(case, _predicates(inputs, degrees))
    if not feasible.any():
        return None

    best = None
    for r in sorted(_candidates(case, inputs, r_max, feasible)):
        if not feasible[r - 1]:
            continue
        t = float(case_cost(case, inputs, r))
        if best is None or t < best[1]:
            best = (r, t)
    logger.debug(f"case {case}: best {best}")
    return best


def _stream_end(times: PhaseTimes, r: int, gar: float) -> float:
    """Finish time of the last combine when each resource issues its tasks in order.

    Inter link: D0..D(r-1), gradient AllReduce, C0..C(r-1). Intra link:
    AG0..AG(r-1), RS0..RS(r-1). Compute: E0..E(r-1).
    """
    a, g, s, e = (float(x) for x in (times.a2a, times.ag, times.rs, times.exp))
    dispatch_end = []
    inter = 0.0
    for _ in range(r):
        inter += a
        dispatch_end.append(inter)
    inter += gar

    intra = compute = 0.0
    expert_end = []
    for i in range(r):
        intra = max(intra, dispatch_end[i]) + g
        compute = max(compute, intra) + e
        expert_end.append(compute)
    for i in range(r):
        intra = max(intra, expert_end[i]) + s
        inter = max(inter, intra) + a
    return inter


def stream_makespan(inputs: PhaseInputs, r: int) -> float:
    """Exact makespan of the layer's overlapped schedule at degree r."""
    if r < 1:
        raise ConfigError(f"pipeline degree must be >= 1, got {r}")
    return _stream_end(phase_times(inputs, r), r, inputs.t_gar)


def moe_window(inputs: PhaseInputs, r: int) -> float:
    """Inter-link idle time of the overlapped schedule with no gradient traffic.

    A gradient AllReduce up to this long adds nothing to the makespan.
    """
    if r < 1:
        raise ConfigError(f"pipeline degree must be >= 1, got {r}")
    times = phase_times(inputs, r)
    return max(0.0, _stream_end(times, r, 0.0) - 2 * r * float(times.a2a))


def _exact_choice(inputs: PhaseInputs, r_max: int) -> DegreeChoice:
    makespans = [stream_makespan(inputs, r) for r in range(1, r_max + 1)]
    r = int(np.argmin(makespans)) + 1
    return DegreeChoice(r=r, t_moe=makespans[r - 1], case=feasible_case(inputs, r))


def _solve(inputs: PhaseInputs, r_max: int) -> tuple[DegreeChoice, bool]:
    """Analytic choice, checked against the exact schedule.

    Every case cost is a lower bound on the exact makespan, so a winner whose
    cost is exact is optimal. Otherwise the exact argmin is returned and the
    second value (boundary) is True.
    """
    solutions = []
    for case in CASES:
        best = minimize_case(case, inputs, r_max)
        if best is not None:
            solutions.append(DegreeChoice(r=best[0], t_moe=best[1], case=case))
    if not solutions:
        logger.warning(f"no case feasible for r in 1..{r_max}; exact schedule optimum used")
        return _exact_choice(inputs, r_max), True

    choice = min(solutions, key=lambda c: (c.t_moe, c.r, c.case))
    exact = stream_makespan(inputs, choice.r)
    if math.isclose(exact, choice.t_moe, rel_tol=EXACT_TOLERANCE, abs_tol=EXACT_TOLERANCE):
        return choice, False
    logger.debug(f"case {choice.case} cost {choice.t_moe} at r={choice.r} is below its schedule {exact}")
    return _exact_choice(inputs, r_max), True


def find_optimal_pipeline_degree(inputs: PhaseInputs, r_max: int = R_MAX_DEFAULT) -> DegreeChoice:
    """Solve the four cases and keep the cheapest (ties: smaller r, then case id)."""
    if r_max < 1:
        raise ConfigError(f"r_max must be >= 1, got {r_max}")
    return _solve(inputs, r_max)[0]


def inter_link_idle_time(case: int, inputs: PhaseInputs, r: float) -> float:
    """Idle time of the inter-node link inside the MoE window, without gradient traffic."""
    a, g, s, e, _ = phase_times(inputs, r)
    if case == 2:
        idle = r * e + g + s - 2 * (r - 1) * a
    elif case == 3:
        idle = g + s
    elif case == 4:
        idle = r * g + r * s - 2 * (r - 1) * a
    else:
        raise InvariantViolation(f"case {case} has no overlappable window without gradient traffic")
    return max(0.0, float(idle))


def plan_layer(
    volumes: TaskVolumes,
    profile: ClusterProfile,
    t_gar_bwd: float = 0.0,
    r_max: int = R_MAX_DEFAULT,
) -> PipelinePlan:
    """Independent forward and backward degree choices for one layer."""
    fwd = PhaseInputs(volumes=volumes, profile=profile, t_gar=0.0, exp_multiplier=1)
    bwd = PhaseInputs(volumes=volumes, profile=profile, t_gar=t_gar_bwd, exp_multiplier=2)
    choice_fwd, boundary_fwd = _solve(fwd, r_max)
    choice_bwd, boundary_bwd = _solve(bwd, r_max)

    t_olp = moe_window(bwd, choice_bwd.r)

    for label, boundary, choice in (("forward", boundary_fwd, choice_fwd), ("backward", boundary_bwd, choice_bwd)):
        if boundary:
            logger.info(f"{label} degree r={choice.r} taken from the exact schedule, not a case formula")

    return PipelinePlan(
        r_fwd=choice_fwd.r,
        r_bwd=choice_bwd.r,
        case_fwd=choice_fwd.case,
        case_bwd=choice_bwd.case,
        t_moe_fwd=choice_fwd.t_moe,
        t_moe_bwd=choice_bwd.t_moe,
        t_olp_moe_bwd=t_olp,
        t_gar_bwd=t_gar_bwd,
        predicates_fwd=list(q_predicates(fwd, choice_fwd.r)),
        predicates_bwd=list(q_predicates(bwd, choice_bwd.r)),
        boundary_fwd=boundary_fwd,
        boundary_bwd=boundary_bwd,
    )
