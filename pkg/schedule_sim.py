"""Task DAGs of pipelined MoE schedules and a deterministic simulator for them.

Three resources carry the work: ``inter_link`` (AlltoAll and gradient
AllReduce), ``intra_link`` (ESP AllGather and ReduceScatter) and ``compute``.
Tasks are issued through named queues. By default a task's queue is its
resource; baselines that serialise several resources share one queue.
"""
import heapq
import logging
import math
from functools import partial
from typing import Iterable, Optional, Sequence, Union

from cost_models import predict
from errors import ConfigError, InvariantViolation, SimulationError
from models import (
    ClusterProfile,
    GeneralizedLayer,
    PartitionPlan,
    PhaseInputs,
    PipelinePlan,
    Task,
    TaskVolumes,
    Timeline,
)
from pipeline_optimizer import R_MAX_DEFAULT, PhaseTimes, phase_times

logger = logging.getLogger(__name__)

RESOURCES = ("inter_link", "intra_link", "compute")
BASELINE_STYLES = ("sequential", "pipemoe", "tutel", "fsmoe_no_iio")
PHASE_MULTIPLIER = {"fwd": 1, "bwd": 2}

# queue used by each resource; None keeps the resource's own queue
_LANES = {
    "fsmoe": {},
    "fsmoe_no_iio": {"inter_link": "comm", "intra_link": "comm"},
    "pipemoe": {"inter_link": "comm", "intra_link": "comm"},
    "tutel": {"inter_link": "comm", "intra_link": "comm"},
    "sequential": {"inter_link": "serial", "intra_link": "serial", "compute": "serial"},
}


def phase_inputs(volumes: TaskVolumes, profile: ClusterProfile, phase: str, t_gar: float = 0.0) -> PhaseInputs:
    if phase not in PHASE_MULTIPLIER:
        raise ConfigError(f"unknown phase '{phase}', expected fwd or bwd")
    return PhaseInputs(volumes=volumes, profile=profile, t_gar=t_gar, exp_multiplier=PHASE_MULTIPLIER[phase])


def _degree(plan: Union[PipelinePlan, int], phase: str) -> int:
    if isinstance(plan, PipelinePlan):
        return plan.r_fwd if phase == "fwd" else plan.r_bwd
    if int(plan) < 1:
        raise ConfigError(f"pipeline degree must be >= 1, got {plan}")
    return int(plan)


def _task(task_id: str, kind: str, duration: float, deps: Iterable[str] = (), chunk: Optional[int] = None) -> Task:
    return Task(id=task_id, kind=kind, duration=float(duration), deps=tuple(deps), chunk=chunk)


def _chunk_chain(prefix: str, times: PhaseTimes, r: int, entry: Sequence[str] = ()) -> dict[str, list[Task]]:
    """dispatch -> allgather -> expert -> reducescatter -> combine, once per chunk."""
    chain = {"D": [], "AG": [], "E": [], "RS": [], "C": []}
    for i in range(r):
        chain["D"].append(_task(f"{prefix}D{i}", "a2a_dispatch", times.a2a, entry, i))
        chain["AG"].append(_task(f"{prefix}AG{i}", "allgather", times.ag, [f"{prefix}D{i}"], i))
        chain["E"].append(_task(f"{prefix}E{i}", "expert", times.exp, [f"{prefix}AG{i}"], i))
        chain["RS"].append(_task(f"{prefix}RS{i}", "reducescatter", times.rs, [f"{prefix}E{i}"], i))
        chain["C"].append(_task(f"{prefix}C{i}", "a2a_combine", times.a2a, [f"{prefix}RS{i}"], i))
    return chain


def _on_lane(tasks: Iterable[Task], style: str) -> list[Task]:
    lanes = _LANES[style]
    return [t.model_copy(update={"queue": lanes.get(t.resource)}) for t in tasks]


def _arrange(style: str, chain: dict[str, list[Task]], gar_durations: Sequence[float], prefix: str,
             dense: Optional[Task] = None) -> list[Task]:
    """Order one MoE layer's tasks into the queues of a schedule style."""
    D, AG, E, RS, C = (chain[key] for key in ("D", "AG", "E", "RS", "C"))
    last_dispatch, last_combine = D[-1].id, C[-1].id
    if style == "tutel" and dense is not None:
        gar_after = dense.id
    elif style in ("pipemoe", "tutel"):
        gar_after = last_combine
    else:
        gar_after = last_dispatch
    gars = [_task(f"{prefix}GAR{j}", "grad_allreduce", d, [gar_after]) for j, d in enumerate(gar_durations)]
    tail = [dense] if dense is not None else []

    if style == "fsmoe":
        ordered = D + gars + AG + E + RS + C + tail
    elif style == "fsmoe_no_iio":
        comm = [t for pair in zip(D, AG) for t in pair] + gars + [t for pair in zip(RS, C) for t in pair]
        ordered = comm + E + tail
    elif style in ("pipemoe", "tutel"):
        comm = [t for pair in zip(D, AG) for t in pair] + [t for pair in zip(RS, C) for t in pair] + gars
        ordered = comm + E + tail
    elif style == "sequential":
        ordered = [t for triple in zip(D, AG, E) for t in triple] + gars
        ordered += [t for pair in zip(RS, C) for t in pair] + tail
    else:
        raise ConfigError(f"unknown schedule style '{style}'")
    return _on_lane(ordered, style)


def layer_dag(style: str, inputs: PhaseInputs, r: int, t_gar_tasks: Sequence[float] = (),
              dense: float = 0.0) -> list[Task]:
    """Single-layer DAG of ``style`` at degree r; ``dense`` follows the MoE block."""
    if r < 1:
        raise ConfigError(f"pipeline degree must be >= 1, got {r}")
    chain = _chunk_chain("", phase_times(inputs, r), r)
    dense_task = _task("dense", "dense_compute", dense, [chain["C"][-1].id]) if dense > 0 else None
    return _arrange(style, chain, list(t_gar_tasks), "", dense_task)


def build_fsmoe_dag(plan: Union[PipelinePlan, int], volumes: TaskVolumes, profile: ClusterProfile,
                    phase: str = "fwd", t_gar_tasks: Sequence[float] = (), dense: float = 0.0) -> list[Task]:
    """Gradient AllReduce tasks queue on the inter-node link right after the last dispatch."""
    inputs = phase_inputs(volumes, profile, phase, sum(t_gar_tasks))
    return layer_dag("fsmoe", inputs, _degree(plan, phase), t_gar_tasks, dense)


def build_baseline_dag(style: str, plan: Union[PipelinePlan, int], volumes: TaskVolumes, profile: ClusterProfile,
                       phase: str = "fwd", t_gar_tasks: Sequence[float] = (), dense: float = 0.0) -> list[Task]:
    if style not in BASELINE_STYLES:
        raise ConfigError(f"unknown baseline style '{style}', expected one of {BASELINE_STYLES}")
    inputs = phase_inputs(volumes, profile, phase, sum(t_gar_tasks))
    return layer_dag(style, inputs, _degree(plan, phase), t_gar_tasks, dense)


def baseline_builder(style: str):
    return partial(build_baseline_dag, style)


def build_forward_dag(layers: Sequence[GeneralizedLayer], plans: Sequence[PipelinePlan], profile: ClusterProfile,
                      style: str = "fsmoe") -> list[Task]:
    """Forward DAG of a whole model: MoE blocks only, last backward layer first."""
    if style not in _LANES:
        raise ConfigError(f"unknown schedule style '{style}'")
    if len(layers) != len(plans):
        raise ConfigError(f"{len(layers)} layers and {len(plans)} plans")

    dag: list[Task] = []
    previous: list[str] = []
    for i in reversed(range(len(layers))):
        prefix = f"L{i}."
        inputs = phase_inputs(layers[i].volumes, profile, "fwd")
        chain = _chunk_chain(prefix, phase_times(inputs, plans[i].r_fwd), plans[i].r_fwd, previous)
        dag += _arrange(style, chain, [], prefix)
        previous = [t.id for t in chain["C"]]
    return dag


def build_model_dag(layers: Sequence[GeneralizedLayer], plans: Sequence[PipelinePlan], partition: PartitionPlan,
                    profile: ClusterProfile, style: str = "fsmoe") -> list[Task]:
    """Backward DAG of a whole model, layers in backward order.

    Each generalized layer runs its dense part, overlapped with the gradient
    launches of its dense window, then its MoE block with the MoE-window
    launches. Tail launches follow the last layer.
    """
    if style not in _LANES:
        raise ConfigError(f"unknown schedule style '{style}'")
    if not (len(layers) == len(plans) == len(partition.n_first)):
        raise ConfigError(f"{len(layers)} layers, {len(plans)} plans and {len(partition.n_first)} partition entries")

    dag: list[Task] = []
    previous: list[str] = []
    for i, (layer, plan) in enumerate(zip(layers, plans)):
        prefix = f"L{i}."
        entry = previous
        if layer.t_olp_dense > 0:
            dense = _task(f"{prefix}dense", "dense_compute", layer.t_olp_dense, previous)
            dag += _on_lane([dense], style)
            entry = [dense.id]
        dense_gars = [
            _task(f"{prefix}WGAR{j}", "grad_allreduce", predict(profile.ar, n), previous)
            for j, n in enumerate(partition.dense_launches[i]) if n > 0
        ]
        dag += _on_lane(dense_gars, style)

        inputs = phase_inputs(layer.volumes, profile, "bwd")
        chain = _chunk_chain(prefix, phase_times(inputs, plan.r_bwd), plan.r_bwd, entry)
        moe_gars = [predict(profile.ar, n) for n in partition.moe_launches[i] if n > 0]
        dag += _arrange(style, chain, moe_gars, prefix)
        previous = [t.id for t in chain["C"]]

    tail = [
        _task(f"TAIL{j}", "grad_allreduce", predict(profile.ar, n), previous)
        for j, n in enumerate(partition.tail_launches) if n > 0
    ]
    return dag + _on_lane(tail, style)


def _validate(dag: Sequence[Task]) -> dict[str, Task]:
    by_id: dict[str, Task] = {}
    for task in dag:
        if task.id in by_id:
            raise SimulationError(f"duplicate task id '{task.id}'")
        by_id[task.id] = task
    lane_of: dict[str, str] = {}
    for task in dag:
        for dep in task.deps:
            if dep not in by_id:
                raise SimulationError(f"task '{task.id}' depends on unknown task '{dep}'")
        if lane_of.setdefault(task.resource, task.lane) != task.lane:
            raise SimulationError(
                f"resource {task.resource} is fed by queues '{lane_of[task.resource]}' and '{task.lane}'"
            )
    return by_id


def _simulate_stream(dag: Sequence[Task], by_id: dict[str, Task]) -> tuple[dict, dict]:
    queues: dict[str, list[Task]] = {}
    for task in dag:
        queues.setdefault(task.lane, []).append(task)
    heads = {lane: 0 for lane in queues}
    lane_free = {lane: 0.0 for lane in queues}
    start, end = {}, {}

    remaining = len(dag)
    while remaining:
        progressed = False
        for lane, tasks in queues.items():
            while heads[lane] < len(tasks):
                task = tasks[heads[lane]]
                if any(dep not in end for dep in task.deps):
                    break
                start[task.id] = max([lane_free[lane]] + [end[dep] for dep in task.deps])
                end[task.id] = start[task.id] + task.duration
                lane_free[lane] = end[task.id]
                heads[lane] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            blocked = [tasks[heads[lane]].id for lane, tasks in queues.items() if heads[lane] < len(tasks)]
            raise SimulationError(f"schedule deadlocks; blocked queue heads {blocked}")
    return start, end


def _simulate_ready_fifo(dag: Sequence[Task], by_id: dict[str, Task]) -> tuple[dict, dict]:
    waiting = {task.id: len(set(task.deps)) for task in dag}
    dependents: dict[str, list[str]] = {task.id: [] for task in dag}
    for task in dag:
        for dep in set(task.deps):
            dependents[dep].append(task.id)

    ready: dict[str, list] = {}
    free: dict[str, float] = {}

    def release(task: Task, ready_time: float) -> None:
        chunk = task.chunk if task.chunk is not None else math.inf
        heapq.heappush(ready.setdefault(task.lane, []), (ready_time, chunk, task.id))
        free.setdefault(task.lane, 0.0)

    for task in dag:
        if waiting[task.id] == 0:
            release(task, 0.0)

    start, end = {}, {}
    while len(end) < len(dag):
        options = [
            (max(free[lane], heap[0][0]), heap[0], lane)
            for lane, heap in sorted(ready.items()) if heap
        ]
        if not options:
            raise SimulationError("dependency cycle: no task can become ready")
        begin, (_, _, task_id), lane = min(options)
        heapq.heappop(ready[lane])
        task = by_id[task_id]
        start[task_id], end[task_id] = begin, begin + task.duration
        free[lane] = end[task_id]
        for child in dependents[task_id]:
            waiting[child] -= 1
            if waiting[child] == 0:
                release(by_id[child], max(end[d] for d in by_id[child].deps))
    return start, end


def _busy(dag: Sequence[Task], start: dict, end: dict) -> dict[str, list[tuple[float, float]]]:
    busy = {resource: [] for resource in RESOURCES}
    for task in dag:
        if task.duration > 0:
            busy[task.resource].append((start[task.id], end[task.id]))
    return {resource: sorted(intervals) for resource, intervals in busy.items()}


def simulate(dag: Sequence[Task], policy: str = "stream") -> Timeline:
    """Run a DAG to completion.

    ``stream`` issues each queue strictly in DAG order; ``ready_fifo`` starts,
    per queue, the ready task with the smallest (ready time, chunk, id).
    """
    by_id = _validate(dag)
    if policy == "stream":
        start, end = _simulate_stream(dag, by_id)
    elif policy == "ready_fifo":
        start, end = _simulate_ready_fifo(dag, by_id)
    else:
        raise ConfigError(f"unknown simulation policy '{policy}'")

    busy = _busy(dag, start, end)
    idle = {}
    for resource, intervals in busy.items():
        span = (intervals[-1][1] - intervals[0][0]) if intervals else 0.0
        idle[resource] = span - sum(b - a for a, b in intervals)
    return Timeline(
        tasks=list(dag),
        start=start,
        end=end,
        makespan=max(end.values(), default=0.0),
        busy=busy,
        idle=idle,
    )


def check_timeline(timeline: Timeline, tol: float = 1e-9) -> None:
    """Raise InvariantViolation if durations, dependencies or exclusivity are broken."""
    for task in timeline.tasks:
        s, e = timeline.start[task.id], timeline.end[task.id]
        if abs((e - s) - task.duration) > tol * max(1.0, task.duration):
            raise InvariantViolation(f"{task.id}: end - start != duration")
        for dep in task.deps:
            if s < timeline.end[dep] - tol:
                raise InvariantViolation(f"{task.id} starts before its dependency {dep} ends")
    for resource, intervals in timeline.busy.items():
        for (_, prev_end), (next_start, _) in zip(intervals, intervals[1:]):
            if next_start < prev_end - tol:
                raise InvariantViolation(f"overlapping tasks on {resource} at {next_start}")


def brute_force_best_degree(inputs: PhaseInputs, r_max: int = R_MAX_DEFAULT, policy: str = "stream") -> tuple[int, float]:
    """Simulated FSMoE makespan for every r in 1..r_max; smallest r wins ties."""
    if r_max < 1:
        raise ConfigError(f"r_max must be >= 1, got {r_max}")
    gars = [inputs.t_gar] if inputs.t_gar > 0 else []
    best = None
    for r in range(1, r_max + 1):
        makespan = simulate(layer_dag("fsmoe", inputs, r, gars), policy).makespan
        if best is None or makespan < best[1]:
            best = (r, makespan)
    return best


def idle_within_moe(timeline: Timeline, resource: str = "inter_link") -> float:
    """Idle time of ``resource`` between the first task start and its own last task end."""
    intervals = timeline.busy.get(resource, [])
    if not intervals or not timeline.start:
        return 0.0
    span_start = min(timeline.start.values())
    span_end = intervals[-1][1]
    busy = sum(max(0.0, min(b, span_end) - max(a, span_start)) for a, b in intervals)
    return max(0.0, (span_end - span_start) - busy)


def utilization(timeline: Timeline) -> dict[str, float]:
    if timeline.makespan <= 0:
        return {resource: 0.0 for resource in timeline.busy}
    return {
        resource: sum(b - a for a, b in intervals) / timeline.makespan
        for resource, intervals in timeline.busy.items()
    }


def to_chrome_trace(timeline: Timeline, pid: str = "moe", offset_ms: float = 0.0) -> list[dict]:
    """Complete ("X") trace events in microseconds; one pid per layer, one tid per resource."""
    events = []
    for task in sorted(timeline.tasks, key=lambda t: (timeline.start[t.id], t.id)):
        layer, _, name = task.id.rpartition(".")
        events.append({
            "name": name,
            "cat": task.kind,
            "ph": "X",
            "ts": (offset_ms + timeline.start[task.id]) * 1000.0,
            "dur": task.duration * 1000.0,
            "pid": f"{pid}/{layer}" if layer else pid,
            "tid": task.resource,
            "args": {"queue": task.lane, "chunk": task.chunk},
        })
    return events


def timeline_document(timeline: Timeline) -> dict:
    return {
        "makespan_ms": timeline.makespan,
        "utilization": utilization(timeline),
        "idle_ms": timeline.idle,
        "tasks": [
            {
                "id": task.id,
                "kind": task.kind,
                "resource": task.resource,
                "queue": task.lane,
                "chunk": task.chunk,
                "start_ms": timeline.start[task.id],
                "end_ms": timeline.end[task.id],
            }
            for task in timeline.tasks
        ],
    }


def evaluate_backward(layers: Sequence[GeneralizedLayer], plans: Sequence[PipelinePlan], partition: PartitionPlan,
                      profile: ClusterProfile, style: str = "fsmoe", policy: str = "stream") -> Timeline:
    timeline = simulate(build_model_dag(layers, plans, partition, profile, style), policy)
    logger.debug(f"{partition.label} backward ({style}): {timeline.makespan:.4f} ms")
    return timeline


def evaluate_forward(layers: Sequence[GeneralizedLayer], plans: Sequence[PipelinePlan], profile: ClusterProfile,
                     style: str = "fsmoe", policy: str = "stream") -> Timeline:
    timeline = simulate(build_forward_dag(layers, plans, profile, style), policy)
    logger.debug(f"forward ({style}): {timeline.makespan:.4f} ms")
    return timeline
