import multiprocessing
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import gmean
from tqdm import tqdm

from config import (
    SCHEDULE_STYLES,
    gate_functions,
    get_gate_function,
    get_schedule_builder,
    get_testbed,
    grid_values,
)
from cost_models import load_profile
from errors import ConfigError, InvariantViolation
from grad_partition import (
    allreduce_time,
    build_partition_plan,
    check_partition,
    lina_partition_plan,
    no_overlap_partition_plan,
)
from logger import logger
from models import (
    ClusterProfile,
    DEParams,
    GateOutput,
    GeneralizedLayer,
    LayerConfig,
    ParallelConfig,
    PartitionPlan,
    PipelinePlan,
    RunSpec,
    TaskVolumes,
)
from pipeline_optimizer import R_MAX_DEFAULT, plan_layer
from schedule_sim import (
    brute_force_best_degree,
    check_timeline,
    evaluate_backward,
    evaluate_forward,
    phase_inputs,
    simulate,
    timeline_document,
    to_chrome_trace,
    utilization,
)
from utils import read_json, resolve_path
from workload import (
    apply_experts,
    build_grid,
    capacity,
    default_grid,
    derive_volumes,
    i_order,
    layer_from_document,
    order,
)

# partition each schedule style reduces its gradients with in the backward pass
STYLE_PARTITION = {
    "fsmoe": "fsmoe",
    "fsmoe_no_iio": "fsmoe",
    "pipemoe": "lina",
    "tutel": "no_overlap",
    "sequential": "no_overlap",
}

# projection rank of the X-MoE router in route checks
XMOE_RANK = 16
ROUND_TRIP_TOLERANCE = 1e-9

# phases simulated for each value of a run spec's phase setting
PHASES = {"fwd": ("fwd",), "bwd": ("bwd",), "both": ("fwd", "bwd")}

SWEEP_HEADER = (
    "case", "B", "n_heads", "L", "M", "H", "f", "ffn_type",
    "r_fwd", "r_bwd", "case_fwd", "case_bwd", "r_fwd_bf", "r_bwd_bf",
    "analytic_gap_fwd", "analytic_gap_bwd",
    *(f"{style}_ms" for style in SCHEDULE_STYLES),
)


class ModelPlan(NamedTuple):
    layers: list[GeneralizedLayer]
    plans: list[PipelinePlan]
    partition: PartitionPlan


def load_run_spec(path) -> tuple[RunSpec, Path]:
    try:
        return RunSpec.model_validate(read_json(path)), Path(path).parent
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path}: invalid run spec: {e}") from e


def resolve_parallel(parallel) -> ParallelConfig:
    if isinstance(parallel, ParallelConfig):
        return parallel
    testbed = get_testbed(parallel)
    if testbed is None:
        raise ConfigError(f"unknown parallel preset '{parallel}'")
    return testbed["parallel"]


def load_layers(path, pcfg: ParallelConfig) -> list[LayerConfig]:
    doc = read_json(path)
    entries = doc.get("layers") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a non-empty list of layers")
    return [layer_from_document(entry, pcfg) for entry in entries]


def load_spec_inputs(spec: RunSpec, base_dir=None) -> tuple[ClusterProfile, ParallelConfig, list[LayerConfig]]:
    if spec.layers is None:
        raise ConfigError("run spec has no layers file")
    profile = load_profile(resolve_path(spec.cluster_profile, base_dir))
    pcfg = resolve_parallel(spec.parallel)
    return profile, pcfg, load_layers(resolve_path(spec.layers, base_dir), pcfg)


def generalized_layers(layer_cfgs: Sequence[LayerConfig], pcfg: ParallelConfig) -> list[GeneralizedLayer]:
    """Layers in backward order: the last configured layer is reduced first."""
    return [
        GeneralizedLayer(index=i, volumes=derive_volumes(cfg, pcfg), t_olp_dense=cfg.t_olp_dense_ms)
        for i, cfg in enumerate(reversed(list(layer_cfgs)))
    ]


def plan_model(layer_cfgs: Sequence[LayerConfig], pcfg: ParallelConfig, profile: ClusterProfile,
               de_params: DEParams, r_max: int) -> ModelPlan:
    """Degrees and gradient partition of a whole model, the way training would run it."""
    layers = generalized_layers(layer_cfgs, pcfg)
    partition = build_partition_plan(layers, profile, de_params, r_max)
    check_partition(partition, layers)
    plans = [plan_layer(layer.volumes, profile, t_gar, r_max) for layer, t_gar in zip(layers, partition.t_gar)]
    for layer, plan in zip(layers, plans):
        logger.info(
            f"layer {layer.index}: r_fwd={plan.r_fwd} (case {plan.case_fwd}) "
            f"r_bwd={plan.r_bwd} (case {plan.case_bwd}) t_gar={plan.t_gar_bwd:.4f} ms"
        )
    return ModelPlan(layers=layers, plans=plans, partition=partition)


def plan_document(model: ModelPlan) -> dict:
    return {
        "layers": [
            {
                "index": layer.index,
                "t_olp_dense": layer.t_olp_dense,
                "volumes": layer.volumes.model_dump(),
                "plan": plan.model_dump(),
            }
            for layer, plan in zip(model.layers, model.plans)
        ],
        "partition": model.partition.model_dump(),
    }


def model_plan_from_document(doc: dict) -> ModelPlan:
    try:
        layers = [
            GeneralizedLayer(index=entry["index"], volumes=TaskVolumes(**entry["volumes"]),
                             t_olp_dense=entry.get("t_olp_dense", 0.0))
            for entry in doc["layers"]
        ]
        plans = [PipelinePlan(**entry["plan"]) for entry in doc["layers"]]
        partition = PartitionPlan(**doc["partition"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid plan document: {e}") from e
    return ModelPlan(layers=layers, plans=plans, partition=partition)


def style_partition(style: str, model: ModelPlan, profile: ClusterProfile) -> PartitionPlan:
    kind = STYLE_PARTITION[style]
    if kind == "fsmoe":
        return model.partition
    if kind == "lina":
        return lina_partition_plan(model.layers, profile)
    return no_overlap_partition_plan(model.layers)


def simulate_run(model: ModelPlan, profile: ClusterProfile, styles: Sequence[str], policy: str = "stream",
                 r_max: int = R_MAX_DEFAULT, phase: str = "both") -> tuple[dict, dict]:
    """Makespans of every style for the requested phase(s); returns (report, traces).

    The trace of a step places the backward pass right after the forward pass.
    """
    if phase not in PHASES:
        raise ConfigError(f"unknown phase '{phase}', expected one of {tuple(PHASES)}")
    report, traces = {}, {}
    for style in styles:
        if get_schedule_builder(style) is None:
            raise ConfigError(f"unknown schedule style '{style}'")
        partition = style_partition(style, model, profile)
        if partition is model.partition:
            plans = model.plans
        else:
            plans = [
                plan_layer(layer.volumes, profile, t_gar, r_max)
                for layer, t_gar in zip(model.layers, partition.t_gar)
            ]

        timelines = {}
        if "fwd" in PHASES[phase]:
            timelines["fwd"] = evaluate_forward(model.layers, plans, profile, style, policy)
        if "bwd" in PHASES[phase]:
            timelines["bwd"] = evaluate_backward(model.layers, plans, partition, profile, style, policy)

        row = {"partition": partition.label, "r_fwd": [p.r_fwd for p in plans], "r_bwd": [p.r_bwd for p in plans]}
        events, offset = [], 0.0
        for name, timeline in timelines.items():
            check_timeline(timeline)
            row[f"{name}_ms"] = timeline.makespan
            row[f"utilization_{name}"] = utilization(timeline)
            events += to_chrome_trace(timeline, pid=f"{style} {name}", offset_ms=offset)
            offset += timeline.makespan
        row["total_ms"] = offset
        report[style] = row
        traces[style] = {
            "trace": events,
            "timeline": {name: timeline_document(timeline) for name, timeline in timelines.items()},
        }

    if "sequential" in report:
        baseline = report["sequential"]["total_ms"]
        for row in report.values():
            row["speedup_vs_sequential"] = baseline / row["total_ms"] if row["total_ms"] > 0 else 1.0
    return report, traces


class SweepSetup(NamedTuple):
    label: str
    profile: ClusterProfile
    pcfg: ParallelConfig
    cases: list[LayerConfig]


def sweep_setup(testbed: str, spec: Optional[RunSpec] = None, base_dir=None,
                limit: Optional[int] = None) -> SweepSetup:
    """Profile, layout and grid of a sweep: a testbed preset, or a run spec's own."""
    if spec is None:
        bed = get_testbed(testbed)
        if bed is None:
            raise ConfigError(f"unknown testbed '{testbed}'")
        cases = default_grid(testbed)
        label, profile, pcfg = testbed, bed["profile"], bed["parallel"]
    else:
        profile = load_profile(resolve_path(spec.cluster_profile, base_dir))
        pcfg = resolve_parallel(spec.parallel)
        values = dict(grid_values)
        bed = get_testbed(spec.parallel) if isinstance(spec.parallel, str) else None
        if bed is not None:
            values["L"] = bed["L"]
        values.update(spec.grid or {})
        cases = build_grid(pcfg, values)
        label = profile.name
    return SweepSetup(label=label, profile=profile, pcfg=pcfg, cases=cases[:limit] if limit else cases)


def evaluate_case(args: tuple[int, dict, ClusterProfile, ParallelConfig, int]) -> dict:
    """One sweep case: analytic and brute-force degrees plus every style's makespan."""
    index, cfg_doc, profile, pcfg, r_max = args
    cfg = LayerConfig(**cfg_doc)
    volumes = derive_volumes(cfg, pcfg)

    t_gar = allreduce_time(profile, volumes.n_grad)
    plan = plan_layer(volumes, profile, t_gar, r_max)
    r_fwd_bf, best_fwd = brute_force_best_degree(phase_inputs(volumes, profile, "fwd"), r_max)
    r_bwd_bf, best_bwd = brute_force_best_degree(phase_inputs(volumes, profile, "bwd", t_gar), r_max)

    row = {
        "case": index,
        "B": cfg.B, "n_heads": cfg.n_heads, "L": cfg.L, "M": cfg.M, "H": cfg.H,
        "f": "*" if cfg.f is None else cfg.f, "ffn_type": cfg.ffn_type,
        "r_fwd": plan.r_fwd, "r_bwd": plan.r_bwd,
        "case_fwd": plan.case_fwd, "case_bwd": plan.case_bwd,
        "r_fwd_bf": r_fwd_bf, "r_bwd_bf": r_bwd_bf,
    }
    for style in SCHEDULE_STYLES:
        builder = get_schedule_builder(style)
        gars = [t_gar] if t_gar > 0 else []
        fwd = simulate(builder(plan, volumes, profile, "fwd")).makespan
        bwd = simulate(builder(plan, volumes, profile, "bwd", gars)).makespan
        row[f"{style}_ms"] = fwd + bwd
        if style == "fsmoe":
            row["analytic_gap_fwd"] = fwd / best_fwd - 1.0 if best_fwd > 0 else 0.0
            row["analytic_gap_bwd"] = bwd / best_bwd - 1.0 if best_bwd > 0 else 0.0
    return row


def run_sweep(setup: SweepSetup, r_max: int, jobs: int = 1, progress: bool = True) -> list[dict]:
    """Evaluate every case; rows come back in case order whatever the job count."""
    split_args = [(i, cfg.model_dump(), setup.profile, setup.pcfg, r_max) for i, cfg in enumerate(setup.cases)]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            rows = list(tqdm(pool.imap(evaluate_case, split_args), total=len(split_args), disable=not progress))
    else:
        rows = [evaluate_case(args) for args in tqdm(split_args, disable=not progress)]
    return rows


def sweep_summary(rows: Sequence[dict]) -> dict:
    summary = {
        "cases": len(rows),
        "varied_degree_cases": sum(1 for row in rows if row["r_fwd"] != row["r_bwd"]),
        "max_analytic_gap": max(
            (max(row["analytic_gap_fwd"], row["analytic_gap_bwd"]) for row in rows), default=0.0
        ),
        "speedup_fsmoe_over": {},
    }
    for style in SCHEDULE_STYLES:
        if style == "fsmoe":
            continue
        ratios = [row[f"{style}_ms"] / row["fsmoe_ms"] for row in rows if row["fsmoe_ms"] > 0]
        summary["speedup_fsmoe_over"][style] = float(gmean(ratios)) if ratios else float("nan")
    return summary


def compare_documents(a, b, rel_tol: float = 0.0, abs_tol: float = 0.0, path: str = "$") -> list[str]:
    """Paths where two JSON documents differ beyond the numeric tolerances."""
    if isinstance(a, bool) or isinstance(b, bool):
        return [] if a == b else [f"{path}: {a!r} != {b!r}"]
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        if abs(a - b) <= max(abs_tol, rel_tol * max(abs(a), abs(b))):
            return []
        return [f"{path}: {a!r} != {b!r}"]
    if isinstance(a, dict) and isinstance(b, dict):
        differences = []
        for key in sorted(set(a) | set(b)):
            if key not in a or key not in b:
                differences.append(f"{path}.{key}: present in only one document")
            else:
                differences += compare_documents(a[key], b[key], rel_tol, abs_tol, f"{path}.{key}")
        return differences
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return [f"{path}: length {len(a)} != {len(b)}"]
        differences = []
        for i, (x, y) in enumerate(zip(a, b)):
            differences += compare_documents(x, y, rel_tol, abs_tol, f"{path}[{i}]")
        return differences
    return [] if a == b else [f"{path}: {a!r} != {b!r}"]


def _gate_tokens(name: str, tokens: np.ndarray, cfg: LayerConfig, rng: np.random.Generator,
                 noise: bool, seed: int) -> GateOutput:
    """Run the registered gate ``name`` with random weights drawn from ``rng``."""
    gate = get_gate_function(name)
    if gate is None:
        raise ConfigError(f"unknown gate '{name}', expected one of {sorted(gate_functions)}")
    M = tokens.shape[1]
    if name.lower() == "xmoe":
        rank = min(XMOE_RANK, M)
        return gate(tokens, rng.standard_normal((M, rank)), rng.standard_normal((rank, cfg.E)), cfg.k)
    w_gate = rng.standard_normal((M, cfg.E))
    if name.lower() == "ec":
        return gate(tokens, w_gate, min(capacity(cfg), tokens.shape[0]))
    if name.lower() == "gshard":
        return gate(tokens, w_gate, rng.standard_normal((M, cfg.E)), cfg.k, noise, seed)
    return gate(tokens, w_gate, cfg.k)


def route_tokens(cfg: LayerConfig, gate_name: str, seed: int = 0, noise: bool = False) -> dict:
    """Route B*L random tokens through a gate and back, reporting drops and expert load."""
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((cfg.B * cfg.L, cfg.M))
    gate = _gate_tokens(gate_name, tokens, cfg, rng, noise, seed)

    layout, report = order(tokens, gate, cfg)
    combined = i_order(apply_experts(layout, lambda e, rows: rows), report.gate, cfg)
    kept = (report.gate.experts >= 0) & ~report.gate.drop_mask
    expected = tokens * np.where(kept, report.gate.weights, 0.0).sum(axis=1, keepdims=True)
    error = float(np.max(np.abs(combined - expected))) if tokens.size else 0.0
    if error > ROUND_TRIP_TOLERANCE * max(1.0, float(np.max(np.abs(expected), initial=0.0))):
        raise InvariantViolation(f"identity experts changed the combined tokens by {error}")

    routed = int((report.gate.experts >= 0).sum())
    load = np.bincount(report.gate.experts[kept], minlength=cfg.E)
    logger.info(f"{gate_name}: kept {report.kept} of {routed} routed slots at capacity {report.capacity}")
    return {
        "gate": gate_name.lower(),
        "tokens": int(tokens.shape[0]),
        "capacity": report.capacity,
        "routed": routed,
        "kept": report.kept,
        "dropped": len(report.dropped),
        "drop_fraction": len(report.dropped) / routed if routed else 0.0,
        "expert_load": load.tolist(),
        "round_trip_error": error,
    }
