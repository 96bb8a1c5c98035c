import sys
from argparse import Namespace
from typing import Optional

from config import (
    DEFAULT_DE_SEED,
    DEFAULT_JOBS,
    DEFAULT_R2_THRESHOLD,
    DEFAULT_R_MAX,
    SCHEDULE_STYLES,
    SWEEP_CONFIRM_LIMIT,
    resolve_setting,
)
from cost_models import (
    fit_profile,
    load_bench_csv,
    load_profile,
    synthesize_profile_bench,
    write_bench_csv,
)
from errors import ConfigError, FitQualityError, PlannerError
from grad_partition import MIN_POPULATION
from handlers import (
    SWEEP_HEADER,
    compare_documents,
    load_run_spec,
    load_spec_inputs,
    model_plan_from_document,
    plan_document,
    plan_model,
    route_tokens,
    run_sweep,
    simulate_run,
    sweep_setup,
    sweep_summary,
)
from logger import logger
from models import DEParams, LayerConfig, RunSpec
from utils import dumps, format_ms, get_output_path, read_json, write_csv, write_json


def _run_spec(args: Namespace) -> tuple[RunSpec, object]:
    if args.spec:
        return load_run_spec(args.spec)
    if not (args.profile and args.layers):
        raise ConfigError("give --spec, or both --profile and --layers")
    return RunSpec(cluster_profile=args.profile, layers=args.layers, parallel=args.parallel or "testbed-a"), None


def _de_params(args: Namespace, spec: RunSpec) -> DEParams:
    fields = spec.de.model_dump()
    file_seed = spec.seed if spec.seed is not None else spec.de.seed
    fields["seed"] = resolve_setting(args.de_seed, "MOE_PLAN_DE_SEED", file_seed, DEFAULT_DE_SEED)
    if args.generations is not None:
        fields["generations"] = args.generations
    if args.population is not None:
        fields["population"] = args.population
    if args.de_f is not None:
        fields["F"] = args.de_f
    if args.de_cr is not None:
        fields["CR"] = args.de_cr
    try:
        params = DEParams(**fields)
    except ValueError as e:
        raise ConfigError(f"invalid DE parameters: {e}") from e
    if params.population is not None and params.population < MIN_POPULATION:
        raise ConfigError(f"DE population {params.population} is below the minimum of {MIN_POPULATION}")
    return params


def _r_max(args: Namespace, spec: Optional[RunSpec]) -> int:
    r_max = resolve_setting(args.r_max, "MOE_PLAN_R_MAX", spec.r_max if spec else None, DEFAULT_R_MAX)
    if r_max < 1:
        raise ConfigError(f"r_max must be >= 1, got {r_max}")
    return r_max


def fit_command(args: Namespace) -> int:
    """Fit a cluster profile from a kind,n,t_ms bench file."""
    try:
        samples = load_bench_csv(args.bench)
        profile, r2 = fit_profile(samples, name=args.name)
        write_json(args.out, profile.model_dump(by_alias=True))
        threshold = resolve_setting(args.r2_threshold, "MOE_PLAN_R2_THRESHOLD", None, DEFAULT_R2_THRESHOLD, float)
        sys.stdout.write(dumps({"profile": args.out, "r2": r2, "threshold": threshold}))

        poor = {kind: value for kind, value in r2.items() if value < threshold}
        if poor:
            raise FitQualityError(f"r^2 below {threshold} for {sorted(poor)}")
    except PlannerError as e:
        logger.error(f"fit failed: {e}")
        return e.exit_code
    return 0


def synth_command(args: Namespace) -> int:
    """Write a synthetic bench file drawn from a profile."""
    try:
        profile = load_profile(args.profile)
        samples = synthesize_profile_bench(profile, noise=args.noise, seed=args.seed)
        write_bench_csv(args.out, samples)
        logger.info(f"synthetic bench for {profile.name} written to {args.out}")
    except PlannerError as e:
        logger.error(f"synth failed: {e}")
        return e.exit_code
    return 0


def plan_command(args: Namespace) -> int:
    """Pipeline degrees and gradient partition for a model."""
    try:
        spec, base_dir = _run_spec(args)
        profile, pcfg, layer_cfgs = load_spec_inputs(spec, base_dir)
        model = plan_model(layer_cfgs, pcfg, profile, _de_params(args, spec), _r_max(args, spec))
        out = write_json(get_output_path(args.out_dir or spec.output_dir, "plan.json"), plan_document(model))
        logger.info(f"plan written to {out}")
    except PlannerError as e:
        logger.error(f"plan failed: {e}")
        return e.exit_code
    return 0


def simulate_command(args: Namespace) -> int:
    """Simulate a plan under one or all schedule styles and export traces."""
    try:
        spec, base_dir = _run_spec(args)
        profile, pcfg, layer_cfgs = load_spec_inputs(spec, base_dir)
        r_max = _r_max(args, spec)
        if args.plan:
            model = model_plan_from_document(read_json(args.plan))
        else:
            model = plan_model(layer_cfgs, pcfg, profile, _de_params(args, spec), r_max)

        styles = SCHEDULE_STYLES if args.style == "all" else (args.style,)
        report, traces = simulate_run(model, profile, styles, args.policy, r_max, args.phase or spec.phase)

        out_dir = args.out_dir or spec.output_dir
        for style, trace in traces.items():
            write_json(get_output_path(out_dir, f"trace_{style}.json"), trace["trace"])
            write_json(get_output_path(out_dir, f"timeline_{style}.json"), trace["timeline"])
        write_json(get_output_path(out_dir, "simulation.json"), report)
        for style, row in report.items():
            phases = ", ".join(
                f"{name} {format_ms(row[name + '_ms'])}" for name in ("fwd", "bwd") if name + "_ms" in row
            )
            logger.info(f"{style}: {phases}")
        sys.stdout.write(dumps(report))
    except PlannerError as e:
        logger.error(f"simulate failed: {e}")
        return e.exit_code
    return 0


def sweep_command(args: Namespace) -> int:
    """Run the configuration grid and compare schedules case by case."""
    try:
        spec, base_dir = load_run_spec(args.spec) if args.spec else (None, None)
        setup = sweep_setup(args.testbed, spec, base_dir, args.limit)
        if len(setup.cases) > SWEEP_CONFIRM_LIMIT and not args.yes:
            raise ConfigError(f"{len(setup.cases)} cases exceed {SWEEP_CONFIRM_LIMIT}; pass --yes to run them")
        r_max = _r_max(args, spec)
        jobs = resolve_setting(args.jobs, "MOE_PLAN_JOBS", None, DEFAULT_JOBS)

        logger.info(f"sweeping {len(setup.cases)} cases on {setup.label} with {jobs} job(s)")
        rows = run_sweep(setup, r_max, jobs, progress=not args.quiet)
        summary = sweep_summary(rows)
        out_dir = args.out_dir or (spec.output_dir if spec else "out")
        write_csv(get_output_path(out_dir, "sweep.csv"), SWEEP_HEADER, rows)
        write_json(get_output_path(out_dir, "sweep_summary.json"), summary)
        sys.stdout.write(dumps(summary))
    except PlannerError as e:
        logger.error(f"sweep failed: {e}")
        return e.exit_code
    return 0


def route_command(args: Namespace) -> int:
    """Check a gate's routing, capacity drops and combine on random tokens."""
    try:
        try:
            cfg = LayerConfig.from_table(B=args.B, L=args.L, M=args.M, hscale=args.hscale, E=args.E, k=args.k, f=args.f)
        except ValueError as e:
            raise ConfigError(f"invalid layer for routing: {e}") from e
        report = route_tokens(cfg, args.gate, args.seed, args.noise)
        write_json(get_output_path(args.out_dir, "route.json"), report)
        sys.stdout.write(dumps(report))
    except PlannerError as e:
        logger.error(f"route failed: {e}")
        return e.exit_code
    return 0


def compare_command(args: Namespace) -> int:
    """Exit 0 when two documents agree within tolerance, 1 otherwise."""
    try:
        differences = compare_documents(read_json(args.a), read_json(args.b), args.rel_tol, args.abs_tol)
    except PlannerError as e:
        logger.error(f"compare failed: {e}")
        return e.exit_code
    for difference in differences:
        sys.stdout.write(difference + "\n")
    if differences:
        logger.info(f"{len(differences)} difference(s) between {args.a} and {args.b}")
        return 1
    return 0
