import argparse
import sys
from typing import Optional, Sequence

from commands import (
    compare_command,
    fit_command,
    plan_command,
    route_command,
    simulate_command,
    sweep_command,
    synth_command,
)
from config import SCHEDULE_STYLES, SIMULATION_POLICIES, TESTBEDS, gate_functions
from logger import setup_logging


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", help="RunSpec JSON file")
    parser.add_argument("--profile", help="cluster profile: preset name or JSON path")
    parser.add_argument("--layers", help="layer configs JSON")
    parser.add_argument("--parallel", choices=sorted(TESTBEDS), help="parallel layout preset")
    parser.add_argument("--r-max", type=int, default=None, help="largest pipeline degree tried")
    parser.add_argument("--de-seed", type=int, default=None)
    parser.add_argument("--generations", type=int, default=None)
    parser.add_argument("--population", type=int, default=None)
    parser.add_argument("--de-f", type=float, default=None, help="differential weight F")
    parser.add_argument("--de-cr", type=float, default=None, help="crossover rate CR")
    parser.add_argument("--out-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-plan", description="Plan and simulate pipelined MoE schedules.")
    parser.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="fit cost models from a bench CSV")
    fit.add_argument("bench")
    fit.add_argument("--out", default="profile.json")
    fit.add_argument("--name", default="fitted")
    fit.add_argument("--r2-threshold", type=float, default=None)
    fit.set_defaults(func=fit_command)

    synth = commands.add_parser("synth", help="write a synthetic bench CSV from a profile")
    synth.add_argument("--profile", default="testbed-a")
    synth.add_argument("--noise", type=float, default=0.01)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", default="bench.csv")
    synth.set_defaults(func=synth_command)

    plan = commands.add_parser("plan", help="pipeline degrees and gradient partition")
    _add_run_arguments(plan)
    plan.set_defaults(func=plan_command)

    simulate = commands.add_parser("simulate", help="simulate schedules and export traces")
    _add_run_arguments(simulate)
    simulate.add_argument("--plan", help="plan.json from a previous plan run")
    simulate.add_argument("--style", choices=SCHEDULE_STYLES + ("all",), default="fsmoe")
    simulate.add_argument("--policy", choices=SIMULATION_POLICIES, default="stream")
    simulate.add_argument("--phase", choices=("fwd", "bwd", "both"), default=None,
                          help="phases to simulate, default from the run spec")
    simulate.set_defaults(func=simulate_command)

    sweep = commands.add_parser("sweep", help="evaluate the configuration grid")
    sweep.add_argument("--testbed", choices=sorted(TESTBEDS), default="testbed-a")
    sweep.add_argument("--spec", help="RunSpec JSON with its own profile, layout and grid")
    sweep.add_argument("--r-max", type=int, default=None)
    sweep.add_argument("--jobs", type=int, default=None)
    sweep.add_argument("--limit", type=int, default=None)
    sweep.add_argument("--yes", action="store_true", help="confirm very large grids")
    sweep.add_argument("--quiet", action="store_true", help="no progress bar")
    sweep.add_argument("--out-dir", default=None)
    sweep.set_defaults(func=sweep_command)

    route = commands.add_parser("route", help="route random tokens through a gate and back")
    route.add_argument("--gate", default="gshard", help=f"one of {sorted(gate_functions)}")
    route.add_argument("--B", type=int, default=2)
    route.add_argument("--L", type=int, default=256)
    route.add_argument("--M", type=int, default=64)
    route.add_argument("--hscale", type=int, default=2)
    route.add_argument("--E", type=int, default=8)
    route.add_argument("--k", type=int, default=2)
    route.add_argument("--f", default="1.2", help="capacity factor, '*' for unlimited")
    route.add_argument("--seed", type=int, default=0)
    route.add_argument("--noise", action="store_true", help="noisy gating (gshard only)")
    route.add_argument("--out-dir", default="out")
    route.set_defaults(func=route_command)

    compare = commands.add_parser("compare", help="diff two plan or report documents")
    compare.add_argument("a")
    compare.add_argument("b")
    compare.add_argument("--rel-tol", type=float, default=0.0)
    compare.add_argument("--abs-tol", type=float, default=0.0)
    compare.set_defaults(func=compare_command)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse the command line and run the chosen subcommand."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
