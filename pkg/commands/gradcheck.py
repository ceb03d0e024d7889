import argparse

from commands.error_handler import handle_errors
from helpers.constants import GRADCHECK_TOLERANCE
from helpers.exceptions import CheckFailure
from samiro.gradcheck import CASES, gradcheck_suite

COMMAND_METADATA = {
    "name": "gradcheck",
    "description": "Compare every backward rule with central finite differences",
    "category": "Checks",
    "hidden": False,
}


def setup(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        "gradcheck",
        help=COMMAND_METADATA["description"],
        description="Run the gradient-check suite in 64-bit precision; exits 3 when any parameter group fails.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE, help="Max relative error per group")
    parser.add_argument("--case", action="append", choices=sorted(CASES), help="Only run the named case(s)")
    parser.add_argument("--seed", type=int, default=0, help="Seed of the problem builders")
    parser.set_defaults(handler=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, runtime) -> int:
    cases = {name: CASES[name] for name in args.case} if args.case else None
    report = gradcheck_suite(args.tolerance, cases=cases, seed=args.seed)
    print(report.format())
    if not report.passed:
        raise CheckFailure(
            f"{len(report.failures)} parameter group(s) exceed tolerance {args.tolerance:g}",
            [f"{entry.case}/{entry.group}: {entry.max_rel_error:.3e}" for entry in report.failures],
        )
    return 0
