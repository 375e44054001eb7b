"""
id: cli
tag: experiments

Command-line front end: one subcommand per experiment.

Exit codes: 0 success, 2 acceptance-threshold failure, 1 error or bad usage.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import OUT_DIR, IdtrackError
from .harness import configure_spec, run_experiment, to_jsonable

logger = logging.getLogger(__name__)

COMMANDS = {
    "equivalence": "White-noise equivalence of the two backends",
    "rho-sweep": "RMSE over a grid of AR(1) coefficients",
    "mismatch": "RMSE series with filter-assumed noise different from the truth",
    "sigma-sweep": "RMSE over a grid of AR(1) driving-noise levels",
    "single-run": "Per-step RMSE of one trial, with the scenario exported",
}

EXIT_OK, EXIT_ERROR, EXIT_ACCEPTANCE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # Usage errors exit 1; 2 is reserved for acceptance failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idtrack", description="JPDAF vs influence-diagram JPDAF experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--seed", type=int, help="base seed; trial i uses seed ^ i")
        p.add_argument("--trials", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default {OUT_DIR})")
        p.add_argument("--paper-scale", action="store_true", help="published trial and step counts")
        p.add_argument("--backend", choices=["jpdaf", "id-jpdaf", "both"], default="both")
        p.add_argument("--threads", type=int, help="worker processes for trials")
        p.add_argument("--progress", action="store_true", help="show a progress bar")
        if name == "mismatch":
            p.add_argument("--case", type=int, choices=[1, 2], help="mismatch case")
        if name == "equivalence":
            p.add_argument("--perturb-q", type=float, help="perturb the ID backend's Q (detector sanity check)")
        else:
            p.add_argument("--check", action="store_true", help="apply the acceptance checks")
            p.add_argument(
                "--classical-model",
                choices=["white", "augmented"],
                help="classical backend in colored runs: AR(1) noise as white (default) or the augmented model",
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )

    try:
        spec = configure_spec(
            args.command,
            args.config,
            paper_scale=args.paper_scale,
            case=getattr(args, "case", None),
            trials=args.trials,
            steps=args.steps,
            seed=args.seed,
            backend=args.backend,
            threads=args.threads,
            perturb_q=getattr(args, "perturb_q", None),
            classical_model=getattr(args, "classical_model", None),
            progress=args.progress,
        )
        outcome = run_experiment(spec, args.out, check=getattr(args, "check", False))
    except IdtrackError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_ERROR

    print(json.dumps({"csv": str(outcome.csv_path), "summary": to_jsonable(outcome.summary)}, indent=2))
    if outcome.failures:
        return EXIT_ACCEPTANCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
