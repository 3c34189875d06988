"""Command-line entry point.

    ddsec run <scenario-file> [--seed N] [--out DIR] [--algorithm alg1|alg2|additive] [--sweep K]

Log verbosity comes from ``DDSEC_LOG`` (DEBUG, INFO, WARNING, ...; default WARNING).
Exit status: 0 on completion, 1 when a run aborts, 2 on a bad scenario or arguments.
"""

import argparse
from dataclasses import replace
import json
import logging
import os
import sys

from .controller import ALGORITHMS
from .harness import (ScenarioAborted, ScenarioError, format_report, load_scenario, run_scenario,
                      run_sweep, summarize)


def _parser():
    p = argparse.ArgumentParser(prog="ddsec", description="Data-driven secondary control testbed")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="scenario YAML file ('bundled' for the packaged IEEE 14-bus run)")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default=None, help="directory for the run log, CSVs and summary")
    run.add_argument("--algorithm", choices=ALGORITHMS, default=None)
    run.add_argument("--excitation", choices=("null-space", "additive"), default=None,
                     help="'additive' is shorthand for --algorithm additive")
    run.add_argument("--sweep", type=int, default=None, metavar="K",
                     help="run K consecutive seeds in parallel and merge their summaries")
    run.add_argument("--duration", type=float, default=None, help="override the duration (s)")
    run.add_argument("--json", action="store_true", help="print the summary as JSON")
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DDSEC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.scenario == "bundled":
            from .harness import bundled_scenario_path
            args.scenario = str(bundled_scenario_path())
        sc = load_scenario(args.scenario)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.algorithm is not None:
            over["algorithm"] = args.algorithm
        if args.excitation == "additive":
            over["algorithm"] = "additive"
        if args.duration is not None:
            over["duration"] = args.duration
        sc = replace(sc, **over)
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.sweep:
            if args.sweep < 1:
                print("error: --sweep needs K >= 1", file=sys.stderr)
                return 2
            per_seed, merged = run_sweep(sc, args.sweep, args.out)
            if args.out:
                from pathlib import Path
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "sweep_summary.json").write_text(
                    json.dumps({"per_seed": per_seed, "merged": merged}, indent=2, sort_keys=True) + "\n")
            rep = merged
        else:
            rep = summarize(run_scenario(sc, args.out))
    except ScenarioAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(rep, indent=2, sort_keys=True) if args.json else format_report(rep), end="")
    if args.json:
        print()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
