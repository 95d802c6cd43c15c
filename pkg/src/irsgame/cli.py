"""Command-line entry point: ``irsgame {solve,sweep,print-config}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import List, Optional

import numpy as np

from .config import build_spec, dump_config, load_config
from .experiment import PRICE_STREAM, SweepAborted, emit_outputs, run_sweep
from .game import (DIRECT_LINK, SCHEMES, STACKELBERG, GameOutcome, check_equilibrium,
                   run_direct_link, run_random_pricing, run_stackelberg)
from .scenario import channel_rng, generate_channels

log = logging.getLogger("irsgame")


def _schemes(text: str):
    items = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in items if s not in SCHEMES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown scheme(s) {bad}; choose from {', '.join(SCHEMES)}")
    return items


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irsgame", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file ([scenario] and [sweep] sections)")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config file)")
    common.add_argument("--trials", type=_positive, help="trials per sweep value")
    common.add_argument("--schemes", type=_schemes, help="comma-separated subset of " + ", ".join(SCHEMES))
    common.add_argument("--out", help="output directory (sweep) or file (solve)")
    common.add_argument("--plots", action="store_true", help="also write one SVG per metric")
    common.add_argument("--threads", type=_positive, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", parents=[common], help="solve one channel realization, dump JSON")
    solve.add_argument("--trial", type=int, default=0, help="realization index under the seed")
    solve.add_argument("--check", action="store_true",
                       help="attach the equilibrium check to the stackelberg outcome (slow)")
    sub.add_parser("sweep", parents=[common], help="run the configured Monte-Carlo sweep")
    sub.add_parser("print-config", parents=[common], help="print the resolved configuration")
    return parser


def _resolve(args):
    scenario, sweep = load_config(args.config)
    if args.seed is not None:
        scenario = scenario.replace(rng_seed=args.seed)
        sweep["seed"] = args.seed
    if args.trials is not None:
        sweep["trials"] = args.trials
    if args.schemes is not None:
        sweep["schemes"] = args.schemes
    return scenario, sweep


def _complex_list(a) -> dict:
    a = np.asarray(a)
    return {"real": a.real.tolist(), "imag": a.imag.tolist()}


def outcome_to_dict(out: GameOutcome) -> dict:
    d = {
        "scheme": out.scheme, "price": out.price, "U": out.U, "V": out.V,
        "sum_rate": out.sum_rate, "rates": out.rates.tolist(), "triggered": list(out.triggered),
        "num_triggered": out.num_triggered, "inner_iterations": out.inner_iterations,
        "outer_iterations": out.outer_iterations, "converged": out.converged,
        "admm_converged": out.admm_converged, "history": [list(h) for h in out.history],
        "W": _complex_list(out.W), "phi": _complex_list(out.phi),
    }
    if out.equilibrium is not None:
        e = out.equilibrium
        d["equilibrium"] = dataclasses.asdict(e)
    return d


def cmd_solve(args, scenario, sweep) -> int:
    seed = scenario.rng_seed
    ch = generate_channels(scenario, channel_rng(seed, args.trial))
    direct = run_direct_link(ch, scenario)
    outcomes = {}
    for scheme in sweep["schemes"]:
        if scheme == DIRECT_LINK:
            out = direct
        elif scheme == STACKELBERG:
            out = run_stackelberg(ch, scenario, direct_W=direct.W)
            if args.check:
                report = check_equilibrium(ch, scenario, out, direct_W=direct.W)
                out = dataclasses.replace(out, equilibrium=report)
        else:
            rng = np.random.default_rng([seed, args.trial, PRICE_STREAM])
            out = run_random_pricing(ch, scenario, rng, direct_W=direct.W)
        outcomes[scheme] = outcome_to_dict(out)
    payload = {"seed": seed, "trial": args.trial,
               "channels": {"H": _complex_list(ch.H), "G": _complex_list(ch.G),
                            "Hd": _complex_list(ch.Hd),
                            "user_positions": ch.user_positions.tolist()},
               "outcomes": outcomes}
    text = json.dumps(payload, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_sweep(args, scenario, sweep) -> int:
    spec = build_spec(scenario, sweep)
    try:
        result = run_sweep(spec, threads=args.threads)
    except SweepAborted as exc:
        log.error("%s", exc)
        return 2
    paths = emit_outputs(result.rows, args.out or ".", name=spec.sweep_name, plots=args.plots)
    for p in paths:
        print(p)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        scenario, sweep = _resolve(args)
    except (OSError, ValueError) as exc:
        print(f"irsgame: config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "print-config":
        sys.stdout.write(dump_config(scenario, sweep))
        return 0
    if args.command == "solve":
        return cmd_solve(args, scenario, sweep)
    try:
        return cmd_sweep(args, scenario, sweep)
    except OSError as exc:
        print(f"irsgame: cannot write outputs: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
