"""Command-line front end: gen, solve, train, eval, compare.

Exit codes: 0 success, 2 bad arguments or invalid data, 3 problem too large
for the requested method, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation, exact_mdp, post_decision, td_learner
from ._linalg import NumericalError
from .exact_mdp import GuardError
from .instance import (
    GeneratorConfig,
    Instance,
    InstanceFormatError,
    InstanceValidationError,
    Policy,
    generate_instance,
    load_instance,
    load_policy,
    myopic_policy,
    random_policy,
    save_instance,
    save_policy,
)

log = logging.getLogger("dispatchmdp")

OUTDIR_ENV = "DISPATCHMDP_OUTDIR"

EXIT_OK, EXIT_VALIDATION, EXIT_GUARD, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in row] for row in rows])
    with open(path, newline="", encoding="utf-8") as fh:
        back = list(csv.reader(fh))
    if back[0] != header or len(back) != len(rows) + 1:
        raise NumericalError(f"read-back check failed for {path}")


def write_policy(policy: Policy, inst: Instance, path: Path) -> None:
    save_policy(policy, path)
    back = load_policy(path)
    back.check(inst)
    if back != policy:
        raise NumericalError(f"read-back check failed for {path}")


def _outdir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTDIR_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_policy(spec: str, inst: Instance, seed: int = 0) -> tuple[str, Policy]:
    if spec == "myopic":
        return "myopic", myopic_policy(inst)
    if spec == "random":
        return "random", random_policy(inst, np.random.default_rng(seed))
    policy = load_policy(spec)
    policy.check(inst)
    return Path(spec).stem, policy


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.nodes < 1 or args.units < 1:
        raise InstanceValidationError("--nodes and --units must be >= 1")
    config = GeneratorConfig(
        scale=args.scale,
        turnout=args.turnout,
        lambda_range=(args.lambda_low, args.lambda_high),
        mu_range=(args.mu_low, args.mu_high),
        target_utilization=args.utilization if args.utilization > 0 else None,
    )
    inst = generate_instance(args.seed, args.nodes, args.units, config)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_instance(inst, path)
    if not load_instance(path).same_as(inst):
        raise NumericalError(f"read-back check failed for {path}")
    print(f"wrote {path}: J={inst.J} N={inst.N} lambda={inst.total_rate:.4f} "
          f"sum(mu)={inst.mu.sum():.4f} utilization={inst.utilization:.4f}")
    return EXIT_OK


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    name, initial = _resolve_policy(args.init, inst, args.seed)
    out = _outdir(args)
    if args.method == "exact":
        try:
            exact_mdp.check_budget(inst)
        except GuardError as exc:
            raise GuardError(f"{exc}; try `train` for large fleets") from None
        policy, table, trace = exact_mdp.policy_iteration(inst, initial, args.max_iters)
        N = inst.N
        rows = []
        for idx, v in enumerate(table.V.tolist()):
            slot, mask = divmod(idx, 1 << N)
            rows.append([slot, mask, v])
        write_csv(out / "values.csv", ["call", "mask", "value"], rows)
        mu = table.mu
    else:
        post_decision.check_budget(inst)
        policy, table, trace = post_decision.pd_policy_iteration(inst, initial, args.max_iters)
        write_csv(out / "values.csv", ["mask", "value"], [[m, v] for m, v in enumerate(table.Jv.tolist())])
        mu = table.mu_x
    write_policy(policy, inst, out / "policy.json")
    write_csv(out / "trace.csv", ["iter", "mu", "policy_changes"],
              [[r.iter, r.mu, r.policy_changes] for r in trace])
    print(f"method={args.method} start={name} iterations={len(trace)} mu={mu!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.K < 1 or args.T < 1 or args.a < 1:
        raise InstanceValidationError("-K and -T must be >= 1 and -a >= 1")
    inst = load_instance(args.instance)
    name, initial = _resolve_policy(args.init, inst, args.seed)
    out = _outdir(args)
    policy, trace, last = td_learner.td_policy_iteration(
        inst, args.K, args.T, args.a, args.seed, initial,
        warm_start=args.warm_start, record_every=args.history_every,
    )
    write_policy(policy, inst, out / "policy.json")
    write_csv(out / "trace.csv", ["iter", "sample_mean_response", "mu_estimate", "policy_changes"],
              [[r.iter, r.sample_mean_response, r.mu_estimate, r.policy_changes] for r in trace])
    write_csv(out / "values.csv", ["mask", "r_value"], [[m, v] for m, v in enumerate(last.r.tolist())])
    if args.history_every:
        rows = [[step, m, v] for step, r in last.history for m, v in enumerate(r.tolist())]
        write_csv(out / "value_history.csv", ["step", "mask", "r_value"], rows)
    for r in trace:
        log.info("iter %d mean response %.4f", r.iter, r.sample_mean_response)
    print(f"start={name} K={args.K} T={args.T} a={args.a} "
          f"last sample mean response={trace[-1].sample_mean_response!r}")
    return EXIT_OK


COMPARE_HEADER = ["policy_name", "method", "mean_response", "loss_fraction", "ci_halfwidth"]


def _eval_rows(args, inst: Instance, specs: list[str]) -> list[list]:
    rows = []
    for spec in specs:
        name, policy = _resolve_policy(spec, inst, args.seed)
        rep = evaluation.evaluate(inst, policy, args.method, args.calls, args.reps, args.seed)
        rows.append([name, rep.method, rep.mean_response_time, rep.loss_fraction, rep.ci_halfwidth])
        util = " ".join(f"{u:.4f}" for u in rep.utilization)
        print(f"{name}: method={rep.method} mean_response={rep.mean_response_time:.6f} "
              f"loss={rep.loss_fraction:.6f}"
              + (f" ci=+-{rep.ci_halfwidth:.6f}" if rep.ci_halfwidth is not None else "")
              + f" utilization=[{util}]")
    return rows


def cmd_eval(args) -> int:
    inst = load_instance(args.instance)
    rows = _eval_rows(args, inst, [args.policy])
    write_csv(_outdir(args) / args.report, COMPARE_HEADER, rows)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.policy) < 2:
        raise UsageError("compare needs at least two -p/--policy arguments")
    inst = load_instance(args.instance)
    rows = _eval_rows(args, inst, args.policy)
    write_csv(_outdir(args) / args.report, COMPARE_HEADER, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

SOLVE_EPILOG = """outputs (in --out):
  policy.json  {"J", "N", "actions": {"<node>,<mask>": unit}}, 1-based node/unit
  values.csv   exact: call,mask,value (call 0 = no call, j = node j); pd: mask,value
  trace.csv    iter,mu,policy_changes"""

TRAIN_EPILOG = """outputs (in --out):
  policy.json        final policy
  trace.csv          iter,sample_mean_response,mu_estimate,policy_changes
  values.csv         mask,r_value  learned values of the last iteration
  value_history.csv  step,mask,r_value  (only with --history-every)"""

EVAL_EPILOG = """report CSV columns:
  policy_name,method,mean_response,loss_fraction,ci_halfwidth
policy arguments accept a policy JSON file or the built-in names
'myopic' and 'random'."""


def _add_eval_opts(p: argparse.ArgumentParser, default_report: str) -> None:
    p.add_argument("-i", "--instance", required=True)
    p.add_argument("--method", choices=["auto", "exact", "sim"], default="auto",
                   help="auto: exact hypercube when N <= 20, else simulation")
    p.add_argument("--calls", type=int, default=100_000, help="served calls per replication")
    p.add_argument("--reps", type=int, default=10, help="simulation replications")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", help=f"output directory (default ${OUTDIR_ENV} or .)")
    p.add_argument("--report", default=default_report, help="report file name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dispatchmdp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen", help="generate a random instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--units", type=int, default=5)
    p.add_argument("--scale", type=float, default=60.0, help="minutes per unit distance")
    p.add_argument("--turnout", type=float, default=1.0, help="fixed minutes added to every trip")
    p.add_argument("--lambda-low", type=float, default=0.5)
    p.add_argument("--lambda-high", type=float, default=1.5)
    p.add_argument("--mu-low", type=float, default=0.8)
    p.add_argument("--mu-high", type=float, default=1.2)
    p.add_argument("--utilization", type=float, default=0.5,
                   help="rescale call rates to this lambda/sum(mu); 0 keeps raw draws")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="exact policy iteration", epilog=SOLVE_EPILOG, formatter_class=raw)
    p.add_argument("-i", "--instance", required=True)
    p.add_argument("--method", choices=["exact", "pd"], default="pd",
                   help="exact: augmented states; pd: post-decision states")
    p.add_argument("--init", default="myopic", help="starting policy: myopic, random or a policy file")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="seed for --init random")
    p.add_argument("-o", "--out", help=f"output directory (default ${OUTDIR_ENV} or .)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="TD-learning policy iteration", epilog=TRAIN_EPILOG, formatter_class=raw)
    p.add_argument("-i", "--instance", required=True)
    p.add_argument("-K", type=int, default=25, help="outer iterations")
    p.add_argument("-T", type=int, default=200_000, help="transitions per rollout")
    p.add_argument("-a", type=float, default=1000.0, help="step size a/(a+t)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default="myopic", help="starting policy: myopic, random or a policy file")
    p.add_argument("--warm-start", action="store_true", help="carry learned values across iterations")
    p.add_argument("--history-every", type=int, default=0, metavar="STEPS",
                   help="snapshot values every STEPS transitions of the last iteration")
    p.add_argument("-o", "--out", help=f"output directory (default ${OUTDIR_ENV} or .)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one policy", epilog=EVAL_EPILOG, formatter_class=raw)
    _add_eval_opts(p, "eval.csv")
    p.add_argument("-p", "--policy", default="myopic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="evaluate several policies", epilog=EVAL_EPILOG, formatter_class=raw)
    _add_eval_opts(p, "compare.csv")
    p.add_argument("-p", "--policy", action="append", default=[])
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InstanceFormatError, InstanceValidationError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
