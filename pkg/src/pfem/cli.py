"""Command-line entry points.

Exit codes: 0 success, 2 configuration errors (bad arguments, parameter
files, meshes), 3 solver divergence. Anything else propagates as a normal
Python traceback, since it is a bug rather than a user error.
"""

import argparse
import sys

from .drivers import (run_bench_scaling, run_ns, run_partition_info,
                      run_poisson, write_rows_csv)
from .errors import ConfigError, SolverError
from .params import ParamTree, read_params


def _build_parser():
    p = argparse.ArgumentParser(prog="pfem",
                                description="Parallel FEM toolkit drivers")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("poisson", help="manufactured-solution Poisson solve")
    sp.add_argument("-p", "--params", required=True, help="parameter file")
    sp.add_argument("--ranks", type=int, default=None,
                    help="override the number of subdomain workers")
    sp.add_argument("--convergence", type=int, default=0, metavar="LEVELS",
                    help="run a refinement study over LEVELS meshes")

    sn = sub.add_parser("ns", help="cavity Navier-Stokes time loop")
    sn.add_argument("-p", "--params", required=True, help="parameter file")
    sn.add_argument("--scheme", default="yosida",
                    choices=["exact-lu", "perot", "yosida", "yosida2"])
    sn.add_argument("--adaptive", action="store_true",
                    help="pressure-correction adaptive time stepping")

    sb = sub.add_parser("bench-scaling", help="Schwarz subdomain-count sweep")
    sb.add_argument("-p", "--params", required=True, help="parameter file")
    sb.add_argument("--ranks", required=True,
                    help="comma-separated subdomain counts, e.g. 1,2,4,8")

    si = sub.add_parser("partition-info", help="partition size report")
    si.add_argument("-p", "--params", default=None, help="parameter file")
    si.add_argument("--ranks", type=int, default=None,
                    help="override the number of ranks")
    return p


def _warn_unused(params):
    for key in params.unused_keys():
        print(f"warning: unused parameter '{key}'", file=sys.stderr)


def _cmd_poisson(args):
    params = read_params(args.params)
    out = run_poisson(params, ranks=args.ranks, convergence=args.convergence)
    rows = out["rows"]
    print(f"{'n':>5} {'dofs':>9} {'iters':>6} {'L2':>12} {'order':>6} "
          f"{'H1':>12} {'order':>6}")
    for r in rows:
        print(f"{r['n']:>5} {r['dofs']:>9} {r['iterations']:>6} "
              f"{r['l2']:>12.4e} {r['l2_order']:>6.2f} "
              f"{r['h1']:>12.4e} {r['h1_order']:>6.2f}")
    _warn_unused(params)
    return 0


def _cmd_ns(args):
    params = read_params(args.params)
    result = run_ns(params, scheme=args.scheme, adaptive=args.adaptive)
    last = result.rows[-1] if result.rows else {}
    print(f"scheme={args.scheme} steps={result.step} t={result.t:.6f} "
          f"forced_accepts={result.forced_accepts} "
          f"div={last.get('div_norm', float('nan')):.3e}")
    _warn_unused(params)
    return 0


def _cmd_bench(args):
    params = read_params(args.params)
    try:
        ranks_list = [int(tok) for tok in args.ranks.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--ranks must be a comma list of integers, "
                          f"got '{args.ranks}'") from None
    rows = run_bench_scaling(params, ranks_list)
    print(f"{'n_sub':>6} {'dofs':>9} {'iters':>6} {'factor_s':>10} {'solve_s':>10}")
    for r in rows:
        print(f"{r['n_sub']:>6} {r['dofs']:>9} {r['iterations']:>6} "
              f"{r['factor_seconds']:>10.4f} {r['solve_seconds']:>10.4f}")
    _warn_unused(params)
    return 0


def _cmd_partition_info(args):
    params = read_params(args.params) if args.params else ParamTree()
    rows = run_partition_info(params, ranks=args.ranks)
    print(f"{'rank':>5} {'owned':>7} {'local':>7} {'halo':>6} "
          f"{'dofs':>7} {'repeated':>9} {'interface':>10}")
    for r in rows:
        print(f"{r['rank']:>5} {r['owned_cells']:>7} {r['local_cells']:>7} "
              f"{r['halo_cells']:>6} {r['owned_dofs']:>7} "
              f"{r['repeated_dofs']:>9} {r['interface_dofs']:>10}")
    _warn_unused(params)
    return 0


_COMMANDS = {
    "poisson": _cmd_poisson,
    "ns": _cmd_ns,
    "bench-scaling": _cmd_bench,
    "partition-info": _cmd_partition_info,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
