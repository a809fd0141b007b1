"""Command-line entry points.

Subcommands: simulate, twin, ot, certify, report. Exit codes:
0 = pass, 1 = certification check failure, 2 = usage/config error,
3 = numerical divergence or particle escape. The VPTWIN_THREADS
environment variable caps worker threads; results are identical for any
value (all reductions use fixed summation orders).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness, presets, transport
from .dynamics import TwinError
from .errors import (
    CheckFailure,
    ConfigError,
    DivergenceError,
    EscapeError,
    TransportError,
    VptwinError,
)

EXIT_PASS = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _load_config(arg):
    if arg.startswith("preset:"):
        try:
            return presets.bundled(arg.split(":", 1)[1])
        except KeyError as err:
            raise ConfigError(str(err)) from err
    return harness.load_config(arg)


def _cmd_simulate(args):
    cfg = _load_config(args.config)
    manifest = harness.emit_simulation(cfg, args.out)
    print(f"wrote {manifest}")
    return EXIT_PASS


def _cmd_twin(args):
    cfg = _load_config(args.config)
    manifest = harness.emit_twin(cfg, args.out)
    print(f"wrote {manifest}")
    return EXIT_PASS


def _cmd_ot(args):
    a = transport.load_cloud(args.cloud_a)
    b = transport.load_cloud(args.cloud_b)
    if args.sinkhorn:
        dist, plan = transport.w2_sinkhorn(a, b, args.reg, tol=args.tol)
    else:
        dist, plan = transport.w2_exact(a, b)
    print(f"{dist:.17g}")
    if args.plan_out:
        transport.save_plan(plan, args.plan_out)
    return EXIT_PASS


def _cmd_certify(args):
    records = harness.read_records(args.records)
    if args.window:
        t0, t1 = args.window
        records = [r for r in records if t0 <= r.t <= t1]
    result, cert_path, summary_path = harness.emit_certification(
        records, args.out, prop31_tol=args.prop31_tol
    )
    for line in result.summary_lines:
        print(line)
    print(f"wrote {cert_path} and {summary_path}")
    return EXIT_PASS if result.passed else EXIT_CHECK


def _cmd_report(args):
    path = harness.emit_report(args.manifest, args.out)
    print(f"wrote {path}")
    return EXIT_PASS


def build_parser():
    p = argparse.ArgumentParser(
        prog="vptwin",
        description="Twin-simulation laboratory for Vlasov-Poisson stability "
        "estimates via optimal transport",
    )
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run one flow, dump snapshots and grids")
    ps.add_argument("config", help="config path or preset:<name>")
    ps.add_argument("--out", default="out_simulate")
    ps.set_defaults(fn=_cmd_simulate)

    pt = sub.add_parser("twin", help="run a twin pair, emit the stability CSV")
    pt.add_argument("config", help="config path or preset:<name>")
    pt.add_argument("--out", default="out_twin")
    pt.set_defaults(fn=_cmd_twin)

    po = sub.add_parser("ot", help="Wasserstein-2 distance between cloud files")
    po.add_argument("cloud_a")
    po.add_argument("cloud_b")
    mode = po.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", default=True)
    mode.add_argument("--sinkhorn", action="store_true")
    po.add_argument("--reg", type=float, default=1e-2)
    po.add_argument("--tol", type=float, default=1e-9)
    po.add_argument("--plan-out")
    po.set_defaults(fn=_cmd_ot)

    pc = sub.add_parser("certify", help="certify a records CSV")
    pc.add_argument("records")
    pc.add_argument("--out", default="out_certify")
    pc.add_argument("--prop31-tol", type=float, default=0.05)
    pc.add_argument("--fit-constants", action="store_true", default=True)
    pc.add_argument("--window", nargs=2, type=float, metavar=("T0", "T1"))
    pc.set_defaults(fn=_cmd_certify)

    pr = sub.add_parser("report", help="consolidated report from a manifest")
    pr.add_argument("manifest")
    pr.add_argument("--out", default="out_report")
    pr.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    os.environ.setdefault("VPTWIN_THREADS", "1")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, EscapeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except TwinError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckFailure as err:
        print(f"check failure: {err}", file=sys.stderr)
        return EXIT_CHECK
    except (TransportError, VptwinError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECK


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
