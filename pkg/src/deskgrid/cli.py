"""Command line entry points for every component.

Each console script maps to one ``*_main`` here; ``python -m deskgrid``
dispatches on the first argument to the same functions.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from deskgrid import plan as planmod
from deskgrid.broker import Broker, load_endpoints
from deskgrid.executor import Executor, ExecutorConfig
from deskgrid.gateway import Gateway, GatewayConfig
from deskgrid.harness import format_benchmark, run_benchmark
from deskgrid.manager import Manager, ManagerConfig
from deskgrid.sdk import run_multiplier_demo, run_pi_application
from deskgrid.wire import encode_envelope


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _serve_forever(component, banner: str) -> int:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(banner, flush=True)
    stop.wait()
    component.stop()
    return 0


def _parse_vars(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--var wants NAME=VALUE, got {pair!r}")
        name, value = pair.split("=", 1)
        out[name] = value
    return out


# ---------------------------------------------------------------------------


def manager_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser("manager", description="Run a grid manager.")
    parser.add_argument("--store", required=True, help="journal file path")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--heartbeat-timeout", type=float, default=5.0)
    parser.add_argument("--reaper-interval", type=float, default=0.25)
    parser.add_argument("--parent", default=None, help="parent manager host:port")
    parser.add_argument("--parent-dedicated", action="store_true",
                        help="let the parent push work instead of pulling when idle")
    parser.add_argument("--parent-slots", type=int, default=1)
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    manager = Manager(ManagerConfig(
        store_path=args.store, host=args.host, port=args.port,
        heartbeat_timeout_s=args.heartbeat_timeout,
        reaper_interval_s=args.reaper_interval,
        parent_address=args.parent, parent_dedicated=args.parent_dedicated,
        parent_slots=args.parent_slots,
    )).start()
    return _serve_forever(manager, f"manager listening on {manager.address}")


def executor_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser("executor", description="Run an executor agent.")
    parser.add_argument("--manager", required=True, help="manager host:port")
    parser.add_argument("--slots", type=int, default=1)
    parser.add_argument("--dedicated", action="store_true")
    parser.add_argument("--callback-host", default="127.0.0.1")
    parser.add_argument("--callback-port", type=int, default=0)
    parser.add_argument("--poll-interval", type=float, default=0.05)
    parser.add_argument("--heartbeat-interval", type=float, default=1.0)
    parser.add_argument("--sandbox", default=None)
    parser.add_argument("--identity", default=None)
    parser.add_argument("--activity-file", default=None,
                        help="participate only while this file has not been touched recently")
    parser.add_argument("--activity-threshold", type=float, default=2.0)
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    executor = Executor(ExecutorConfig(
        manager_address=args.manager, slots=args.slots, dedicated=args.dedicated,
        callback_host=args.callback_host, callback_port=args.callback_port,
        poll_interval_s=args.poll_interval, heartbeat_interval_s=args.heartbeat_interval,
        sandbox_root=args.sandbox, identity=args.identity,
        activity_file=args.activity_file, activity_threshold_s=args.activity_threshold,
    )).start()
    return _serve_forever(executor, f"executor {executor.identity} attached to {args.manager}")


def gateway_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser("gateway", description="Run a job gateway.")
    parser.add_argument("--manager", required=True, help="manager host:port")
    parser.add_argument("--store", required=True, help="journal file path")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    gateway = Gateway(GatewayConfig(
        manager_address=args.manager, store_path=args.store,
        host=args.host, port=args.port,
    )).start()
    return _serve_forever(gateway, f"gateway listening on {gateway.address}")


def plan_main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["expand"]:  # `plan expand FILE` and `plan FILE` both work
        argv = argv[1:]
    parser = argparse.ArgumentParser("plan", description="Parse and expand a plan file.")
    parser.add_argument("planfile")
    parser.add_argument("--os", default=None, metavar="NAME",
                        help="value for the $OS built-in")
    parser.add_argument("--var", action="append", default=[], metavar="NAME=VALUE",
                        help="bind an extra substitution variable")
    parser.add_argument("--programs", default=None, metavar="DIR",
                        help="directory with copy sources (default: beside the plan)")
    parser.add_argument("--out", default=None, metavar="FILE",
                        help="write the expanded job specs, one envelope per line")
    parser.add_argument("--show", type=int, default=3, metavar="N",
                        help="print the first N expanded jobs")
    args = parser.parse_args(argv)
    with open(args.planfile, encoding="utf-8") as fh:
        doc = planmod.parse_plan(fh.read())
    variables = _parse_vars(args.var)
    if args.os is not None:
        variables["OS"] = args.os
    points = planmod.expand(doc)
    print(f"task {doc.task_name}: {len(doc.parameters)} parameters, "
          f"{len(doc.commands)} commands, {len(points)} jobs")
    for param in doc.parameters:
        values = param.values
        shown = ", ".join(map(str, values[:5])) + (", ..." if len(values) > 5 else "")
        print(f"  parameter {param.name}: {len(values)} values ({shown})")
    program_dir = args.programs or os.path.dirname(os.path.abspath(args.planfile))
    if args.out is not None:
        specs = planmod.to_jobspecs(doc, points, program_dir, variables)
        with open(args.out, "wb") as fh:
            for spec in specs:
                fh.write(encode_envelope(spec) + b"\n")
        print(f"wrote {len(specs)} job specs to {args.out}")
        return 0
    for point in points[: args.show]:
        mapping = point.mapping(variables)
        print(f"  {point.jobname}:")
        for cmd in doc.commands:
            if isinstance(cmd, planmod.CopyToNode):
                print(f"    copy {planmod.substitute(cmd.src_template, mapping)} "
                      f"node:{planmod.substitute(cmd.dst, mapping)}")
            elif isinstance(cmd, planmod.Execute):
                rendered = [planmod.substitute(t, mapping)
                            for t in (cmd.program_template, *cmd.arg_templates)]
                print(f"    node:execute {' '.join(rendered)}")
            else:
                print(f"    copy node:{planmod.substitute(cmd.src, mapping)} "
                      f"{planmod.substitute(cmd.dst_template, mapping)}")
    return 0


def broker_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser("broker", description="Scatter a plan across gateways.")
    parser.add_argument("--plan", required=True)
    parser.add_argument("--endpoints", required=True, help="TOML file of [[endpoint]] tables")
    parser.add_argument("--programs", default=".", help="directory holding copy sources")
    parser.add_argument("--out-dir", default="broker-out")
    parser.add_argument("--report", default=None, help="CSV completion report path")
    parser.add_argument("--timeout", type=float, default=300.0)
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    with open(args.plan, encoding="utf-8") as fh:
        doc = planmod.parse_plan(fh.read())
    broker = Broker(doc, planmod.expand(doc), load_endpoints(args.endpoints),
                    plan_dir=args.programs, out_dir=args.out_dir,
                    report_path=args.report)
    outcome = broker.run(timeout_s=args.timeout)
    for name, count in sorted(outcome.endpoint_counts.items()):
        print(f"endpoint {name}: {count} jobs")
    print(f"completed {len(outcome.completed)}, failed {len(outcome.failed)}")
    for jobname, reason in sorted(outcome.failed.items()):
        print(f"  failed {jobname}: {reason}")
    return 0 if not outcome.failed else 1


def harness_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser("harness", description="Run the pi benchmark.")
    parser.add_argument("--digits", default="1000,2200",
                        help="comma-separated digit totals")
    parser.add_argument("--executors", default="1,6",
                        help="comma-separated executor counts")
    parser.add_argument("--slice", type=int, default=50)
    parser.add_argument("--work-scale", type=int, default=25)
    parser.add_argument("--in-process", action="store_true",
                        help="threaded executors instead of separate processes")
    parser.add_argument("--workdir", default="benchmark-work")
    parser.add_argument("--log-level", default="warning")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    rows = run_benchmark(
        args.workdir,
        digit_totals=tuple(int(d) for d in args.digits.split(",")),
        executor_counts=tuple(int(c) for c in args.executors.split(",")),
        slice_size=args.slice, work_scale=args.work_scale,
        use_processes=not args.in_process,
    )
    print(format_benchmark(rows))
    return 0 if all(row.digits_ok for row in rows) else 1


def owner_demo_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser("owner-demo", description="Run the demo applications.")
    parser.add_argument("--manager", required=True, help="manager host:port")
    parser.add_argument("--pi-digits", type=int, default=0,
                        help="also compute this many digits of pi")
    parser.add_argument("--log-level", default="warning")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    products = run_multiplier_demo(args.manager)
    print("multiplier demo:", json.dumps(products))
    if args.pi_digits:
        digits = run_pi_application(args.manager, args.pi_digits)
        print(f"pi ({args.pi_digits} digits): 3.{digits}")
    return 0


_COMMANDS = {
    "manager": manager_main,
    "executor": executor_main,
    "gateway": gateway_main,
    "plan": plan_main,
    "broker": broker_main,
    "harness": harness_main,
    "owner-demo": owner_demo_main,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help"):
        names = ", ".join(sorted(_COMMANDS))
        print(f"usage: python -m deskgrid {{{names}}} [options]")
        return 0 if argv else 2
    command = _COMMANDS.get(argv[0])
    if command is None:
        print(f"unknown command {argv[0]!r}", file=sys.stderr)
        return 2
    return command(argv[1:])


if __name__ == "__main__":
    sys.exit(main())
