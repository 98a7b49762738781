"""Command-line front end: ``mcrv run|verify|sim|trace``.

Exit codes: 0 ok, 1 violation, 2 usage or configuration error, 3 replay
mismatch (run mode) or no trace-compatible execution (verify), 4 limits
exceeded.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from mcrv import explorer
from mcrv.ir import ParseError, parse_program
from mcrv.memory import FaultKind
from mcrv.replay import causal_order
from mcrv.sim import DEFAULT_HISTORY, SimShell, Simulator
from mcrv.standin.config import PASSTHROUGH, REPLAY, VIRTUAL, OsConfig, parse_socket_script
from mcrv.standin.errors import OsInitError
from mcrv.tracefile import TraceError, load_trace

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_LIMIT = 4

MODE_MATRIX = "passthrough OS mode can only be used in the run mode of the checker"

# config-file keys and the argparse destinations they fill
CONFIG_KEYS = {
    "os": "os",
    "trace": "trace",
    "matching": "matching",
    "seed": "seed",
    "max-states": "max_states",
    "max-depth": "max_depth",
    "max-steps": "max_steps",
    "file": "file",
    "socket-script": "socket_script",
    "report": "report",
    "counterexample": "counterexample",
    "root": "root",
    "history": "history",
}
INT_KEYS = {"seed", "max_states", "max_depth", "max_steps", "history"}
DEFAULTS = {
    "os": VIRTUAL,
    "seed": 0,
    "max_states": explorer.DEFAULT_MAX_STATES,
    "max_depth": explorer.DEFAULT_MAX_DEPTH,
    "history": DEFAULT_HISTORY,
    "counterexample": "counterexample.cex",
}


class UsageError(Exception):
    pass


def _engine_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("program", help="guest IR source file (.mir)")
    p.add_argument("--os", choices=(VIRTUAL, PASSTHROUGH, REPLAY), help="OS mode (default virtual)")
    p.add_argument("--trace", help="trace file written by passthrough or read by replay")
    p.add_argument("--matching", choices=("exact", "causal"), help="replay matching (default exact)")
    p.add_argument(
        "--file", action="append", metavar="GUEST=HOST", help="preload a host file into the virtual file system"
    )
    p.add_argument("--socket-script", help="scripted peers for virtual sockets")
    p.add_argument("--root", help="host directory that relative guest paths resolve against (passthrough)")
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--report", help="write a key=value report to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcrv", description="verification VM with a stand-in OS")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="explore a single execution")
    _engine_options(p)
    p.add_argument("--seed", type=int, help="seed for scheduling and choose (default 0)")
    p.add_argument("--max-steps", type=int, help="instruction budget")
    p.add_argument("--counterexample", help="where to save the picks of a violating run")

    p = sub.add_parser("verify", help="explore all executions")
    _engine_options(p)
    p.add_argument("--max-states", type=int, help=f"default {explorer.DEFAULT_MAX_STATES}")
    p.add_argument("--max-depth", type=int, help=f"default {explorer.DEFAULT_MAX_DEPTH}")
    p.add_argument("--max-steps", type=int, help="instruction budget between two choices")
    p.add_argument("--counterexample", help="where to save the counterexample picks")

    p = sub.add_parser("sim", help="interactive reversible simulator")
    _engine_options(p)
    p.add_argument("--history", type=int, help=f"states kept for 'back' (default {DEFAULT_HISTORY})")
    p.add_argument("--follow", help="apply a counterexample file before the prompt")

    p = sub.add_parser("trace", help="inspect trace files")
    tsub = p.add_subparsers(dest="trace_command", required=True)
    t = tsub.add_parser("show", help="print every record")
    t.add_argument("path")
    t = tsub.add_parser("order", help="print the causal order as a DOT graph")
    t.add_argument("path")
    t.add_argument("--full", action="store_true", help="all edges instead of the Hasse diagram")
    return parser


def read_config(path: str) -> dict:
    values: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (x.strip() for x in line.partition("="))
        if not sep or key not in CONFIG_KEYS:
            raise UsageError(f"config {path} line {lineno}: unknown setting {key!r}")
        dest = CONFIG_KEYS[key]
        if dest in INT_KEYS:
            try:
                value = int(value, 0)
            except ValueError:
                raise UsageError(f"config {path} line {lineno}: {key} must be an integer") from None
        if dest == "file":
            values.setdefault("file", []).append(value)
        else:
            values[dest] = value
    return values


def merge_config(args: argparse.Namespace) -> argparse.Namespace:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for dest in set(CONFIG_KEYS.values()):
        if not hasattr(args, dest):
            if dest in cfg:
                raise UsageError(f"setting {dest.replace('_', '-')} does not apply to '{args.command}'")
            continue
        if getattr(args, dest) is None:
            setattr(args, dest, cfg.get(dest, DEFAULTS.get(dest)))
    return args


def check_flags(args: argparse.Namespace) -> None:
    """Reject flag combinations that the mode matrix or the modes forbid."""
    mode = args.os
    if mode not in (VIRTUAL, PASSTHROUGH, REPLAY):
        raise UsageError(f"unknown OS mode {mode!r}")
    if mode == PASSTHROUGH and args.command == "verify":
        raise UsageError(f"verify with --os passthrough: {MODE_MATRIX}")
    if mode == PASSTHROUGH and args.command == "sim":
        raise UsageError(f"sim with --os passthrough: {MODE_MATRIX} (stepping back needs snapshots)")
    if mode in (PASSTHROUGH, REPLAY) and not args.trace:
        raise UsageError(f"--os {mode} requires --trace")
    if mode == VIRTUAL and args.trace:
        raise UsageError("--trace conflicts with --os virtual (virtual mode neither records nor replays)")
    if args.matching and mode != REPLAY:
        raise UsageError(f"--matching conflicts with --os {mode} (it only applies to replay)")
    if mode != VIRTUAL and args.file:
        raise UsageError(f"--file conflicts with --os {mode} (preloading only applies to the virtual file system)")
    if mode != VIRTUAL and args.socket_script:
        raise UsageError(f"--socket-script conflicts with --os {mode} (scripted peers are virtual)")
    if mode != PASSTHROUGH and args.root:
        raise UsageError(f"--root conflicts with --os {mode} (only passthrough touches the host)")
    for name in ("max_states", "max_depth", "max_steps", "history"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")


def os_config(args: argparse.Namespace) -> OsConfig:
    preload = []
    for spec in args.file or ():
        guest, sep, host = spec.partition("=")
        if not sep or not guest or not host:
            raise UsageError(f"--file expects GUEST=HOST, got {spec!r}")
        try:
            preload.append((guest, Path(host).read_bytes()))
        except OSError as exc:
            raise UsageError(f"--file {spec}: {exc.strerror}") from None
    sockets = ()
    if args.socket_script:
        try:
            sockets = parse_socket_script(Path(args.socket_script).read_text())
        except OSError as exc:
            raise UsageError(f"--socket-script {args.socket_script}: {exc.strerror}") from None
    return OsConfig(
        mode=args.os,
        vfs_preload=tuple(preload),
        trace_path=args.trace,
        matching=args.matching or "exact",
        sockets=sockets,
    )


def load_program(path: str):
    try:
        source = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read program {path}: {exc.strerror}") from None
    try:
        return parse_program(source)
    except ParseError as exc:
        raise UsageError(f"{path}:{exc}") from None


def exit_code(result: explorer.ExplorationResult, command: str) -> int:
    if result.verdict == explorer.OK:
        return EXIT_OK
    if result.verdict == explorer.LIMIT:
        return EXIT_LIMIT
    if result.verdict == explorer.INCOMPATIBLE:
        return EXIT_MISMATCH
    if command == "run" and result.fault.kind == FaultKind.REPLAY_MISMATCH:
        return EXIT_MISMATCH
    return EXIT_VIOLATION


def print_result(result: explorer.ExplorationResult, args, out) -> None:
    print(f"verdict: {result.verdict}", file=out)
    if args.command == "run":
        print(f"steps: {result.states}  choices: {result.transitions}", file=out)
        if result.exit_code is not None:
            print(f"exit code: {result.exit_code}", file=out)
    else:
        print(f"states: {result.states}  transitions: {result.transitions}", file=out)
    if result.limit:
        print(f"limit reached: {result.limit} (exploration incomplete)", file=out)
    if result.fault:
        print(f"fault: {result.fault}", file=out)
    if result.trace_total is not None:
        what = "recorded" if args.os == PASSTHROUGH else "consumed"
        print(f"trace: {result.trace_consumed}/{result.trace_total} records {what}", file=out)
    for w in result.warnings:
        print(f"warning: {w}", file=out)
    if result.counterexample is not None:
        explorer.save_counterexample(args.counterexample, result.counterexample)
        print(f"counterexample: {len(result.counterexample)} picks saved to {args.counterexample}", file=out)


def cmd_engine(args, out) -> int:
    program = load_program(args.program)
    config = os_config(args)
    backend = None
    if args.command == "run" and args.os == PASSTHROUGH:
        from mcrv.passthrough import RealHostBackend

        try:
            backend = RealHostBackend(args.root)
        except OSError as exc:
            raise UsageError(f"--root {args.root}: {exc.strerror}") from None
    if args.command == "run":
        kwargs = {"max_steps": args.max_steps} if args.max_steps else {}
        result = explorer.run(program, config, args.seed, backend, **kwargs)
        if result.output:
            out.write(result.output.decode("utf-8", "replace"))
            if not result.output.endswith(b"\n"):
                out.write("\n")
    else:
        kwargs = {"max_steps": args.max_steps} if args.max_steps else {}
        result = explorer.verify(program, config, args.max_states, args.max_depth, **kwargs)
    print_result(result, args, out)
    if args.report:
        Path(args.report).write_text(result.report())
    return exit_code(result, args.command)


def cmd_sim(args, out) -> int:
    program = load_program(args.program)
    sim = Simulator(program, os_config(args), args.history)
    try:
        shell = SimShell(sim, stdin=sys.stdin, stdout=out)
        if args.follow:
            shell.onecmd(f"follow {args.follow}")
        shell.cmdloop()
    finally:
        sim.close()
    return EXIT_OK


def cmd_trace(args, out) -> int:
    trace = load_trace(args.path)
    if args.trace_command == "show":
        print(f"# trace version {trace.version}, {len(trace)} records, table {trace.table_hash.hex()[:16]}", file=out)
        for rec in trace.records:
            print(rec.render(), file=out)
        return EXIT_OK
    order = causal_order(trace)
    edges = sorted(order.edges) if args.full else order.reduction()
    print("digraph causal {", file=out)
    for rec in trace.records:
        label = rec.render().replace("\\", "\\\\").replace('"', '\\"')
        print(f'  {rec.seq} [label="{label}"];', file=out)
    for i, j in edges:
        print(f"  {i} -> {j};", file=out)
    print("}", file=out)
    return EXIT_OK


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == "trace":
            return cmd_trace(args, out)
        merge_config(args)
        check_flags(args)
        if args.command == "sim":
            return cmd_sim(args, out)
        return cmd_engine(args, out)
    except UsageError as exc:
        print(f"mcrv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OsInitError, TraceError) as exc:
        print(f"mcrv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
