"""Checker engines: a single seeded run, and exhaustive verification.

``verify`` is a depth-first search over choice points.  At every choice
the state is snapshotted and each alternative is tried in ascending
order; states are deduplicated by :func:`mcrv.vm.state_digest`.  Failed
assumptions and replay mismatches abandon the branch; any other fault
stops the search with a counterexample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from mcrv import vm
from mcrv.ir import GuestProgram
from mcrv.memory import MASK64, FaultKind
from mcrv.replay import ReplayCursor
from mcrv.standin.config import REPLAY, RUN, VERIFY, OsConfig
from mcrv.standin.kernel import Kernel

OK = "ok"
VIOLATION = "violation"
INCOMPATIBLE = "trace-incompatible-everywhere"
LIMIT = "limit-exceeded"

DEFAULT_MAX_STATES = 100_000
DEFAULT_MAX_DEPTH = 10_000
DEFAULT_MAX_STEPS = 10_000_000
SEGMENT_STEPS = 1_000_000

GOLDEN = 0x9E3779B97F4A7C15
PRUNED_KINDS = frozenset({FaultKind.ASSUME, FaultKind.REPLAY_MISMATCH})


def splitmix64(x: int) -> int:
    """One output of the splitmix64 generator whose state is ``x``."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def seeded_pick(seed: int, step: int, arity: int) -> int:
    """Run-mode choice resolution: splitmix64 over seed and step count."""
    return splitmix64((seed + step * GOLDEN) & MASK64) % arity


Counterexample = list[tuple[int, vm.ChoiceRequest]]


@dataclass
class ExplorationResult:
    verdict: str
    states: int = 0
    transitions: int = 0
    fault: vm.Fault | None = None
    counterexample: Counterexample | None = None
    warnings: list[str] = field(default_factory=list)
    trace_consumed: int | None = None
    trace_total: int | None = None
    syscalls: list[tuple[int, int, int]] = field(default_factory=list)
    final_digest: bytes | None = None
    exit_code: int | None = None
    output: bytes = b""
    limit: str | None = None

    @property
    def fault_kind(self) -> FaultKind | None:
        return self.fault.kind if self.fault else None

    def report(self) -> str:
        """Machine-readable ``key=value`` lines; field names are stable."""
        fields = [
            ("verdict", self.verdict),
            ("states", self.states),
            ("transitions", self.transitions),
            ("fault-kind", self.fault.kind.value if self.fault else ""),
            ("fault-location", str(self.fault.location) if self.fault else ""),
            ("trace-consumed", "" if self.trace_consumed is None else self.trace_consumed),
            ("trace-total", "" if self.trace_total is None else self.trace_total),
        ]
        return "".join(f"{k}={v}\n" for k, v in fields)


def check_unconsumed(cursor: ReplayCursor, s: vm.MachineState | None = None) -> list[str]:
    """Warnings for trace records the guest never issued before exiting."""
    left = cursor.unconsumed()
    if not left:
        return []
    return [f"{len(left)} of {len(cursor.trace)} trace records not consumed: seq {', '.join(map(str, left))}"]


def _cursor(s: vm.MachineState) -> ReplayCursor | None:
    k = s.kernel
    if k.mode != REPLAY:
        return None
    return ReplayCursor(k.trace, k.config.matching, k.order, s.os.consumed)


# -- run mode ------------------------------------------------------------------


def run(
    program: GuestProgram,
    os: OsConfig,
    seed: int = 0,
    backend=None,
    max_steps: int = DEFAULT_MAX_STEPS,
    kernel: Kernel | None = None,
) -> ExplorationResult:
    """Explore exactly one execution, resolving choices with the seeded generator."""
    s = vm.boot(program, os, backend, RUN, kernel)
    picks: Counterexample = []
    syscalls = []
    try:
        while s.status in (vm.RUNNING, vm.CHOICE) and s.steps < max_steps:
            if s.status == vm.CHOICE:
                req = s.pending
                pick = seeded_pick(seed, s.steps, req.arity)
                picks.append((pick, req))
                vm.resolve_choice(s, pick)
                continue
            if vm.step(s).event == vm.EV_SYSCALL:
                syscalls.append(s.last_syscall)
        result = ExplorationResult(OK, states=s.steps, transitions=len(picks), syscalls=syscalls)
        if s.status == vm.EXITED:
            result.exit_code = s.exit_code
        elif s.status == vm.FAULTED:
            result.verdict = VIOLATION
            result.fault = s.fault
            result.counterexample = picks
        else:
            result.verdict = LIMIT
            result.limit = "max-steps"
        cursor = _cursor(s)
        if cursor is not None:
            result.trace_consumed = cursor.consumed_count
            result.trace_total = len(cursor.trace)
            if s.status == vm.EXITED:
                result.warnings = check_unconsumed(cursor, s)
        if s.kernel.writer is not None:
            result.trace_consumed = result.trace_total = s.kernel.writer.count
        result.output = vm.guest_output(s)
        if s.kernel.mode != "passthrough":
            result.final_digest = vm.state_digest(s)
        return result
    finally:
        s.close()


# -- verify mode -----------------------------------------------------------------


def _settle(s: vm.MachineState, budget: int) -> bool:
    """Step until a choice or a final state; False if the budget ran out."""
    for _ in range(budget):
        if s.status != vm.RUNNING:
            return True
        vm.step(s)
    return s.status != vm.RUNNING


def verify(
    program: GuestProgram,
    os: OsConfig,
    max_states: int = DEFAULT_MAX_STATES,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_steps: int = SEGMENT_STEPS,
) -> ExplorationResult:
    """Exhaustively explore all choice resolutions up to the limits.

    States counted are the initial state, every choice state and every
    final state that was not pruned, each once per distinct digest.
    """
    s0 = vm.boot(program, os, engine=VERIFY)
    ctx = s0.ctx
    try:
        seen = {vm.state_digest(s0)}
        result = ExplorationResult(OK)
        reached_exit = False
        consumed_best = 0
        # frames: [snapshot, request, next pick, path]
        stack: list[list] = []

        def visit(s: vm.MachineState, path: Counterexample) -> bool:
            """Account for a settled state; True when the search must stop."""
            nonlocal reached_exit, consumed_best
            if s.status == vm.FAULTED and s.fault.kind in PRUNED_KINDS:
                return False
            d = vm.state_digest(s)
            if d in seen:
                return False
            seen.add(d)
            if len(seen) > max_states:
                result.limit = "max-states"
                return True
            if s.status == vm.FAULTED:
                result.verdict = VIOLATION
                result.fault = s.fault
                result.counterexample = list(path)
                result.final_digest = d
                return True
            if s.status == vm.EXITED:
                reached_exit = True
                cursor = _cursor(s)
                if cursor is not None:
                    consumed_best = max(consumed_best, cursor.consumed_count)
                    for w in check_unconsumed(cursor, s):
                        if w not in result.warnings:
                            result.warnings.append(w)
                return False
            if len(path) >= max_depth:
                result.limit = result.limit or "max-depth"
                return False
            stack.append([vm.snapshot(s), s.pending, 0, path])
            return False

        s = vm.clone(s0)
        stop = False
        if not _settle(s, max_steps):
            result.limit = "max-steps"
        else:
            stop = visit(s, [])
        while stack and not stop:
            top = stack[-1]
            snap, req, pick, path = top
            if pick >= req.arity:
                stack.pop()
                continue
            top[2] = pick + 1
            s = vm.restore(snap, ctx)
            vm.resolve_choice(s, pick)
            result.transitions += 1
            if not _settle(s, max_steps):
                result.limit = result.limit or "max-steps"
                continue
            stop = visit(s, path + [(pick, req)])
        result.states = min(len(seen), max_states)
        if result.verdict != VIOLATION:
            if result.limit:
                result.verdict = LIMIT
            elif ctx.kernel.mode == REPLAY and not reached_exit:
                result.verdict = INCOMPATIBLE
        if ctx.kernel.mode == REPLAY:
            result.trace_total = len(ctx.kernel.trace)
            result.trace_consumed = consumed_best
        return result
    finally:
        ctx.kernel.close()


# -- counterexamples -------------------------------------------------------------


def replay_counterexample(
    program: GuestProgram, os: OsConfig, picks: list[int], max_steps: int = SEGMENT_STEPS
) -> vm.MachineState:
    """Drive a fresh VM through ``picks``; returns the final state reached."""
    s = vm.boot(program, os, engine=VERIFY)
    it = iter(picks)
    for _ in range(max_steps):
        if s.status == vm.CHOICE:
            pick = next(it, None)
            if pick is None:
                break
            vm.resolve_choice(s, pick)
        elif s.status == vm.RUNNING:
            vm.step(s)
        else:
            break
    return s


def format_counterexample(cex: Counterexample) -> str:
    lines = ["# picks from the initial state: pick N origin arity [thread T]"]
    for pick, req in cex:
        line = f"pick {pick} {req.origin} {req.arity}"
        if req.thread is not None:
            line += f" thread {req.thread}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def save_counterexample(path: str | Path, cex: Counterexample) -> None:
    Path(path).write_text(format_counterexample(cex))


def parse_counterexample(text: str) -> list[int]:
    picks = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "pick" or len(parts) < 2 or not parts[1].isdigit():
            raise ValueError(f"counterexample line {lineno}: expected 'pick N ...'")
        picks.append(int(parts[1]))
    return picks


def load_counterexample(path: str | Path) -> list[int]:
    return parse_counterexample(Path(path).read_text())
