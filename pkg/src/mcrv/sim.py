"""Interactive simulator with reverse stepping.

Every executed step first pushes a snapshot of the state onto a bounded
history, so ``back`` is a plain restore.  Passthrough mode is refused:
host effects cannot be stepped backwards over.
"""

from __future__ import annotations

import cmd
from collections import deque
from pathlib import Path

from mcrv import vm
from mcrv.explorer import load_counterexample
from mcrv.ir import GuestProgram
from mcrv.replay import ReplayCursor
from mcrv.standin.config import PASSTHROUGH, REPLAY, VERIFY, OsConfig
from mcrv.standin.errors import OsInitError
from mcrv.standin.table import syscall_name

DEFAULT_HISTORY = 10_000


class Simulator:
    def __init__(self, program: GuestProgram, config: OsConfig, history: int = DEFAULT_HISTORY):
        if config.mode == PASSTHROUGH:
            raise OsInitError("the simulator cannot run in passthrough mode: stepping back needs snapshots")
        if history < 1:
            raise ValueError("history must hold at least one state")
        # the verify engine setting only affects validation; choices stay manual
        self.state = vm.boot(program, config, engine=VERIFY)
        self.history: deque[bytes] = deque(maxlen=history)
        self.executed = 0

    @property
    def at_choice(self) -> bool:
        return self.state.status == vm.CHOICE

    @property
    def finished(self) -> bool:
        return self.state.status in (vm.EXITED, vm.FAULTED)

    def digest(self) -> bytes:
        return vm.state_digest(self.state)

    # -- movement ------------------------------------------------------------

    def step(self) -> str:
        """Execute one instruction; at a choice, take alternative 0."""
        if self.finished:
            return "program has finished; use back"
        if self.at_choice:
            return self.pick(0)
        self.history.append(vm.snapshot(self.state))
        self.executed += 1
        out = vm.step(self.state)
        return self._event(out.event)

    def back(self) -> str:
        if not self.history:
            return "at the oldest retained state; nothing to undo"
        self.state = vm.restore(self.history.pop(), self.state)
        self.executed -= 1
        return self.where()

    def pick(self, n: int) -> str:
        if not self.at_choice:
            return "not at a choice point"
        req = self.state.pending
        if not 0 <= n < req.arity:
            return f"pick must be in 0..{req.arity - 1}"
        self.history.append(vm.snapshot(self.state))
        self.executed += 1
        vm.resolve_choice(self.state, n)
        return f"picked {n} of {req.arity} ({req.origin}); " + self.where()

    def _run_until(self, want_syscall: bool, limit: int = 1_000_000) -> str:
        for _ in range(limit):
            if self.finished or self.at_choice:
                return self.where()
            self.history.append(vm.snapshot(self.state))
            self.executed += 1
            out = vm.step(self.state)
            if want_syscall and out.event == vm.EV_SYSCALL:
                return self._event(out.event)
        return f"stopped after {limit} steps; " + self.where()

    def run_to_syscall(self) -> str:
        return self._run_until(True)

    def run_to_choice(self) -> str:
        return self._run_until(False)

    def follow(self, picks: list[int]) -> str:
        """Apply ``picks`` at successive choices, then run to the end."""
        for i, p in enumerate(picks):
            self.run_to_choice()
            if not self.at_choice:
                return f"program stopped before pick {i}; " + self.where()
            msg = self.pick(p)
            if msg.startswith("pick must"):
                return f"pick {i}: {msg}"
        return self.run_to_choice()

    # -- inspection ----------------------------------------------------------

    def _event(self, event: str) -> str:
        if event == vm.EV_SYSCALL and self.state.last_syscall:
            num, ret, err = self.state.last_syscall
            text = f"{syscall_name(num)} returned {ret}" + (f" (errno {err})" if err else "")
            return text + "; " + self.where()
        return self.where()

    def where(self) -> str:
        s = self.state
        if s.status == vm.EXITED:
            return f"exited with code {s.exit_code}"
        if s.status == vm.FAULTED:
            return f"fault: {s.fault}"
        if s.status == vm.CHOICE:
            req = s.pending
            who = f" thread {req.thread}" if req.thread is not None else f" runnable {s.runnable()}"
            return f"at {req.origin} choice of arity {req.arity}{who}"
        tid = s.current
        if tid is None:
            return "between threads (scheduler decides next)"
        if s.threads[tid].state != vm.RUNNABLE:
            return f"thread {tid} is not runnable"
        return f"thread {tid} at {s.location(tid)}: {s.instruction(tid)}"

    def regs(self) -> str:
        lines = []
        for tid, t in enumerate(self.state.threads):
            state = ("runnable", "blocked", "done")[t.state]
            lines.append(f"thread {tid} ({state})")
            if t.frames:
                f = t.frames[-1]
                vals = ", ".join(f"r{i}={'?' if v is None else v}" for i, v in enumerate(f.regs))
                lines.append(f"  {f.func}:{f.block}:{f.index}  {vals}")
        return "\n".join(lines)

    def mem(self, obj: int, off: int, length: int) -> str:
        o = self.state.heap.objects.get(obj)
        if o is None:
            return f"no object {obj}"
        data = bytes(o.data[off : off + length])
        return f"object {obj} size {o.size} [{off}:{off + len(data)}] {data.hex(' ')}  {data!r}"

    def trace_pos(self) -> str:
        k = self.state.kernel
        if k.mode != REPLAY:
            return "no trace: not in replay mode"
        cur = ReplayCursor(k.trace, k.config.matching, k.order, self.state.os.consumed)
        nxt = ", ".join(k.trace.records[i].render() for i in cur.candidates()) or "none"
        return f"consumed {cur.consumed_count}/{len(k.trace)}; next allowed: {nxt}"

    def close(self) -> None:
        self.state.close()


class SimShell(cmd.Cmd):
    prompt = "(mcrv) "
    intro = "reversible simulator; 'help' lists commands"

    def __init__(self, sim: Simulator, stdin=None, stdout=None):
        super().__init__(stdin=stdin, stdout=stdout)
        if stdin is not None:
            self.use_rawinput = False
        self.sim = sim

    def say(self, text: str) -> None:
        self.stdout.write(text + "\n")

    def precmd(self, line: str) -> str:
        head, _, rest = line.strip().partition(" ")
        return head.replace("-", "_") + (" " + rest if rest else "")

    def emptyline(self) -> bool:
        return False

    def default(self, line: str) -> None:
        self.say(f"unknown command {line.split()[0]!r}")

    def do_step(self, arg):
        """step [N]: execute N instructions (a choice takes alternative 0)"""
        for _ in range(int(arg or 1)):
            msg = self.sim.step()
        self.say(msg)

    def do_back(self, arg):
        """back [N]: undo N steps"""
        for _ in range(int(arg or 1)):
            msg = self.sim.back()
        self.say(msg)

    def do_run_to_syscall(self, arg):
        """run-to-syscall: run until a syscall completes or a choice is due"""
        self.say(self.sim.run_to_syscall())

    def do_run_to_choice(self, arg):
        """run-to-choice: run until the next choice point"""
        self.say(self.sim.run_to_choice())

    def do_pick(self, arg):
        """pick N: resolve the pending choice with alternative N"""
        if not arg.strip().isdigit():
            self.say("usage: pick N")
            return
        self.say(self.sim.pick(int(arg)))

    def do_regs(self, arg):
        """regs: registers of the top frame of every thread"""
        self.say(self.sim.regs())

    def do_mem(self, arg):
        """mem OBJ OFF LEN: dump heap bytes"""
        try:
            obj, off, length = (int(x, 0) for x in arg.split())
        except ValueError:
            self.say("usage: mem OBJ OFF LEN")
            return
        self.say(self.sim.mem(obj, off, length))

    def do_trace_pos(self, arg):
        """trace-pos: replay position and the records allowed next"""
        self.say(self.sim.trace_pos())

    def do_follow(self, arg):
        """follow FILE: apply the picks of a counterexample file"""
        try:
            picks = load_counterexample(Path(arg.strip()))
        except (OSError, ValueError) as exc:
            self.say(f"cannot read counterexample: {exc}")
            return
        self.say(self.sim.follow(picks))

    def do_where(self, arg):
        """where: current position"""
        self.say(self.sim.where())

    def do_quit(self, arg):
        """quit: leave the simulator"""
        return True

    do_EOF = do_quit
