"""Deterministic interpreter for guest programs.

The machine state is mutated in place by :func:`step` and
:func:`resolve_choice`; branching exploration copies states through
:func:`snapshot` / :func:`restore`.  Guest threads are cooperative: the
running thread keeps the CPU until it reaches a preemption point, where a
scheduler choice is offered if more than one thread could run.

Preemption points are ``yield``, ``spawn``, ``syscall``, a ``load`` or
``store`` on a heap object some other thread has touched or that has
escaped to other threads, and the moment a thread exits or blocks.
"""

from __future__ import annotations

import hashlib
import marshal
import struct
from dataclasses import dataclass
from functools import cached_property

from mcrv import ir
from mcrv.ir import Data, GuestProgram, Imm, Instruction, Reg
from mcrv.memory import (
    MASK64,
    FaultKind,
    GuestFault,
    Heap,
    HeapObject,
    Ptr,
    Value,
    memory_error,
    wrap64,
)
from mcrv.replay import Mismatch
from mcrv.standin.config import PASSTHROUGH, RUN, OsConfig
from mcrv.standin.errors import Blocked, Retry
from mcrv.standin.kernel import Kernel, OsState

RUNNING = "running"
EXITED = "exited"
FAULTED = "faulted"
CHOICE = "blocked-on-choice"
_STATUS_CODES = (RUNNING, EXITED, FAULTED, CHOICE)

GUEST = "guest-choose"
SCHEDULER = "scheduler"
_ORIGINS = (GUEST, SCHEDULER)

RUNNABLE = 0
BLOCKED = 1
DONE = 2

PLAIN = "plain"
EV_CHOICE = "choice"
EV_SYSCALL = "syscall-entered"
EV_EXITED = "exited"
EV_FAULTED = "faulted"

MAX_FRAMES = 1024
ESCAPED = -1  # pseudo thread id in a touched set: reachable from other threads

SNAPSHOT_MAGIC = b"MCVS"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sH32s")
_FAULT_KINDS = tuple(FaultKind)


class VmError(Exception):
    """Misuse of the VM API (not a guest fault)."""


class ChoiceOutOfRange(VmError):
    pass


class SnapshotForbidden(VmError):
    pass


class DeserializeError(VmError):
    pass


@dataclass(frozen=True)
class Location:
    function: str
    block: str
    index: int

    def __str__(self) -> str:
        return f"{self.function}:{self.block}:{self.index}"


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    location: Location
    thread: int
    message: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value} at {self.location} (thread {self.thread}): {self.message}"


@dataclass(frozen=True)
class ChoiceRequest:
    arity: int
    origin: str
    thread: int | None = None


@dataclass
class Frame:
    func: str
    block: str
    index: int
    regs: list
    ret: int | None = None  # caller register receiving the return value


@dataclass
class Thread:
    frames: list[Frame]
    state: int = RUNNABLE
    wait: tuple | None = None
    result: Value | None = None
    granted: bool = False  # may execute a preemption point without a new choice


@dataclass
class StepOutcome:
    next: "MachineState"
    event: str
    choice: ChoiceRequest | None = None


class VmContext:
    """Immutable per-run data shared by every state of one exploration."""

    def __init__(self, program: GuestProgram, kernel: Kernel):
        self.program = program
        self.kernel = kernel
        self.fnames = sorted(program.functions)
        self.findex = {n: i for i, n in enumerate(self.fnames)}
        self.labels = {n: [b.label for b in f.blocks] for n, f in program.functions.items()}
        self.lindex = {n: {lab: i for i, lab in enumerate(labs)} for n, labs in self.labels.items()}
        self.data_ids = {name: i + 1 for i, (name, _) in enumerate(program.data)}

    @cached_property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(ir.print_program(self.program).encode()).digest()


class MachineState:
    def __init__(self, ctx: VmContext):
        self.ctx = ctx
        self.threads: list[Thread] = []
        self.heap = Heap()
        self.os = OsState()
        self.status = RUNNING
        self.exit_code: int | None = None
        self.fault: Fault | None = None
        self.pending: ChoiceRequest | None = None
        self.current: int | None = 0
        self.steps = 0
        # (number, retval, errno) of the most recent completed syscall; an
        # observation for logs, not part of the state
        self.last_syscall: tuple[int, int, int] | None = None

    @property
    def program(self) -> GuestProgram:
        return self.ctx.program

    @property
    def kernel(self) -> Kernel:
        return self.ctx.kernel

    def runnable(self) -> list[int]:
        return [i for i, t in enumerate(self.threads) if t.state == RUNNABLE]

    def location(self, tid: int) -> Location:
        frame = self.threads[tid].frames[-1]
        return Location(frame.func, frame.block, frame.index)

    def instruction(self, tid: int) -> Instruction:
        frame = self.threads[tid].frames[-1]
        return self.program.functions[frame.func].block_map[frame.block][frame.index]

    def close(self) -> None:
        self.kernel.close()

    def __repr__(self) -> str:
        return f"<MachineState {self.status} steps={self.steps} threads={len(self.threads)}>"


# -- boot ----------------------------------------------------------------------


def boot(
    program: GuestProgram,
    os: OsConfig,
    backend=None,
    engine: str = RUN,
    kernel: Kernel | None = None,
) -> MachineState:
    """Initial state: thread 0 at the entry function, data literals on the heap."""
    kernel = kernel or Kernel(os, backend, engine)
    s = MachineState(VmContext(program, kernel))
    for _, data in program.data:
        ptr = s.heap.alloc(len(data))
        s.heap.objects[ptr.obj].data[:] = data
    entry = program.functions[program.entry]
    s.threads.append(Thread([Frame(entry.name, entry.entry_block, 0, [None] * entry.regs)]))
    s.os = kernel.initial_state()
    return s


# -- execution -------------------------------------------------------------------


def _preempts(s: MachineState, tid: int, ins: Instruction) -> bool:
    op = ins.opcode
    if op in ("yield", "spawn", "syscall"):
        return True
    if op in ("load", "store"):
        reg = ins.operands[1] if op == "load" else ins.operands[0]
        ptr = s.threads[tid].frames[-1].regs[reg.index]
        if isinstance(ptr, Ptr):
            obj = s.heap.objects.get(ptr.obj)
            if obj is not None:
                return any(t != tid for t in obj.touched)
    return False


def _choice(s: MachineState, req: ChoiceRequest) -> StepOutcome:
    s.status = CHOICE
    s.pending = req
    return StepOutcome(s, EV_CHOICE, req)


def _fault(s: MachineState, kind: FaultKind, loc: Location, tid: int, message: str) -> StepOutcome:
    s.status = FAULTED
    s.fault = Fault(kind, loc, tid, message)
    return StepOutcome(s, EV_FAULTED)


def step(s: MachineState) -> StepOutcome:
    """Execute one instruction of the scheduled thread, or stop at a choice."""
    if s.status != RUNNING:
        raise VmError(f"step on a state that is {s.status}")
    s.steps += 1
    tid = s.current
    if tid is None or s.threads[tid].state != RUNNABLE:
        runnable = s.runnable()
        if not runnable:
            if all(t.state == DONE for t in s.threads):
                res = s.threads[0].result
                s.status = EXITED
                s.exit_code = res if isinstance(res, int) else 0
                return StepOutcome(s, EV_EXITED)
            blocked = next(i for i, t in enumerate(s.threads) if t.state == BLOCKED)
            waits = ", ".join(
                f"thread {i} on {t.wait[0]} {t.wait[1]}" for i, t in enumerate(s.threads) if t.state == BLOCKED
            )
            return _fault(s, FaultKind.DEADLOCK, s.location(blocked), blocked, f"no runnable thread ({waits})")
        if len(runnable) > 1:
            s.current = None
            return _choice(s, ChoiceRequest(len(runnable), SCHEDULER))
        tid = s.current = runnable[0]
        s.threads[tid].granted = True
    th = s.threads[tid]
    ins = s.instruction(tid)
    if not th.granted and _preempts(s, tid, ins) and len(s.runnable()) > 1:
        s.current = None
        return _choice(s, ChoiceRequest(len(s.runnable()), SCHEDULER))
    th.granted = False
    loc = s.location(tid)
    try:
        return _execute(s, tid, th, ins)
    except GuestFault as exc:
        return _fault(s, exc.kind, loc, tid, exc.message)
    except Mismatch as exc:
        return _fault(s, FaultKind.REPLAY_MISMATCH, loc, tid, exc.diff)


def _val(s: MachineState, frame: Frame, op) -> Value:
    if isinstance(op, Reg):
        v = frame.regs[op.index]
        if v is None:
            raise GuestFault(FaultKind.UNINITIALIZED, f"read of uninitialized register r{op.index}")
        return v
    if isinstance(op, Imm):
        return op.value
    if isinstance(op, Data):
        return Ptr(s.ctx.data_ids[op.name], 0)
    raise AssertionError(op)


def _int(v: Value, what: str) -> int:
    if isinstance(v, Ptr):
        raise memory_error(f"{what}: expected an integer, got pointer {v}")
    return v


def _arith(op: str, a: Value, b: Value) -> Value:
    pa, pb = isinstance(a, Ptr), isinstance(b, Ptr)
    if op == "add":
        if pa and pb:
            raise memory_error("addition of two pointers")
        if pa:
            return Ptr(a.obj, wrap64(a.off + b))
        if pb:
            return Ptr(b.obj, wrap64(b.off + a))
        return wrap64(a + b)
    if op == "sub":
        if pa and pb:
            if a.obj != b.obj:
                raise memory_error(f"difference of pointers into different objects {a}, {b}")
            return wrap64(a.off - b.off)
        if pa:
            return Ptr(a.obj, wrap64(a.off - b))
        if pb:
            raise memory_error("integer minus pointer")
        return wrap64(a - b)
    if op == "mul":
        return wrap64(_int(a, "mul") * _int(b, "mul"))
    if op == "divu":
        x, y = _int(a, "divu") & MASK64, _int(b, "divu") & MASK64
        if y == 0:
            raise GuestFault(FaultKind.DIVISION_BY_ZERO, "divu by zero")
        return wrap64(x // y)
    if op == "cmp-eq":
        return int(a == b)
    if op == "cmp-lt":
        if pa or pb:
            if not (pa and pb) or a.obj != b.obj:
                raise memory_error(f"ordering comparison between unrelated values {a}, {b}")
            return int(a.off < b.off)
        return int(a < b)
    raise AssertionError(op)


def _truthy(v: Value) -> bool:
    return isinstance(v, Ptr) or v != 0


def _escape(heap: Heap, roots) -> None:
    """Mark every object reachable from ``roots`` as visible to other threads."""
    todo = [r.obj for r in roots if isinstance(r, Ptr)]
    while todo:
        obj = heap.objects.get(todo.pop())
        if obj is None or ESCAPED in obj.touched:
            continue
        obj.touched.add(ESCAPED)
        todo.extend(obj.ptrs.values())


def _enter(s: MachineState, fname: str, args: list[Value], ret: int | None) -> Frame:
    fn = s.program.functions[fname]
    regs: list = [None] * fn.regs
    regs[: len(args)] = args
    return Frame(fname, fn.entry_block, 0, regs, ret)


def _execute(s: MachineState, tid: int, th: Thread, ins: Instruction) -> StepOutcome:
    frame = th.frames[-1]
    op = ins.opcode
    ops = ins.operands
    event = PLAIN
    if op == "const" or op == "mov":
        frame.regs[ops[0].index] = _val(s, frame, ops[1])
    elif op in ("add", "sub", "mul", "divu", "cmp-eq", "cmp-lt"):
        frame.regs[ops[0].index] = _arith(op, _val(s, frame, ops[1]), _val(s, frame, ops[2]))
    elif op == "jmp":
        frame.block, frame.index = ops[0].name, 0
        return StepOutcome(s, PLAIN)
    elif op == "br":
        target = ops[1] if _truthy(_val(s, frame, ops[0])) else ops[2]
        frame.block, frame.index = target.name, 0
        return StepOutcome(s, PLAIN)
    elif op == "call":
        if len(th.frames) >= MAX_FRAMES:
            raise memory_error("call stack overflow")
        args = [_val(s, frame, a) for a in ops[2:]]
        frame.index += 1
        th.frames.append(_enter(s, ops[1].name, args, ops[0].index))
        return StepOutcome(s, PLAIN)
    elif op == "ret":
        value = _val(s, frame, ops[0]) if ops else 0
        th.frames.pop()
        if th.frames:
            th.frames[-1].regs[frame.ret] = value
        else:
            th.state = DONE
            th.result = value
            s.current = None
        return StepOutcome(s, PLAIN)
    elif op == "alloc":
        frame.regs[ops[0].index] = s.heap.alloc(_int(_val(s, frame, ops[1]), "alloc size"))
        s.heap.objects[frame.regs[ops[0].index].obj].touched.add(tid)
    elif op == "load":
        ptr = _val(s, frame, ops[1])
        value = s.heap.load(ptr, ops[2].value)
        s.heap.objects[ptr.obj].touched.add(tid)
        frame.regs[ops[0].index] = value
    elif op == "store":
        ptr = _val(s, frame, ops[0])
        value = _val(s, frame, ops[1])
        s.heap.store(ptr, value, ops[2].value)
        obj = s.heap.objects[ptr.obj]
        obj.touched.add(tid)
        if isinstance(value, Ptr) and len(obj.touched) > 1:
            _escape(s.heap, [value])
    elif op == "memcpy":
        dst, src = _val(s, frame, ops[0]), _val(s, frame, ops[1])
        s.heap.memcpy(dst, src, _int(_val(s, frame, ops[2]), "memcpy length"))
        dobj = s.heap.objects[dst.obj]
        dobj.touched.add(tid)
        s.heap.objects[src.obj].touched.add(tid)
        if len(dobj.touched) > 1:
            _escape(s.heap, [Ptr(o, 0) for o in dobj.ptrs.values()])
    elif op == "spawn":
        args = [_val(s, frame, a) for a in ops[2:]]
        _escape(s.heap, args)
        frame.regs[ops[0].index] = len(s.threads)
        s.threads.append(Thread([_enter(s, ops[1].name, args, None)]))
    elif op == "yield":
        pass
    elif op == "choose":
        return _choice(s, ChoiceRequest(ops[1].value, GUEST, tid))
    elif op == "assume":
        if not _truthy(_val(s, frame, ops[0])):
            raise GuestFault(FaultKind.ASSUME, "assumption does not hold")
    elif op == "assert":
        if not _truthy(_val(s, frame, ops[0])):
            raise GuestFault(FaultKind.ASSERTION, f"assertion {ins} failed")
    elif op == "syscall":
        number = ops[1].value
        args = [_val(s, frame, a) for a in ops[2:]]
        try:
            retval, err = s.kernel.dispatch(number, args, s.heap, s.os, tid)
        except Blocked as exc:
            th.state = BLOCKED
            th.wait = exc.resource
            s.current = None
            return StepOutcome(s, PLAIN)
        except Retry:
            s.current = None
            return StepOutcome(s, PLAIN)
        frame.regs[ops[0].index] = -err if err else retval
        s.last_syscall = (number, retval, err)
        _wake(s)
        event = EV_SYSCALL
    elif op == "exit":
        s.status = EXITED
        s.exit_code = _int(_val(s, frame, ops[0]), "exit code")
        return StepOutcome(s, EV_EXITED)
    else:  # pragma: no cover - the parser rejects unknown opcodes
        raise AssertionError(op)
    frame.index += 1
    return StepOutcome(s, event)


def _wake(s: MachineState) -> None:
    woken = s.os.vfs.woken
    if not woken:
        return
    for t in s.threads:
        if t.state == BLOCKED and t.wait in woken:
            t.state = RUNNABLE
            t.wait = None
    woken.clear()


def resolve_choice(s: MachineState, pick: int) -> MachineState:
    """Continue along alternative ``pick`` of the pending choice."""
    if s.status != CHOICE or s.pending is None:
        raise VmError(f"resolve_choice on a state that is {s.status}")
    req = s.pending
    if not isinstance(pick, int) or not 0 <= pick < req.arity:
        raise ChoiceOutOfRange(f"pick {pick} outside 0..{req.arity - 1}")
    if req.origin == SCHEDULER:
        tid = s.runnable()[pick]
        s.current = tid
        s.threads[tid].granted = True
    else:
        frame = s.threads[req.thread].frames[-1]
        frame.regs[s.instruction(req.thread).operands[0].index] = pick
        frame.index += 1
        s.threads[req.thread].granted = False
    s.pending = None
    s.status = RUNNING
    return s


# -- snapshots -----------------------------------------------------------------


def _enc_value(v: Value | None, remap=None):
    if isinstance(v, Ptr):
        return (remap[v.obj] if remap else v.obj, v.off)
    return v


def _dec_value(v) -> Value | None:
    if isinstance(v, tuple):
        return Ptr(v[0], v[1])
    return v


def _enc_wait(wait: tuple | None):
    return None if wait is None else (wait[0].encode(), wait[1])


def _state_tuple(s: MachineState, remap: dict[int, int] | None = None, digest: bool = False) -> tuple:
    ctx = s.ctx
    threads = tuple(
        (
            t.state,
            _enc_wait(t.wait),
            _enc_value(t.result, remap),
            t.granted,
            tuple(
                (
                    ctx.findex[f.func],
                    ctx.lindex[f.func][f.block],
                    f.index,
                    tuple(_enc_value(v, remap) for v in f.regs),
                    f.ret,
                )
                for f in t.frames
            ),
        )
        for t in s.threads
    )
    objs = s.heap.objects
    if remap:
        order = sorted(objs, key=remap.__getitem__)
        heap = tuple(
            (
                remap[oid],
                bytes(objs[oid].data),
                tuple(sorted((off, remap[tgt]) for off, tgt in objs[oid].ptrs.items())),
                tuple(sorted(objs[oid].touched)),
            )
            for oid in order
        )
    else:
        heap = tuple(
            (oid, bytes(o.data), tuple(sorted(o.ptrs.items())), tuple(sorted(o.touched)))
            for oid, o in sorted(objs.items())
        )
    fault = None
    if s.fault is not None:
        loc = s.fault.location
        fault = (
            _FAULT_KINDS.index(s.fault.kind),
            ctx.findex[loc.function],
            ctx.lindex[loc.function][loc.block],
            loc.index,
            s.fault.thread,
            b"" if digest else s.fault.message.encode(),
        )
    pending = None
    if s.pending is not None:
        pending = (s.pending.arity, _ORIGINS.index(s.pending.origin), s.pending.thread)
    body = (
        threads,
        heap,
        s.os.to_tuple(),
        _STATUS_CODES.index(s.status),
        s.exit_code,
        fault,
        pending,
        s.current,
    )
    if digest:
        return body
    return body + (s.steps, s.heap.next_id)


def snapshot(s: MachineState) -> bytes:
    """Canonical, versioned serialization of ``s`` (not its kernel handles)."""
    if s.kernel.mode == PASSTHROUGH:
        raise SnapshotForbidden(
            "snapshots are not available in passthrough mode: host effects cannot be undone or replayed"
        )
    header = _SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, s.ctx.fingerprint)
    return header + marshal.dumps(_state_tuple(s), 2)


def restore(data: bytes, ctx: VmContext | MachineState) -> MachineState:
    """Rebuild a state from :func:`snapshot` bytes for the same program and kernel."""
    if isinstance(ctx, MachineState):
        ctx = ctx.ctx
    if ctx.kernel.mode == PASSTHROUGH:
        raise SnapshotForbidden("states cannot be restored in passthrough mode")
    if len(data) < _SNAP_HEADER.size:
        raise DeserializeError("snapshot too short")
    magic, version, fp = _SNAP_HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise DeserializeError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise DeserializeError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    if fp != ctx.fingerprint:
        raise DeserializeError("snapshot was taken for a different program")
    try:
        body = marshal.loads(data[_SNAP_HEADER.size :])
        return _from_tuple(body, ctx)
    except (ValueError, EOFError, TypeError, IndexError, KeyError, AttributeError) as exc:
        raise DeserializeError(f"corrupt snapshot: {exc}") from None


def _from_tuple(body: tuple, ctx: VmContext) -> MachineState:
    threads, heap, os_t, status, exit_code, fault, pending, current, steps, next_id = body
    s = MachineState(ctx)
    for state, wait, result, granted, frames in threads:
        fr = []
        for fi, bi, idx, regs, ret in frames:
            fname = ctx.fnames[fi]
            fr.append(Frame(fname, ctx.labels[fname][bi], idx, [_dec_value(v) for v in regs], ret))
        w = None if wait is None else (wait[0].decode(), wait[1])
        s.threads.append(Thread(fr, state, w, _dec_value(result), granted))
    for oid, data, ptrs, touched in heap:
        s.heap.objects[oid] = HeapObject(bytearray(data), dict(ptrs), set(touched))
    s.heap.next_id = next_id
    s.os = OsState.from_tuple(os_t)
    s.status = _STATUS_CODES[status]
    s.exit_code = exit_code
    if fault is not None:
        kind, fi, bi, idx, tid, msg = fault
        fname = ctx.fnames[fi]
        s.fault = Fault(_FAULT_KINDS[kind], Location(fname, ctx.labels[fname][bi], idx), tid, msg.decode())
    if pending is not None:
        s.pending = ChoiceRequest(pending[0], _ORIGINS[pending[1]], pending[2])
    s.current = current
    s.steps = steps
    return s


def _renumbering(s: MachineState) -> dict[int, int]:
    order: dict[int, int] = {}
    queue: list[int] = []

    def visit(v) -> None:
        if isinstance(v, Ptr) and v.obj not in order and v.obj in s.heap.objects:
            order[v.obj] = len(order) + 1
            queue.append(v.obj)

    for t in s.threads:
        for f in t.frames:
            for v in f.regs:
                visit(v)
        visit(t.result)
    i = 0
    while i < len(queue):
        obj = s.heap.objects[queue[i]]
        for off in sorted(obj.ptrs):
            visit(Ptr(obj.ptrs[off], 0))
        i += 1
    for oid in sorted(s.heap.objects):
        if oid not in order:
            order[oid] = len(order) + 1
    # dangling pointer slots keep a stable, distinct number
    for obj in s.heap.objects.values():
        for tgt in obj.ptrs.values():
            if tgt not in order:
                order[tgt] = -tgt
    return order


def state_digest(s: MachineState) -> bytes:
    """32-byte digest, equal for states that differ only in heap numbering.

    The step counter and allocation counter are not part of the digest.
    """
    remap = _renumbering(s)
    for t in s.threads:
        for f in t.frames:
            for v in f.regs:
                if isinstance(v, Ptr) and v.obj not in remap:
                    remap[v.obj] = -v.obj
        if isinstance(t.result, Ptr) and t.result.obj not in remap:
            remap[t.result.obj] = -t.result.obj
    return hashlib.sha256(marshal.dumps(_state_tuple(s, remap, digest=True), 2)).digest()


def clone(s: MachineState) -> MachineState:
    return restore(snapshot(s), s.ctx)


def guest_output(s: MachineState, fd: int = 1) -> bytes:
    """Bytes the guest wrote to the virtual console descriptor ``fd``."""
    return bytes(s.os.vfs.console.get(fd, b""))


