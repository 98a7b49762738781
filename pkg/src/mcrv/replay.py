"""Replaying recorded syscalls and the causality order over a trace.

Two records *commute* when their footprints (the resources they read or
mutate) are disjoint or overlap only on read-only, cursor-free access.
The causal order puts ``i`` before ``j`` exactly when a chain of
non-commuting pairs leads from ``i`` to ``j`` in trace order, which is the
set of orderings that no sequence of adjacent commuting swaps can undo.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

from mcrv.passthrough import HostResult, MarshalledCall
from mcrv.standin import table as T
from mcrv.tracefile import SyscallRecord, Trace, load_trace  # noqa: F401  (re-export)

EXACT = "exact"
CAUSAL = "causal"
READ = "r"
WRITE = "w"
ANY = ("*",)


class Mismatch(Exception):
    """The guest issued a syscall that the trace does not allow here."""

    def __init__(self, actual: MarshalledCall, expected: SyscallRecord | None, diff: str):
        self.actual = actual
        self.expected = expected
        self.diff = diff
        super().__init__(diff)


# -- matching ----------------------------------------------------------------


def _render_call(call: MarshalledCall) -> str:
    return f"{T.syscall_name(call.number)}({', '.join(a.render() for a in call.args)})"


def compare_inputs(call: MarshalledCall, rec: SyscallRecord) -> str | None:
    """None when ``call`` matches ``rec``'s inputs, otherwise a diff message."""
    if call.number != rec.number:
        return f"syscall {T.syscall_name(call.number)} issued, trace has {T.syscall_name(rec.number)}"
    if len(call.args) != len(rec.args):
        return f"{len(call.args)} arguments issued, trace has {len(rec.args)}"
    for i, (got, want) in enumerate(zip(call.args, rec.args)):
        if got.tag != want.tag or got.size != want.size:
            return f"argument {i}: {got.tag.label}/{got.size} issued, trace has {want.tag.label}/{want.size}"
        if not got.tag.is_input or got.payload == want.payload:
            continue
        if got.tag.is_scalar:
            return f"argument {i}: value {got.payload} issued, trace has {want.payload}"
        first = next(k for k, (a, b) in enumerate(zip(got.payload, want.payload)) if a != b)
        return f"argument {i}: buffer differs at byte offset {first}"
    return None


@dataclass(frozen=True)
class ReplayCursor:
    trace: Trace
    matching: str = EXACT
    order: "CausalOrder | None" = None
    consumed: int = 0  # bitmask over record seqs

    def __post_init__(self) -> None:
        if self.matching == CAUSAL and self.order is None:
            object.__setattr__(self, "order", causal_order(self.trace))

    @property
    def consumed_count(self) -> int:
        return bin(self.consumed).count("1")

    def unconsumed(self) -> list[int]:
        return [i for i in range(len(self.trace)) if not self.consumed >> i & 1]

    def candidates(self) -> list[int]:
        if self.matching == EXACT:
            pos = self.consumed_count
            return [pos] if pos < len(self.trace) else []
        return self.order.minimal(self.consumed)


def replay_syscall(call: MarshalledCall, cursor: ReplayCursor) -> tuple[HostResult, ReplayCursor, int]:
    """Match ``call`` against the trace and play back the recorded effects.

    Returns the recorded result, the advanced cursor and the matched seq.
    """
    candidates = cursor.candidates()
    if not candidates:
        raise Mismatch(call, None, f"trace exhausted: {_render_call(call)} has no record left")
    for seq in candidates:
        rec = cursor.trace.records[seq]
        if compare_inputs(call, rec) is None:
            result = HostResult(rec.retval, rec.errno, rec.outputs)
            return result, replace(cursor, consumed=cursor.consumed | (1 << seq)), seq
    first = cursor.trace.records[candidates[0]]
    diff = compare_inputs(call, first)
    where = "next record" if cursor.matching == EXACT else f"{len(candidates)} ready records, first"
    raise Mismatch(
        call, first, f"expected {where} {first.render()}; got {_render_call(call)}: {diff}"
    )


# -- footprints and commutativity --------------------------------------------


def _path(arg) -> tuple:
    return ("path", bytes(arg.payload))


def footprint(rec: SyscallRecord, fds: dict[int, tuple] | None = None) -> dict[tuple, str]:
    """Resources touched by ``rec`` with their access class.

    ``fds`` maps descriptor numbers to the object they referred to at the
    time of the call (a path, pipe or socket); without it a descriptor's
    object is identified by its number alone.
    """
    fds = fds or {}
    n = rec.number
    a = rec.args

    def obj(fd: int) -> tuple:
        return fds.get(fd, ("fdobj", fd))

    def file_like(fd: int) -> bool:
        return obj(fd)[0] == "path"

    fp: dict[tuple, str] = {}
    if n == T.SYS_OPEN:
        flags = a[2].payload
        creates = bool(flags & (T.O_CREAT | T.O_TRUNC))
        fp[("ns",)] = WRITE if flags & T.O_CREAT else READ
        fp[_path(a[0])] = WRITE if creates else READ
        fp[("fdalloc",)] = WRITE
        if rec.retval >= 0:
            fp[("fd", rec.retval)] = WRITE
    elif n == T.SYS_CLOSE:
        fd = a[0].payload
        fp[("fd", fd)] = WRITE
        fp[("fdalloc",)] = WRITE
        if not file_like(fd):
            fp[obj(fd)] = WRITE
    elif n in (T.SYS_READ, T.SYS_RECV):
        fd = a[0].payload
        fp[("fd", fd)] = WRITE
        fp[obj(fd)] = READ if file_like(fd) else WRITE
    elif n in (T.SYS_WRITE, T.SYS_SEND):
        fd = a[0].payload
        fp[("fd", fd)] = WRITE
        fp[obj(fd)] = WRITE
    elif n == T.SYS_LSEEK:
        fd = a[0].payload
        fp[("fd", fd)] = WRITE
        if file_like(fd):
            fp[obj(fd)] = READ
    elif n in (T.SYS_UNLINK, T.SYS_MKDIR):
        fp[("ns",)] = WRITE
        fp[_path(a[0])] = WRITE
    elif n == T.SYS_STAT:
        fp[("ns",)] = READ
        fp[_path(a[0])] = READ
    elif n == T.SYS_PIPE:
        fp[("fdalloc",)] = WRITE
        fp[("pipe", rec.seq)] = WRITE
        if rec.retval == 0:
            for out in rec.outputs:
                fp[("fd", int.from_bytes(out, "little", signed=True))] = WRITE
    elif n == T.SYS_SOCKET:
        fp[("fdalloc",)] = WRITE
        if rec.retval >= 0:
            fp[("fd", rec.retval)] = WRITE
    elif n == T.SYS_CONNECT:
        fd = a[0].payload
        fp[("fd", fd)] = WRITE
        fp[obj(fd)] = WRITE
        fp[("net", bytes(a[1].payload))] = WRITE
    elif n == T.SYS_GETPID:
        fp[("proc",)] = READ
    else:
        fp[ANY] = WRITE
    return fp


def footprints_commute(fa: dict[tuple, str], fb: dict[tuple, str]) -> bool:
    if ANY in fa or ANY in fb:
        return False
    small, big = (fa, fb) if len(fa) <= len(fb) else (fb, fa)
    return all(not (res in big and (acc == WRITE or big[res] == WRITE)) for res, acc in small.items())


def commutes(a: SyscallRecord, b: SyscallRecord, fds_a: dict | None = None, fds_b: dict | None = None) -> bool:
    """Conservative commutativity: True only if order cannot affect either outcome."""
    return footprints_commute(footprint(a, fds_a), footprint(b, fds_b))


def resolved_footprints(trace: Trace) -> list[dict[tuple, str]]:
    """Footprints of every record with descriptors resolved from earlier records."""
    fds: dict[int, tuple] = {}
    out = []
    for rec in trace.records:
        out.append(footprint(rec, fds))
        if rec.errno:
            continue
        if rec.number == T.SYS_OPEN:
            fds[rec.retval] = _path(rec.args[0])
        elif rec.number == T.SYS_PIPE:
            for o in rec.outputs:
                fds[int.from_bytes(o, "little", signed=True)] = ("pipe", rec.seq)
        elif rec.number == T.SYS_SOCKET:
            fds[rec.retval] = ("socket", rec.seq)
        elif rec.number == T.SYS_CLOSE:
            fds.pop(rec.args[0].payload, None)
    return out


@dataclass(frozen=True)
class CausalOrder:
    n: int
    edges: frozenset[tuple[int, int]]

    @cached_property
    def preds(self) -> tuple[int, ...]:
        masks = [0] * self.n
        for i, j in self.edges:
            masks[j] |= 1 << i
        return tuple(masks)

    def minimal(self, consumed: int) -> list[int]:
        """Unconsumed records all of whose predecessors are consumed."""
        return [
            j
            for j in range(self.n)
            if not consumed >> j & 1 and self.preds[j] & ~consumed == 0
        ]

    def is_linear_extension(self, seq: list[int]) -> bool:
        if sorted(seq) != list(range(self.n)):
            return False
        done = 0
        for j in seq:
            if self.preds[j] & ~done:
                return False
            done |= 1 << j
        return True

    def reduction(self) -> list[tuple[int, int]]:
        """Edges of the Hasse diagram (transitive reduction)."""
        keep = []
        for i, j in sorted(self.edges):
            if not any((i, k) in self.edges and (k, j) in self.edges for k in range(i + 1, j)):
                keep.append((i, j))
        return keep


def causal_order(trace: Trace) -> CausalOrder:
    fps = resolved_footprints(trace)
    n = len(fps)
    preds = [0] * n
    for j in range(n):
        for i in range(j):
            if not footprints_commute(fps[i], fps[j]):
                preds[j] |= preds[i] | (1 << i)
    edges = frozenset((i, j) for j in range(n) for i in range(j) if preds[j] >> i & 1)
    return CausalOrder(n, edges)


def check_unconsumed(cursor: ReplayCursor) -> list[int]:
    """Seqs of records the guest never issued; reported as a warning, not a fault."""
    return cursor.unconsumed()
