"""The stand-in OS kernel: a stack of components, topmost implementation wins.

A component implements a syscall by defining a ``sys_<name>`` method.  The
virtual components (``proc``, ``sockets``, ``vfs``) never see a host
backend; only the passthrough component holds one, so virtual and replay
mode cannot reach the host by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from mcrv.memory import FaultKind, GuestFault, Heap, Ptr, Value, memory_error
from mcrv.passthrough import (
    HostBackend,
    backoff,
    build_marshalled,
    record,
    vm_syscall,
    write_outputs,
)
from mcrv.replay import CAUSAL, ReplayCursor, causal_order, replay_syscall
from mcrv.standin import table as T
from mcrv.standin.config import PASSTHROUGH, REPLAY, RUN, VIRTUAL, OsConfig
from mcrv.standin.errors import OsInitError, Retry
from mcrv.standin.vfs import VfsState
from mcrv.tracefile import Trace, TraceError, TraceWriter, load_trace

VIRTUAL_PID = 1


@dataclass
class OsState:
    """The part of the machine state owned by the stand-in OS."""

    vfs: VfsState = field(default_factory=VfsState)
    consumed: int = 0  # replay: bitmask of consumed trace records

    def to_tuple(self) -> tuple:
        return (self.vfs.to_tuple(), self.consumed)

    @classmethod
    def from_tuple(cls, t: tuple) -> "OsState":
        return cls(VfsState.from_tuple(t[0]), t[1])


@dataclass
class SyscallContext:
    """What a component sees for one call: its table entry, raw guest arguments,
    the guest heap it may read and write, and the OS state."""

    spec: T.SyscallSpec
    args: tuple[Value, ...]
    heap: Heap
    os: OsState
    thread: int

    def int(self, i: int) -> int:
        value = self.args[i]
        if isinstance(value, Ptr):
            raise memory_error(f"{self.spec.name}: argument {i} must be an integer, got pointer {value}")
        return value

    def buffer(self, i: int) -> bytes:
        arg = self.spec.args[i]
        size = arg.fixed if arg.fixed is not None else self.int(arg.size_from)
        return self.heap.read(self.args[i], size)

    def out(self, i: int, data: bytes) -> None:
        self.heap.write(self.args[i], data)

    def out32(self, i: int, value: int) -> None:
        self.heap.write(self.args[i], (value & 0xFFFFFFFF).to_bytes(4, "little"))


class Component:
    name = ""

    def __init__(self, kernel: "Kernel"):
        self.kernel = kernel

    def handles(self, number: int) -> bool:
        spec = T.TABLE.get(number)
        return spec is not None and hasattr(self, "sys_" + spec.name)

    def invoke(self, ctx: SyscallContext) -> tuple[int, int]:
        return getattr(self, "sys_" + ctx.spec.name)(ctx)


class ProcComponent(Component):
    name = "proc"

    def sys_getpid(self, ctx):
        return VIRTUAL_PID, 0


class VfsComponent(Component):
    name = "vfs"

    def sys_open(self, ctx):
        return ctx.os.vfs.open(ctx.buffer(0), ctx.int(2) & 0xFFFFFFFF)

    def sys_close(self, ctx):
        return ctx.os.vfs.close(ctx.int(0))

    def sys_read(self, ctx):
        count = ctx.int(2)
        ctx.heap.resolve(ctx.args[1], max(count, 0))
        ret, err, data = ctx.os.vfs.read(ctx.int(0), count)
        if data:
            ctx.out(1, data)
        return ret, err

    def sys_write(self, ctx):
        return ctx.os.vfs.write(ctx.int(0), ctx.buffer(1), self.kernel.config.sockets)

    def sys_lseek(self, ctx):
        return ctx.os.vfs.lseek(ctx.int(0), ctx.int(1), ctx.int(2))

    def sys_unlink(self, ctx):
        return ctx.os.vfs.unlink(ctx.buffer(0))

    def sys_mkdir(self, ctx):
        return ctx.os.vfs.mkdir(ctx.buffer(0))

    def sys_stat(self, ctx):
        ctx.heap.resolve(ctx.args[2], T.STAT_SIZE)
        ret, err, data = ctx.os.vfs.stat(ctx.buffer(0))
        if not err:
            ctx.out(2, data)
        return ret, err

    def sys_pipe(self, ctx):
        ctx.heap.resolve(ctx.args[0], 4)
        ctx.heap.resolve(ctx.args[1], 4)
        ret, err, rfd, wfd = ctx.os.vfs.pipe()
        ctx.out32(0, rfd)
        ctx.out32(1, wfd)
        return ret, err


class SocketComponent(Component):
    name = "sockets"

    def sys_socket(self, ctx):
        return ctx.os.vfs.socket(ctx.int(0), ctx.int(1))

    def sys_connect(self, ctx):
        return ctx.os.vfs.connect(ctx.int(0), ctx.buffer(1), self.kernel.config.sockets)

    def sys_send(self, ctx):
        return ctx.os.vfs.send(ctx.int(0), ctx.buffer(1), self.kernel.config.sockets)

    def sys_recv(self, ctx):
        count = ctx.int(2)
        ctx.heap.resolve(ctx.args[1], max(count, 0))
        ret, err, data = ctx.os.vfs.recv(ctx.int(0), count)
        if data:
            ctx.out(1, data)
        return ret, err


class _GenericComponent(Component):
    """Handles every syscall in the table through the tagged-argument path."""

    def handles(self, number: int) -> bool:
        return number in T.TABLE


class PassthroughComponent(_GenericComponent):
    name = "passthrough"

    def invoke(self, ctx):
        kernel = self.kernel
        call = build_marshalled(ctx.spec, ctx.args, ctx.heap)
        result = vm_syscall(call, kernel.backend)
        # recorded even when it would block: how often the host said EAGAIN
        # decides the schedule, and replay has to see the same retries
        record(call, result, kernel.writer)
        if result.errno == T.EAGAIN:
            # the descriptor is non-blocking on the host; let other guest
            # threads run and re-issue the call later
            backoff()
            raise Retry()
        write_outputs(call, ctx.args, result.outputs, ctx.heap)
        return result.retval, result.errno


class ReplayComponent(_GenericComponent):
    name = "replay"

    def invoke(self, ctx):
        kernel = self.kernel
        call = build_marshalled(ctx.spec, ctx.args, ctx.heap)
        call.validate()
        cursor = ReplayCursor(kernel.trace, kernel.config.matching, kernel.order, ctx.os.consumed)
        result, cursor, _ = replay_syscall(call, cursor)
        ctx.os.consumed = cursor.consumed
        if result.errno == T.EAGAIN:
            raise Retry()
        write_outputs(call, ctx.args, result.outputs, ctx.heap)
        return result.retval, result.errno


REGISTRY: dict[str, Callable[["Kernel"], Component]] = {
    "proc": ProcComponent,
    "vfs": VfsComponent,
    "sockets": SocketComponent,
    "passthrough": PassthroughComponent,
    "replay": ReplayComponent,
}


def register_component(name: str, factory: Callable[["Kernel"], Component]) -> None:
    """Make a component available to ``OsConfig.components`` by name."""
    REGISTRY[name] = factory


# at most one live passthrough kernel per process
_passthrough_session: list["Kernel"] = []


class Kernel:
    """Per-run OS context: configuration, component stack and host handles.

    Everything that must survive snapshots lives in :class:`OsState`; the
    kernel itself holds only immutable inputs (the loaded trace) and the
    irreversible handles of passthrough mode.
    """

    def __init__(self, config: OsConfig, backend: HostBackend | None = None, engine: str = RUN):
        config.validate(engine, frozenset(REGISTRY))
        self.config = config
        self.engine = engine
        self.backend = None
        self.writer: TraceWriter | None = None
        self.trace: Trace | None = None
        self.order = None
        self.closed = False
        if config.mode == REPLAY:
            try:
                self.trace = load_trace(config.trace_path)
            except OSError as exc:
                raise OsInitError(f"cannot read trace {config.trace_path}: {exc.strerror or exc}") from None
            except TraceError as exc:
                raise OsInitError(f"bad trace {config.trace_path}: {exc}") from None
            if config.matching == CAUSAL:
                self.order = causal_order(self.trace)
        if config.mode == PASSTHROUGH:
            if any(not k.closed for k in _passthrough_session):
                raise OsInitError("a passthrough session is already active in this process")
            if backend is None:
                from mcrv.passthrough import RealHostBackend

                backend = RealHostBackend()
            try:
                self.writer = TraceWriter(config.trace_path)
            except TraceError as exc:
                raise OsInitError(str(exc)) from None
            self.backend = backend
            _passthrough_session[:] = [self]
        self.components: list[Component] = [REGISTRY[name](self) for name in config.stack]

    @property
    def mode(self) -> str:
        return self.config.mode

    def initial_state(self) -> OsState:
        state = OsState()
        if self.config.mode == VIRTUAL:
            for path, data in self.config.vfs_preload:
                state.vfs.preload(path, data)
        return state

    # -- component stack -----------------------------------------------------

    def push(self, component: Component) -> None:
        self.components.insert(0, component)

    def remove(self, name: str) -> Component:
        for i, comp in enumerate(self.components):
            if comp.name == name:
                return self.components.pop(i)
        raise KeyError(name)

    def implementer(self, number: int) -> Component | None:
        for comp in self.components:
            if comp.handles(number):
                return comp
        return None

    # -- dispatch ------------------------------------------------------------

    def dispatch(
        self, number: int, args: Sequence[Value], heap: Heap, os_state: OsState, thread: int = 0
    ) -> tuple[int, int]:
        """Run one syscall; returns ``(retval, errno)`` with retval -1 iff errno.

        May raise :class:`Blocked` or :class:`Retry` (the caller re-issues
        the call later), :class:`GuestFault` for bad guest arguments, or
        ``replay.Mismatch``.
        """
        spec = T.TABLE.get(number)
        if spec is None:
            raise GuestFault(FaultKind.UNKNOWN_SYSCALL, f"unknown syscall number {number}")
        if len(args) != len(spec.args):
            raise memory_error(f"{spec.name} expects {len(spec.args)} arguments, got {len(args)}")
        comp = self.implementer(number)
        if comp is None:
            return -1, T.ENOSYS
        os_state.vfs.woken.clear()
        retval, err = comp.invoke(SyscallContext(spec, tuple(args), heap, os_state, thread))
        if err:
            retval = -1
        return retval, err

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.writer is not None:
            self.writer.close()
        close = getattr(self.backend, "close", None)
        if close is not None:
            close()
        if self in _passthrough_session:
            _passthrough_session.remove(self)

    def __enter__(self) -> "Kernel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

