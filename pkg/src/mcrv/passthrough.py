"""The ``vm_syscall`` primitive and its host backends.

``vm_syscall`` knows nothing about individual syscalls: it checks the
type tags and sizes of a :class:`MarshalledCall`, hands it to a backend and
pads the outputs to their declared sizes.  All per-syscall knowledge lives
in the stand-in OS (argument layout) and in :class:`RealHostBackend` (the
one place that maps portable numbers onto host calls).
"""

from __future__ import annotations

import errno as host_errno
import os
import socket
import stat as st_mod
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Protocol

from mcrv.memory import Heap, Ptr, Value, memory_error
from mcrv.standin import table as T
from mcrv.standin.table import Tag
from mcrv.tracefile import SyscallRecord, TaggedArg, TraceWriter


class MarshalError(Exception):
    pass


@dataclass(frozen=True)
class MarshalledCall:
    number: int
    args: tuple[TaggedArg, ...]

    @property
    def output_args(self) -> list[TaggedArg]:
        return [a for a in self.args if not a.tag.is_input]

    def validate(self) -> None:
        for i, arg in enumerate(self.args):
            if not isinstance(arg.tag, Tag):
                try:
                    Tag(arg.tag)
                except ValueError:
                    raise MarshalError(f"argument {i}: unknown tag {arg.tag!r}") from None
                raise MarshalError(f"argument {i}: tag {arg.tag!r} is not a Tag")
            if arg.tag.is_scalar:
                if arg.size != arg.tag.width:
                    raise MarshalError(f"argument {i}: {arg.tag.label} with size {arg.size}")
                if arg.tag.is_input:
                    bits = 8 * arg.size
                    if not isinstance(arg.payload, int) or not (
                        -(1 << (bits - 1)) <= arg.payload < (1 << bits)
                    ):
                        raise MarshalError(f"argument {i}: scalar payload {arg.payload!r} does not fit")
                elif arg.payload is not None:
                    raise MarshalError(f"argument {i}: scalar output carries a payload")
            elif arg.tag is Tag.BUFFER_IN:
                if not isinstance(arg.payload, (bytes, bytearray)) or len(arg.payload) != arg.size:
                    got = len(arg.payload) if isinstance(arg.payload, (bytes, bytearray)) else arg.payload
                    raise MarshalError(f"argument {i}: buffer payload length {got} != declared {arg.size}")
            else:
                if arg.payload is not None or arg.size < 0:
                    raise MarshalError(f"argument {i}: malformed output buffer")


@dataclass(frozen=True)
class HostResult:
    retval: int
    errno: int = 0
    outputs: tuple[bytes, ...] = ()


class HostBackend(Protocol):
    def execute(self, call: MarshalledCall) -> HostResult: ...


def vm_syscall(call: MarshalledCall, backend: HostBackend) -> HostResult:
    """Execute one marshalled call; outputs come back padded to declared size."""
    call.validate()
    result = backend.execute(call)
    outs = call.output_args
    raw = list(result.outputs or ())
    if len(raw) > len(outs):
        raise MarshalError(f"backend returned {len(raw)} outputs for {len(outs)} output arguments")
    raw += [b""] * (len(outs) - len(raw))
    padded = []
    for arg, data in zip(outs, raw):
        if len(data) > arg.size:
            raise MarshalError(f"backend wrote {len(data)} bytes into a {arg.size}-byte output")
        padded.append(bytes(data) + bytes(arg.size - len(data)))
    retval, err = result.retval, result.errno
    if err:
        retval = -1
    return HostResult(retval, err, tuple(padded))


# -- marshalling against guest memory ----------------------------------------


def _scalar(value: Value, what: str) -> int:
    if isinstance(value, Ptr) or not isinstance(value, int):
        raise memory_error(f"{what}: expected an integer, got pointer {value}")
    return value


def _wrap(value: int, width: int) -> int:
    bits = 8 * width
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def buffer_size(spec: T.SyscallSpec, index: int, args: Sequence[Value]) -> int:
    arg = spec.args[index]
    if arg.fixed is not None:
        return arg.fixed
    return _scalar(args[arg.size_from], f"{spec.name} size argument")


def build_marshalled(spec: T.SyscallSpec, args: Sequence[Value], heap: Heap) -> MarshalledCall:
    """Turn concrete guest arguments into a tagged call, copying input buffers."""
    if len(args) != len(spec.args):
        raise memory_error(f"{spec.name} expects {len(spec.args)} arguments, got {len(args)}")
    tagged = []
    for i, (arg, value) in enumerate(zip(spec.args, args)):
        if arg.tag in (Tag.SCALAR_IN_32, Tag.SCALAR_IN_64):
            tagged.append(TaggedArg(arg.tag, arg.tag.width, _wrap(_scalar(value, arg.name), arg.tag.width)))
        elif arg.tag in (Tag.SCALAR_OUT_32, Tag.SCALAR_OUT_64):
            heap.resolve(value, arg.tag.width)
            tagged.append(TaggedArg(arg.tag, arg.tag.width))
        elif arg.tag is Tag.BUFFER_IN:
            size = buffer_size(spec, i, args)
            tagged.append(TaggedArg(arg.tag, size, heap.read(value, size)))
        else:
            size = buffer_size(spec, i, args)
            heap.resolve(value, size)
            tagged.append(TaggedArg(arg.tag, size))
    return MarshalledCall(spec.number, tuple(tagged))


def write_outputs(call: MarshalledCall, args: Sequence[Value], outputs: Sequence[bytes], heap: Heap) -> None:
    """Copy output payloads back into the guest buffers they were declared for."""
    out_iter = iter(outputs)
    for arg, value in zip(call.args, args):
        if not arg.tag.is_input:
            heap.write(value, next(out_iter))


def record(call: MarshalledCall, result: HostResult, writer: TraceWriter) -> SyscallRecord:
    """Append one completed call to the open trace (flushed before return)."""
    rec = SyscallRecord(writer.count, call.number, call.args, result.outputs, result.retval, result.errno)
    writer.append(rec)
    return rec


# -- backends ------------------------------------------------------------------


Responder = Callable[[MarshalledCall], HostResult]


@dataclass
class ScriptedBackend:
    """Table-driven stand-in for the host, for hermetic tests.

    ``table`` maps a syscall number either to a callable or to a sequence of
    canned results consumed in order.  Unlisted numbers fail with ENOSYS.
    """

    table: Mapping[int, Responder | Sequence[HostResult]] = field(default_factory=dict)
    calls: list[MarshalledCall] = field(default_factory=list)
    _cursor: dict[int, int] = field(default_factory=dict)

    def execute(self, call: MarshalledCall) -> HostResult:
        self.calls.append(call)
        entry = self.table.get(call.number)
        if entry is None:
            return HostResult(-1, T.ENOSYS)
        if callable(entry):
            return entry(call)
        i = self._cursor.get(call.number, 0)
        if i >= len(entry):
            return HostResult(-1, T.EIO)
        self._cursor[call.number] = i + 1
        return entry[i]


_PORTABLE_ERRNO = {name: num for num, name in T.ERRNO_NAMES.items()}


def portable_errno(code: int | None) -> int:
    name = host_errno.errorcode.get(code or 0, "")
    if name == "EWOULDBLOCK":
        name = "EAGAIN"
    return _PORTABLE_ERRNO.get(name, T.EIO)


def _host_flags(flags: int) -> int:
    acc = {T.O_RDONLY: os.O_RDONLY, T.O_WRONLY: os.O_WRONLY, T.O_RDWR: os.O_RDWR}.get(flags & T.O_ACCMODE)
    if acc is None:
        raise OSError(host_errno.EINVAL, "bad access mode")
    for portable, host in (
        (T.O_CREAT, os.O_CREAT),
        (T.O_EXCL, os.O_EXCL),
        (T.O_TRUNC, os.O_TRUNC),
        (T.O_APPEND, os.O_APPEND),
    ):
        if flags & portable:
            acc |= host
    return acc | getattr(os, "O_CLOEXEC", 0)


def _u32(value: int) -> bytes:
    return (value & 0xFFFFFFFF).to_bytes(4, "little")


class RealHostBackend:
    """Executes calls against the host OS.

    Relative guest paths resolve against ``root``.  Pipes and connected
    sockets are switched to non-blocking mode so that a call that would block
    comes back as EAGAIN instead of stalling the whole checker.
    """

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = os.fspath(root) if root is not None else os.getcwd()
        self._root_fd = os.open(self.root, os.O_RDONLY | getattr(os, "O_DIRECTORY", 0))
        self.owned: set[int] = set()
        self.calls = 0
        self._switch: dict[int, Callable[[tuple[TaggedArg, ...]], HostResult]] = {
            T.SYS_OPEN: self._open,
            T.SYS_CLOSE: self._close,
            T.SYS_READ: self._read,
            T.SYS_WRITE: self._write,
            T.SYS_LSEEK: self._lseek,
            T.SYS_UNLINK: self._unlink,
            T.SYS_MKDIR: self._mkdir,
            T.SYS_STAT: self._stat,
            T.SYS_PIPE: self._pipe,
            T.SYS_SOCKET: self._socket,
            T.SYS_CONNECT: self._connect,
            T.SYS_SEND: self._write,
            T.SYS_RECV: self._read,
            T.SYS_GETPID: lambda args: HostResult(os.getpid()),
        }

    def execute(self, call: MarshalledCall) -> HostResult:
        self.calls += 1
        handler = self._switch.get(call.number)
        if handler is None:
            return HostResult(-1, T.ENOSYS)
        try:
            return handler(call.args)
        except OSError as exc:
            return HostResult(-1, portable_errno(exc.errno))

    def close(self) -> None:
        for fd in sorted(self.owned):
            try:
                os.close(fd)
            except OSError:
                pass
        self.owned.clear()
        if self._root_fd >= 0:
            os.close(self._root_fd)
            self._root_fd = -1

    def _path(self, arg: TaggedArg) -> bytes:
        path = bytes(arg.payload)
        if not path or b"\0" in path:
            raise OSError(host_errno.ENOENT, "bad path")
        return path

    def _open(self, args):
        fd = os.open(self._path(args[0]), _host_flags(args[2].payload), 0o666, dir_fd=self._root_fd)
        self.owned.add(fd)
        return HostResult(fd)

    def _close(self, args):
        fd = args[0].payload
        os.close(fd)
        self.owned.discard(fd)
        return HostResult(0)

    def _read(self, args):
        data = os.read(args[0].payload, args[2].payload)
        return HostResult(len(data), 0, (data,))

    def _write(self, args):
        return HostResult(os.write(args[0].payload, args[1].payload))

    def _lseek(self, args):
        return HostResult(os.lseek(args[0].payload, args[1].payload, args[2].payload))

    def _unlink(self, args):
        os.unlink(self._path(args[0]), dir_fd=self._root_fd)
        return HostResult(0)

    def _mkdir(self, args):
        os.mkdir(self._path(args[0]), 0o777, dir_fd=self._root_fd)
        return HostResult(0)

    def _stat(self, args):
        st = os.stat(self._path(args[0]), dir_fd=self._root_fd)
        kind = T.S_DIR if st_mod.S_ISDIR(st.st_mode) else T.S_FILE if st_mod.S_ISREG(st.st_mode) else T.S_OTHER
        return HostResult(0, 0, (st.st_size.to_bytes(8, "little") + kind.to_bytes(8, "little"),))

    def _pipe(self, args):
        r, w = os.pipe()
        os.set_blocking(r, False)
        os.set_blocking(w, False)
        self.owned.update((r, w))
        return HostResult(0, 0, (_u32(r), _u32(w)))

    def _socket(self, args):
        if args[0].payload != T.AF_INET or args[1].payload != T.SOCK_STREAM:
            raise OSError(host_errno.EAFNOSUPPORT, "only AF_INET stream sockets")
        fd = socket.socket(socket.AF_INET, socket.SOCK_STREAM).detach()
        self.owned.add(fd)
        return HostResult(fd)

    def _connect(self, args):
        host, sep, port = bytes(args[1].payload).decode("ascii", "replace").rpartition(":")
        if not sep or not port.isdigit():
            raise OSError(host_errno.EINVAL, "address must be host:port")
        sock = socket.socket(fileno=args[0].payload)
        try:
            sock.connect((host, int(port)))
            sock.setblocking(False)
        finally:
            sock.detach()
        return HostResult(0)


def backoff() -> None:
    """Short pause before a passthrough call that reported EAGAIN is retried."""
    time.sleep(0.0005)
