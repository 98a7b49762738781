"""Portable syscall numbers, argument metadata, flags and errno values.

Numbers, flags and errno codes here are the stand-in OS's own portable
values; traces store them and only the real host backend translates them
to whatever the host uses.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum


class Tag(IntEnum):
    """Type information carried with every marshalled argument."""

    SCALAR_IN_32 = 1
    SCALAR_IN_64 = 2
    SCALAR_OUT_32 = 3
    SCALAR_OUT_64 = 4
    BUFFER_IN = 5
    BUFFER_OUT = 6

    @property
    def is_input(self) -> bool:
        return self in (Tag.SCALAR_IN_32, Tag.SCALAR_IN_64, Tag.BUFFER_IN)

    @property
    def is_scalar(self) -> bool:
        return self <= Tag.SCALAR_OUT_64

    @property
    def width(self) -> int:
        return {Tag.SCALAR_IN_32: 4, Tag.SCALAR_OUT_32: 4, Tag.SCALAR_IN_64: 8, Tag.SCALAR_OUT_64: 8}[
            self
        ]

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass(frozen=True)
class ArgSpec:
    tag: Tag
    name: str
    size_from: int | None = None
    fixed: int | None = None

    def __str__(self) -> str:
        if self.tag in (Tag.BUFFER_IN, Tag.BUFFER_OUT):
            src = f"arg {self.size_from}" if self.size_from is not None else f"fixed {self.fixed}"
            return f"{self.tag.label}({src}) {self.name}"
        return f"{self.tag.label} {self.name}"


@dataclass(frozen=True)
class SyscallSpec:
    number: int
    name: str
    args: tuple[ArgSpec, ...]
    returns: str = "signed-64"


SYS_OPEN = 1
SYS_CLOSE = 2
SYS_READ = 3
SYS_WRITE = 4
SYS_LSEEK = 5
SYS_UNLINK = 6
SYS_MKDIR = 7
SYS_STAT = 8
SYS_PIPE = 9
SYS_SOCKET = 10
SYS_CONNECT = 11
SYS_SEND = 12
SYS_RECV = 13
SYS_GETPID = 14

O_RDONLY = 0
O_WRONLY = 1
O_RDWR = 2
O_ACCMODE = 3
O_CREAT = 0x40
O_EXCL = 0x80
O_TRUNC = 0x200
O_APPEND = 0x400

SEEK_SET = 0
SEEK_CUR = 1
SEEK_END = 2

AF_INET = 2
SOCK_STREAM = 1

STAT_SIZE = 16
S_FILE = 1
S_DIR = 2
S_OTHER = 3

ENOENT = 2
EIO = 5
EBADF = 9
EAGAIN = 11
EEXIST = 17
ENOTDIR = 20
EISDIR = 21
EINVAL = 22
ESPIPE = 29
EPIPE = 32
ENOSYS = 38
EAFNOSUPPORT = 97
EISCONN = 106
ENOTCONN = 107
ECONNREFUSED = 111

ERRNO_NAMES = {
    ENOENT: "ENOENT",
    EIO: "EIO",
    EBADF: "EBADF",
    EAGAIN: "EAGAIN",
    EEXIST: "EEXIST",
    ENOTDIR: "ENOTDIR",
    EISDIR: "EISDIR",
    EINVAL: "EINVAL",
    ESPIPE: "ESPIPE",
    EPIPE: "EPIPE",
    ENOSYS: "ENOSYS",
    EAFNOSUPPORT: "EAFNOSUPPORT",
    EISCONN: "EISCONN",
    ENOTCONN: "ENOTCONN",
    ECONNREFUSED: "ECONNREFUSED",
}


def _fd(name: str = "fd") -> ArgSpec:
    return ArgSpec(Tag.SCALAR_IN_32, name)


def _count(name: str = "count") -> ArgSpec:
    return ArgSpec(Tag.SCALAR_IN_64, name)


_TABLE = (
    SyscallSpec(
        SYS_OPEN,
        "open",
        (ArgSpec(Tag.BUFFER_IN, "path", size_from=1), _count("pathlen"), ArgSpec(Tag.SCALAR_IN_32, "flags")),
    ),
    SyscallSpec(SYS_CLOSE, "close", (_fd(),)),
    SyscallSpec(SYS_READ, "read", (_fd(), ArgSpec(Tag.BUFFER_OUT, "buf", size_from=2), _count())),
    SyscallSpec(SYS_WRITE, "write", (_fd(), ArgSpec(Tag.BUFFER_IN, "buf", size_from=2), _count())),
    SyscallSpec(
        SYS_LSEEK, "lseek", (_fd(), ArgSpec(Tag.SCALAR_IN_64, "offset"), ArgSpec(Tag.SCALAR_IN_32, "whence"))
    ),
    SyscallSpec(SYS_UNLINK, "unlink", (ArgSpec(Tag.BUFFER_IN, "path", size_from=1), _count("pathlen"))),
    SyscallSpec(SYS_MKDIR, "mkdir", (ArgSpec(Tag.BUFFER_IN, "path", size_from=1), _count("pathlen"))),
    SyscallSpec(
        SYS_STAT,
        "stat",
        (
            ArgSpec(Tag.BUFFER_IN, "path", size_from=1),
            _count("pathlen"),
            ArgSpec(Tag.BUFFER_OUT, "statbuf", fixed=STAT_SIZE),
        ),
    ),
    SyscallSpec(SYS_PIPE, "pipe", (ArgSpec(Tag.SCALAR_OUT_32, "readfd"), ArgSpec(Tag.SCALAR_OUT_32, "writefd"))),
    SyscallSpec(
        SYS_SOCKET, "socket", (ArgSpec(Tag.SCALAR_IN_32, "domain"), ArgSpec(Tag.SCALAR_IN_32, "type"))
    ),
    SyscallSpec(
        SYS_CONNECT, "connect", (_fd(), ArgSpec(Tag.BUFFER_IN, "addr", size_from=2), _count("addrlen"))
    ),
    SyscallSpec(SYS_SEND, "send", (_fd(), ArgSpec(Tag.BUFFER_IN, "buf", size_from=2), _count("len"))),
    SyscallSpec(SYS_RECV, "recv", (_fd(), ArgSpec(Tag.BUFFER_OUT, "buf", size_from=2), _count("len"))),
    SyscallSpec(SYS_GETPID, "getpid", ()),
)

TABLE: dict[int, SyscallSpec] = {spec.number: spec for spec in _TABLE}
NUMBERS: dict[str, int] = {spec.name: spec.number for spec in _TABLE}


def syscall_table() -> list[SyscallSpec]:
    """The fixed supported syscall set, identical in every OS mode."""
    return list(_TABLE)


def table_hash(table: list[SyscallSpec] | None = None) -> bytes:
    """32-byte digest of the table, stored in trace headers."""
    h = hashlib.sha256()
    for spec in table if table is not None else _TABLE:
        h.update(f"{spec.number}:{spec.name}:{spec.returns}".encode())
        for arg in spec.args:
            h.update(f"|{int(arg.tag)},{arg.size_from},{arg.fixed}".encode())
        h.update(b";")
    return h.digest()


def syscall_name(number: int) -> str:
    spec = TABLE.get(number)
    return spec.name if spec else f"sys{number}"
