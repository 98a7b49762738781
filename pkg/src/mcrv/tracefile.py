"""Syscall trace records and the on-disk trace format.

Layout (little-endian)::

    header   "SCTR"  u32 version  32-byte syscall-table hash
    record   u32 number  u16 argc  arg*  i64 retval  i32 errno
    arg      u8 tag  u32 size  [size bytes input payload]  u32 out-size  out-size bytes

The input payload is present only for input tags (scalar-in, buffer-in);
the output part is empty for inputs and carries the recorded bytes for
scalar-out and buffer-out arguments.  Record sequence numbers are implicit.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from mcrv.standin.table import Tag, syscall_name, table_hash

MAGIC = b"SCTR"
VERSION = 1

_HEADER = struct.Struct("<4sI32s")
_REC_HEAD = struct.Struct("<IH")
_ARG_HEAD = struct.Struct("<BI")
_U32 = struct.Struct("<I")
_REC_TAIL = struct.Struct("<qi")


class TraceError(Exception):
    pass


class TraceFormatError(TraceError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TraceVersionError(TraceError):
    pass


class TableHashMismatch(TraceError):
    pass


class TraceIoError(TraceError):
    pass


@dataclass(frozen=True)
class TaggedArg:
    """One marshalled argument: type tag, declared size and input payload.

    ``payload`` is an int for scalar inputs, bytes for buffer inputs and
    None for outputs (whose bytes travel separately).
    """

    tag: Tag
    size: int
    payload: int | bytes | None = None

    def render(self) -> str:
        if self.tag.is_input and self.tag.is_scalar:
            return str(self.payload)
        if self.tag is Tag.BUFFER_IN:
            return _short(self.payload)
        return f"<{self.tag.label} {self.size}>"


def _short(data: bytes, limit: int = 24) -> str:
    text = repr(bytes(data[:limit]))
    return text + ("..." if len(data) > limit else "")


@dataclass(frozen=True)
class SyscallRecord:
    seq: int
    number: int
    args: tuple[TaggedArg, ...]
    outputs: tuple[bytes, ...]
    retval: int
    errno: int

    def input_key(self) -> tuple:
        return (self.number, tuple((int(a.tag), a.size, a.payload) for a in self.args))

    def render(self) -> str:
        args = ", ".join(a.render() for a in self.args)
        outs = " ".join(_short(o) for o in self.outputs)
        text = f"#{self.seq} {syscall_name(self.number)}({args}) = {self.retval}"
        if self.errno:
            text += f" errno={self.errno}"
        if outs:
            text += f" out={outs}"
        return text


@dataclass
class Trace:
    records: list[SyscallRecord] = field(default_factory=list)
    version: int = VERSION
    table_hash: bytes = field(default_factory=table_hash)

    def __len__(self) -> int:
        return len(self.records)


def encode_header(thash: bytes | None = None) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, thash if thash is not None else table_hash())


def encode_record(rec: SyscallRecord) -> bytes:
    parts = [_REC_HEAD.pack(rec.number, len(rec.args))]
    outputs = iter(rec.outputs)
    for arg in rec.args:
        parts.append(_ARG_HEAD.pack(int(arg.tag), arg.size))
        if arg.tag.is_input:
            if arg.tag.is_scalar:
                parts.append((arg.payload & ((1 << (8 * arg.size)) - 1)).to_bytes(arg.size, "little"))
            else:
                parts.append(bytes(arg.payload))
            parts.append(_U32.pack(0))
        else:
            out = next(outputs)
            parts.append(_U32.pack(len(out)))
            parts.append(out)
    parts.append(_REC_TAIL.pack(rec.retval, rec.errno))
    return b"".join(parts)


def decode_trace(data: bytes, expected_hash: bytes | None = None) -> Trace:
    if len(data) < _HEADER.size:
        raise TraceFormatError("truncated header", len(data))
    magic, version, thash = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise TraceVersionError(f"trace version {version}, expected {VERSION}")
    expected = expected_hash if expected_hash is not None else table_hash()
    if thash != expected:
        raise TableHashMismatch("trace was recorded against a different syscall table")
    pos = _HEADER.size
    records = []

    def need(n: int, what: str) -> None:
        if pos + n > len(data):
            raise TraceFormatError(f"truncated {what} in record {len(records)}", pos)

    while pos < len(data):
        need(_REC_HEAD.size, "record header")
        number, argc = _REC_HEAD.unpack_from(data, pos)
        pos += _REC_HEAD.size
        args, outputs = [], []
        for _ in range(argc):
            need(_ARG_HEAD.size, "argument header")
            raw_tag, size = _ARG_HEAD.unpack_from(data, pos)
            try:
                tag = Tag(raw_tag)
            except ValueError:
                raise TraceFormatError(f"unknown argument tag {raw_tag}", pos) from None
            if tag.is_scalar and size != tag.width:
                raise TraceFormatError(f"scalar of width {size} with tag {tag.label}", pos)
            pos += _ARG_HEAD.size
            payload: int | bytes | None = None
            if tag.is_input:
                need(size, "input payload")
                raw = data[pos : pos + size]
                payload = int.from_bytes(raw, "little", signed=True) if tag.is_scalar else bytes(raw)
                pos += size
            need(_U32.size, "output size")
            (out_size,) = _U32.unpack_from(data, pos)
            pos += _U32.size
            if tag.is_input:
                if out_size:
                    raise TraceFormatError("input argument carries output bytes", pos - _U32.size)
            else:
                if out_size != size:
                    raise TraceFormatError("output size differs from declared size", pos - _U32.size)
                need(out_size, "output payload")
                outputs.append(bytes(data[pos : pos + out_size]))
                pos += out_size
            args.append(TaggedArg(tag, size, payload))
        need(_REC_TAIL.size, "record tail")
        retval, errno = _REC_TAIL.unpack_from(data, pos)
        pos += _REC_TAIL.size
        records.append(SyscallRecord(len(records), number, tuple(args), tuple(outputs), retval, errno))
    return Trace(records, version, thash)


def load_trace(path: str | os.PathLike) -> Trace:
    """Read and validate a trace file."""
    return decode_trace(Path(path).read_bytes())


def save_trace(path: str | os.PathLike, trace: Trace) -> None:
    with TraceWriter(path, fsync=False) as writer:
        for rec in trace.records:
            writer.append(rec)


class TraceWriter:
    """Appends records to a trace file, flushing each one before returning.

    The file on disk is therefore always a prefix of what actually happened.
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.count = 0
        try:
            self._file = open(self.path, "wb")
            self._file.write(encode_header())
            self._sync()
        except OSError as exc:
            raise TraceIoError(f"cannot write trace {self.path}: {exc}") from exc

    def _sync(self) -> None:
        self._file.flush()
        if self.fsync:
            os.fsync(self._file.fileno())

    def append(self, rec: SyscallRecord) -> None:
        if rec.seq != self.count:
            raise TraceIoError(f"record sequence {rec.seq} out of order (expected {self.count})")
        try:
            self._file.write(encode_record(rec))
            self._sync()
        except (OSError, ValueError) as exc:
            raise TraceIoError(f"cannot append to trace {self.path}: {exc}") from exc
        self.count += 1

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
