"""Guest heap, pointer values and guest faults.

Guest memory has no flat address space: every pointer is an
``(object-id, offset)`` pair and every access is bounds-checked against
the object it names.  Pointers stored into memory are tracked in a
per-object slot map so that loads can recover them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Union

MASK64 = (1 << 64) - 1
MAX_OBJECT_SIZE = 1 << 24
POINTER_WIDTH = 8


def wrap64(value: int) -> int:
    """Reduce ``value`` to a signed 64-bit two's-complement integer."""
    value &= MASK64
    return value - (1 << 64) if value >> 63 else value


class Ptr(NamedTuple):
    obj: int
    off: int

    def __str__(self) -> str:
        return f"&{self.obj}+{self.off}"


Value = Union[int, Ptr]


class FaultKind(str, Enum):
    ASSERTION = "assertion-failure"
    MEMORY = "memory-error"
    UNINITIALIZED = "uninitialized-register"
    DIVISION_BY_ZERO = "division-by-zero"
    DEADLOCK = "deadlock"
    ASSUME = "assume-violation-in-run-mode"
    REPLAY_MISMATCH = "replay-mismatch"
    UNKNOWN_SYSCALL = "unknown-syscall"

    def __str__(self) -> str:
        return self.value


class GuestFault(Exception):
    """Raised while executing an instruction; the VM attaches the location."""

    def __init__(self, kind: FaultKind, message: str = ""):
        super().__init__(message or kind.value)
        self.kind = kind
        self.message = message or kind.value


def memory_error(message: str) -> GuestFault:
    return GuestFault(FaultKind.MEMORY, message)


@dataclass
class HeapObject:
    data: bytearray
    ptrs: dict[int, int] = field(default_factory=dict)
    touched: set[int] = field(default_factory=set)

    @property
    def size(self) -> int:
        return len(self.data)


class Heap:
    def __init__(self) -> None:
        self.objects: dict[int, HeapObject] = {}
        self.next_id = 1

    def alloc(self, size: int) -> Ptr:
        if not isinstance(size, int) or isinstance(size, Ptr):
            raise memory_error("allocation size is not an integer")
        if size < 0 or size > MAX_OBJECT_SIZE:
            raise memory_error(f"bad allocation size {size}")
        oid = self.next_id
        self.next_id += 1
        self.objects[oid] = HeapObject(bytearray(size))
        return Ptr(oid, 0)

    def resolve(self, ptr: Value, length: int) -> HeapObject:
        if not isinstance(ptr, Ptr):
            raise memory_error(f"dereference of non-pointer {ptr}")
        obj = self.objects.get(ptr.obj)
        if obj is None:
            raise memory_error(f"dangling pointer {ptr}")
        if length < 0 or ptr.off < 0 or ptr.off + length > len(obj.data):
            raise memory_error(
                f"access of {length} bytes at {ptr} out of bounds (size {len(obj.data)})"
            )
        return obj

    def read(self, ptr: Value, length: int) -> bytes:
        obj = self.resolve(ptr, length)
        return bytes(obj.data[ptr.off : ptr.off + length])

    def write(self, ptr: Value, data: bytes) -> None:
        obj = self.resolve(ptr, len(data))
        self._clear_slots(obj, ptr.off, len(data))
        obj.data[ptr.off : ptr.off + len(data)] = data

    def load(self, ptr: Value, width: int) -> Value:
        obj = self.resolve(ptr, width)
        raw = int.from_bytes(obj.data[ptr.off : ptr.off + width], "little")
        if width == POINTER_WIDTH:
            target = obj.ptrs.get(ptr.off)
            if target is not None:
                return Ptr(target, wrap64(raw))
            return wrap64(raw)
        return raw

    def store(self, ptr: Value, value: Value, width: int) -> None:
        obj = self.resolve(ptr, width)
        self._clear_slots(obj, ptr.off, width)
        if isinstance(value, Ptr):
            if width != POINTER_WIDTH:
                raise memory_error(f"pointer stored with width {width}")
            obj.data[ptr.off : ptr.off + 8] = (value.off & MASK64).to_bytes(8, "little")
            obj.ptrs[ptr.off] = value.obj
        else:
            obj.data[ptr.off : ptr.off + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(
                width, "little"
            )

    def memcpy(self, dst: Value, src: Value, length: int) -> None:
        if not isinstance(length, int) or isinstance(length, Ptr):
            raise memory_error("memcpy length is not an integer")
        sobj = self.resolve(src, length)
        dobj = self.resolve(dst, length)
        data = bytes(sobj.data[src.off : src.off + length])
        moved = {
            off - src.off + dst.off: target
            for off, target in sobj.ptrs.items()
            if src.off <= off and off + POINTER_WIDTH <= src.off + length
        }
        self._clear_slots(dobj, dst.off, length)
        dobj.data[dst.off : dst.off + length] = data
        dobj.ptrs.update(moved)

    @staticmethod
    def _clear_slots(obj: HeapObject, start: int, length: int) -> None:
        if not obj.ptrs or length == 0:
            return
        for off in [o for o in obj.ptrs if o < start + length and start < o + POINTER_WIDTH]:
            del obj.ptrs[off]
