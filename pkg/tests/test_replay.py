"""Trace files, replay matching, commutativity and the causal order."""

from __future__ import annotations

import random
import struct

import pytest

from conftest import corpus_program
from gen import call_of, make_record, random_host, random_syscall_program, random_trace
from mcrv import explorer, vm
from mcrv.ir import parse_program
from mcrv.passthrough import HostResult, MarshalledCall, ScriptedBackend
from mcrv.replay import (
    CAUSAL,
    EXACT,
    Mismatch,
    ReplayCursor,
    causal_order,
    commutes,
    replay_syscall,
)
from mcrv.standin import table as T
from mcrv.standin.config import OsConfig
from mcrv.tracefile import (
    SyscallRecord,
    TableHashMismatch,
    Trace,
    TraceFormatError,
    TraceVersionError,
    encode_header,
    load_trace,
    save_trace,
)
from oracles import swap_closure_order


def read_rec(seq: int, fd: int, data: bytes = b"abc"):
    return make_record(seq, "read", [fd, None, len(data)], [data], retval=len(data))


def write_rec(seq: int, fd: int, data: bytes = b"x"):
    return make_record(seq, "write", [fd, data, len(data)], retval=len(data))


class Poisoned:
    def execute(self, call):  # pragma: no cover - must never run
        raise AssertionError("replay reached the host")


# -- load_trace -----------------------------------------------------------------------


def test_round_trip_two_records(tmp_path):
    trace = Trace([read_rec(0, 3), write_rec(1, 3)])
    path = tmp_path / "t.sctr"
    save_trace(path, trace)
    assert load_trace(path).records == trace.records


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "t.sctr"
    save_trace(path, Trace([read_rec(0, 3)]))
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(TraceFormatError) as info:
        load_trace(path)
    assert info.value.offset > 40
    assert "offset" in str(info.value)


def test_empty_trace(tmp_path):
    path = tmp_path / "t.sctr"
    path.write_bytes(encode_header())
    assert len(load_trace(path)) == 0


def test_version_and_hash_checks(tmp_path):
    path = tmp_path / "t.sctr"
    path.write_bytes(struct.pack("<4sI32s", b"SCTR", 2, bytes(32)))
    with pytest.raises(TraceVersionError):
        load_trace(path)
    path.write_bytes(encode_header(bytes(32)))
    with pytest.raises(TableHashMismatch):
        load_trace(path)
    path.write_bytes(b"JUNK" + bytes(36))
    with pytest.raises(TraceFormatError):
        load_trace(path)


def test_header_layout(tmp_path):
    path = tmp_path / "t.sctr"
    save_trace(path, Trace([write_rec(0, 1, b"hi")]))
    data = path.read_bytes()
    assert data[:4] == b"SCTR" and struct.unpack_from("<I", data, 4)[0] == 1
    number, argc = struct.unpack_from("<IH", data, 40)
    assert (number, argc) == (T.SYS_WRITE, 3)
    assert struct.unpack("<qi", data[-12:]) == (2, 0)


def test_random_traces_round_trip(tmp_path):
    rng = random.Random(1)
    for i in range(100):
        trace = random_trace(rng)
        path = tmp_path / f"{i}.sctr"
        save_trace(path, trace)
        assert load_trace(path).records == trace.records


# -- replay_syscall -------------------------------------------------------------------


def test_exact_match_plays_back():
    trace = Trace([read_rec(0, 3)])
    result, cursor, seq = replay_syscall(call_of(read_rec(0, 3, b"zzz")), ReplayCursor(trace))
    assert (result.retval, result.errno, result.outputs) == (3, 0, (b"abc",))
    assert seq == 0 and cursor.consumed_count == 1


def test_mismatch_carries_both_calls():
    trace = Trace([read_rec(0, 3)])
    call = call_of(write_rec(0, 3))
    with pytest.raises(Mismatch) as info:
        replay_syscall(call, ReplayCursor(trace))
    assert info.value.actual == call
    assert info.value.expected == trace.records[0]
    assert "write" in info.value.diff and "read" in info.value.diff


def test_mismatch_reports_first_differing_byte():
    trace = Trace([write_rec(0, 3, b"hello")])
    with pytest.raises(Mismatch, match="byte offset 2"):
        replay_syscall(call_of(write_rec(0, 3, b"heLlo")), ReplayCursor(trace))


def test_trace_exhausted():
    with pytest.raises(Mismatch, match="exhausted"):
        replay_syscall(call_of(read_rec(0, 3)), ReplayCursor(Trace([])))


def test_causal_accepts_commuted_reads():
    trace = Trace([read_rec(0, 3, b"aaa"), read_rec(1, 4, b"bbb")])
    cursor = ReplayCursor(trace, CAUSAL)
    r1, cursor, s1 = replay_syscall(call_of(trace.records[1]), cursor)
    r0, cursor, s0 = replay_syscall(call_of(trace.records[0]), cursor)
    assert (s1, s0) == (1, 0)
    assert r1.outputs == (b"bbb",) and r0.outputs == (b"aaa",)
    with pytest.raises(Mismatch):
        replay_syscall(call_of(trace.records[1]), ReplayCursor(trace, EXACT))


def test_causal_tie_break_lowest_seq():
    trace = Trace([make_record(0, "getpid", [], retval=5), make_record(1, "getpid", [], retval=6)])
    result, _, seq = replay_syscall(call_of(trace.records[1]), ReplayCursor(trace, CAUSAL))
    assert seq == 0 and result.retval == 5


# -- commutes -----------------------------------------------------------------------


def test_commutes_examples():
    assert commutes(read_rec(0, 3), read_rec(1, 4))
    assert not commutes(write_rec(0, 3), read_rec(1, 3))
    assert not commutes(read_rec(0, 3), read_rec(1, 3))
    getpid = make_record(0, "getpid", [], retval=1)
    assert commutes(getpid, getpid)
    stat = make_record(0, "stat", [b"a", 1, None], [bytes(16)])
    assert commutes(stat, stat)
    assert not commutes(stat, make_record(1, "unlink", [b"a", 1]))


def test_reads_of_same_file_through_different_fds():
    trace = Trace(
        [
            make_record(0, "open", [b"a", 1, T.O_RDONLY], retval=3),
            make_record(1, "open", [b"a", 1, T.O_RDWR], retval=4),
            read_rec(2, 3),
            read_rec(3, 4),
            write_rec(4, 4),
        ]
    )
    order = causal_order(trace)
    assert (2, 3) not in order.edges
    assert (2, 4) in order.edges


def test_unknown_syscalls_never_commute():
    odd = SyscallRecord(0, 99, (), (), 0, 0)
    assert not commutes(odd, make_record(1, "getpid", [], retval=1))


# -- causal_order -----------------------------------------------------------------


def test_single_record_has_no_edges():
    assert causal_order(Trace([read_rec(0, 3)])).edges == frozenset()


def test_reads_and_write_example():
    trace = Trace([read_rec(0, 3), read_rec(1, 4), write_rec(2, 3)])
    order = causal_order(trace)
    assert order.edges == frozenset({(0, 2)})
    assert order.edges == swap_closure_order(trace)


def test_order_is_dag_with_trace_order_extension():
    rng = random.Random(5)
    for _ in range(200):
        trace = random_trace(rng)
        order = causal_order(trace)
        assert all(i < j for i, j in order.edges)
        assert order.is_linear_extension(list(range(len(trace))))


def test_order_matches_oracle_small():
    rng = random.Random(9)
    for _ in range(200):
        trace = random_trace(rng, 6)
        assert causal_order(trace).edges == swap_closure_order(trace)


# -- replay through the VM --------------------------------------------------------


def record_and_replay(prog, tmp_path, seed: int, name: str = "t"):
    path = tmp_path / f"{name}.sctr"
    cfg = OsConfig(mode="passthrough", trace_path=str(path))
    s = vm.boot(prog, cfg, backend=random_host(seed))
    try:
        while s.status == vm.RUNNING:
            vm.step(s)
        rec_heap = {oid: bytes(o.data) for oid, o in s.heap.objects.items()}
        status = (s.status, s.exit_code, s.fault.kind if s.fault else None)
    finally:
        s.close()
    return path, rec_heap, status


def test_exact_replay_accepts_the_recording(tmp_path):
    rng = random.Random(21)
    for i in range(30):
        prog = parse_program(random_syscall_program(rng))
        path, heap, status = record_and_replay(prog, tmp_path, i)
        for matching in (EXACT, CAUSAL):
            s = vm.boot(prog, OsConfig(mode="replay", trace_path=str(path), matching=matching), backend=Poisoned())
            while s.status == vm.RUNNING:
                vm.step(s)
            assert (s.status, s.exit_code, s.fault.kind if s.fault else None) == status
            assert {oid: bytes(o.data) for oid, o in s.heap.objects.items()} == heap


def test_replay_purity_on_corpus(tmp_path):
    prog = corpus_program("rw")
    path = tmp_path / "rw.sctr"
    backend = ScriptedBackend(
        {
            T.SYS_OPEN: [HostResult(3), HostResult(3)],
            T.SYS_WRITE: [HostResult(13)],
            T.SYS_CLOSE: [HostResult(0), HostResult(0)],
            T.SYS_READ: [HostResult(13, 0, (b"hello, world\n",))],
        }
    )
    assert explorer.run(prog, OsConfig(mode="passthrough", trace_path=str(path)), backend=backend).verdict == "ok"
    for matching in (EXACT, CAUSAL):
        cfg = OsConfig(mode="replay", trace_path=str(path), matching=matching)
        assert explorer.run(prog, cfg, backend=Poisoned()).verdict == "ok"
        assert explorer.verify(prog, cfg).verdict == "ok"


def test_replay_never_builds_a_backend(tmp_path):
    path = tmp_path / "t.sctr"
    path.write_bytes(encode_header())
    s = vm.boot(parse_program("fn main/0 regs 1 { b0: exit 0 }"), OsConfig(mode="replay", trace_path=str(path)))
    assert s.kernel.backend is None and s.kernel.writer is None


def test_marshalled_call_matches_record_inputs():
    rec = write_rec(0, 3, b"abc")
    assert call_of(rec) == MarshalledCall(rec.number, rec.args)
