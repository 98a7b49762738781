"""VM core: boot, stepping, choices, snapshots and digests."""

from __future__ import annotations

import random

import pytest

from conftest import corpus_program
from gen import random_concurrent_program
from mcrv import vm
from mcrv.ir import parse_program
from mcrv.memory import FaultKind, Ptr
from mcrv.passthrough import ScriptedBackend
from mcrv.standin.config import OsConfig
from mcrv.standin.errors import OsInitError


def boot(source: str, config: OsConfig | None = None, **kw) -> vm.MachineState:
    return vm.boot(parse_program(source), config or OsConfig(), **kw)


def run_to_end(s: vm.MachineState, picks=()) -> vm.MachineState:
    """Step until a final state, answering choices from ``picks`` then 0."""
    it = iter(picks)
    while s.status in (vm.RUNNING, vm.CHOICE):
        if s.status == vm.CHOICE:
            vm.resolve_choice(s, next(it, 0))
        else:
            vm.step(s)
    return s


def settle(s: vm.MachineState) -> vm.MachineState:
    while s.status == vm.RUNNING:
        vm.step(s)
    return s


TWO_THREADS = """
fn main/0 regs 3 {
b0:
  alloc r0, 8
  spawn r1, worker, r0
  store r0, 1, 8
  load r2, r0, 8
  exit r2
}

fn worker/1 regs 1 {
b0:
  store r0, 2, 8
  ret 0
}
"""


# -- boot ------------------------------------------------------------------------


def test_boot_minimal():
    s = boot("fn main/0 regs 1 { b0: exit 0 }")
    assert len(s.threads) == 1
    assert s.status == vm.RUNNING
    assert not s.heap.objects


def test_boot_places_string_pool_on_heap():
    s = boot('data a = "xyz"\nfn main/0 regs 1 { b0: exit 0 }')
    assert [bytes(o.data) for o in s.heap.objects.values()] == [b"xyz"]


def test_boot_replay_missing_trace_names_path(tmp_path):
    path = tmp_path / "missing.sctr"
    with pytest.raises(OsInitError) as info:
        boot("fn main/0 regs 1 { b0: exit 0 }", OsConfig(mode="replay", trace_path=str(path)))
    assert str(path) in str(info.value)


def test_boot_preload_visible_in_vfs():
    s = vm.boot(corpus_program("rw"), OsConfig(vfs_preload=(("in.txt", b"data"),)))
    assert b"in.txt" in s.os.vfs.listing()


def test_boot_rejects_passthrough_with_verify(tmp_path):
    cfg = OsConfig(mode="passthrough", trace_path=str(tmp_path / "t"))
    with pytest.raises(OsInitError, match="run mode"):
        boot("fn main/0 regs 1 { b0: exit 0 }", cfg, backend=ScriptedBackend(), engine="verify")


# -- step --------------------------------------------------------------------------


def test_step_exit():
    s = boot("fn main/0 regs 1 { b0: exit 0 }")
    out = vm.step(s)
    assert out.event == vm.EV_EXITED
    assert s.status == vm.EXITED and s.exit_code == 0


def test_step_assert_failure_has_location():
    s = boot("fn main/0 regs 1 { b0: const r0, 0\n assert r0\n exit 0 }")
    vm.step(s)
    out = vm.step(s)
    assert out.event == vm.EV_FAULTED
    assert s.fault.kind == FaultKind.ASSERTION
    assert str(s.fault.location) == "main:b0:1"
    assert s.fault.thread == 0


def test_step_choose_stops_without_advancing():
    s = boot("fn main/0 regs 1 { b0: choose r0, 3\n exit r0 }")
    before = vm.snapshot(s)
    out = vm.step(s)
    assert out.event == vm.EV_CHOICE
    assert out.choice.arity == 3 and out.choice.origin == vm.GUEST and out.choice.thread == 0
    assert s.status == vm.CHOICE
    assert s.location(0).index == 0
    # nothing but the status, pending request and step counter changed
    s.status, s.pending, s.steps = vm.RUNNING, None, 0
    assert vm.snapshot(s) == before


@pytest.mark.parametrize(
    "body, kind",
    [
        ("alloc r0, 4\n load r1, r0, 8", FaultKind.MEMORY),
        ("add r1, r0, 1", FaultKind.UNINITIALIZED),
        ("const r0, 1\n divu r1, r0, 0", FaultKind.DIVISION_BY_ZERO),
        ("assume 0", FaultKind.ASSUME),
        ("syscall r0, 99", FaultKind.UNKNOWN_SYSCALL),
    ],
)
def test_fault_kinds(body, kind):
    s = settle(boot(f"fn main/0 regs 2 {{ b0: {body}\n exit 0 }}"))
    assert s.status == vm.FAULTED
    assert s.fault.kind == kind
    loc = s.fault.location
    assert s.program.functions[loc.function].block_map[loc.block][loc.index]


def test_deadlock_detected():
    src = """
fn main/0 regs 4 {
b0:
  alloc r0, 8
  add r1, r0, 4
  syscall r2, pipe, r0, r1
  load r3, r0, 4
  alloc r1, 4
  syscall r2, read, r3, r1, 4
  exit 0
}
"""
    s = run_to_end(boot(src))
    assert s.status == vm.FAULTED and s.fault.kind == FaultKind.DEADLOCK


def test_main_return_with_other_threads_running():
    s = run_to_end(boot(TWO_THREADS))
    assert s.status == vm.EXITED and s.exit_code in (1, 2)


# -- resolve_choice -----------------------------------------------------------------


def test_resolve_arity_one():
    s = boot("fn main/0 regs 1 { b0: choose r0, 1\n exit r0 }")
    vm.step(s)
    vm.resolve_choice(s, 0)
    assert s.status == vm.RUNNING


def test_resolve_out_of_range():
    s = boot("fn main/0 regs 1 { b0: choose r0, 3\n exit r0 }")
    vm.step(s)
    with pytest.raises(vm.ChoiceOutOfRange):
        vm.resolve_choice(s, 3)


def test_choose_result_in_register():
    for pick in range(3):
        s = boot("fn main/0 regs 1 { b0: choose r0, 3\n exit r0 }")
        run_to_end(s, [pick])
        assert s.exit_code == pick


def test_scheduler_choice_picks_thread():
    s = settle(boot(TWO_THREADS))
    # first scheduler choice after spawn: both threads runnable
    while s.pending.origin != vm.SCHEDULER or s.pending.arity < 2:
        vm.resolve_choice(s, 0)
        settle(s)
    snap = vm.snapshot(s)
    a = vm.restore(snap, s)
    b = vm.restore(snap, s)
    vm.resolve_choice(a, 0)
    vm.resolve_choice(b, 1)
    vm.step(a)
    vm.step(b)
    assert a.threads[0].frames[-1].index != b.threads[0].frames[-1].index
    assert a.threads[1].frames[-1].index != b.threads[1].frames[-1].index
    moved_a = [t for t in range(2) if a.threads[t].frames[-1].index != s.threads[t].frames[-1].index]
    moved_b = [t for t in range(2) if b.threads[t].frames[-1].index != s.threads[t].frames[-1].index]
    assert moved_a == [0] and moved_b == [1]


def test_both_interleavings_reachable():
    codes = set()
    for p1 in range(2):
        for p2 in range(2):
            for p3 in range(2):
                s = run_to_end(boot(TWO_THREADS), [p1, p2, p3])
                codes.add(s.exit_code)
    assert codes == {1, 2}


# -- preemption points ----------------------------------------------------------------


def choice_locations(source: str) -> list[str]:
    """Instructions at which a scheduler choice was requested along pick-0."""
    s = boot(source)
    locs = []
    while s.status in (vm.RUNNING, vm.CHOICE):
        if s.status == vm.CHOICE:
            if s.pending.origin == vm.SCHEDULER:
                locs.append(str(s.instruction(s.runnable()[0])))
            vm.resolve_choice(s, 0)
        else:
            vm.step(s)
    return locs


def test_no_choices_in_single_threaded_arithmetic():
    src = "fn main/0 regs 2 { b0: alloc r0, 8\n store r0, 1, 8\n load r1, r0, 8\n add r1, r1, 1\n exit r1 }"
    assert choice_locations(src) == []


def test_private_object_accesses_are_choice_free():
    src = """
fn main/0 regs 3 {
b0:
  spawn r1, worker, 0
  alloc r0, 8
  store r0, 1, 8
  load r2, r0, 8
  exit 0
}

fn worker/1 regs 2 {
b0:
  alloc r1, 8
  store r1, 1, 8
  ret 0
}
"""
    locs = choice_locations(src)
    assert not any(loc.startswith(("store", "load")) for loc in locs)


def test_shared_object_accesses_preempt():
    locs = choice_locations(TWO_THREADS)
    assert any(loc.startswith(("store", "load")) for loc in locs)


# -- snapshots ----------------------------------------------------------------------


def test_snapshot_idempotent():
    s = settle(boot(TWO_THREADS))
    a = vm.snapshot(s)
    assert vm.snapshot(vm.restore(a, s)) == a


def test_snapshot_forbidden_in_passthrough(tmp_path):
    cfg = OsConfig(mode="passthrough", trace_path=str(tmp_path / "t.sctr"))
    s = boot("fn main/0 regs 1 { b0: exit 0 }", cfg, backend=ScriptedBackend())
    try:
        with pytest.raises(vm.SnapshotForbidden):
            vm.snapshot(s)
    finally:
        s.close()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b[:3],
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x09\x00" + b[6:],
        lambda b: b[:-5],
        lambda b: b[:6] + bytes(32) + b[38:],
        lambda b: b[:40] + b"\xff" * 10,
    ],
)
def test_deserialize_error(mutate):
    s = settle(boot(TWO_THREADS))
    with pytest.raises(vm.DeserializeError):
        vm.restore(mutate(vm.snapshot(s)), s)


def test_restore_from_midpoint_matches_straight_run():
    prog = corpus_program("rw")
    straight = run_to_end(vm.boot(prog, OsConfig()))
    s = vm.boot(prog, OsConfig())
    for _ in range(10):
        vm.step(s)
    resumed = run_to_end(vm.restore(vm.snapshot(s), s))
    assert resumed.status == vm.EXITED
    assert resumed.os.to_tuple() == straight.os.to_tuple()
    assert bytes(resumed.os.vfs.files[b"rw.txt"].data) == b"hello, world\n"


def test_restore_behaves_identically():
    prog = parse_program(TWO_THREADS)
    for picks in ([0, 0, 0], [1, 0, 1], [1, 1, 1]):
        s = vm.boot(prog, OsConfig())
        vm.step(s)
        vm.step(s)
        copy = vm.restore(vm.snapshot(s), s)
        a = run_to_end(s, picks)
        b = run_to_end(copy, picks)
        assert vm.snapshot(a) == vm.snapshot(b)


# -- digests ------------------------------------------------------------------------


def test_digest_ignores_allocation_order():
    a_src = """
fn main/0 regs 3 {
b0:
  alloc r0, 8
  alloc r1, 8
  store r1, 7, 8
  store r0, r1, 8
  exit 0
}
"""
    b_src = """
fn main/0 regs 3 {
b0:
  alloc r1, 8
  alloc r0, 8
  store r1, 7, 8
  store r0, r1, 8
  exit 0
}
"""
    a, b = boot(a_src), boot(b_src)
    for _ in range(4):
        vm.step(a)
        vm.step(b)
    assert a.threads[0].frames[0].regs[0] != b.threads[0].frames[0].regs[0]
    assert vm.state_digest(a) == vm.state_digest(b)
    assert vm.snapshot(a) != vm.snapshot(b)


def test_digest_survives_round_trip():
    s = settle(boot(TWO_THREADS))
    assert vm.state_digest(vm.restore(vm.snapshot(s), s)) == vm.state_digest(s)


def test_digest_sees_one_byte():
    s = boot("fn main/0 regs 1 { b0: alloc r0, 8\n exit 0 }")
    vm.step(s)
    d = vm.state_digest(s)
    ptr = s.threads[0].frames[0].regs[0]
    assert isinstance(ptr, Ptr)
    s.heap.objects[ptr.obj].data[3] ^= 1
    assert vm.state_digest(s) != d


# -- determinism --------------------------------------------------------------------


def test_determinism_on_random_programs():
    rng = random.Random(7)
    for _ in range(20):
        prog = parse_program(random_concurrent_program(rng))
        picks = [rng.randrange(3) for _ in range(40)]

        def trail():
            s = vm.boot(prog, OsConfig())
            snaps = []
            it = iter(picks)
            while s.status in (vm.RUNNING, vm.CHOICE):
                if s.status == vm.CHOICE:
                    vm.resolve_choice(s, next(it, 0) % s.pending.arity)
                else:
                    vm.step(s)
                snaps.append(vm.snapshot(s))
            return snaps

        assert trail() == trail()


def test_replay_mode_determinism(tmp_path):
    from mcrv import explorer

    prog = corpus_program("pipe")
    trace = tmp_path / "p.sctr"
    from gen import random_host

    rec = explorer.run(prog, OsConfig(mode="passthrough", trace_path=str(trace)), seed=3, backend=random_host(1))
    assert rec.trace_total is not None
    cfg = OsConfig(mode="replay", trace_path=str(trace))
    a = explorer.run(prog, cfg, seed=3)
    b = explorer.run(prog, cfg, seed=3)
    assert a.report() == b.report() and a.final_digest == b.final_digest
