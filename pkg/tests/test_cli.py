"""Command-line front end and the reversible simulator."""

from __future__ import annotations

import io
import subprocess
import sys

import pytest

from conftest import corpus_program, corpus_source
from mcrv import explorer, vm
from mcrv.cli import main
from mcrv.sim import SimShell, Simulator
from mcrv.standin.config import OsConfig
from mcrv.standin.errors import OsInitError


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    # default output files such as counterexample.cex land in the cwd
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def prog_file(tmp_path):
    def write(name: str, source: str | None = None):
        path = tmp_path / f"{name}.mir"
        path.write_text(source if source is not None else corpus_source(name))
        return str(path)

    return write


def cli(*argv, stdin: str = "") -> tuple[int, str, str]:
    out = io.StringIO()
    err = io.StringIO()
    old_err, old_in = sys.stderr, sys.stdin
    sys.stderr, sys.stdin = err, io.StringIO(stdin)
    try:
        code = main(list(argv), out)
    finally:
        sys.stderr, sys.stdin = old_err, old_in
    return code, out.getvalue(), err.getvalue()


def report(path) -> dict[str, str]:
    return dict(line.split("=", 1) for line in open(path).read().splitlines())


# -- exit codes ------------------------------------------------------------------------


def test_run_virtual_ok(prog_file):
    code, out, _ = cli("run", "--os", "virtual", prog_file("rw"))
    assert code == 0
    assert "verdict: ok" in out


def test_verify_passthrough_rejected(prog_file, tmp_path):
    code, _, err = cli("verify", "--os", "passthrough", "--trace", str(tmp_path / "t"), prog_file("rw"))
    assert code == 2
    assert "run mode" in err
    assert not (tmp_path / "t").exists()


def test_record_then_replay(prog_file, tmp_path):
    trace = str(tmp_path / "t.sctr")
    prog = prog_file("rw")
    assert cli("run", "--os", "passthrough", "--trace", trace, "--root", str(tmp_path), prog)[0] == 0
    assert (tmp_path / "rw.txt").read_bytes() == b"hello, world\n"
    code, out, _ = cli("run", "--os", "replay", "--trace", trace, prog)
    assert code == 0
    assert "6/6 records consumed" in out


def test_violation_saves_counterexample(prog_file, tmp_path):
    cex = tmp_path / "c.cex"
    code, out, _ = cli("verify", prog_file("rw_race"), "--counterexample", str(cex))
    assert code == 1
    assert "counterexample" in out and cex.exists()
    assert explorer.load_counterexample(cex)


def test_run_replay_mismatch_exit_3(prog_file, tmp_path):
    trace = str(tmp_path / "t.sctr")
    cli("run", "--os", "passthrough", "--trace", trace, "--root", str(tmp_path), prog_file("rw"))
    code, out, _ = cli("run", "--os", "replay", "--trace", trace, prog_file("pipe"))
    assert code == 3
    assert "replay-mismatch" in out


def test_limit_exit_4(prog_file):
    assert cli("verify", "--max-states", "2", prog_file("pipe"))[0] == 4


def test_parse_error_exit_2(prog_file):
    code, _, err = cli("run", prog_file("bad", "fn main/0 regs 1 { b0: jmp nowhere }"))
    assert code == 2 and "nowhere" in err


def test_missing_trace_file_exit_2(prog_file, tmp_path):
    code, _, err = cli("run", "--os", "replay", "--trace", str(tmp_path / "none.sctr"), prog_file("rw"))
    assert code == 2 and "none.sctr" in err


def test_unknown_flag_exit_2(prog_file):
    assert cli("run", "--bogus", prog_file("rw"))[0] == 2


def test_console_script_entry_point(prog_file):
    proc = subprocess.run([sys.executable, "-m", "mcrv", "run", prog_file("rw")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


# -- flag conflicts --------------------------------------------------------------------


@pytest.mark.parametrize(
    "argv, names",
    [
        (["verify", "--os", "passthrough", "--trace", "T"], ["verify", "passthrough"]),
        (["sim", "--os", "passthrough", "--trace", "T"], ["sim", "passthrough"]),
        (["run", "--os", "replay"], ["--os replay", "--trace"]),
        (["run", "--os", "passthrough"], ["--os passthrough", "--trace"]),
        (["run", "--trace", "T"], ["--trace", "--os virtual"]),
        (["run", "--matching", "causal"], ["--matching", "--os virtual"]),
        (["run", "--os", "replay", "--trace", "T", "--file", "a=b"], ["--file", "--os replay"]),
        (["run", "--os", "replay", "--trace", "T", "--socket-script", "s"], ["--socket-script", "--os replay"]),
        (["run", "--root", "."], ["--root", "--os virtual"]),
        (["verify", "--max-states", "0"], ["--max-states"]),
    ],
)
def test_flag_conflicts_name_flags(prog_file, argv, names):
    code, out, err = cli(*argv, prog_file("rw"))
    assert code == 2
    for name in names:
        assert name in err
    assert out == ""


# -- reports and config -----------------------------------------------------------------


def test_report_fields(prog_file, tmp_path):
    path = tmp_path / "r.txt"
    cli("verify", prog_file("rw_race"), "--report", str(path), "--counterexample", str(tmp_path / "c"))
    r = report(path)
    assert list(r) == ["verdict", "states", "transitions", "fault-kind", "fault-location", "trace-consumed", "trace-total"]
    assert r["verdict"] == "violation" and r["fault-kind"] == "assertion-failure"
    assert r["fault-location"].startswith("reader:check")


def test_report_trace_counts(prog_file, tmp_path):
    trace = str(tmp_path / "t.sctr")
    cli("run", "--os", "passthrough", "--trace", trace, "--root", str(tmp_path), prog_file("rw"))
    path = tmp_path / "r.txt"
    cli("verify", "--os", "replay", "--trace", trace, "--matching", "causal", "--report", str(path), prog_file("rw"))
    r = report(path)
    assert (r["verdict"], r["trace-consumed"], r["trace-total"]) == ("ok", "6", "6")


def test_config_file_and_flag_precedence(prog_file, tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("# limits\nmax-states = 2\n")
    prog = prog_file("pipe")
    assert cli("verify", "--config", str(cfg), prog)[0] == 4
    assert cli("verify", "--config", str(cfg), "--max-states", "100000", prog)[0] == 0


def test_config_errors(prog_file, tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("colour = blue\n")
    code, _, err = cli("run", "--config", str(cfg), prog_file("rw"))
    assert code == 2 and "colour" in err
    cfg.write_text("max-states = 5\n")
    code, _, err = cli("run", "--config", str(cfg), prog_file("rw"))
    assert code == 2 and "max-states" in err
    cfg.write_text("os = passthrough\ntrace = t\n")
    assert cli("verify", "--config", str(cfg), prog_file("rw"))[0] == 2


def test_config_preload_and_sockets(prog_file, tmp_path):
    host = tmp_path / "addr"
    host.write_text("10.0.0.1:80\n")
    script = tmp_path / "peers"
    script.write_text('10.0.0.1:80 "GET" "HTTP/1.0 200 OK\\r\\n\\r\\nbody"\n')
    code, out, _ = cli("run", prog_file("network"), "--file", f"server.addr={host}", "--socket-script", str(script))
    assert code == 0
    assert "HTTP/1.0 200 OK" in out and "body" in out


def test_run_virtual_prints_guest_output(prog_file):
    src = 'data m = "hi"\nfn main/0 regs 2 { b0: const r0, @m\n syscall r1, write, 1, r0, 2\n exit 0 }'
    code, out, _ = cli("run", prog_file("hello", src))
    assert code == 0 and out.startswith("hi\n")


# -- trace subcommands --------------------------------------------------------------------


def test_trace_show_and_order(prog_file, tmp_path):
    trace = str(tmp_path / "t.sctr")
    cli("run", "--os", "passthrough", "--trace", trace, "--root", str(tmp_path), prog_file("rw"))
    code, out, _ = cli("trace", "show", trace)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 7 and lines[1].startswith("#0 open(")
    code, out, _ = cli("trace", "order", trace)
    assert code == 0 and out.startswith("digraph causal {") and "0 -> 1;" in out
    code, full, _ = cli("trace", "order", "--full", trace)
    assert full.count("->") >= out.count("->")


def test_trace_show_bad_file(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"garbage")
    code, _, err = cli("trace", "show", str(path))
    assert code == 2 and "offset" in err


# -- simulator ---------------------------------------------------------------------------


def test_step_step_back():
    sim = Simulator(corpus_program("rw"), OsConfig())
    sim.step()
    first = sim.digest()
    sim.step()
    assert sim.digest() != first
    sim.back()
    assert sim.digest() == first


def test_back_at_start_and_pick_without_choice():
    sim = Simulator(corpus_program("rw"), OsConfig())
    assert "nothing to undo" in sim.back()
    assert "not at a choice" in sim.pick(0)


def test_sim_refuses_passthrough(tmp_path):
    with pytest.raises(OsInitError):
        Simulator(corpus_program("rw"), OsConfig(mode="passthrough", trace_path=str(tmp_path / "t")))


def test_history_bound():
    sim = Simulator(corpus_program("rw"), OsConfig(), history=3)
    for _ in range(10):
        sim.step()
    for _ in range(3):
        sim.back()
    assert "nothing to undo" in sim.back()


def test_follow_lands_on_fault(tmp_path):
    prog = corpus_program("rw_race")
    result = explorer.verify(prog, OsConfig())
    cex = tmp_path / "c.cex"
    explorer.save_counterexample(cex, result.counterexample)
    sim = Simulator(prog, OsConfig())
    msg = sim.follow(explorer.load_counterexample(cex))
    assert sim.state.status == vm.FAULTED
    assert sim.state.fault.location == result.fault.location
    assert str(result.fault.location) in msg


def test_sim_repl_session(prog_file):
    script = "step\nstep\nback\nregs\nwhere\nrun-to-syscall\nmem 1 0 6\npick 0\ntrace-pos\nfrob\nquit\n"
    code, out, _ = cli("sim", prog_file("rw"), stdin=script)
    assert code == 0
    assert "thread 0 at main:start:1" in out
    assert "open returned 3" in out
    assert "72 77 2e 74 78 74" in out
    assert "not at a choice point" in out
    assert "not in replay mode" in out
    assert "unknown command 'frob'" in out


def test_sim_follow_flag(prog_file, tmp_path):
    prog = prog_file("rw_race")
    cex = tmp_path / "c.cex"
    cli("verify", prog, "--counterexample", str(cex))
    code, out, _ = cli("sim", prog, "--follow", str(cex), stdin="where\n")
    assert code == 0
    assert out.count("fault: assertion-failure at reader:check") == 2


def test_sim_passthrough_exit_2(prog_file, tmp_path):
    code, _, err = cli("sim", "--os", "passthrough", "--trace", str(tmp_path / "t"), prog_file("rw"))
    assert code == 2 and "passthrough" in err


def test_sim_replay_trace_pos(prog_file, tmp_path):
    trace = str(tmp_path / "t.sctr")
    prog = prog_file("rw")
    cli("run", "--os", "passthrough", "--trace", trace, "--root", str(tmp_path), prog)
    code, out, _ = cli("sim", "--os", "replay", "--trace", trace, prog, stdin="trace-pos\nrun-to-syscall\ntrace-pos\n")
    assert "consumed 0/6; next allowed: #0 open(" in out
    assert "consumed 1/6; next allowed: #1 write(" in out


def test_shell_direct():
    sim = Simulator(corpus_program("rw"), OsConfig())
    out = io.StringIO()
    shell = SimShell(sim, stdin=io.StringIO("step 3\nback 3\nwhere\n"), stdout=out)
    shell.cmdloop()
    assert sim.executed == 0
    assert "thread 0 at main:start:0" in out.getvalue()
