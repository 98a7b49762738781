"""Shared fixtures: corpus programs, a local TCP echo server, and the
summary hook that echoes acceptance results at the end of the run."""

from __future__ import annotations

import socket
import sys
import threading
from importlib.resources import files
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mcrv.ir import parse_program  # noqa: E402

CORPUS = ("rw", "pipe", "rw_par", "network", "rw_race")
ACCEPTANCE_LINES: list[str] = []


def corpus_source(name: str) -> str:
    return (files("mcrv") / "corpus" / f"{name}.mir").read_text()


def corpus_program(name: str):
    return parse_program(corpus_source(name))


@pytest.fixture
def corpus():
    return corpus_program


class EchoServer:
    """Echoes what it receives until it sees an empty line, then closes."""

    def __init__(self) -> None:
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(8)
        self.sock.settimeout(0.2)
        self.address = "127.0.0.1:%d" % self.sock.getsockname()[1]
        self.stopping = threading.Event()
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    def _serve(self) -> None:
        while not self.stopping.is_set():
            try:
                conn, _ = self.sock.accept()
            except (socket.timeout, OSError):
                continue
            with conn:
                conn.settimeout(5)
                seen = b""
                try:
                    while b"\r\n\r\n" not in seen:
                        chunk = conn.recv(4096)
                        if not chunk:
                            break
                        seen += chunk
                        conn.sendall(chunk)
                except OSError:
                    pass

    def stop(self) -> None:
        self.stopping.set()
        self.thread.join(2)
        self.sock.close()


@pytest.fixture
def echo_server():
    server = EchoServer()
    yield server
    server.stop()


def report_acceptance(number: int, name: str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
