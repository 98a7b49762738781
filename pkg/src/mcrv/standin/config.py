"""Stand-in OS configuration and socket scripts."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from mcrv.ir import decode_literal
from mcrv.standin.errors import OsInitError

VIRTUAL = "virtual"
PASSTHROUGH = "passthrough"
REPLAY = "replay"
MODES = (VIRTUAL, PASSTHROUGH, REPLAY)
RUN = "run"
VERIFY = "verify"
MATCHING = ("exact", "causal")

DEFAULT_STACKS = {
    VIRTUAL: ("proc", "sockets", "vfs"),
    PASSTHROUGH: ("passthrough",),
    REPLAY: ("replay",),
}
# components that only make sense in one mode
MODE_ONLY = {"passthrough": PASSTHROUGH, "replay": REPLAY}


@dataclass(frozen=True)
class SocketRule:
    """A scripted virtual peer: once the bytes sent on a connection to
    ``address`` start with ``prefix``, the peer answers ``response`` and
    closes its side."""

    address: bytes
    prefix: bytes
    response: bytes


@dataclass(frozen=True)
class OsConfig:
    mode: str = VIRTUAL
    components: tuple[str, ...] | None = None
    vfs_preload: tuple[tuple[bytes, bytes], ...] = ()
    trace_path: str | None = None
    matching: str = "exact"
    sockets: tuple[SocketRule, ...] = field(default=())

    def __post_init__(self) -> None:
        preload = tuple(
            (os.fsencode(p) if not isinstance(p, bytes) else p, bytes(d)) for p, d in self.vfs_preload
        )
        object.__setattr__(self, "vfs_preload", preload)
        if self.components is not None:
            object.__setattr__(self, "components", tuple(self.components))

    @property
    def stack(self) -> tuple[str, ...]:
        """Component names, topmost first."""
        if self.components is not None:
            return self.components
        return DEFAULT_STACKS.get(self.mode, ())

    def validate(self, engine: str = RUN, known: set[str] | frozenset[str] = frozenset()) -> None:
        if self.mode not in MODES:
            raise OsInitError(f"unknown OS mode {self.mode!r}")
        if engine not in (RUN, VERIFY):
            raise OsInitError(f"unknown checker mode {engine!r}")
        if self.mode == PASSTHROUGH and engine != RUN:
            raise OsInitError(
                "passthrough OS mode can only be used in the run mode of the checker "
                "(its effects on the host cannot be undone)"
            )
        if self.mode in (PASSTHROUGH, REPLAY) and not self.trace_path:
            raise OsInitError(f"{self.mode} mode requires a trace path")
        if self.matching not in MATCHING:
            raise OsInitError(f"unknown replay matching {self.matching!r}")
        if not self.stack:
            raise OsInitError("component stack is empty")
        for name in self.stack:
            if known and name not in known:
                raise OsInitError(f"unknown OS component {name!r}")
            only = MODE_ONLY.get(name)
            if only and only != self.mode:
                raise OsInitError(f"component {name!r} requires {only} mode, not {self.mode}")


_RULE_RE = re.compile(r'^(\S+)\s+("(?:[^"\\]|\\.)*")\s+("(?:[^"\\]|\\.)*")\s*$')


def parse_socket_script(text: str) -> tuple[SocketRule, ...]:
    """Parse ``ADDRESS "REQUEST-PREFIX" "RESPONSE"`` lines; ``#`` starts a comment."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = _RULE_RE.match(line)
        if m is None:
            raise OsInitError(f"socket script line {lineno}: expected ADDRESS \"PREFIX\" \"RESPONSE\"")
        try:
            rules.append(SocketRule(m.group(1).encode(), decode_literal(m.group(2)), decode_literal(m.group(3))))
        except ValueError as exc:
            raise OsInitError(f"socket script line {lineno}: {exc}") from None
    return tuple(rules)
