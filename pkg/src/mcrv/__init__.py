"""mcrv: a verification VM that runs guest-IR programs under a stand-in OS.

The OS runs in one of three modes (virtual, passthrough, replay) and the
checker in one of two (run, verify).  Passthrough records every host
syscall to a trace; replay plays a trace back, which makes exhaustive
interleaving exploration possible for programs that talk to the real world.
"""

__version__ = "0.1.0"
