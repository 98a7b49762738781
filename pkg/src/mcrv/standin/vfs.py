"""In-memory file system, pipes and scripted sockets for virtual mode.

Every operation takes and returns plain Python values and mutates only the
:class:`VfsState` it is called on, which lives inside the machine state and
is therefore captured by snapshots.  Results follow the POSIX convention:
``(retval, errno)`` with ``retval == -1`` exactly when ``errno != 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from mcrv.standin import table as T
from mcrv.standin.config import SocketRule
from mcrv.standin.errors import Blocked

PIPE_CAPACITY = 64 * 1024

# open-file kinds (small ints keep the serialized form compact)
FILE = 0
DIR = 1
PIPE_R = 2
PIPE_W = 3
SOCKET = 4
CONSOLE = 5


@dataclass
class Node:
    kind: int
    data: bytearray = field(default_factory=bytearray)


@dataclass
class OpenFile:
    kind: int
    target: bytes | int
    cursor: int = 0
    flags: int = 0


@dataclass
class Pipe:
    buf: bytearray = field(default_factory=bytearray)
    readers: int = 1
    writers: int = 1


@dataclass
class Socket:
    address: bytes = b""
    connected: bool = False
    request: bytearray = field(default_factory=bytearray)
    response: bytearray = field(default_factory=bytearray)
    peer_closed: bool = False


def err(code: int) -> tuple[int, int]:
    return -1, code


def _norm(path: bytes) -> bytes:
    while len(path) > 1 and path.endswith(b"/"):
        path = path[:-1]
    return path


class VfsState:
    def __init__(self) -> None:
        self.files: dict[bytes, Node] = {}
        self.fds: dict[int, OpenFile] = {
            0: OpenFile(CONSOLE, 0, flags=T.O_RDONLY),
            1: OpenFile(CONSOLE, 1, flags=T.O_WRONLY),
            2: OpenFile(CONSOLE, 2, flags=T.O_WRONLY),
        }
        self.pipes: dict[int, Pipe] = {}
        self.sockets: dict[int, Socket] = {}
        self.console: dict[int, bytearray] = {1: bytearray(), 2: bytearray()}
        self.next_pipe = 0
        self.next_socket = 0
        # resources changed by the last operation; consumed by the kernel
        self.woken: list[tuple] = []

    # -- setup and serialization ---------------------------------------------

    def preload(self, path: bytes, data: bytes) -> None:
        path = _norm(path)
        parts = path.split(b"/")
        for i in range(1, len(parts)):
            parent = b"/".join(parts[:i])
            if parent and parent not in self.files:
                self.files[parent] = Node(DIR)
        self.files[path] = Node(FILE, bytearray(data))

    def listing(self) -> list[bytes]:
        return sorted(self.files)

    @property
    def next_fd(self) -> int:
        fd = 0
        while fd in self.fds:
            fd += 1
        return fd

    def to_tuple(self) -> tuple:
        return (
            tuple((p, n.kind, bytes(n.data)) for p, n in sorted(self.files.items())),
            tuple((fd, o.kind, o.target, o.cursor, o.flags) for fd, o in sorted(self.fds.items())),
            tuple((k, bytes(p.buf), p.readers, p.writers) for k, p in sorted(self.pipes.items())),
            tuple(
                (k, s.address, s.connected, bytes(s.request), bytes(s.response), s.peer_closed)
                for k, s in sorted(self.sockets.items())
            ),
            tuple((k, bytes(v)) for k, v in sorted(self.console.items())),
            self.next_pipe,
            self.next_socket,
        )

    @classmethod
    def from_tuple(cls, t: tuple) -> "VfsState":
        v = cls()
        files, fds, pipes, sockets, console, v.next_pipe, v.next_socket = t
        v.files = {p: Node(kind, bytearray(d)) for p, kind, d in files}
        v.fds = {fd: OpenFile(kind, target, cur, fl) for fd, kind, target, cur, fl in fds}
        v.pipes = {k: Pipe(bytearray(b), r, w) for k, b, r, w in pipes}
        v.sockets = {
            k: Socket(a, c, bytearray(rq), bytearray(rs), pc) for k, a, c, rq, rs, pc in sockets
        }
        v.console = {k: bytearray(d) for k, d in console}
        return v

    # -- namespace -------------------------------------------------------------

    def _parent_ok(self, path: bytes) -> int:
        if b"/" not in path.strip(b"/"):
            return 0
        parent = path.rsplit(b"/", 1)[0]
        node = self.files.get(parent)
        if node is None:
            return T.ENOENT
        if node.kind != DIR:
            return T.ENOTDIR
        return 0

    def open(self, path: bytes, flags: int) -> tuple[int, int]:
        path = _norm(path)
        if not path:
            return err(T.ENOENT)
        acc = flags & T.O_ACCMODE
        if acc == 3:
            return err(T.EINVAL)
        node = self.files.get(path)
        if node is None:
            if not flags & T.O_CREAT:
                return err(T.ENOENT)
            e = self._parent_ok(path)
            if e:
                return err(e)
            node = self.files[path] = Node(FILE)
        elif flags & T.O_CREAT and flags & T.O_EXCL:
            return err(T.EEXIST)
        if node.kind == DIR and acc != T.O_RDONLY:
            return err(T.EISDIR)
        if flags & T.O_TRUNC and acc != T.O_RDONLY:
            node.data.clear()
        fd = self.next_fd
        self.fds[fd] = OpenFile(node.kind, path, 0, flags)
        return fd, 0

    def unlink(self, path: bytes) -> tuple[int, int]:
        path = _norm(path)
        node = self.files.get(path)
        if node is None:
            return err(T.ENOENT)
        if node.kind == DIR:
            return err(T.EISDIR)
        del self.files[path]
        return 0, 0

    def mkdir(self, path: bytes) -> tuple[int, int]:
        path = _norm(path)
        if not path:
            return err(T.ENOENT)
        if path in self.files:
            return err(T.EEXIST)
        e = self._parent_ok(path)
        if e:
            return err(e)
        self.files[path] = Node(DIR)
        return 0, 0

    def stat(self, path: bytes) -> tuple[int, int, bytes]:
        node = self.files.get(_norm(path))
        if node is None:
            return -1, T.ENOENT, b""
        kind = T.S_DIR if node.kind == DIR else T.S_FILE
        return 0, 0, len(node.data).to_bytes(8, "little") + kind.to_bytes(8, "little")

    # -- descriptors -------------------------------------------------------------

    def close(self, fd: int) -> tuple[int, int]:
        of = self.fds.pop(fd, None)
        if of is None:
            return err(T.EBADF)
        if of.kind in (PIPE_R, PIPE_W):
            pipe = self.pipes[of.target]
            if of.kind == PIPE_R:
                pipe.readers -= 1
            else:
                pipe.writers -= 1
            self.woken.append(("pipe", of.target))
            if pipe.readers == 0 and pipe.writers == 0:
                del self.pipes[of.target]
        elif of.kind == SOCKET:
            self.sockets.pop(of.target, None)
        return 0, 0

    def read(self, fd: int, count: int) -> tuple[int, int, bytes]:
        of = self.fds.get(fd)
        if of is None or (of.flags & T.O_ACCMODE) == T.O_WRONLY:
            return -1, T.EBADF, b""
        if count < 0:
            return -1, T.EINVAL, b""
        if of.kind == DIR:
            return -1, T.EISDIR, b""
        if of.kind == CONSOLE:
            return 0, 0, b""
        if of.kind == PIPE_R:
            pipe = self.pipes[of.target]
            if count == 0:
                return 0, 0, b""
            if not pipe.buf:
                if pipe.writers == 0:
                    return 0, 0, b""
                raise Blocked(("pipe", of.target))
            data = bytes(pipe.buf[:count])
            del pipe.buf[:count]
            self.woken.append(("pipe", of.target))
            return len(data), 0, data
        if of.kind == SOCKET:
            return self.recv(fd, count)
        node = self.files.get(of.target)
        content = node.data if node is not None else bytearray()
        data = bytes(content[of.cursor : of.cursor + count])
        of.cursor += len(data)
        return len(data), 0, data

    def write(self, fd: int, data: bytes, rules: tuple[SocketRule, ...] = ()) -> tuple[int, int]:
        of = self.fds.get(fd)
        if of is None or (of.flags & T.O_ACCMODE) == T.O_RDONLY:
            return err(T.EBADF)
        if of.kind == CONSOLE:
            self.console[of.target] += data
            return len(data), 0
        if of.kind == PIPE_W:
            pipe = self.pipes[of.target]
            if pipe.readers == 0:
                return err(T.EPIPE)
            if not data:
                return 0, 0
            room = PIPE_CAPACITY - len(pipe.buf)
            if room == 0:
                raise Blocked(("pipe", of.target))
            pipe.buf += data[:room]
            self.woken.append(("pipe", of.target))
            return min(room, len(data)), 0
        if of.kind == SOCKET:
            return self.send(fd, data, rules)
        node = self.files.get(of.target)
        if node is None:
            # unlinked while open: the data goes nowhere visible
            return len(data), 0
        if of.flags & T.O_APPEND:
            of.cursor = len(node.data)
        end = of.cursor + len(data)
        if of.cursor > len(node.data):
            node.data += bytes(of.cursor - len(node.data))
        node.data[of.cursor : end] = data
        of.cursor = end
        return len(data), 0

    def lseek(self, fd: int, offset: int, whence: int) -> tuple[int, int]:
        of = self.fds.get(fd)
        if of is None:
            return err(T.EBADF)
        if of.kind not in (FILE, DIR):
            return err(T.ESPIPE)
        node = self.files.get(of.target)
        size = len(node.data) if node is not None else 0
        base = {T.SEEK_SET: 0, T.SEEK_CUR: of.cursor, T.SEEK_END: size}.get(whence)
        if base is None or base + offset < 0:
            return err(T.EINVAL)
        of.cursor = base + offset
        return of.cursor, 0

    def pipe(self) -> tuple[int, int, int, int]:
        pid = self.next_pipe
        self.next_pipe += 1
        self.pipes[pid] = Pipe()
        rfd = self.next_fd
        self.fds[rfd] = OpenFile(PIPE_R, pid, flags=T.O_RDONLY)
        wfd = self.next_fd
        self.fds[wfd] = OpenFile(PIPE_W, pid, flags=T.O_WRONLY)
        return 0, 0, rfd, wfd

    # -- sockets -----------------------------------------------------------------

    def socket(self, domain: int, kind: int) -> tuple[int, int]:
        if domain != T.AF_INET or kind != T.SOCK_STREAM:
            return err(T.EAFNOSUPPORT)
        sid = self.next_socket
        self.next_socket += 1
        self.sockets[sid] = Socket()
        fd = self.next_fd
        self.fds[fd] = OpenFile(SOCKET, sid, flags=T.O_RDWR)
        return fd, 0

    def _socket(self, fd: int) -> tuple[Socket | None, int]:
        of = self.fds.get(fd)
        if of is None or of.kind != SOCKET:
            return None, T.EBADF
        return self.sockets[of.target], 0

    def connect(self, fd: int, address: bytes, rules: tuple[SocketRule, ...]) -> tuple[int, int]:
        sock, e = self._socket(fd)
        if sock is None:
            return err(e)
        if sock.connected:
            return err(T.EISCONN)
        if not any(r.address == address for r in rules):
            return err(T.ECONNREFUSED)
        sock.address = address
        sock.connected = True
        return 0, 0

    def send(self, fd: int, data: bytes, rules: tuple[SocketRule, ...] = ()) -> tuple[int, int]:
        sock, e = self._socket(fd)
        if sock is None:
            return err(e)
        if not sock.connected:
            return err(T.ENOTCONN)
        if sock.peer_closed:
            return err(T.EPIPE)
        sock.request += data
        for rule in rules:
            if rule.address == sock.address and sock.request.startswith(rule.prefix):
                sock.response += rule.response
                sock.peer_closed = True
                self.woken.append(("socket", self.fds[fd].target))
                break
        return len(data), 0

    def recv(self, fd: int, count: int) -> tuple[int, int, bytes]:
        sock, e = self._socket(fd)
        if sock is None:
            return -1, e, b""
        if not sock.connected:
            return -1, T.ENOTCONN, b""
        if count <= 0:
            return 0, 0, b""
        if sock.response:
            data = bytes(sock.response[:count])
            del sock.response[:count]
            return len(data), 0, data
        if sock.peer_closed:
            return 0, 0, b""
        raise Blocked(("socket", self.fds[fd].target))
