"""Edge calls between the enclave runtime and the untrusted host via the shared buffer.

The first 32 bytes of the untrusted buffer hold the call header (all fields
little-endian u32)::

    0  fid        function index
    4  status     0 idle, 1 pending, 2 done, 3 error
    8  args_off   offset of the argument bytes from the buffer base
    12 args_len
    16 ret_off    offset of the reply bytes
    20 ret_len
    24 err        error code when status == error
    28 reserved

Arguments and replies share the area that follows the header.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Callable

from .machine import AccessKind, Hart, Machine, PrivMode
from .paging import EDGE_HEADER, SYS_CLOSE, SYS_OPENAT, SYS_READ, SYS_WRITE, Descheduled, Runtime
from .sm import Region

PROXY_FID = 0xFFFF_FF00
ERR_UNKNOWN_FUNCTION = 0xFFFF_0001
ERR_REPLY_TOO_LARGE = 0xFFFF_0002
ERR_NO_REPLY = 0xFFFF_0003

_HDR = struct.Struct("<8I")


class Status(enum.IntEnum):
    IDLE = 0
    PENDING = 1
    DONE = 2
    ERROR = 3


class EdgeError(Exception):
    pass


class PayloadTooLarge(EdgeError):
    pass


class UnknownFunction(EdgeError):
    pass


class EdgeBusy(EdgeError):
    pass


class HostError(EdgeError):
    def __init__(self, code: int, msg: str = ""):
        super().__init__(msg or f"host error {code}")
        self.code = code


@dataclass
class EdgeCallHeader:
    fid: int = 0
    status: Status = Status.IDLE
    args_off: int = EDGE_HEADER
    args_len: int = 0
    ret_off: int = EDGE_HEADER
    ret_len: int = 0
    err: int = 0

    def pack(self) -> bytes:
        return _HDR.pack(self.fid, self.status, self.args_off, self.args_len,
                         self.ret_off, self.ret_len, self.err, 0)

    @classmethod
    def unpack(cls, raw: bytes) -> "EdgeCallHeader":
        fid, status, ao, al, ro, rl, err, _ = _HDR.unpack(raw)
        try:
            st = Status(status)
        except ValueError:
            st = Status.ERROR
        return cls(fid, st, ao, al, ro, rl, err)

    def in_bounds(self, utm_size: int) -> bool:
        return (
            EDGE_HEADER <= self.args_off and self.args_off + self.args_len <= utm_size
            and EDGE_HEADER <= self.ret_off and self.ret_off + self.ret_len <= utm_size
        )


class HostFunctionTable:
    """Dense index -> host handler map."""

    def __init__(self):
        self._fns: list[Callable[[bytes], bytes]] = []
        self.names: dict[str, int] = {}
        self.special: dict[int, Callable[[bytes], bytes]] = {}

    def register(self, fn: Callable[[bytes], bytes], name: str | None = None) -> int:
        self._fns.append(fn)
        idx = len(self._fns) - 1
        if name:
            self.names[name] = idx
        return idx

    def dispatch(self, fid: int, payload: bytes) -> bytes:
        if fid in self.special:
            return self.special[fid](payload)
        if not 0 <= fid < len(self._fns):
            raise UnknownFunction(f"no host function {fid}")
        return self._fns[fid](payload)


# -- runtime side -------------------------------------------------------------------


def edge_call(rt: Runtime, fid: int, payload: bytes) -> bytes:
    """Tunnel a call to the host and copy the reply back into the enclave."""
    utm = rt.utm
    area = rt.edge_area
    hdr = EdgeCallHeader.unpack(rt._pread(utm.base, EDGE_HEADER))
    if hdr.status == Status.PENDING:
        raise EdgeBusy("an edge call is already outstanding")
    if len(payload) > area.size:
        raise PayloadTooLarge(f"payload {len(payload)} > {area.size} bytes")
    off = area.base - utm.base
    if payload:
        rt._pwrite(area.base, payload)
    rt.edge_stats.copies_in += 1
    rt.edge_stats.bytes_in += len(payload)
    rt.edge_stats.calls += 1
    rt._pwrite(utm.base, EdgeCallHeader(fid, Status.PENDING, off, len(payload), off, 0).pack())
    try:
        rt.yield_to_host("edge_call", fid)
    except Descheduled:
        raise
    hdr = EdgeCallHeader.unpack(rt._pread(utm.base, EDGE_HEADER))
    try:
        if hdr.status == Status.PENDING:
            raise HostError(ERR_NO_REPLY, "host returned without a reply")
        if hdr.status == Status.ERROR:
            if hdr.err == ERR_UNKNOWN_FUNCTION:
                raise UnknownFunction(f"no host function {fid}")
            raise HostError(hdr.err)
        if not hdr.in_bounds(utm.size) or hdr.ret_off < off or hdr.ret_off + hdr.ret_len > off + area.size:
            raise HostError(ERR_REPLY_TOO_LARGE, "reply outside the edge area")
        reply = rt._pread(utm.base + hdr.ret_off, hdr.ret_len) if hdr.ret_len else b""
        rt.edge_stats.copies_out += 1
        rt.edge_stats.bytes_out += len(reply)
        return reply
    finally:
        # scrub everything the host could still read
        rt._pwrite(area.base, bytes(area.size))
        rt._pwrite(utm.base, EdgeCallHeader().pack())


# -- host side ------------------------------------------------------------------------


def serve_edge_call(machine: Machine, hart: Hart, utm: Region, table: HostFunctionTable,
                    drop_reply: bool = False) -> EdgeCallHeader | None:
    """Host handling of one pending call in ``utm``, running as S-mode on ``hart``."""
    read = lambda a, n: machine.mem_access(hart, a, AccessKind.READ, length=n, priv=PrivMode.S)  # noqa: E731
    write = lambda a, d: machine.mem_access(hart, a, AccessKind.WRITE, data=d, priv=PrivMode.S)  # noqa: E731
    hdr = EdgeCallHeader.unpack(read(utm.base, EDGE_HEADER))
    if hdr.status != Status.PENDING:
        return None
    if drop_reply:
        return hdr
    if not hdr.in_bounds(utm.size):
        hdr.status, hdr.err = Status.ERROR, ERR_REPLY_TOO_LARGE
        write(utm.base, hdr.pack())
        return hdr
    payload = read(utm.base + hdr.args_off, hdr.args_len) if hdr.args_len else b""
    try:
        reply = table.dispatch(hdr.fid, payload)
    except UnknownFunction:
        hdr.status, hdr.err = Status.ERROR, ERR_UNKNOWN_FUNCTION
    except HostError as e:
        hdr.status, hdr.err = Status.ERROR, e.code & 0xFFFFFFFF
    else:
        room = utm.size - hdr.ret_off
        if len(reply) > min(room, _edge_capacity(utm, hdr)):
            hdr.status, hdr.err = Status.ERROR, ERR_REPLY_TOO_LARGE
        else:
            if reply:
                write(utm.base + hdr.ret_off, reply)
            hdr.status, hdr.ret_len, hdr.err = Status.DONE, len(reply), 0
    write(utm.base, hdr.pack())
    return hdr


def _edge_capacity(utm: Region, hdr: EdgeCallHeader) -> int:
    # replies may not spill into a backing store that follows the first page
    from .paging import PAGE_SIZE

    limit = PAGE_SIZE if utm.size > PAGE_SIZE else utm.size
    return limit - hdr.ret_off


# -- proxied syscalls ------------------------------------------------------------------

EBADF = 9
ENOENT = 2


class ToyFS:
    """Host-side in-memory files behind the proxied syscalls."""

    def __init__(self):
        self.files: dict[str, bytearray] = {}
        self.fds: dict[int, list] = {}
        self._next_fd = 3

    def open(self, path: str, create: bool = True) -> int:
        if path not in self.files:
            if not create:
                raise HostError(ENOENT, f"{path}: no such file")
            self.files[path] = bytearray()
        fd = self._next_fd
        self._next_fd += 1
        self.fds[fd] = [path, 0]
        return fd

    def _fd(self, fd: int) -> list:
        try:
            return self.fds[fd]
        except KeyError:
            raise HostError(EBADF, f"bad file descriptor {fd}") from None

    def read(self, fd: int, n: int) -> bytes:
        ent = self._fd(fd)
        data = self.files[ent[0]]
        out = bytes(data[ent[1] : ent[1] + n])
        ent[1] += len(out)
        return out

    def write(self, fd: int, payload: bytes) -> int:
        ent = self._fd(fd)
        data = self.files[ent[0]]
        pos = ent[1]
        data[pos : pos + len(payload)] = payload
        ent[1] = pos + len(payload)
        return len(payload)

    def close(self, fd: int) -> int:
        self._fd(fd)
        del self.fds[fd]
        return 0

    def seek(self, fd: int, pos: int) -> None:
        self._fd(fd)[1] = pos


def encode_syscall(nr: int, *args) -> bytes:
    head = struct.pack("<I", nr)
    if nr == SYS_OPENAT:
        return head + args[0].encode()
    if nr == SYS_CLOSE:
        return head + struct.pack("<q", args[0])
    if nr == SYS_READ:
        return head + struct.pack("<qQ", args[0], args[1])
    if nr == SYS_WRITE:
        return head + struct.pack("<q", args[0]) + bytes(args[1])
    raise ValueError(f"syscall {nr} is not proxied")


def proxy_handler(fs: ToyFS) -> Callable[[bytes], bytes]:
    """Host function serving PROXY_FID requests; reply is i64 result + data."""

    def handle(payload: bytes) -> bytes:
        nr = struct.unpack("<I", payload[:4])[0]
        body = payload[4:]
        if nr == SYS_OPENAT:
            return struct.pack("<q", fs.open(body.decode()))
        if nr == SYS_CLOSE:
            return struct.pack("<q", fs.close(struct.unpack("<q", body)[0]))
        if nr == SYS_READ:
            fd, n = struct.unpack("<qQ", body)
            data = fs.read(fd, n)
            return struct.pack("<q", len(data)) + data
        if nr == SYS_WRITE:
            fd = struct.unpack("<q", body[:8])[0]
            return struct.pack("<q", fs.write(fd, body[8:]))
        raise HostError(38, f"syscall {nr} not implemented")  # ENOSYS

    return handle


def proxied_syscall(rt: Runtime, nr: int, *args):
    """Forward a syscall to the host; return values come back verbatim (no shielding)."""
    reply = edge_call(rt, PROXY_FID, encode_syscall(nr, *args))
    result = struct.unpack("<q", reply[:8])[0]
    if nr == SYS_READ:
        return reply[8 : 8 + result]
    return result
