import random

import pytest

from ksim.edge import (
    PROXY_FID,
    EdgeCallHeader,
    HostFunctionTable,
    Status,
    ToyFS,
    UnknownFunction,
)
from ksim.host import Host, HostConfig, random_image
from ksim.host.actions import EdgeCall, Syscall, WriteV
from ksim.host.image import data_vaddr
from ksim.paging import EDGE_HEADER, SYS_CLOSE, SYS_OPENAT, SYS_READ, SYS_WRITE


def _running(**kw):
    h = Host(HostConfig(seed=0, **kw))
    e = h.load(random_image(random.Random(1)))
    h.run(e.eid, 1)
    return h, e


def test_header_roundtrip():
    hdr = EdgeCallHeader(3, Status.DONE, EDGE_HEADER, 10, EDGE_HEADER, 4, 0)
    assert len(hdr.pack()) == EDGE_HEADER
    assert EdgeCallHeader.unpack(hdr.pack()) == hdr
    assert hdr.in_bounds(4096) and not EdgeCallHeader(args_len=5000).in_bounds(4096)


def test_function_table():
    t = HostFunctionTable()
    fid = t.register(lambda b: b[::-1], "rev")
    assert t.names["rev"] == fid and t.dispatch(fid, b"abc") == b"cba"
    with pytest.raises(UnknownFunction):
        t.dispatch(fid + 1, b"")


def test_edge_call_roundtrip_and_scrub():
    h, e = _running()
    wc = h.functions.names["wordcount"]
    assert h.exec_action(e.eid, EdgeCall(wc, b"a b c")) == b"3"
    assert h.exec_action(e.eid, EdgeCall(h.functions.names["echo"], b"hi")) == b"hi"
    # nothing the host could read is left in the shared buffer
    idle = EdgeCallHeader().pack()
    assert h.host_read(e.utm.base, e.utm.size) == idle + bytes(e.utm.size - len(idle))
    assert e.runtime.edge_stats.calls == 2
    assert h.log.events("stop")


def test_unknown_function_and_oversize():
    h, e = _running()
    assert h.exec_action(e.eid, EdgeCall(99, b"")) == ("error", "UnknownFunction")
    assert h.exec_action(e.eid, EdgeCall(0, bytes(e.utm.size))) == ("error", "PayloadTooLarge")


def test_dropped_reply_is_an_error_not_a_hang():
    h, e = _running()
    h.policy.drop_reply.add(e.eid)
    assert h.exec_action(e.eid, EdgeCall(0, b"x y")) == ("error", "HostError")


def test_secret_in_epm_not_in_utm():
    h, e = _running()
    secret = b"enclave-secret!!"
    for i, b in enumerate(secret):
        h.exec_action(e.eid, WriteV(data_vaddr() + i, b))
    h.exec_action(e.eid, EdgeCall(h.functions.names["echo"], b"public"))
    assert secret not in h.host_read(e.utm.base, e.utm.size)


def test_proxied_file_syscalls():
    h, e = _running()
    fd = h.exec_action(e.eid, Syscall(SYS_OPENAT, ("notes.txt",)))
    assert isinstance(fd, int) and fd >= 0
    assert h.exec_action(e.eid, Syscall(SYS_WRITE, (fd, b"hello"))) == 5
    assert h.exec_action(e.eid, Syscall(SYS_CLOSE, (fd,))) == 0
    fd = h.exec_action(e.eid, Syscall(SYS_OPENAT, ("notes.txt",)))
    assert h.exec_action(e.eid, Syscall(SYS_READ, (fd, 16))) == b"hello"
    assert bytes(h.fs.files["notes.txt"]) == b"hello"
    assert PROXY_FID in h.functions.special


def test_toyfs_errors():
    fs = ToyFS()
    with pytest.raises(Exception):
        fs.read(42, 1)
    fd = fs.open("a")
    assert fs.write(fd, b"xyz") == 3
    fs.seek(fd, 1)
    assert fs.read(fd, 5) == b"yz"
