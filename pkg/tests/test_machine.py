import random

import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import NA4, NAPOT, OFF, TOR

from ksim.machine import (
    NUM_PMP,
    AccessFault,
    AccessKind,
    Hart,
    Machine,
    PmpEntry,
    PmpFile,
    PmpMode,
    PrivMode,
    RegionOutOfBounds,
    UnalignedRegion,
    decode_entry,
    encode_region,
    pmp_check,
)


def test_numbering_matches_oracle():
    assert (PmpMode.OFF, PmpMode.TOR, PmpMode.NA4, PmpMode.NAPOT) == (OFF, TOR, NA4, NAPOT)
    assert (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC) == (1, 2, 4)
    assert NUM_PMP == 16


def test_decode_modes():
    assert decode_entry(PmpEntry(PmpMode.OFF, 5)) is None
    assert decode_entry(PmpEntry(PmpMode.NA4, 0x10)) == (0x40, 0x44)
    assert decode_entry(PmpEntry(PmpMode.NAPOT, 0x1FF)) == (0, 0x1000)
    assert decode_entry(PmpEntry(PmpMode.NAPOT, 0x400)) == (0x1000, 0x1008)
    assert decode_entry(PmpEntry(PmpMode.TOR, 0x400), 0x100) == (0x400, 0x1000)
    assert decode_entry(PmpEntry(PmpMode.TOR, 0x100), 0x400) is None


@given(st.integers(0, 20), st.integers(0, 1 << 10), st.integers(1, 1 << 20))
def test_encode_round_trips(order, slot, size4):
    size = 4 << order
    base = slot * size
    e, lower = encode_region(base, size)
    assert decode_entry(e, lower or 0) == (base, base + size)
    # arbitrary word-aligned regions go through TOR when not naturally aligned
    b2 = slot * 4096 + 4
    e2, lower2 = encode_region(b2, size4 * 4)
    assert decode_entry(e2, lower2 or 0) == (b2, b2 + size4 * 4)


def test_encode_rejects():
    with pytest.raises(UnalignedRegion):
        encode_region(2, 8)
    with pytest.raises(UnalignedRegion):
        encode_region(0, 0)
    with pytest.raises(RegionOutOfBounds):
        encode_region(0x1000, 0x2000, mem_size=0x2000)


def _hart(*entries):
    h = Hart(0)
    for i, e in enumerate(entries):
        h.pmp.set(i, e)
    return h


def test_lowest_entry_wins_and_partial_overlap_denied():
    deny = PmpEntry(PmpMode.NAPOT, (0x1000 | 0x7FF) >> 2)  # [0x1000, 0x2000) no perms
    allow = PmpEntry(PmpMode.NAPOT, (0 | 0x7FFF) >> 2, True, True, True)  # [0, 0x10000)
    h = _hart(deny, allow)
    assert not pmp_check(h, 0x1800, 4, AccessKind.READ, PrivMode.S)
    assert pmp_check(h, 0x2000, 4, AccessKind.READ, PrivMode.S)
    # straddles the boundary of entry 0: denied even though entry 1 covers it
    assert not pmp_check(h, 0x1FFE, 4, AccessKind.READ, PrivMode.S)
    assert not pmp_check(h, 0x10000, 1, AccessKind.READ, PrivMode.U)
    assert pmp_check(h, 0x1800, 8, AccessKind.WRITE, PrivMode.M)


def test_tor_follows_predecessor_address():
    f = PmpFile()
    f.set(1, PmpEntry(PmpMode.TOR, 0x800, True))
    assert f.region(1) == (0, 0x2000)
    f.set(0, PmpEntry(PmpMode.OFF, 0x400))
    assert f.region(1) == (0x1000, 0x2000)


def test_machine_access_logs_denials():
    m = Machine(1 << 16, 2)
    h = m.harts[1]
    with pytest.raises(AccessFault):
        m.read(h, 0x100, 4)
    assert m.log.events("denied")
    m.set_pmp_local(h, 0, PmpEntry(PmpMode.NAPOT, 0x3FFF, True, True))
    m.write(h, 0x100, b"abcd")
    assert m.read(h, 0x100, 4) == b"abcd"
    with pytest.raises(AccessFault):
        m.mem_access(h, 0x100, AccessKind.EXEC)


def test_broadcast_reaches_every_hart():
    m = Machine(1 << 16, 4)
    e = PmpEntry(PmpMode.NA4, 7, True)
    assert m.broadcast_pmp_update(m.harts[2], 3, e) == 4
    assert all(h.pmp[3] == e for h in m.harts)


def test_snapshot_roundtrip(tmp_path):
    m = Machine(1 << 16, 2)
    m.memory.write(0x10, bytes(range(32)))
    m.dump(tmp_path / "mem.bin")
    m2 = Machine.load(tmp_path / "mem.bin")
    assert m2.memory.read(0x10, 32) == bytes(range(32))
    assert len(m2.harts) == 2


def test_out_of_range_access_rejected():
    m = Machine(1 << 12, 1)
    with pytest.raises(Exception):
        m.mem_access(m.harts[0], (1 << 12) - 2, AccessKind.READ, length=4, priv=PrivMode.M)


def test_random_denials_never_touch_memory():
    rnd = random.Random(0)
    m = Machine(1 << 16, 1)
    h = m.harts[0]
    before = bytes(m.memory.read(0, 1 << 16))
    for _ in range(200):
        with pytest.raises(AccessFault):
            m.write(h, rnd.randrange((1 << 16) - 8), b"\xff" * 8)
    assert m.memory.read(0, 1 << 16) == before
