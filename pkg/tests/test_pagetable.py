import struct

from hypothesis import given
from hypothesis import strategies as st

from ksim import pagetable as pt


@given(st.integers(0, (1 << 44) - 1), st.integers(0, (1 << 10) - 1))
def test_pte_roundtrip(ppn, flags):
    p = pt.Pte(ppn, flags)
    assert pt.Pte.decode(p.encode()) == p
    assert pt.Pte.decode(struct.unpack("<Q", p.encode())[0]) == p


def test_layout_constants_are_canonical():
    for va in (pt.EAPP_BASE, pt.MMAP_BASE, pt.UTM_VBASE, pt.RT_BASE):
        assert pt.is_canonical(va)
    assert not pt.is_canonical(1 << 38)


def _tables(mapping):
    """Build a 3-level table in a dict from ``{vaddr: (paddr, flags)}``."""
    pages = {}
    nxt = [0x100000]

    def new():
        a = nxt[0]
        nxt[0] += pt.PAGE_SIZE
        pages[a] = bytearray(pt.PAGE_SIZE)
        return a

    root = new()
    for va, (pa, fl) in mapping.items():
        t = root
        for level in (2, 1):
            i = pt.vpn(va, level)
            w = struct.unpack_from("<Q", pages[t], i * 8)[0]
            if not w & pt.V:
                child = new()
                pages[t][i * 8 : i * 8 + 8] = pt.Pte.to(child, pt.V).encode()
                t = child
            else:
                t = pt.Pte.decode(w).paddr
        pages[t][pt.vpn(va, 0) * 8 : pt.vpn(va, 0) * 8 + 8] = pt.Pte.to(pa, fl | pt.V).encode()
    return root, pages


def test_walk_sorted_leaves_and_tables():
    m = {
        pt.MMAP_BASE: (0x5000, pt.R | pt.W | pt.U),
        pt.EAPP_BASE + 0x1000: (0x3000, pt.R | pt.U),
        pt.EAPP_BASE: (0x2000, pt.R | pt.X | pt.U),
    }
    root, pages = _tables(m)
    leaves, tables = pt.walk(lambda a: bytes(pages[a]), root)
    assert [lf.vaddr for lf in leaves] == sorted(m)
    assert [lf.pte.paddr for lf in leaves] == [0x2000, 0x3000, 0x5000]
    assert set(tables) == set(pages)
    assert len(list(pt.iter_dump(leaves))) == 3


def test_walk_rejects_superpage_and_cycles():
    root, pages = _tables({pt.EAPP_BASE: (0x2000, pt.R)})
    bad = dict(pages)
    bad[root] = bytearray(pages[root])
    bad[root][0:8] = pt.Pte.to(0x200000, pt.V | pt.R).encode()
    try:
        pt.walk(lambda a: bytes(bad[a]), root)
        raise AssertionError("superpage accepted")
    except pt.WalkError:
        pass
    loop = {root: bytearray(pt.PAGE_SIZE)}
    loop[root][0:8] = pt.Pte.to(root, pt.V).encode()
    try:
        pt.walk(lambda a: bytes(loop[a]), root)
        raise AssertionError("cycle accepted")
    except pt.WalkError:
        pass


def test_flag_str():
    assert pt.flag_str(pt.V | pt.R | pt.SHARED) == "VR------S"
