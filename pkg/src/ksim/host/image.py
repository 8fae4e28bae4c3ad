"""Enclave image container and the OS-side loader that builds the initial page table.

Image layout (little-endian)::

    magic "KSIM1" | version u8 | reserved u16
    rt_entry u64 | eapp_entry u64 | config_len u32 | seg_count u32
    config bytes
    seg_count x { vaddr u64 | length u32 | flags u8 | pad 3 | data[length] }

``flags`` uses the page-table bit positions (R=0x2, W=0x4, X=0x8, U=0x10).
Segments without U belong to the runtime, segments with U to the eapp.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from .. import pagetable as pt
from ..machine import PAGE_SIZE, AccessKind, Hart, Machine, PrivMode
from ..sm import Region

MAGIC = b"KSIM1"
VERSION = 1
_HEADER = struct.Struct("<5sBHQQII")
_SEG = struct.Struct("<QIB3x")
SEG_FLAGS = pt.R | pt.W | pt.X | pt.U

MALICIOUS_VARIANTS = ("host_map", "alias", "table_alias", "shared_user", "table_escape")


class ImageError(ValueError):
    pass


class ImageTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    vaddr: int
    flags: int
    data: bytes

    @property
    def npages(self) -> int:
        return -(-len(self.data) // PAGE_SIZE)

    def pages(self):
        """(vaddr, 4096-byte page) pairs, zero-padded."""
        for i in range(self.npages):
            chunk = self.data[i * PAGE_SIZE : (i + 1) * PAGE_SIZE]
            yield self.vaddr + i * PAGE_SIZE, chunk.ljust(PAGE_SIZE, b"\0")


@dataclass(frozen=True)
class EnclaveImage:
    rt_entry: int
    eapp_entry: int
    segments: tuple[Segment, ...]
    config: bytes = b""

    def __post_init__(self):
        validate(self)

    @property
    def rt_segments(self) -> list[Segment]:
        return [s for s in self.segments if not s.flags & pt.U]

    @property
    def eapp_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.flags & pt.U]

    @property
    def payload_pages(self) -> int:
        return sum(s.npages for s in self.segments)

    def to_bytes(self) -> bytes:
        out = bytearray(
            _HEADER.pack(MAGIC, VERSION, 0, self.rt_entry, self.eapp_entry, len(self.config), len(self.segments))
        )
        out += self.config
        for s in self.segments:
            out += _SEG.pack(s.vaddr, len(s.data), s.flags) + s.data
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EnclaveImage":
        if len(raw) < _HEADER.size:
            raise ImageError("truncated header")
        magic, version, _, rt_entry, eapp_entry, clen, nseg = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ImageError("bad magic")
        if version != VERSION:
            raise ImageError(f"unsupported image version {version}")
        off = _HEADER.size
        config = raw[off : off + clen]
        if len(config) != clen:
            raise ImageError("truncated config")
        off += clen
        segs = []
        for _ in range(nseg):
            if off + _SEG.size > len(raw):
                raise ImageError("truncated segment header")
            vaddr, length, flags = _SEG.unpack_from(raw, off)
            off += _SEG.size
            data = raw[off : off + length]
            if len(data) != length:
                raise ImageError("truncated segment data")
            off += length
            segs.append(Segment(vaddr, flags, data))
        if off != len(raw):
            raise ImageError("trailing bytes after last segment")
        return cls(rt_entry, eapp_entry, tuple(segs), config)


def validate(img: EnclaveImage) -> None:
    seen: set[int] = set()
    if not img.segments:
        raise ImageError("image has no segments")
    for s in img.segments:
        if s.vaddr % PAGE_SIZE:
            raise ImageError(f"segment {s.vaddr:#x} is not page aligned")
        if not s.data:
            raise ImageError(f"segment {s.vaddr:#x} is empty")
        if s.flags & ~SEG_FLAGS or not s.flags & (pt.R | pt.W | pt.X):
            raise ImageError(f"segment {s.vaddr:#x} has bad flags {s.flags:#x}")
        if not pt.is_canonical(s.vaddr + s.npages * PAGE_SIZE - 1):
            raise ImageError(f"segment {s.vaddr:#x} is not canonical")
        if pt.UTM_VBASE <= s.vaddr + s.npages * PAGE_SIZE - 1 and s.vaddr < pt.RT_BASE:
            raise ImageError(f"segment {s.vaddr:#x} overlaps the shared-buffer window")
        for v, _ in s.pages():
            if v in seen:
                raise ImageError(f"segments overlap at {v:#x}")
            seen.add(v)


# -- loader -------------------------------------------------------------------------------


@dataclass
class LoadedLayout:
    pt_root: int
    payload: Region
    table_pages: list[int] = field(default_factory=list)

    @property
    def used_pages(self) -> int:
        return self.payload.size // PAGE_SIZE + len(self.table_pages)


def _table_keys(vaddrs) -> tuple[set, set]:
    l1 = {pt.vpn(v, 2) for v in vaddrs}
    l0 = {(pt.vpn(v, 2), pt.vpn(v, 1)) for v in vaddrs}
    return l1, l0


def pages_needed(img: EnclaveImage, utm: Region) -> int:
    vaddrs = [v for s in img.segments for v, _ in s.pages()]
    vaddrs += [pt.UTM_VBASE + i * PAGE_SIZE for i in range(utm.size // PAGE_SIZE)]
    l1, l0 = _table_keys(vaddrs)
    return img.payload_pages + 1 + len(l1) + len(l0)


def build_initial_pt(
    machine: Machine,
    hart: Hart,
    img: EnclaveImage,
    epm: Region,
    utm: Region,
    target_base: int | None = None,
    malicious: str | None = None,
) -> LoadedLayout:
    """Copy the image into ``epm`` and build its page table there.

    Placement is deterministic: payload pages in file order from the start of
    ``epm``, table pages right after them (root first). PTEs reference
    ``target_base`` instead of ``epm.base`` when the enclave will be copied
    elsewhere (scratchpad loading). ``malicious`` selects a deliberately
    broken variant for attack tests.
    """
    if malicious is not None and malicious not in MALICIOUS_VARIANTS:
        raise ValueError(f"unknown malicious variant {malicious}")
    extra = 1 if malicious in ("alias", "table_alias", "host_map") else 0
    need = pages_needed(img, utm) + extra * 2
    if need * PAGE_SIZE > epm.size:
        raise ImageTooLarge(f"image needs {need} pages, epm has {epm.size // PAGE_SIZE}")
    delta = (epm.base if target_base is None else target_base) - epm.base

    def write(addr: int, data: bytes) -> None:
        machine.mem_access(hart, addr, AccessKind.WRITE, data=data, priv=PrivMode.S)

    cursor = epm.base
    leaves: list[tuple[int, int, int]] = []  # (vaddr, paddr as referenced, flags)
    for s in img.segments:
        for v, page in s.pages():
            write(cursor, page)
            leaves.append((v, cursor + delta, s.flags | pt.V))
            cursor += PAGE_SIZE
    payload = Region(epm.base, cursor - epm.base)
    for i in range(utm.size // PAGE_SIZE):
        leaves.append((pt.UTM_VBASE + i * PAGE_SIZE, utm.base + i * PAGE_SIZE, pt.V | pt.R | pt.W | pt.SHARED))

    root = cursor
    write(root, bytes(PAGE_SIZE))
    tables = [root]
    cursor += PAGE_SIZE
    children: dict[tuple, int] = {}

    def table_for(key: tuple, parent: int, idx: int) -> int:
        nonlocal cursor
        if key not in children:
            page = cursor
            cursor += PAGE_SIZE
            write(page, bytes(PAGE_SIZE))
            tables.append(page)
            children[key] = page
            write(parent + idx * pt.PTE_SIZE, pt.Pte.to(page + delta, pt.V).encode())
        return children[key]

    if malicious == "alias":
        leaves.append((pt.EAPP_BASE + 0x100_0000, leaves[0][1], pt.V | pt.R | pt.U))
    elif malicious == "host_map":
        host_page = epm.end if epm.end + PAGE_SIZE <= machine.mem_size else epm.base - PAGE_SIZE
        leaves.append((pt.EAPP_BASE + 0x100_0000, host_page, pt.V | pt.R | pt.U))
    elif malicious == "table_alias":
        leaves.append((pt.EAPP_BASE + 0x100_0000, root + delta, pt.V | pt.R | pt.W | pt.U))
    elif malicious == "shared_user":
        leaves = [(v, p, f | pt.U if f & pt.SHARED else f) for v, p, f in leaves]

    for v, p, f in leaves:
        l1 = table_for((pt.vpn(v, 2),), root, pt.vpn(v, 2))
        l0 = table_for((pt.vpn(v, 2), pt.vpn(v, 1)), l1, pt.vpn(v, 1))
        write(l0 + pt.vpn(v, 0) * pt.PTE_SIZE, pt.Pte.to(p, f).encode())

    if malicious == "table_escape":
        # point the first root entry at a table page in host memory
        rogue = epm.end if epm.end + PAGE_SIZE <= machine.mem_size else epm.base - PAGE_SIZE
        first = next(i for i in range(pt.ENTRIES) if (i,) in children)
        write(rogue, machine.memory.read(children[(first,)], PAGE_SIZE))
        write(root + first * pt.PTE_SIZE, pt.Pte.to(rogue, pt.V).encode())

    return LoadedLayout(root + delta, payload, [t + delta for t in tables])


# -- random images ------------------------------------------------------------------------


def random_image(rnd: random.Random, max_eapp_pages: int = 4, data_pages: int | None = None) -> EnclaveImage:
    """Small random image: one runtime code page plus eapp code/data segments."""
    rt = Segment(pt.RT_BASE, pt.R | pt.X, rnd.randbytes(rnd.randint(16, PAGE_SIZE)))
    code_len = rnd.randint(1, PAGE_SIZE)
    code = Segment(pt.EAPP_BASE, pt.U | pt.R | pt.X, rnd.randbytes(code_len))
    ndata = data_pages if data_pages is not None else rnd.randint(1, max(1, max_eapp_pages - 1))
    data_len = rnd.randint((ndata - 1) * PAGE_SIZE + 1, ndata * PAGE_SIZE)
    data = Segment(pt.EAPP_BASE + PAGE_SIZE, pt.U | pt.R | pt.W, rnd.randbytes(data_len))
    config = rnd.randbytes(rnd.randint(0, 16))
    return EnclaveImage(pt.RT_BASE, pt.EAPP_BASE, (rt, code, data), config)


def data_vaddr() -> int:
    """First writable eapp page in images from :func:`random_image`."""
    return pt.EAPP_BASE + PAGE_SIZE
