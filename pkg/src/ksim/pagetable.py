"""Sv39-style page-table format shared by the OS loader, the SM walker and the runtime.

3 levels x 512 entries, 4 KiB pages, 39-bit virtual addresses. A PTE is a
little-endian u64: bit 0 V, 1 R, 2 W, 3 X, 4 U, 5 G, 6 A, 7 D, bit 8 is a
software bit marking shared (untrusted-buffer) mappings, bits 10..53 PPN.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterator

PAGE_SIZE = 4096
PAGE_SHIFT = 12
LEVELS = 3
ENTRIES = 512
PTE_SIZE = 8
VA_BITS = 39

V = 1 << 0
R = 1 << 1
W = 1 << 2
X = 1 << 3
U = 1 << 4
G = 1 << 5
A = 1 << 6
D = 1 << 7
SHARED = 1 << 8

MEASURED_FLAGS = V | R | W | X | U
_FLAG_MASK = (1 << 10) - 1

# virtual layout (all below 2**38, so canonical)
EAPP_BASE = 0x0040_0000
MMAP_BASE = 0x10_0000_0000
UTM_VBASE = 0x3F_8000_0000
RT_BASE = 0x3F_FFC0_0000


def flag_str(flags: int) -> str:
    return "".join(c if flags & b else "-" for c, b in zip("VRWXUGAD", (V, R, W, X, U, G, A, D))) + (
        "S" if flags & SHARED else "-"
    )


@dataclass(frozen=True)
class Pte:
    ppn: int = 0
    flags: int = 0

    @property
    def valid(self) -> bool:
        return bool(self.flags & V)

    @property
    def leaf(self) -> bool:
        return bool(self.flags & (R | W | X))

    @property
    def paddr(self) -> int:
        return self.ppn << PAGE_SHIFT

    def encode(self) -> bytes:
        return struct.pack("<Q", (self.ppn << 10) | (self.flags & _FLAG_MASK))

    @classmethod
    def decode(cls, raw: bytes | int) -> "Pte":
        if not isinstance(raw, int):
            raw = struct.unpack("<Q", raw)[0]
        return cls((raw >> 10) & ((1 << 44) - 1), raw & _FLAG_MASK)

    @classmethod
    def to(cls, paddr: int, flags: int) -> "Pte":
        return cls(paddr >> PAGE_SHIFT, flags)


def vpn(vaddr: int, level: int) -> int:
    return (vaddr >> (PAGE_SHIFT + 9 * level)) & (ENTRIES - 1)


def is_canonical(vaddr: int) -> bool:
    return 0 <= vaddr < (1 << (VA_BITS - 1))


@dataclass(frozen=True)
class Leaf:
    vaddr: int
    pte: Pte
    pte_addr: int


class WalkError(Exception):
    """Structural problem found while walking (cycle, superpage, bad level)."""


def walk(
    read_page: Callable[[int], bytes], root: int
) -> tuple[list[Leaf], list[int]]:
    """Enumerate every valid leaf and every table page reachable from ``root``.

    Leaves come out in ascending virtual-address order. Superpage leaves and
    non-leaf entries at the last level raise :class:`WalkError`; the caller
    decides which physical ranges are acceptable.
    """
    leaves: list[Leaf] = []
    tables: list[int] = []
    seen: set[int] = set()

    def visit(table: int, level: int, prefix: int) -> None:
        if table in seen:
            raise WalkError(f"table page {table:#x} referenced twice")
        seen.add(table)
        tables.append(table)
        raw = read_page(table)
        words = struct.unpack(f"<{ENTRIES}Q", raw)
        for i, w in enumerate(words):
            if not w & V:
                continue
            pte = Pte.decode(w)
            va = prefix | (i << (PAGE_SHIFT + 9 * level))
            if pte.leaf:
                if level != 0:
                    raise WalkError(f"superpage mapping at {va:#x}")
                leaves.append(Leaf(va, pte, table + i * PTE_SIZE))
            else:
                if level == 0:
                    raise WalkError(f"non-leaf entry at last level for {va:#x}")
                visit(pte.paddr, level - 1, va)

    visit(root, LEVELS - 1, 0)
    return leaves, tables


def iter_dump(leaves: list[Leaf]) -> Iterator[str]:
    """Debug dump, one line per leaf."""
    for lf in leaves:
        yield f"V:{lf.vaddr:#x} -> P:{lf.pte.paddr:#x} flags={flag_str(lf.pte.flags)}"
