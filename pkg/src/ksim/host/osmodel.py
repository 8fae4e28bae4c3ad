"""Untrusted OS model: first-fit physical allocator."""

from __future__ import annotations

import bisect

from ..machine import PAGE_SIZE
from ..sm import Region


class OutOfPhysicalMemory(Exception):
    pass


class PhysAllocator:
    """First-fit allocator over page-granular physical memory.

    ``reserved`` regions (the SM, the scratchpad) are never handed out.
    """

    def __init__(self, mem_size: int, reserved: list[Region] = ()):
        self.mem_size = mem_size
        self._free: list[tuple[int, int]] = [(0, mem_size)]  # sorted (base, end)
        for r in reserved:
            self._take(r.base, r.end)
        self.allocated: dict[int, int] = {}

    def _take(self, base: int, end: int) -> None:
        out = []
        for b, e in self._free:
            if e <= base or b >= end:
                out.append((b, e))
                continue
            if b < base:
                out.append((b, base))
            if end < e:
                out.append((end, e))
        self._free = out

    def free_runs(self) -> list[Region]:
        return [Region(b, e - b) for b, e in self._free]

    def is_free(self, region: Region) -> bool:
        return any(b <= region.base and region.end <= e for b, e in self._free)

    def alloc(self, pages: int, align: int = PAGE_SIZE) -> Region:
        """First free run (lowest address) that fits ``pages`` at ``align``."""
        if pages <= 0:
            raise ValueError("allocation must be at least one page")
        size = pages * PAGE_SIZE
        for b, e in self._free:
            base = -(-b // align) * align
            if base + size <= e:
                return self.alloc_at(base, pages)
        raise OutOfPhysicalMemory(f"no free run of {pages} pages")

    def alloc_at(self, base: int, pages: int) -> Region:
        r = Region(base, pages * PAGE_SIZE)
        if base % PAGE_SIZE or not self.is_free(r):
            raise OutOfPhysicalMemory(f"{r} is not free")
        self._take(r.base, r.end)
        self.allocated[r.base] = r.size
        return r

    def alloc_napot(self, pages: int) -> Region:
        """Naturally aligned power-of-two region (what a utm PMP entry needs)."""
        if pages & (pages - 1):
            raise ValueError("utm size must be a power-of-two number of pages")
        return self.alloc(pages, align=pages * PAGE_SIZE)

    def free(self, region: Region) -> None:
        self.allocated.pop(region.base, None)
        runs = self._free
        bisect.insort(runs, (region.base, region.end))
        merged: list[tuple[int, int]] = []
        for b, e in runs:
            if merged and merged[-1][1] >= b:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((b, e))
        self._free = merged

    def grow(self, region: Region, extra_pages: int) -> Region:
        """Claim the pages directly after ``region``; raises if they are taken."""
        ext = self.alloc_at(region.end, extra_pages)
        self.allocated.pop(ext.base, None)
        self.allocated[region.base] = region.size + ext.size
        return ext
