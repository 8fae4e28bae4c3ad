"""Simulated physical machine: memory, harts, per-hart PMP files and the IPI bus."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

from . import kernels

PAGE_SIZE = 4096
NUM_PMP = 16
_U64_MAX = (1 << 64) - 1


class PrivMode(enum.IntEnum):
    U = 0
    S = 1
    M = 3


class AccessKind(enum.IntEnum):
    READ = 1
    WRITE = 2
    EXEC = 4

    @property
    def label(self) -> str:
        return self.name.lower()


class PmpMode(enum.IntEnum):
    OFF = 0
    TOR = 1
    NA4 = 2
    NAPOT = 3


class UnalignedRegion(ValueError):
    pass


class RegionOutOfBounds(ValueError):
    pass


class AccessFault(Exception):
    """A PMP-denied access (models a RISC-V access fault)."""

    def __init__(self, addr: int, kind: AccessKind, priv: PrivMode):
        super().__init__(f"access fault: {kind.label} at {addr:#x} from {priv.name}-mode")
        self.addr = addr
        self.kind = kind
        self.priv = priv


@dataclass(frozen=True)
class PmpEntry:
    mode: PmpMode = PmpMode.OFF
    addr: int = 0
    r: bool = False
    w: bool = False
    x: bool = False

    @property
    def perm_bits(self) -> int:
        return (AccessKind.READ if self.r else 0) | (AccessKind.WRITE if self.w else 0) | (
            AccessKind.EXEC if self.x else 0
        )

    def with_perms(self, r: bool = False, w: bool = False, x: bool = False) -> "PmpEntry":
        return PmpEntry(self.mode, self.addr, r, w, x)


OFF_ENTRY = PmpEntry()


def decode_entry(entry: PmpEntry, prev_addr: int = 0) -> tuple[int, int] | None:
    """Decode an entry to its byte region ``(base, end)``; ``None`` when it matches nothing.

    ``prev_addr`` is the pmpaddr of the preceding entry, which is the lower
    bound of a TOR region (zero for entry 0).
    """
    if entry.mode == PmpMode.OFF:
        return None
    if entry.mode == PmpMode.NA4:
        base = entry.addr << 2
        return base, base + 4
    if entry.mode == PmpMode.NAPOT:
        ones = 0
        a = entry.addr
        while a & 1:
            ones += 1
            a >>= 1
        size = 1 << (ones + 3)
        base = (entry.addr & ~((1 << ones) - 1)) << 2
        return base, base + size
    lo, hi = prev_addr << 2, entry.addr << 2
    if lo >= hi:
        return None
    return lo, hi


def encode_region(
    base: int, size: int, mem_size: int | None = None
) -> tuple[PmpEntry, int | None]:
    """Pick the tightest addressing mode for ``[base, base+size)``.

    Returns ``(entry, lower)``. ``lower`` is ``None`` for NAPOT/NA4; for TOR it
    is the pmpaddr value the preceding entry must hold as the lower bound.
    The returned entry carries no permissions.
    """
    if base % 4 or size % 4:
        raise UnalignedRegion(f"region {base:#x}+{size:#x} is not 4-byte aligned")
    if size < 4:
        raise UnalignedRegion("region smaller than 4 bytes")
    if mem_size is not None and base + size > mem_size:
        raise RegionOutOfBounds(f"region {base:#x}+{size:#x} exceeds memory {mem_size:#x}")
    if size == 4:
        return PmpEntry(PmpMode.NA4, base >> 2), None
    if size & (size - 1) == 0 and base % size == 0:
        return PmpEntry(PmpMode.NAPOT, (base | (size // 2 - 1)) >> 2), None
    return PmpEntry(PmpMode.TOR, (base + size) >> 2), base >> 2


class PmpFile:
    """The 16 PMP entries of one hart plus their decoded bounds for the kernel."""

    def __init__(self):
        self.entries: list[PmpEntry] = [OFF_ENTRY] * NUM_PMP
        self.lo = kernels.u64_array(NUM_PMP)
        self.hi = kernels.u64_array(NUM_PMP)
        self.perm = kernels.u8_array(NUM_PMP)

    def __getitem__(self, i: int) -> PmpEntry:
        return self.entries[i]

    def __len__(self) -> int:
        return NUM_PMP

    def set(self, i: int, entry: PmpEntry) -> None:
        self.entries[i] = entry
        self._redecode(i)
        # a TOR successor takes its lower bound from this entry
        if i + 1 < NUM_PMP and self.entries[i + 1].mode == PmpMode.TOR:
            self._redecode(i + 1)

    def region(self, i: int) -> tuple[int, int] | None:
        prev = self.entries[i - 1].addr if i > 0 else 0
        return decode_entry(self.entries[i], prev)

    def _redecode(self, i: int) -> None:
        r = self.region(i)
        if r is None:
            self.lo[i], self.hi[i], self.perm[i] = 0, 0, 0
        else:
            self.lo[i] = r[0]
            self.hi[i] = min(r[1], _U64_MAX)
            self.perm[i] = self.entries[i].perm_bits

    def snapshot(self) -> tuple[PmpEntry, ...]:
        return tuple(self.entries)


@dataclass
class Hart:
    id: int
    priv: PrivMode = PrivMode.S
    pmp: PmpFile = field(default_factory=PmpFile)
    saved_context: bytes = b""
    cycle_counter: int = 0
    # enclave id executing on this hart, None for the host
    enclave: int | None = None

    @property
    def domain(self) -> int:
        """Cache domain: -1 for the host, otherwise the running enclave id."""
        return -1 if self.enclave is None else self.enclave


def pmp_check(hart: Hart, addr: int, length: int, kind: AccessKind, priv: PrivMode) -> bool:
    """True iff ``hart`` may perform the access; M-mode always may."""
    if priv == PrivMode.M:
        return True
    p = hart.pmp
    return bool(kernels.pmp_match(p.lo, p.hi, p.perm, addr, length, int(kind)))


class PhysicalMemory:
    def __init__(self, size: int):
        if size <= 0 or size % PAGE_SIZE:
            raise ValueError("memory size must be a positive multiple of the page size")
        self.size = size
        self.bytes = bytearray(size)

    def _bounds(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise RegionOutOfBounds(f"access {addr:#x}+{length:#x} outside memory")

    def read(self, addr: int, length: int) -> bytes:
        self._bounds(addr, length)
        return bytes(self.bytes[addr : addr + length])

    def write(self, addr: int, data: bytes) -> None:
        self._bounds(addr, len(data))
        self.bytes[addr : addr + len(data)] = data

    def zero(self, addr: int, length: int) -> None:
        self._bounds(addr, length)
        self.bytes[addr : addr + length] = bytes(length)


class AuditLog:
    """Append-only ``step=<n> hart=<h> event=<name> args=<...>`` lines."""

    def __init__(self, machine: "Machine"):
        self._machine = machine
        self.lines: list[str] = []

    def emit(self, hart: int | None, event: str, **args) -> None:
        parts = []
        for k, v in args.items():
            if isinstance(v, int) and not isinstance(v, bool) and k in _HEX_ARGS:
                v = f"{v:#x}"
            parts.append(f"{k}={v}")
        h = "-" if hart is None else str(hart)
        self.lines.append(f"step={self._machine.step} hart={h} event={event} args={','.join(parts)}")

    def events(self, name: str) -> list[str]:
        return [ln for ln in self.lines if f" event={name} " in ln]

    def text(self) -> str:
        return "".join(ln + "\n" for ln in self.lines)


_HEX_ARGS = {"addr", "base", "size", "paddr", "vaddr", "end"}


@dataclass(frozen=True)
class TraceRecord:
    hart: int
    addr: int
    length: int
    kind: AccessKind
    priv: PrivMode
    domain: int
    allowed: bool


class Machine:
    """Flat memory, N harts, audit log, optional cache and access trace."""

    def __init__(self, mem_size: int = 8 << 20, num_harts: int = 4):
        self.memory = PhysicalMemory(mem_size)
        self.harts = [Hart(i) for i in range(num_harts)]
        self.step = 0
        self.log = AuditLog(self)
        self.cache = None
        self.trace: list[TraceRecord] | None = None
        self.booted = False

    @property
    def mem_size(self) -> int:
        return self.memory.size

    def hart(self, i: int) -> Hart:
        return self.harts[i]

    def advance(self, hart: Hart) -> None:
        """One action step executed on ``hart``."""
        self.step += 1
        hart.cycle_counter += 1

    def enable_trace(self) -> list[TraceRecord]:
        self.trace = []
        return self.trace

    def mem_access(
        self,
        hart: Hart,
        addr: int,
        kind: AccessKind,
        data: bytes | None = None,
        length: int | None = None,
        priv: PrivMode | None = None,
    ) -> bytes | None:
        """Checked load/store. Raises :class:`AccessFault` when PMP denies it."""
        if priv is None:
            priv = hart.priv
        if data is not None:
            length = len(data)
        elif length is None:
            length = 1
        self.memory._bounds(addr, length)
        ok = pmp_check(hart, addr, length, kind, priv)
        if self.trace is not None:
            self.trace.append(TraceRecord(hart.id, addr, length, kind, priv, hart.domain, ok))
        if not ok:
            self.log.emit(hart.id, "denied", addr=addr, kind=kind.label, priv=priv.name, len=length)
            raise AccessFault(addr, kind, priv)
        if self.cache is not None:
            self.cache.touch_range(hart.domain, addr, length)
        if kind == AccessKind.WRITE:
            self.memory.write(addr, data)
            return None
        return self.memory.read(addr, length)

    def read(self, hart: Hart, addr: int, length: int, priv: PrivMode | None = None) -> bytes:
        return self.mem_access(hart, addr, AccessKind.READ, length=length, priv=priv)

    def write(self, hart: Hart, addr: int, data: bytes, priv: PrivMode | None = None) -> None:
        self.mem_access(hart, addr, AccessKind.WRITE, data=data, priv=priv)

    def set_pmp_local(self, hart: Hart, index: int, entry: PmpEntry) -> None:
        hart.pmp.set(index, entry)

    def broadcast_pmp_update(self, origin: Hart, index: int, entry: PmpEntry) -> int:
        """Apply a PMP change on every hart before returning (synchronous IPI)."""
        for h in self.harts:
            h.pmp.set(index, entry)
        self.log.emit(origin.id, "ipi_pmp", index=index, mode=entry.mode.name, harts=len(self.harts))
        return len(self.harts)

    # -- snapshot --------------------------------------------------------

    def dump(self, path: str | os.PathLike) -> None:
        """Write the raw memory image and a ``.manifest`` sidecar."""
        path = os.fspath(path)
        with open(path, "wb") as f:
            f.write(self.memory.bytes)
        with open(path + ".manifest", "w") as f:
            f.write(f"memory_size={self.mem_size}\nharts={len(self.harts)}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Machine":
        path = os.fspath(path)
        manifest = {}
        with open(path + ".manifest") as f:
            for line in f:
                line = line.strip()
                if line:
                    k, _, v = line.partition("=")
                    manifest[k] = int(v)
        m = cls(manifest["memory_size"], manifest["harts"])
        with open(path, "rb") as f:
            image = f.read()
        if len(image) != m.mem_size:
            raise ValueError("memory image size does not match manifest")
        m.memory.bytes[:] = image
        return m
