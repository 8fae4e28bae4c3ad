"""The in-enclave runtime's memory manager.

Owns the enclave page table after creation, the free-page list, optional
self-paging to a sealed backing store in the untrusted buffer, dynamic
resizing requests, and the in-enclave syscalls (mmap, brk, getrandom).
All physical accesses go through ``Machine.mem_access`` on the hart the
enclave currently runs on, so PMP applies to the runtime as well.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass

from . import crypto
from . import pagetable as pt
from .machine import PAGE_SIZE, AccessKind, PrivMode
from .sm import Region, Trap, TrapKind

SLOT_HEADER = 8 + 16 + 32
SLOT_SIZE = SLOT_HEADER + PAGE_SIZE
EDGE_HEADER = 32

SYS_OPENAT = 56
SYS_CLOSE = 57
SYS_READ = 63
SYS_WRITE = 64
SYS_BRK = 214
SYS_MMAP = 222
SYS_GETRANDOM = 278
PROXIED_SYSCALLS = (SYS_OPENAT, SYS_CLOSE, SYS_READ, SYS_WRITE)


class PagingError(Exception):
    pass


class NotFree(PagingError):
    pass


class NotMapped(PagingError):
    pass


class WouldEscapeEpm(PagingError):
    pass


class OutOfMemory(PagingError):
    pass


class PageFault(Exception):
    def __init__(self, vaddr: int, kind: AccessKind):
        super().__init__(f"page fault: {kind.label} at {vaddr:#x}")
        self.vaddr = vaddr
        self.kind = kind


class MapCorruption(Exception):
    """The walk reached memory the enclave does not own."""


class EnclaveFatal(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Descheduled(Exception):
    """The OS did not resume the enclave after a yield (denial of service)."""


@dataclass
class RuntimeConfig:
    paging_limit: int | None = None  # resident eapp pages; None disables self-paging
    encrypt: bool = True
    dyn_resize: bool = False
    extend_chunk: int = 4  # pages asked for per extend request


@dataclass
class EdgeStats:
    calls: int = 0
    copies_in: int = 0
    copies_out: int = 0
    bytes_in: int = 0
    bytes_out: int = 0


class BackingStore:
    """Fixed-size slots at the tail of the untrusted buffer; first-free allocation."""

    def __init__(self, base: int, nslots: int):
        self.base = base
        self.nslots = nslots
        self.used = [False] * nslots

    def addr(self, slot: int) -> int:
        return self.base + slot * SLOT_SIZE

    def alloc(self) -> int | None:
        for i, u in enumerate(self.used):
            if not u:
                self.used[i] = True
                return i
        return None

    def free(self, slot: int) -> None:
        self.used[slot] = False


class Runtime:
    def __init__(self, sm, eid: int, config: RuntimeConfig | None = None):
        self.sm = sm
        self.machine = sm.machine
        self.eid = eid
        self.config = config or RuntimeConfig()
        desc = sm.enclaves[eid]
        self.epm: Region = desc.epm
        self.utm: Region = desc.utm
        self.pt_root = desc.pt_root
        self.hart = None
        self.booted = False
        self.fatal: str | None = None
        self.free: list[int] = []
        self._free_set: set[int] = set()
        self.table_pages: set[int] = set()
        self.eapp_pages: dict[int, int] = {}  # vpage -> leaf flags, mapped or not
        self.resident: list[int] = []
        self.slots: dict[int, tuple[int, bytes]] = {}  # vpage -> (slot, nonce)
        self._nonces: set[bytes] = set()
        self._nonce_ctr = 0
        self._key = b""
        self._victims: crypto.Rng | None = None
        self._grants: list[Region] = []
        self.heap_base = pt.EAPP_BASE
        self.brk = pt.EAPP_BASE
        self.mmap_next = pt.MMAP_BASE
        self.user_exceptions: list[Trap] = []
        self.edge_stats = EdgeStats()
        self.evictions = 0
        self.pc = 0
        if self.paging:
            store_base = self.utm.base + PAGE_SIZE
            nslots = max(0, (self.utm.end - store_base) // SLOT_SIZE)
            self.store = BackingStore(store_base, nslots)
            self.edge_area = Region(self.utm.base + EDGE_HEADER, PAGE_SIZE - EDGE_HEADER)
        else:
            self.store = BackingStore(self.utm.end, 0)
            self.edge_area = Region(self.utm.base + EDGE_HEADER, self.utm.size - EDGE_HEADER)
        sm.attach_runtime(eid, self)

    @property
    def paging(self) -> bool:
        return self.config.paging_limit is not None

    # -- physical access as S-mode on the current hart ------------------------

    def _pread(self, paddr: int, n: int) -> bytes:
        return self.machine.mem_access(self.hart, paddr, AccessKind.READ, length=n, priv=PrivMode.S)

    def _pwrite(self, paddr: int, data: bytes) -> None:
        self.machine.mem_access(self.hart, paddr, AccessKind.WRITE, data=data, priv=PrivMode.S)

    def _log(self, event: str, **args) -> None:
        self.machine.log.emit(self.hart.id if self.hart else None, event, id=self.eid, **args)

    # -- entry -------------------------------------------------------------------

    def on_enter(self, hart) -> None:
        """Called by the SM whenever control transfers into this enclave."""
        self.hart = hart
        desc = self.sm.enclaves[self.eid]
        while desc.events:
            ev = desc.events.pop(0)
            if ev[0] == "extend":
                self._grants.append(ev[1])
        if not self.booted:
            self._boot()

    def _boot(self) -> None:
        leaves, tables = self._walk_all()
        self.table_pages = set(tables)
        mapped = {lf.pte.paddr for lf in leaves}
        for p in self.epm.pages():
            if p not in self.table_pages and p not in mapped:
                self._pwrite(p, bytes(PAGE_SIZE))
                self._free_add(p)
        top = pt.EAPP_BASE
        for lf in leaves:
            if lf.pte.flags & pt.U:
                self.eapp_pages[lf.vaddr] = lf.pte.flags & pt.MEASURED_FLAGS
                self.resident.append(lf.vaddr)
                top = max(top, lf.vaddr + PAGE_SIZE)
        self.heap_base = self.brk = top
        if self.paging:
            a, b = self._random(), self._random()
            self._key = struct.pack("<QQ", a, b)
            self._victims = crypto.Rng(self._random())
            while len(self.resident) > self.config.paging_limit:
                self._evict()
        self.booted = True
        self._log("rt_boot", free=len(self.free), eapp_pages=len(self.eapp_pages))

    def _random(self) -> int:
        return self.sm.sbi_random(self.eid, self.hart)

    def _walk_all(self):
        def read_table(a: int) -> bytes:
            if not self.epm.contains(a, PAGE_SIZE):
                raise MapCorruption(f"page-table page {a:#x} outside enclave memory")
            return self._pread(a, PAGE_SIZE)

        return pt.walk(read_table, self.pt_root)

    # -- free list -------------------------------------------------------------------

    def _free_add(self, p: int) -> None:
        if p not in self._free_set:
            bisect.insort(self.free, p)
            self._free_set.add(p)

    def _free_take(self, p: int | None = None) -> int:
        if p is None:
            p = self.free.pop(0)
        else:
            self.free.remove(p)
        self._free_set.discard(p)
        return p

    def _alloc_page(self) -> int:
        if not self.free and self.paging and self.resident:
            self._evict()
        if not self.free and self.config.dyn_resize:
            self.request_extend(self.config.extend_chunk)
        if not self.free:
            raise OutOfMemory("no free enclave pages")
        return self._free_take()

    # -- page-table manipulation ---------------------------------------------------

    def _in_owned(self, paddr: int) -> bool:
        return self.epm.contains(paddr, PAGE_SIZE)

    def _pte_slot(self, vaddr: int, alloc: bool = False) -> int | None:
        if not pt.is_canonical(vaddr):
            return None
        table = self.pt_root
        if not self._in_owned(table):
            raise MapCorruption(f"root {table:#x} outside enclave memory")
        for level in (2, 1):
            slot = table + pt.vpn(vaddr, level) * pt.PTE_SIZE
            pte = pt.Pte.decode(self._pread(slot, pt.PTE_SIZE))
            if not pte.valid:
                if not alloc:
                    return None
                new = self._alloc_page()
                self.table_pages.add(new)
                self._pwrite(slot, pt.Pte.to(new, pt.V).encode())
                table = new
                continue
            if pte.leaf:
                raise MapCorruption(f"unexpected superpage at {vaddr:#x}")
            if not self._in_owned(pte.paddr):
                raise MapCorruption(f"page-table page {pte.paddr:#x} outside enclave memory")
            table = pte.paddr
        return table + pt.vpn(vaddr, 0) * pt.PTE_SIZE

    def translate(self, vaddr: int, kind: AccessKind, user: bool = True) -> int:
        slot = self._pte_slot(vaddr)
        if slot is None:
            raise PageFault(vaddr, kind)
        pte = pt.Pte.decode(self._pread(slot, pt.PTE_SIZE))
        if not pte.valid:
            raise PageFault(vaddr, kind)
        if not pte.leaf:
            raise MapCorruption(f"non-leaf entry at last level for {vaddr:#x}")
        need = {AccessKind.READ: pt.R, AccessKind.WRITE: pt.W, AccessKind.EXEC: pt.X}[kind]
        if not pte.flags & need:
            raise PageFault(vaddr, kind)
        if user and not pte.flags & pt.U:
            raise PageFault(vaddr, kind)
        if not user and pte.flags & pt.U and kind == AccessKind.EXEC:
            raise PageFault(vaddr, kind)
        target = pte.paddr
        shared_ok = pte.flags & pt.SHARED and self.utm.contains(target, PAGE_SIZE)
        if not (self._in_owned(target) or shared_ok):
            raise MapCorruption(f"mapping {vaddr:#x} -> {target:#x} escapes enclave memory")
        flags = pte.flags | pt.A | (pt.D if kind == AccessKind.WRITE else 0)
        if flags != pte.flags:
            self._pwrite(slot, pt.Pte(pte.ppn, flags).encode())
        return target | (vaddr & (PAGE_SIZE - 1))

    def map(self, vaddr: int, ppage: int, flags: int) -> None:
        if vaddr % PAGE_SIZE or ppage % PAGE_SIZE:
            raise PagingError("unaligned map")
        if not self._in_owned(ppage):
            raise WouldEscapeEpm(f"{ppage:#x} is outside enclave memory")
        if ppage not in self._free_set:
            raise NotFree(f"{ppage:#x} is not on the free list")
        self._free_take(ppage)
        try:
            slot = self._pte_slot(vaddr, alloc=True)
        except Exception:
            self._free_add(ppage)
            raise
        if slot is None:
            self._free_add(ppage)
            raise PagingError(f"non-canonical vaddr {vaddr:#x}")
        old = pt.Pte.decode(self._pread(slot, pt.PTE_SIZE))
        if old.valid:
            self._free_add(ppage)
            raise PagingError(f"{vaddr:#x} already mapped")
        self._pwrite(slot, pt.Pte.to(ppage, flags | pt.V).encode())
        if flags & pt.U:
            self.resident.append(vaddr)

    def unmap(self, vaddr: int, scrub: bool = True) -> int:
        slot = self._pte_slot(vaddr)
        pte = pt.Pte.decode(self._pread(slot, pt.PTE_SIZE)) if slot is not None else pt.Pte()
        if not pte.valid or not pte.leaf:
            raise NotMapped(f"{vaddr:#x} is not mapped")
        self._pwrite(slot, bytes(pt.PTE_SIZE))
        page = pte.paddr
        if scrub:
            self._pwrite(page, bytes(PAGE_SIZE))
        self._free_add(page)
        if vaddr in self.resident:
            self.resident.remove(vaddr)
        return page

    def is_mapped(self, vaddr: int) -> bool:
        slot = self._pte_slot(vaddr & ~(PAGE_SIZE - 1))
        return slot is not None and pt.Pte.decode(self._pread(slot, pt.PTE_SIZE)).valid

    # -- faults and self-paging ---------------------------------------------------------

    def _die(self, reason: str):
        self.fatal = reason
        self._log("fatal", reason=reason)
        hart = self.hart
        if hart is not None and hart.enclave == self.eid:
            self.sm.exit(self.eid, hart, 1)
        raise EnclaveFatal(reason)

    def handle_trap(self, trap: Trap):
        if trap.kind == TrapKind.PAGE_FAULT:
            return self.handle_page_fault(trap.vaddr, trap.access)
        self.user_exceptions.append(trap)
        self._log("user_exception", trap=trap.kind.value)
        return "handled"

    def handle_page_fault(self, vaddr: int, kind: AccessKind = AccessKind.READ) -> str:
        page = vaddr & ~(PAGE_SIZE - 1)
        if page not in self.eapp_pages:
            self._die("SegFault")
        if page in self.resident:
            self._die("ProtectionFault")
        if not self.paging:
            self._die("SegFault")
        while len(self.resident) >= self.config.paging_limit:
            self._evict()
        try:
            ppage = self._alloc_page()
        except OutOfMemory:
            self._die("OutOfMemory")
        restored = page in self.slots
        if restored:
            try:
                data = self._fetch(page)
            except crypto.IntegrityError:
                self._free_add(ppage)
                self._die("IntegrityError")
            self._pwrite(ppage, data)
        self._free_add(ppage)
        self.map(page, ppage, self.eapp_pages[page])
        self._log("page_in", vaddr=page, restored=int(restored))
        return "Resolved"

    def _evict(self) -> None:
        if not self.resident:
            self._die("NoVictim")
        victim = self.resident[self._victims.below(len(self.resident))]
        slot = self.store.alloc()
        if slot is None:
            self._die("StoreFull")
        paddr = self.translate(victim, AccessKind.READ, user=False)
        plain = self._pread(paddr, PAGE_SIZE)
        nonce = struct.pack("<QQ", self.eid, self._nonce_ctr)
        self._nonce_ctr += 1
        assert nonce not in self._nonces, "nonce reuse"
        self._nonces.add(nonce)
        if self.config.encrypt:
            sealed = crypto.seal_page(self._key, nonce, plain)
            body = sealed.ciphertext
            tag = sealed.tag
        else:
            body = plain
            tag = bytes(32)
        self._pwrite(self.store.addr(slot), struct.pack("<Q", victim) + nonce + tag + body)
        self.slots[victim] = (slot, nonce)
        self.unmap(victim, scrub=True)
        self.evictions += 1
        self._log("evict", vaddr=victim, slot=slot)

    def _fetch(self, page: int) -> bytes:
        slot, nonce = self.slots.pop(page)
        addr = self.store.addr(slot)
        raw = self._pread(addr, SLOT_SIZE)
        self._pwrite(addr, bytes(SLOT_SIZE))
        self.store.free(slot)
        owner = struct.unpack("<Q", raw[:8])[0]
        got_nonce, tag, body = raw[8:24], raw[24:56], raw[56:]
        if owner != page or got_nonce != nonce:
            raise crypto.IntegrityError("backing-store slot does not belong to this page")
        if not self.config.encrypt:
            return body
        return crypto.unseal_page(self._key, crypto.SealedPage(body, got_nonce, tag))

    # -- eapp-visible memory -------------------------------------------------------------

    def _user_translate(self, vaddr: int, kind: AccessKind) -> int:
        try:
            return self.translate(vaddr, kind, user=True)
        except PageFault:
            self.sm.delegate_trap(self.eid, self.hart, Trap(TrapKind.PAGE_FAULT, vaddr, kind))
        try:
            return self.translate(vaddr, kind, user=True)
        except PageFault:
            self._die("SegFault")

    def read_bytes(self, vaddr: int, n: int) -> bytes:
        out = bytearray()
        while n > 0:
            chunk = min(n, PAGE_SIZE - (vaddr % PAGE_SIZE))
            pa = self._user_translate(vaddr, AccessKind.READ)
            out += self.machine.mem_access(self.hart, pa, AccessKind.READ, length=chunk, priv=PrivMode.U)
            vaddr += chunk
            n -= chunk
        return bytes(out)

    def write_bytes(self, vaddr: int, data: bytes) -> None:
        off = 0
        while off < len(data):
            chunk = min(len(data) - off, PAGE_SIZE - (vaddr % PAGE_SIZE))
            pa = self._user_translate(vaddr, AccessKind.WRITE)
            self.machine.mem_access(self.hart, pa, AccessKind.WRITE, data=data[off : off + chunk], priv=PrivMode.U)
            vaddr += chunk
            off += chunk

    def read_v(self, vaddr: int) -> int:
        return self.read_bytes(vaddr, 1)[0]

    def write_v(self, vaddr: int, value: int) -> None:
        self.write_bytes(vaddr, bytes([value & 0xFF]))

    def eapp_memory(self) -> dict[int, bytes]:
        """Every eapp page as the eapp sees it (faults pages in as needed)."""
        return {v: self.read_bytes(v, PAGE_SIZE) for v in sorted(self.eapp_pages)}

    # -- syscalls -----------------------------------------------------------------------------

    def _add_user_pages(self, start: int, npages: int) -> None:
        flags = pt.U | pt.R | pt.W
        added = []
        try:
            for i in range(npages):
                v = start + i * PAGE_SIZE
                self.eapp_pages[v] = flags | pt.V
                added.append(v)
                if not self.paging:
                    self.map(v, self._alloc_free_page(), flags)
        except OutOfMemory:
            for v in added:
                self.eapp_pages.pop(v, None)
                if v in self.resident:
                    self.unmap(v)
            raise

    def _alloc_free_page(self) -> int:
        p = self._alloc_page()
        self._free_add(p)
        return p

    def syscall_mmap(self, length: int) -> int:
        npages = -(-length // PAGE_SIZE)
        if npages <= 0:
            raise PagingError("mmap of zero length")
        start = self.mmap_next
        self._add_user_pages(start, npages)
        self.mmap_next = start + (npages + 1) * PAGE_SIZE  # one guard page
        self._log("mmap", vaddr=start, pages=npages)
        return start

    def syscall_brk(self, delta: int) -> int:
        """sbrk-style: returns the previous break."""
        old = self.brk
        new = old + delta
        if new < self.heap_base:
            raise PagingError("brk below heap base")
        first_old = -(-old // PAGE_SIZE) * PAGE_SIZE
        first_new = -(-new // PAGE_SIZE) * PAGE_SIZE
        if first_new > first_old:
            self._add_user_pages(first_old, (first_new - first_old) // PAGE_SIZE)
        else:
            for v in range(first_new, first_old, PAGE_SIZE):
                if v in self.resident:
                    self.unmap(v, scrub=True)
                if v in self.slots:
                    slot, _ = self.slots.pop(v)
                    self._pwrite(self.store.addr(slot), bytes(SLOT_SIZE))
                    self.store.free(slot)
                self.eapp_pages.pop(v, None)
        self.brk = new
        return old

    def syscall_getrandom(self) -> int:
        return self._random()

    def syscall(self, nr: int, *args):
        if nr == SYS_MMAP:
            return self.syscall_mmap(*args)
        if nr == SYS_BRK:
            return self.syscall_brk(*args)
        if nr == SYS_GETRANDOM:
            return self.syscall_getrandom()
        if nr in PROXIED_SYSCALLS:
            from .edge import proxied_syscall

            return proxied_syscall(self, nr, *args)
        raise PagingError(f"unsupported syscall {nr}")

    # -- dynamic resizing -------------------------------------------------------------------

    def yield_to_host(self, reason: str, payload=None):
        """Stop-equivalent exit to the OS; the OS is expected to resume us."""
        result = self.sm.stop(self.eid, self.hart, reason=reason, payload=payload)
        if self.hart is None or self.hart.enclave != self.eid:
            raise Descheduled(reason)
        return result

    def request_extend(self, pages: int) -> bool:
        if not self.config.dyn_resize:
            return False
        hart = self.hart
        claimed = self.sm.extend_request(self.eid, hart, pages)
        if self.hart is None or self.hart.enclave != self.eid:
            raise Descheduled("extend_request")
        grant = next((g for g in self._grants if g == claimed), None)
        if grant is None or grant.base != self.epm.end:
            self._log("extend_rejected", claimed=str(claimed))
            return False
        self._grants.remove(grant)
        self.epm = Region(self.epm.base, self.epm.size + grant.size)
        for p in grant.pages():
            if not self._in_owned(p):
                self._log("extend_rejected", claimed=str(claimed))
                return False
        for p in grant.pages():
            self._pwrite(p, bytes(PAGE_SIZE))
            self._free_add(p)
        self._log("extend_accepted", base=grant.base, size=grant.size)
        return True

    # -- audits -------------------------------------------------------------------------------

    def audit(self) -> list[str]:
        """Containment, uniqueness and residency checks (M-mode reads, no side effects)."""
        mem = self.machine.memory
        problems = []
        try:
            leaves, tables = pt.walk(lambda a: mem.read(a, PAGE_SIZE), self.pt_root)
        except Exception as e:  # noqa: BLE001 - report, don't raise
            return [f"walk failed: {e}"]
        for t in tables:
            if not self.epm.contains(t, PAGE_SIZE):
                problems.append(f"table page {t:#x} outside epm")
        seen = set()
        for lf in leaves:
            pa = lf.pte.paddr
            if lf.pte.flags & pt.SHARED:
                if not self.utm.contains(pa, PAGE_SIZE):
                    problems.append(f"shared leaf {lf.vaddr:#x} outside utm")
            elif not self.epm.contains(pa, PAGE_SIZE):
                problems.append(f"leaf {lf.vaddr:#x} -> {pa:#x} outside epm")
            if pa in seen:
                problems.append(f"physical page {pa:#x} mapped twice")
            seen.add(pa)
            if pa in self._free_set:
                problems.append(f"mapped page {pa:#x} is on the free list")
        if self.paging and len(self.resident) > self.config.paging_limit:
            problems.append(f"resident set {len(self.resident)} exceeds limit")
        return problems

    def dump_page_table(self) -> str:
        mem = self.machine.memory
        leaves, _ = pt.walk(lambda a: mem.read(a, PAGE_SIZE), self.pt_root)
        return "\n".join(pt.iter_dump(leaves))
