"""The security monitor: enclave metadata, SBI calls, PMP orchestration, attestation."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable

from . import crypto
from . import pagetable as pt
from .cache import HOST
from .machine import (
    NUM_PMP,
    OFF_ENTRY,
    PAGE_SIZE,
    AccessKind,
    Hart,
    Machine,
    PmpEntry,
    PmpMode,
    PrivMode,
    RegionOutOfBounds,
    UnalignedRegion,
    encode_region,
    pmp_check,
)

SM_ENTRY = 0
UTM_ENTRY = NUM_PMP - 2
OS_ENTRY = NUM_PMP - 1
ENCLAVE_ENTRIES = range(1, UTM_ENTRY)
MAX_ATTEST_DATA = 1024
DEFAULT_WATCHDOG = 10_000

HOST_SBI = ("create", "run", "resume", "destroy", "extend")
RT_SBI = ("stop", "exit", "attest", "random", "extend_request")


class SmError(Exception):
    pass


class WrongState(SmError):
    pass


class HartBusy(SmError):
    pass


class IllegalCaller(SmError):
    pass


class UnknownEnclave(SmError):
    pass


class OverlapError(SmError):
    pass


class InvalidMapping(SmError):
    pass


class DuplicatePhysicalPage(SmError):
    pass


class NoFreePmpEntry(SmError):
    pass


class DataTooLarge(SmError):
    pass


class NotAdjacent(SmError):
    pass


class ScratchpadTooSmall(SmError):
    pass


class AlreadyBooted(SmError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Region:
    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def overlaps(self, other: "Region") -> bool:
        return self.base < other.end and other.base < self.end

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + length <= self.end

    def pages(self) -> range:
        return range(self.base, self.end, PAGE_SIZE)

    def __str__(self) -> str:
        return f"[{self.base:#x},{self.end:#x})"


class EnclaveState(enum.Enum):
    CREATED = "Created"
    RUNNING = "Running"
    STOPPED = "Stopped"
    DESTROYED = "Destroyed"


class TrapKind(enum.Enum):
    PAGE_FAULT = "page_fault"
    ILLEGAL = "illegal"
    USER_EXCEPTION = "user_exception"
    EXTERNAL_INTERRUPT = "external_interrupt"
    TIMER = "timer"


_RT_TRAPS = {TrapKind.PAGE_FAULT, TrapKind.ILLEGAL, TrapKind.USER_EXCEPTION}


@dataclass(frozen=True)
class Trap:
    kind: TrapKind
    vaddr: int = 0
    access: AccessKind = AccessKind.READ


class Tick(enum.Enum):
    CONTINUE = "Continue"
    FORCED_YIELD = "ForcedYield"


@dataclass
class CreateRequest:
    epm: Region
    utm: Region
    pt_root: int
    entry_point: int
    config: bytes = b""
    scratchpad: bool = False


@dataclass
class EnclaveDescriptor:
    id: int
    state: EnclaveState
    epm: Region
    utm: Region
    pt_root: int
    entry_point: int
    measurement: bytes
    pmp_index: int
    pmp_slots: tuple[int, ...]
    config: bytes = b""
    saved_context: bytes = b""
    runtime_budget: int = DEFAULT_WATCHDOG
    scratchpad: Region | None = None
    running_hart: int | None = None
    exited: bool = False
    # SM -> runtime notifications (e.g. extend grants)
    events: list[tuple] = field(default_factory=list)

    @property
    def live(self) -> bool:
        return self.state != EnclaveState.DESTROYED


# -- measurement -----------------------------------------------------------------


def serialize_layout(leaves: list[tuple[int, int, bytes]], entry_point: int, config: bytes) -> bytes:
    """Canonical byte string hashed into the measurement.

    ``leaves`` are ``(vaddr, flags, page_bytes)``; order is normalised here.
    """
    out = bytearray(config)
    out += struct.pack("<Q", entry_point)
    for vaddr, flags, page in sorted(leaves, key=lambda t: t[0]):
        out += struct.pack("<QB", vaddr, flags & pt.MEASURED_FLAGS)
        out += page
    return bytes(out)


def measure(machine: Machine, pt_root: int, entry_point: int, config: bytes) -> bytes:
    """Hash of the enclave's virtual layout. Shared (untrusted-buffer) leaves are skipped."""
    mem = machine.memory
    leaves, _ = pt.walk(lambda a: mem.read(a, PAGE_SIZE), pt_root)
    items = [
        (lf.vaddr, lf.pte.flags, mem.read(lf.pte.paddr, PAGE_SIZE))
        for lf in leaves
        if not lf.pte.flags & pt.SHARED
    ]
    return crypto.hash(serialize_layout(items, entry_point, config))


# -- attestation report ----------------------------------------------------------


class ReportParseError(ValueError):
    pass


@dataclass(frozen=True)
class AttestationReport:
    sm_measurement: bytes
    sm_attest_public: bytes
    device_signature: bytes
    enclave_measurement: bytes
    data: bytes
    sm_signature: bytes

    MAGIC = b"KSRP"
    VERSION = 1
    SIZE = 4 + 4 + 32 + 32 + 64 + 32 + 4 + MAX_ATTEST_DATA + 64

    @staticmethod
    def enclave_blob(measurement: bytes, data: bytes) -> bytes:
        return measurement + struct.pack("<I", len(data)) + data.ljust(MAX_ATTEST_DATA, b"\0")

    def to_bytes(self) -> bytes:
        return (
            self.MAGIC
            + struct.pack("<I", self.VERSION)
            + self.sm_measurement
            + self.sm_attest_public
            + self.device_signature
            + self.enclave_blob(self.enclave_measurement, self.data)
            + self.sm_signature
        )

    @classmethod
    def from_bytes(cls, b: bytes) -> "AttestationReport":
        if len(b) != cls.SIZE:
            raise ReportParseError(f"report must be {cls.SIZE} bytes, got {len(b)}")
        if b[:4] != cls.MAGIC:
            raise ReportParseError("bad magic")
        if struct.unpack("<I", b[4:8])[0] != cls.VERSION:
            raise ReportParseError("unsupported version")
        o = 8
        sm_meas, sm_pub, dev_sig = b[o : o + 32], b[o + 32 : o + 64], b[o + 64 : o + 128]
        o += 128
        enc_meas = b[o : o + 32]
        data_len = struct.unpack("<I", b[o + 32 : o + 36])[0]
        if data_len > MAX_ATTEST_DATA:
            raise ReportParseError("data length exceeds 1024")
        raw = b[o + 36 : o + 36 + MAX_ATTEST_DATA]
        if any(raw[data_len:]):
            raise ReportParseError("nonzero data padding")
        sm_sig = b[o + 36 + MAX_ATTEST_DATA :]
        return cls(sm_meas, sm_pub, dev_sig, enc_meas, raw[:data_len], sm_sig)


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.valid


def verify_report(
    report: AttestationReport | bytes,
    device_public: bytes,
    expect_sm: bytes | None = None,
    expect_enclave: bytes | None = None,
) -> Verdict:
    """Check the device -> SM -> enclave chain and optional expected measurements."""
    if isinstance(report, (bytes, bytearray)):
        try:
            report = AttestationReport.from_bytes(bytes(report))
        except ReportParseError as e:
            return Verdict(False, f"parse: {e}")
    try:
        if not crypto.verify(
            device_public, report.sm_measurement + report.sm_attest_public, report.device_signature
        ):
            return Verdict(False, "chain")
        blob = AttestationReport.enclave_blob(report.enclave_measurement, report.data)
        if not crypto.verify(report.sm_attest_public, blob, report.sm_signature):
            return Verdict(False, "enclave-signature")
    except crypto.MalformedKey:
        return Verdict(False, "chain")
    if expect_sm is not None and expect_sm != report.sm_measurement:
        return Verdict(False, "sm-measurement")
    if expect_enclave is not None and expect_enclave != report.enclave_measurement:
        return Verdict(False, "measurement")
    return Verdict(True)


# -- the monitor -------------------------------------------------------------------

HostHandler = Callable[[int, Hart, str, object], object]


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


class SecurityMonitor:
    """M-mode reference monitor. Every public call is one atomic SBI call."""

    def __init__(
        self,
        machine: Machine,
        sm_region: Region,
        sm_image: bytes,
        seed: int,
        device: crypto.DeviceSecret,
        *,
        watchdog_budget: int = DEFAULT_WATCHDOG,
        scratchpad: Region | None = None,
        paranoid: bool = False,
    ):
        if machine.booted:
            raise AlreadyBooted("security monitor already initialised on this machine")
        if sm_region.size <= 0 or sm_region.end > machine.mem_size:
            raise RegionOutOfBounds(f"SM region {sm_region} outside memory")
        sm_entry, lower = encode_region(sm_region.base, sm_region.size, machine.mem_size)
        if lower not in (None, 0):
            raise UnalignedRegion("SM region must be NAPOT-aligned or start at 0")
        if scratchpad is not None:
            if scratchpad.end > machine.mem_size:
                raise RegionOutOfBounds(f"scratchpad {scratchpad} outside memory")
            if scratchpad.overlaps(sm_region):
                raise OverlapError("scratchpad overlaps the SM region")
        self.machine = machine
        self.sm_region = sm_region
        self.scratchpad = scratchpad
        self.device_public = device.public
        boot = crypto.secure_boot(device, sm_image, seed)
        self.sm_measurement = boot.sm_measurement
        self._attest_keys = boot.attest_keys
        self.boot_certificate = boot.certificate
        self.rng = crypto.Rng(seed)
        self.watchdog_budget = watchdog_budget
        self.paranoid = paranoid
        self.enclaves: dict[int, EnclaveDescriptor] = {}
        self._next_id = 0
        self._slot_owner: list[int | None] = [None] * NUM_PMP
        self._scratch_owner: int | None = None
        self.runtimes: dict[int, object] = {}
        self.host_handler: HostHandler | None = None

        h0 = machine.harts[0]
        self._os_entry = PmpEntry(
            PmpMode.NAPOT, (_next_pow2(machine.mem_size) // 2 - 1) >> 2, True, True, True
        )
        machine.broadcast_pmp_update(h0, SM_ENTRY, sm_entry)
        machine.broadcast_pmp_update(h0, OS_ENTRY, self._os_entry)
        machine.booted = True
        machine.log.emit(
            None, "sm_init", base=sm_region.base, size=sm_region.size,
            sm_measurement=self.sm_measurement.hex(),
        )

    @property
    def attest_public(self) -> bytes:
        return self._attest_keys.public

    # -- helpers -------------------------------------------------------------

    def _get(self, eid: int) -> EnclaveDescriptor:
        try:
            return self.enclaves[eid]
        except KeyError:
            raise UnknownEnclave(f"no enclave {eid}") from None

    def _host_caller(self, hart: Hart) -> None:
        if hart.enclave is not None:
            raise IllegalCaller(f"hart {hart.id} is executing enclave {hart.enclave}")

    def _rt_caller(self, eid: int, hart: Hart) -> EnclaveDescriptor:
        desc = self._get(eid)
        if hart.enclave != eid or desc.state != EnclaveState.RUNNING:
            raise IllegalCaller(f"enclave {eid} is not executing on hart {hart.id}")
        return desc

    def _live(self, exclude: int | None = None):
        return [d for d in self.enclaves.values() if d.live and d.id != exclude]

    def _check_region(self, r: Region, what: str) -> None:
        if r.base % PAGE_SIZE or r.size % PAGE_SIZE or r.size <= 0:
            raise UnalignedRegion(f"{what} {r} is not page aligned")
        if r.base < 0 or r.end > self.machine.mem_size:
            raise RegionOutOfBounds(f"{what} {r} outside memory")

    def _check_disjoint(self, r: Region, what: str, exclude: int | None = None) -> None:
        if r.overlaps(self.sm_region):
            raise OverlapError(f"{what} {r} overlaps the SM region")
        for d in self._live(exclude):
            if r.overlaps(d.epm):
                raise OverlapError(f"{what} {r} overlaps enclave {d.id}")

    def _plan_slots(self, region: Region, release: tuple[int, ...] = ()) -> tuple[list[tuple[int, PmpEntry]], int]:
        """Choose free entries for ``region``: one for NAPOT/NA4, an (Off, TOR) pair otherwise."""
        entry, lower = encode_region(region.base, region.size, self.machine.mem_size)
        free = [i for i in ENCLAVE_ENTRIES if self._slot_owner[i] is None or i in release]
        if lower is None:
            if not free:
                raise NoFreePmpEntry("no free PMP entry")
            return [(free[0], entry)], free[0]
        for i in free:
            if i - 1 in free:
                return [(i - 1, PmpEntry(PmpMode.OFF, lower)), (i, entry)], i
        raise NoFreePmpEntry("no adjacent pair of free PMP entries for a TOR region")

    def _install(self, eid: int, plan: list[tuple[int, PmpEntry]]) -> None:
        h0 = self.machine.harts[0]
        for i, e in plan:
            self._slot_owner[i] = eid
            self.machine.broadcast_pmp_update(h0, i, e)

    def _release(self, slots: tuple[int, ...], keep: tuple[int, ...] = ()) -> None:
        h0 = self.machine.harts[0]
        for i in slots:
            if i in keep:
                continue
            self._slot_owner[i] = None
            self.machine.broadcast_pmp_update(h0, i, OFF_ENTRY)

    def _set_enclave_view(self, desc: EnclaveDescriptor, hart: Hart, on: bool) -> None:
        """Local (non-broadcast) PMP flip for a context switch on ``hart``."""
        m = self.machine
        for i in desc.pmp_slots:
            e = hart.pmp[i]
            if e.mode != PmpMode.OFF:
                m.set_pmp_local(hart, i, e.with_perms(on, on, on))
        if on:
            utm_entry, _ = encode_region(desc.utm.base, desc.utm.size)
            m.set_pmp_local(hart, UTM_ENTRY, utm_entry.with_perms(True, True, False))
            m.set_pmp_local(hart, OS_ENTRY, self._os_entry.with_perms())
        else:
            m.set_pmp_local(hart, UTM_ENTRY, OFF_ENTRY)
            m.set_pmp_local(hart, OS_ENTRY, self._os_entry)

    def _switch_in(self, desc: EnclaveDescriptor, hart: Hart) -> None:
        self._set_enclave_view(desc, hart, True)
        hart.enclave = desc.id
        hart.priv = PrivMode.S
        hart.saved_context = desc.saved_context
        desc.state = EnclaveState.RUNNING
        desc.running_hart = hart.id
        desc.runtime_budget = self.watchdog_budget
        if self.machine.cache is not None:
            self.machine.cache.switch_partition(desc.id)

    def _switch_out(self, desc: EnclaveDescriptor, hart: Hart) -> None:
        desc.saved_context = hart.saved_context
        hart.saved_context = b""
        self._set_enclave_view(desc, hart, False)
        hart.enclave = None
        hart.priv = PrivMode.S
        desc.state = EnclaveState.STOPPED
        desc.running_hart = None
        if self.machine.cache is not None:
            self.machine.cache.switch_partition(HOST)

    def _notify_host(self, eid: int, hart: Hart, reason: str, payload=None):
        if self.host_handler is None:
            return None
        return self.host_handler(eid, hart, reason, payload)

    def _after_call(self) -> None:
        if self.paranoid:
            self.check_invariants()

    # -- scratchpad plugin -------------------------------------------------------

    def scratchpad_load(self, staging: Region) -> Region:
        """Copy a staged enclave into the on-chip scratchpad; returns the new epm."""
        sp = self.scratchpad
        if sp is None:
            raise ScratchpadTooSmall("no scratchpad configured")
        if self._scratch_owner is not None:
            raise OverlapError("scratchpad already holds an enclave")
        if staging.size > sp.size:
            raise ScratchpadTooSmall(f"enclave {staging.size:#x} bytes > scratchpad {sp.size:#x}")
        mem = self.machine.memory
        mem.write(sp.base, mem.read(staging.base, staging.size))
        mem.zero(staging.base, staging.size)
        return Region(sp.base, staging.size)

    # -- host-callable SBI ----------------------------------------------------------

    def create(self, hart: Hart, req: CreateRequest) -> int:
        self._host_caller(hart)
        self._check_region(req.epm, "epm")
        self._check_region(req.utm, "utm")
        if req.epm.overlaps(req.utm):
            raise OverlapError("epm overlaps its own utm")
        utm_entry, lower = encode_region(req.utm.base, req.utm.size)
        if lower is not None:
            raise UnalignedRegion("utm must be a naturally aligned power-of-two region")
        self._check_disjoint(req.utm, "utm")
        epm = req.epm
        if req.scratchpad:
            if self.scratchpad is not None and self.scratchpad.overlaps(req.epm):
                raise OverlapError("staging epm overlaps the scratchpad")
            self._check_disjoint(req.epm, "staging epm")
            if self.scratchpad is None or self.scratchpad.overlaps(req.utm):
                raise ScratchpadTooSmall("no usable scratchpad")
            target = Region(self.scratchpad.base, req.epm.size)
            self._check_disjoint(target, "scratchpad epm")
            if target.overlaps(req.utm):
                raise OverlapError("scratchpad overlaps utm")
            plan, primary = self._plan_slots(target)
            epm = self.scratchpad_load(req.epm)
        else:
            self._check_disjoint(epm, "epm")
            if self.scratchpad is not None and epm.overlaps(self.scratchpad):
                raise OverlapError("epm overlaps the reserved scratchpad")
            plan, primary = self._plan_slots(epm)

        try:
            self._validate_layout(epm, req.utm, req.pt_root)
        except SmError:
            if req.scratchpad:
                mem = self.machine.memory
                mem.write(req.epm.base, mem.read(epm.base, epm.size))
                mem.zero(epm.base, epm.size)
            raise
        measurement = measure(self.machine, req.pt_root, req.entry_point, req.config)

        eid = self._next_id
        self._next_id += 1
        self._install(eid, plan)
        if req.scratchpad:
            self._scratch_owner = eid
        desc = EnclaveDescriptor(
            id=eid,
            state=EnclaveState.CREATED,
            epm=epm,
            utm=req.utm,
            pt_root=req.pt_root,
            entry_point=req.entry_point,
            measurement=measurement,
            pmp_index=primary,
            pmp_slots=tuple(i for i, _ in plan),
            config=req.config,
            saved_context=struct.pack("<QQ", eid, req.entry_point),
            runtime_budget=self.watchdog_budget,
            scratchpad=epm if req.scratchpad else None,
        )
        self.enclaves[eid] = desc
        self.machine.log.emit(
            hart.id, "create", id=eid, base=epm.base, size=epm.size,
            pmp=primary, measurement=measurement.hex(),
        )
        self._after_call()
        return eid

    def _validate_layout(self, epm: Region, utm: Region, pt_root: int) -> None:
        mem = self.machine.memory

        def read_table(a: int) -> bytes:
            if a % PAGE_SIZE or not epm.contains(a, PAGE_SIZE):
                raise InvalidMapping(f"page-table page {a:#x} outside enclave memory")
            return mem.read(a, PAGE_SIZE)

        try:
            leaves, tables = pt.walk(read_table, pt_root)
        except pt.WalkError as e:
            raise InvalidMapping(str(e)) from None
        table_set = set(tables)
        seen: set[int] = set()
        for lf in leaves:
            pa = lf.pte.paddr
            shared = bool(lf.pte.flags & pt.SHARED)
            if not pt.is_canonical(lf.vaddr):
                raise InvalidMapping(f"non-canonical vaddr {lf.vaddr:#x}")
            if shared:
                if not utm.contains(pa, PAGE_SIZE):
                    raise InvalidMapping(f"shared mapping {lf.vaddr:#x} -> {pa:#x} outside utm")
                if lf.pte.flags & pt.U:
                    raise InvalidMapping(f"shared mapping {lf.vaddr:#x} is user-accessible")
            elif not epm.contains(pa, PAGE_SIZE):
                raise InvalidMapping(f"mapping {lf.vaddr:#x} -> {pa:#x} outside enclave memory")
            if pa in table_set:
                raise InvalidMapping(f"mapping {lf.vaddr:#x} targets page-table page {pa:#x}")
            if pa in seen:
                raise DuplicatePhysicalPage(f"physical page {pa:#x} mapped twice")
            seen.add(pa)

    def run(self, eid: int, hart: Hart) -> None:
        desc = self._get(eid)
        if hart.enclave is not None:
            raise HartBusy(f"hart {hart.id} is executing enclave {hart.enclave}")
        if desc.state != EnclaveState.CREATED:
            raise WrongState(f"run: enclave {eid} is {desc.state.value}")
        self._switch_in(desc, hart)
        self.machine.log.emit(hart.id, "run", id=eid, entry=f"{desc.entry_point:#x}")
        rt = self.runtimes.get(eid)
        if rt is not None:
            rt.on_enter(hart)
        self._after_call()

    def resume(self, eid: int, hart: Hart) -> None:
        desc = self._get(eid)
        if hart.enclave is not None:
            raise HartBusy(f"hart {hart.id} is executing enclave {hart.enclave}")
        if desc.state != EnclaveState.STOPPED or desc.exited:
            raise WrongState(f"resume: enclave {eid} is {desc.state.value}{' (exited)' if desc.exited else ''}")
        self._switch_in(desc, hart)
        self.machine.log.emit(hart.id, "resume", id=eid)
        rt = self.runtimes.get(eid)
        if rt is not None:
            rt.on_enter(hart)
        self._after_call()

    def destroy(self, eid: int, hart: Hart) -> None:
        self._host_caller(hart)
        desc = self._get(eid)
        if desc.state not in (EnclaveState.CREATED, EnclaveState.STOPPED):
            raise WrongState(f"destroy: enclave {eid} is {desc.state.value}")
        self.machine.memory.zero(desc.epm.base, desc.epm.size)
        self._release(desc.pmp_slots)
        if self._scratch_owner == eid:
            self._scratch_owner = None
        desc.state = EnclaveState.DESTROYED
        self.runtimes.pop(eid, None)
        self.machine.log.emit(hart.id, "destroy", id=eid, base=desc.epm.base, size=desc.epm.size)
        self._after_call()

    def extend(self, eid: int, hart: Hart, region: Region) -> int:
        """Dynamic-resizing plugin: grow the epm by a physically adjacent region."""
        self._host_caller(hart)
        desc = self._get(eid)
        if not desc.live:
            raise WrongState(f"extend: enclave {eid} is destroyed")
        if desc.scratchpad is not None:
            raise WrongState("scratchpad enclaves cannot be extended")
        self._check_region(region, "extension")
        if region.base != desc.epm.end:
            raise NotAdjacent(f"extension {region} does not start at epm end {desc.epm.end:#x}")
        grown = Region(desc.epm.base, desc.epm.size + region.size)
        self._check_disjoint(region, "extension", exclude=eid)
        if region.overlaps(desc.utm):
            raise OverlapError("extension overlaps the enclave's utm")
        if self.scratchpad is not None and region.overlaps(self.scratchpad):
            raise OverlapError("extension overlaps the reserved scratchpad")
        plan, primary = self._plan_slots(grown, release=desc.pmp_slots)
        new_slots = tuple(i for i, _ in plan)
        self._release(desc.pmp_slots, keep=new_slots)
        self._install(eid, plan)
        desc.epm = grown
        desc.pmp_slots = new_slots
        desc.pmp_index = primary
        if desc.state == EnclaveState.RUNNING:
            self._set_enclave_view(desc, self.machine.harts[desc.running_hart], True)
        desc.events.append(("extend", region))
        self.machine.log.emit(hart.id, "extend", id=eid, base=region.base, size=region.size)
        self._after_call()
        return grown.size

    # -- runtime-callable SBI -----------------------------------------------------------

    def stop(self, eid: int, hart: Hart, reason: str = "pause", payload=None):
        """Pause the enclave and hand the hart back to the OS.

        The OS handler (if registered) runs before this returns and may
        resume the enclave; its return value is passed back to the runtime.
        """
        desc = self._rt_caller(eid, hart)
        self._switch_out(desc, hart)
        self.machine.log.emit(hart.id, "stop", id=eid, reason=reason)
        self._after_call()
        return self._notify_host(eid, hart, reason, payload)

    def exit(self, eid: int, hart: Hart, code: int = 0) -> None:
        desc = self._rt_caller(eid, hart)
        self._switch_out(desc, hart)
        desc.exited = True
        self.machine.log.emit(hart.id, "exit", id=eid, code=code)
        self._after_call()
        self._notify_host(eid, hart, "exit", code)

    def attest(self, eid: int, hart: Hart, data: bytes) -> AttestationReport:
        desc = self._rt_caller(eid, hart)
        if len(data) > MAX_ATTEST_DATA:
            raise DataTooLarge(f"attestation data {len(data)} > {MAX_ATTEST_DATA} bytes")
        blob = AttestationReport.enclave_blob(desc.measurement, data)
        cert = self.boot_certificate
        report = AttestationReport(
            cert.sm_measurement,
            cert.sm_attest_public,
            cert.signature,
            desc.measurement,
            bytes(data),
            crypto.sign(self._attest_keys.secret, blob),
        )
        self.machine.log.emit(hart.id, "attest", id=eid, len=len(data))
        return report

    def sbi_random(self, eid: int, hart: Hart) -> int:
        self._rt_caller(eid, hart)
        return crypto.next_random(self.rng)

    def extend_request(self, eid: int, hart: Hart, pages: int):
        """Runtime asks the OS (via a stop-equivalent exit) to extend its memory."""
        return self.stop(eid, hart, reason="extend_request", payload=pages)

    def sbi_call(self, hart: Hart, name: str, *args):
        """Dispatch by caller: the host may only reach HOST_SBI, an enclave only RT_SBI."""
        if hart.enclave is None:
            if name not in HOST_SBI:
                raise IllegalCaller(f"host may not call {name}")
            if name == "create":
                return self.create(hart, *args)
            eid, *rest = args
            return getattr(self, name)(eid, hart, *rest)
        if name not in RT_SBI:
            raise IllegalCaller(f"enclave may not call {name}")
        method = "sbi_random" if name == "random" else name
        return getattr(self, method)(hart.enclave, hart, *args)

    # -- traps and the watchdog -----------------------------------------------------------

    def watchdog_tick(self, hart: Hart) -> Tick:
        if hart.enclave is None:
            return Tick.CONTINUE
        desc = self.enclaves[hart.enclave]
        desc.runtime_budget -= 1
        if desc.runtime_budget > 0:
            return Tick.CONTINUE
        eid = desc.id
        self._switch_out(desc, hart)
        self.machine.log.emit(hart.id, "forced_yield", id=eid)
        self._after_call()
        self._notify_host(eid, hart, "watchdog", None)
        return Tick.FORCED_YIELD

    def delegate_trap(self, eid: int, hart: Hart, trap: Trap):
        """Route a trap raised inside the enclave.

        Faults and enclave-defined exceptions go to the runtime; anything else
        is forwarded to the OS after a stop-equivalent switch.
        """
        desc = self._rt_caller(eid, hart)
        if trap.kind in _RT_TRAPS:
            rt = self.runtimes.get(eid)
            result = rt.handle_trap(trap) if rt is not None else None
            return "handled-by-RT", result
        self._switch_out(desc, hart)
        self.machine.log.emit(hart.id, "trap_forward", id=eid, trap=trap.kind.value)
        self._notify_host(eid, hart, "interrupt", trap.kind.value)
        return "forwarded-to-OS", None

    def attach_runtime(self, eid: int, runtime) -> None:
        self._get(eid)
        self.runtimes[eid] = runtime

    # -- invariants ------------------------------------------------------------------

    def check_invariants(self) -> None:
        """Disjointness and PMP/state agreement across every hart."""
        live = self._live()
        regions = [("sm", self.sm_region)] + [(f"e{d.id}", d.epm) for d in live]
        for i in range(len(regions)):
            for j in range(i + 1, len(regions)):
                if regions[i][1].overlaps(regions[j][1]):
                    raise InvariantViolation(f"{regions[i][0]} overlaps {regions[j][0]}")
        for h in self.machine.harts:
            if pmp_check(h, self.sm_region.base, self.sm_region.size, AccessKind.READ, PrivMode.S):
                raise InvariantViolation(f"hart {h.id} grants the SM region")
            running = [d for d in live if d.running_hart == h.id and d.state == EnclaveState.RUNNING]
            if len(running) > 1:
                raise InvariantViolation(f"hart {h.id} runs several enclaves")
            if (h.enclave is None) != (not running):
                raise InvariantViolation(f"hart {h.id} enclave field disagrees with descriptors")
            os_open = h.pmp[OS_ENTRY].perm_bits != 0
            for d in live:
                base, size = d.epm.base, d.epm.size
                if d.state == EnclaveState.RUNNING and d.running_hart == h.id:
                    if os_open:
                        raise InvariantViolation(f"hart {h.id} keeps the OS entry open for enclave {d.id}")
                    for k in (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC):
                        if not pmp_check(h, base, size, k, PrivMode.U):
                            raise InvariantViolation(f"hart {h.id} denies running enclave {d.id}")
                else:
                    for priv in (PrivMode.U, PrivMode.S):
                        for a in (base, base + size - 1):
                            for k in (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC):
                                if pmp_check(h, a, 1, k, priv):
                                    raise InvariantViolation(
                                        f"hart {h.id} grants {k.label} to enclave {d.id} ({d.state.value})"
                                    )
            if not running and not os_open:
                raise InvariantViolation(f"hart {h.id} is in host mode with the OS entry closed")
