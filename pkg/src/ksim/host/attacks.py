"""Adversarial harness: attack scripts run by a compromised OS or a physical attacker.

An attack *succeeds* when the attacker reads a byte sequence that only
exists inside the enclave (the victim's secret) or changes an enclave result
without the enclave or the remote verifier noticing. Denial of service is
allowed and reported as ``dos``, not as a success.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .. import pagetable as pt
from ..machine import PAGE_SIZE, AccessFault, PrivMode
from ..paging import SLOT_SIZE, SYS_MMAP, RuntimeConfig
from ..sm import (
    AttestationReport,
    CreateRequest,
    EnclaveState,
    Region,
    SmError,
    Trap,
    TrapKind,
    verify_report,
)
from .actions import Attest, EdgeCall, ReadV, Syscall, WriteV
from .driver import Host, HostConfig
from .image import MALICIOUS_VARIANTS, pages_needed, random_image
from .osmodel import OutOfPhysicalMemory

ECHO_FID = 1

# -- attacker actions -----------------------------------------------------------------------


@dataclass(frozen=True)
class HostRead:
    target: str = "epm"  # epm | sm | utm | store | staging | scratchpad
    offset: int | None = None  # None: every page of the target
    hart: int | None = None  # None: the attacker hart
    priv: PrivMode = PrivMode.S


@dataclass(frozen=True)
class HostWrite:
    target: str = "epm"
    offset: int = 0
    value: int = 0xCC


@dataclass(frozen=True)
class MapForeign:
    """Map an enclave physical page into a host user process and read it from U-mode."""

    target: str = "epm"
    offset: int = 0


@dataclass(frozen=True)
class TamperStore:
    slot: int | None = None  # None: the slot of the first evicted page
    offset: int = SLOT_SIZE - 1
    value: int = 0x01  # xor mask


@dataclass(frozen=True)
class SwapSlots:
    pass


@dataclass(frozen=True)
class ReplaySlot:
    pass


@dataclass(frozen=True)
class ReplayReport:
    pass


@dataclass(frozen=True)
class ForgeReport:
    bit: int = 0


@dataclass(frozen=True)
class DropEdgeReply:
    pass


@dataclass(frozen=True)
class RefuseResume:
    pass


@dataclass(frozen=True)
class SnoopUtm:
    pass


@dataclass(frozen=True)
class MaliciousCreate:
    variant: str = "host_map"


@dataclass(frozen=True)
class OverlapCreate:
    target: str = "epm"  # epm | sm


@dataclass(frozen=True)
class BadExtend:
    mode: str = "overlap_host"


@dataclass(frozen=True)
class WrongCaller:
    call: str = "attest"


@dataclass(frozen=True)
class DoubleRun:
    pass


@dataclass(frozen=True)
class Interrupt:
    pass


@dataclass(frozen=True)
class VictimStop:
    pass


@dataclass(frozen=True)
class DestroyVictim:
    pass


@dataclass(frozen=True)
class RogueEnclave:
    """The attacker launches its own enclave; its runtime reaches for the victim's epm."""

    priv: PrivMode = PrivMode.S


@dataclass(frozen=True)
class AttackScript:
    name: str
    capability: str
    actions: tuple


@dataclass
class Attempt:
    script: str
    action: str
    outcome: str  # denied | rejected | detected | clean | dos | success
    detail: str = ""
    logged: bool = True  # denied attempts must show up in the audit log


@dataclass
class AttackReport:
    attempts: list[Attempt] = field(default_factory=list)

    @property
    def successes(self) -> int:
        return sum(a.outcome == "success" for a in self.attempts)

    @property
    def unlogged_denials(self) -> int:
        return sum(a.outcome == "denied" and not a.logged for a in self.attempts)

    def merge(self, other: "AttackReport") -> None:
        self.attempts.extend(other.attempts)

    def summary(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for a in self.attempts:
            out[a.outcome] = out.get(a.outcome, 0) + 1
        return out


# -- the corpus --------------------------------------------------------------------------------

CORPUS: tuple[AttackScript, ...] = (
    AttackScript("read_epm_running", "sw:os-memory", (HostRead("epm"),)),
    AttackScript("read_epm_stopped", "sw:os-memory", (VictimStop(), HostRead("epm"))),
    AttackScript("read_epm_user_all_harts", "sw:host-app", tuple(HostRead("epm", None, h, PrivMode.U) for h in range(4))),
    AttackScript("write_epm", "sw:os-memory", (HostWrite("epm", 0), HostWrite("epm", PAGE_SIZE + 7))),
    AttackScript("read_write_sm", "sw:os-memory", (HostRead("sm"), HostWrite("sm", 0x100))),
    AttackScript("map_foreign", "sw:page-tables", (MapForeign("epm", 0), MapForeign("epm", PAGE_SIZE))),
    AttackScript("interrupt_then_read", "sw:interrupts", (Interrupt(), HostRead("epm"))),
    AttackScript("snoop_utm", "sw:edge-calls", (SnoopUtm(),)),
    AttackScript("drop_edge_reply", "sw:edge-calls", (DropEdgeReply(),)),
    AttackScript("refuse_resume", "sw:scheduling", (RefuseResume(),)),
    AttackScript("read_backing_store", "phy:untrusted-memory", (HostRead("store"),)),
    AttackScript("tamper_store_tag", "phy:untrusted-memory", (TamperStore(None, 30, 0x80),)),
    AttackScript("tamper_store_body", "phy:untrusted-memory", (TamperStore(None, SLOT_SIZE - 1, 0x01),)),
    AttackScript("tamper_store_header", "phy:untrusted-memory", (TamperStore(None, 3, 0x10),)),
    AttackScript("swap_store_slots", "phy:untrusted-memory", (SwapSlots(),)),
    AttackScript("replay_store_slot", "phy:untrusted-memory", (ReplaySlot(),)),
    AttackScript("replay_report", "sw:attestation", (ReplayReport(),)),
    AttackScript("forge_report", "sw:attestation", (ForgeReport(0), ForgeReport(8 * 200 + 3), ForgeReport(8 * 1000))),
    AttackScript("malicious_page_table", "sw:page-tables", tuple(MaliciousCreate(v) for v in MALICIOUS_VARIANTS)),
    AttackScript("overlapping_create", "sw:sbi", (OverlapCreate("epm"), OverlapCreate("sm"))),
    AttackScript("bad_extend", "sw:memory-management", (BadExtend("overlap_host"), BadExtend("non_adjacent"), BadExtend("lie_size"))),
    AttackScript("wrong_caller", "sw:sbi", (WrongCaller("attest"), WrongCaller("random"), WrongCaller("stop"))),
    AttackScript("double_run", "sw:sbi", (DoubleRun(),)),
    AttackScript("destroy_then_read", "sw:os-memory", (VictimStop(), DestroyVictim(), HostRead("epm"))),
    AttackScript("rogue_enclave", "sw:adversarial-enclave", (RogueEnclave(PrivMode.S), RogueEnclave(PrivMode.U))),
    AttackScript("scratchpad_staging", "sw:os-memory", (HostRead("staging"), HostRead("scratchpad"))),
)


# -- victim setup ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackScenario:
    seed: int
    paging_limit: int = 2
    victim_hart: int = 1
    attacker_hart: int = 0
    data_pages: int = 2
    scratchpad: bool = False


def random_scenarios(n: int, seed: int = 0) -> list[AttackScenario]:
    rnd = random.Random(seed)
    out = []
    for i in range(n):
        victim = rnd.randrange(1, 4)
        attacker = rnd.choice([h for h in range(4) if h != victim])
        out.append(
            AttackScenario(
                seed=rnd.getrandbits(32),
                paging_limit=rnd.choice((2, 3)),
                victim_hart=victim,
                attacker_hart=attacker,
                data_pages=rnd.randint(2, 3),
                scratchpad=i % 5 == 4,
            )
        )
    return out


@dataclass
class Victim:
    host: Host
    eid: int
    secret: bytes
    edge_secret: bytes
    scenario: AttackScenario
    reports: list = field(default_factory=list)  # (challenge, report)

    @property
    def handle(self):
        return self.host.handles[self.eid]

    @property
    def desc(self):
        return self.host.sm.enclaves[self.eid]


def prepare_victim(scn: AttackScenario) -> Victim:
    """Boot a host, create the victim, and run it until its secrets are in memory and swap."""
    rnd = random.Random(scn.seed)
    cfg = HostConfig(
        seed=scn.seed, paging_limit=None if scn.scratchpad else scn.paging_limit,
        encrypt=True, scratchpad=0x40000 if scn.scratchpad else 0,
    )
    host = Host(cfg)
    img = random_image(rnd, data_pages=scn.data_pages)
    h = host.load(img, scratchpad=scn.scratchpad)
    secret = rnd.randbytes(16)
    edge_secret = rnd.randbytes(16)
    trace = []
    data = pt.EAPP_BASE + PAGE_SIZE
    for p in range(scn.data_pages):
        off = rnd.randrange(PAGE_SIZE - len(secret))
        trace += [WriteV(data + p * PAGE_SIZE + off + i, b) for i, b in enumerate(secret)]
    trace.append(Syscall(SYS_MMAP, (PAGE_SIZE,)))
    trace += [WriteV(pt.MMAP_BASE + 64 + i, b) for i, b in enumerate(secret)]
    trace += [ReadV(data + p * PAGE_SIZE) for p in range(scn.data_pages)]
    trace.append(EdgeCall(ECHO_FID, edge_secret))
    v = Victim(host, h.eid, secret, edge_secret, scn)
    for n in range(2):
        trace.append(Attest(bytes([n]) * 16))
    reason = host.run_trace(h.eid, trace, hart=scn.victim_hart)
    if reason != "end":
        raise RuntimeError(f"victim did not reach its steady state: {reason}")
    v.reports = [(bytes([n]) * 16, r) for n, r in enumerate(h.reports)]
    return v


# -- the interpreter ---------------------------------------------------------------------------------


def _contains_secret(data: bytes, secret: bytes) -> bool:
    return any(secret[i : i + 8] in data for i in range(0, len(secret) - 7))


class _Run:
    def __init__(self, victim: Victim, script: AttackScript, report: AttackReport):
        self.v = victim
        self.host = victim.host
        self.script = script
        self.report = report

    def record(self, action, outcome: str, detail: str = "", logged: bool = True) -> None:
        self.report.attempts.append(Attempt(self.script.name, type(action).__name__, outcome, detail, logged))

    def target(self, name: str) -> Region | None:
        v = self.v
        if name == "epm":
            return v.desc.epm
        if name == "sm":
            return self.host.sm.sm_region
        if name == "utm":
            return v.desc.utm
        if name == "store":
            st = v.handle.runtime.store
            return Region(st.base, st.nslots * SLOT_SIZE) if st.nslots else None
        if name == "staging":
            return v.handle.staging
        if name == "scratchpad":
            return self.host.scratchpad
        raise ValueError(name)

    def attacker(self) -> int:
        return self.v.scenario.attacker_hart

    def _read(self, action, paddr: int, n: int, hart: int, priv: PrivMode) -> None:
        log = self.host.log
        before = len(log.lines)
        try:
            data = self.host.host_read(paddr, n, hart, priv)
        except AccessFault:
            logged = any(" event=denied " in ln and f"addr={paddr:#x}" in ln for ln in log.lines[before:])
            self.record(action, "denied", f"{paddr:#x}", logged)
            return
        secrets = (self.v.secret, self.v.edge_secret)
        if any(_contains_secret(data, s) for s in secrets):
            self.record(action, "success", f"plaintext at {paddr:#x}")
        else:
            self.record(action, "clean", f"{paddr:#x}")

    # one method per action type

    def do_HostRead(self, a: HostRead) -> None:
        r = self.target(a.target)
        if r is None:
            return
        hart = self.attacker() if a.hart is None else a.hart
        if self.host.hart(hart).enclave is not None:
            # that hart is executing enclave code; no attacker runs there
            return
        if a.offset is not None:
            self._read(a, r.base + a.offset, 16, hart, a.priv)
            return
        for p in r.pages():
            self._read(a, p, min(PAGE_SIZE, r.end - p), hart, a.priv)

    def do_HostWrite(self, a: HostWrite) -> None:
        r = self.target(a.target)
        addr = r.base + a.offset
        log = self.host.log
        before = len(log.lines)
        try:
            self.host.host_write(addr, bytes([a.value]), self.attacker())
        except AccessFault:
            logged = any(" event=denied " in ln for ln in log.lines[before:])
            self.record(a, "denied", f"{addr:#x}", logged)
            return
        self.record(a, "success", f"wrote {addr:#x}")

    def do_MapForeign(self, a: MapForeign) -> None:
        host = self.host
        target = self.target(a.target).base + a.offset
        hart = self.attacker()
        try:
            tables = host.alloc.alloc(3)
        except OutOfPhysicalMemory:
            return
        root, l1, l0 = (tables.base + i * PAGE_SIZE for i in range(3))
        vaddr = 0x1234_5000
        for t in (root, l1, l0):
            host.host_write(t, bytes(PAGE_SIZE), hart)
        host.host_write(root + pt.vpn(vaddr, 2) * 8, pt.Pte.to(l1, pt.V).encode(), hart)
        host.host_write(l1 + pt.vpn(vaddr, 1) * 8, pt.Pte.to(l0, pt.V).encode(), hart)
        host.host_write(l0 + pt.vpn(vaddr, 0) * 8, pt.Pte.to(target, pt.V | pt.R | pt.W | pt.U).encode(), hart)
        # the host "MMU": walk the host table with S-mode reads, then load as U-mode
        leaves, _ = pt.walk(lambda t: host.host_read(t, PAGE_SIZE, hart), root)
        paddr = next(lf.pte.paddr for lf in leaves if lf.vaddr == vaddr)
        self._read(a, paddr, PAGE_SIZE, hart, PrivMode.U)
        host.alloc.free(tables)

    def _first_slot(self):
        rt = self.v.handle.runtime
        if not rt.slots:
            return None
        page = min(rt.slots)
        return page, rt.slots[page][0]

    def _touch(self, vaddr: int):
        """Make the victim use ``vaddr`` and report whether it died."""
        host, eid = self.host, self.v.eid
        if host.state(eid) != EnclaveState.RUNNING:
            return "not-running"
        res = host.exec_action(eid, ReadV(vaddr))
        return res

    def do_TamperStore(self, a: TamperStore) -> None:
        found = self._first_slot()
        if found is None:
            return
        page, slot = found
        if a.slot is not None:
            slot = a.slot
        addr = self.v.handle.runtime.store.addr(slot) + a.offset
        host = self.host
        old = host.host_read(addr, 1, self.attacker())
        host.host_write(addr, bytes([old[0] ^ (a.value or 1)]), self.attacker())
        res = self._touch(page)
        self._judge_integrity(a, res)

    def _judge_integrity(self, a, res) -> None:
        h = self.v.handle
        if h.fatal == "IntegrityError":
            self.record(a, "detected", "IntegrityError")
        elif isinstance(res, tuple) and res[0] == "fatal":
            self.record(a, "detected", res[1])
        else:
            self.record(a, "success", f"tampered page consumed: {res!r}")

    def do_SwapSlots(self, a: SwapSlots) -> None:
        rt = self.v.handle.runtime
        if len(rt.slots) < 2:
            return
        (p1, (s1, _)), (p2, (s2, _)) = sorted(rt.slots.items())[:2]
        host, hart = self.host, self.attacker()
        a1, a2 = rt.store.addr(s1), rt.store.addr(s2)
        b1, b2 = host.host_read(a1, SLOT_SIZE, hart), host.host_read(a2, SLOT_SIZE, hart)
        host.host_write(a1, b2, hart)
        host.host_write(a2, b1, hart)
        self._judge_integrity(a, self._touch(p1))

    def do_ReplaySlot(self, a: ReplaySlot) -> None:
        found = self._first_slot()
        if found is None:
            return
        page, slot = found
        rt = self.v.handle.runtime
        host, hart = self.host, self.attacker()
        old = host.host_read(rt.store.addr(slot), SLOT_SIZE, hart)
        # let the page cycle in and out once so a fresh slot/nonce is written
        self._touch(page)
        if self.v.handle.fatal or page not in rt.resident:
            return
        guard = 0
        while page not in rt.slots and guard < 64:
            others = [p for p in rt.eapp_pages if p not in rt.resident and p != page]
            if not others:
                return
            self._touch(others[0])
            guard += 1
        if page not in rt.slots:
            return
        host.host_write(rt.store.addr(rt.slots[page][0]), old, hart)
        self._judge_integrity(a, self._touch(page))

    def _client_accepts(self, report: AttestationReport | bytes, challenge: bytes) -> bool:
        v = self.v
        verdict = verify_report(report, self.host.device_public, self.host.sm.sm_measurement, v.desc.measurement)
        if not verdict:
            return False
        if isinstance(report, (bytes, bytearray)):
            report = AttestationReport.from_bytes(bytes(report))
        return report.data == challenge

    def do_ReplayReport(self, a: ReplayReport) -> None:
        (c0, r0), (c1, _) = self.v.reports[:2]
        if self._client_accepts(r0, c1):
            self.record(a, "success", "stale report accepted")
        else:
            self.record(a, "rejected", "stale challenge")

    def do_ForgeReport(self, a: ForgeReport) -> None:
        c0, r0 = self.v.reports[0]
        raw = bytearray(r0.to_bytes())
        bit = a.bit % (len(raw) * 8)
        raw[bit // 8] ^= 1 << (bit % 8)
        # a forger also gets to pick the challenge the verifier sees
        try:
            data = AttestationReport.from_bytes(bytes(raw)).data
        except ValueError:
            data = c0
        if self._client_accepts(bytes(raw), data):
            self.record(a, "success", f"bit {bit} flip accepted")
        else:
            self.record(a, "rejected", f"bit {bit}")

    def do_DropEdgeReply(self, a: DropEdgeReply) -> None:
        host, eid = self.host, self.v.eid
        host.policy.drop_reply.add(eid)
        try:
            res = host.exec_action(eid, EdgeCall(ECHO_FID, b"ping"))
        finally:
            host.policy.drop_reply.discard(eid)
        if isinstance(res, tuple) and res[0] == "error":
            self.record(a, "rejected", res[1])
        elif res == b"ping":
            self.record(a, "clean", "reply delivered anyway")
        else:
            self.record(a, "success", f"enclave consumed {res!r}")

    def do_RefuseResume(self, a: RefuseResume) -> None:
        host, eid = self.host, self.v.eid
        host.policy.refuse_resume.add(eid)
        res = host.exec_action(eid, EdgeCall(ECHO_FID, b"ping"))
        if self.v.handle.blocked and host.state(eid) == EnclaveState.STOPPED:
            self.record(a, "dos", "enclave left stopped")
        else:
            self.record(a, "clean", repr(res))
        # the stopped enclave is still protected
        self.do_HostRead(HostRead("epm", 0))

    def do_SnoopUtm(self, a: SnoopUtm) -> None:
        self.do_HostRead(HostRead("utm"))

    def do_MaliciousCreate(self, a: MaliciousCreate) -> None:
        host = self.host
        img = self.v.handle.image
        try:
            h = host.load(img, malicious=a.variant, hart=self.attacker())
        except (SmError, ValueError) as e:
            self.record(a, "rejected", f"{a.variant}: {type(e).__name__}")
            return
        self.record(a, "success", f"{a.variant}: create accepted as enclave {h.eid}")

    def do_OverlapCreate(self, a: OverlapCreate) -> None:
        host = self.host
        desc = self.v.desc
        victim = host.sm.sm_region if a.target == "sm" else desc.epm
        try:
            utm = host.alloc.alloc_napot(1)
        except OutOfPhysicalMemory:
            return
        epm = Region(victim.base, min(victim.size, 8 * PAGE_SIZE))
        req = CreateRequest(epm, utm, epm.base, pt.RT_BASE)
        try:
            eid = host.sm.sbi_call(host.hart(self.attacker()), "create", req)
        except (SmError, ValueError) as e:
            self.record(a, "rejected", type(e).__name__)
        else:
            self.record(a, "success", f"overlapping enclave {eid} created")
        host.alloc.free(utm)

    def do_BadExtend(self, a: BadExtend) -> None:
        host = self.host
        img = self.v.handle.image
        utm_pages = 2
        try:
            h = host.load(img, epm_pages=pages_needed(img, Region(0, utm_pages * PAGE_SIZE)),
                          utm_pages=utm_pages, rt_config=RuntimeConfig(dyn_resize=True, extend_chunk=2))
        except (SmError, OutOfPhysicalMemory, ValueError):
            return
        host.policy.bad_extend[h.eid] = a.mode
        hart = next(i for i in range(4) if host.hart(i).enclave is None and i != self.attacker())
        host.run(h.eid, hart)
        res = host.exec_action(h.eid, Syscall(SYS_MMAP, (PAGE_SIZE,)))
        rt = h.runtime
        desc = host.sm.enclaves[h.eid]
        outside = [p for p in rt.free if not desc.epm.contains(p, PAGE_SIZE)]
        if outside or (isinstance(res, int) and rt.audit()):
            self.record(a, "success", f"{a.mode}: runtime uses unprotected pages")
        elif isinstance(res, tuple):
            self.record(a, "rejected", f"{a.mode}: {res[1]}")
        else:
            self.record(a, "clean", f"{a.mode}: extension was legitimate")
        if host.state(h.eid) == EnclaveState.RUNNING:
            host.exec_action(h.eid, Attest(b""))
            host.sm.sbi_call(host.hart(hart), "exit", 0)

    def do_WrongCaller(self, a: WrongCaller) -> None:
        host = self.host
        hart = host.hart(self.attacker())
        try:
            if a.call == "attest":
                out = host.sm.attest(self.v.eid, hart, b"forged")
            elif a.call == "random":
                out = host.sm.sbi_random(self.v.eid, hart)
            else:
                out = host.sm.sbi_call(hart, a.call)
        except SmError as e:
            self.record(a, "rejected", type(e).__name__)
            return
        self.record(a, "success", f"{a.call} returned {out!r}")

    def do_DoubleRun(self, a: DoubleRun) -> None:
        host, eid = self.host, self.v.eid
        for hid in range(len(host.machine.harts)):
            try:
                host.sm.sbi_call(host.hart(hid), "run", eid)
            except SmError as e:
                self.record(a, "rejected", f"hart {hid}: {type(e).__name__}")
            else:
                self.record(a, "success", f"second run on hart {hid}")

    def do_Interrupt(self, a: Interrupt) -> None:
        host, v = self.host, self.v
        desc = v.desc
        if desc.state != EnclaveState.RUNNING:
            return
        where, _ = host.sm.delegate_trap(v.eid, host.hart(desc.running_hart), Trap(TrapKind.EXTERNAL_INTERRUPT))
        self.record(a, "clean" if where == "forwarded-to-OS" else "rejected", where)

    def do_RogueEnclave(self, a: RogueEnclave) -> None:
        host = self.host
        hart = self.attacker()
        if host.hart(hart).enclave is not None:
            return
        try:
            h = host.load(self.v.handle.image, hart=hart)
        except (SmError, OutOfPhysicalMemory):
            return
        host.run(h.eid, hart)
        for p in self.v.desc.epm.pages():
            self._read(a, p, PAGE_SIZE, hart, a.priv)
        host.sm.sbi_call(host.hart(hart), "exit", 0)
        host.destroy(h.eid, hart)

    def do_VictimStop(self, a: VictimStop) -> None:
        desc = self.v.desc
        if desc.state == EnclaveState.RUNNING:
            self.host.stop(self.v.eid)

    def do_DestroyVictim(self, a: DestroyVictim) -> None:
        self.host.destroy(self.v.eid, self.attacker())


def attack(script: AttackScript, scenario: AttackScenario | Victim) -> AttackReport:
    """Run ``script`` against a freshly prepared victim (or a given one)."""
    victim = scenario if isinstance(scenario, Victim) else prepare_victim(scenario)
    report = AttackReport()
    run = _Run(victim, script, report)
    for action in script.actions:
        getattr(run, f"do_{type(action).__name__}")(action)
    return report


def run_corpus(scenarios, corpus=CORPUS) -> AttackReport:
    total = AttackReport()
    for scn in scenarios:
        for script in corpus:
            total.merge(attack(script, scn))
    return total

