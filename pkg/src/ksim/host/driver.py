"""The untrusted host: OS driver, enclave loader, action executor and hart scheduler."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .. import crypto
from ..cache import Cache, CacheConfig
from ..edge import PROXY_FID, EdgeError, HostFunctionTable, ToyFS, edge_call, proxy_handler, serve_edge_call
from ..machine import PAGE_SIZE, AccessFault, AccessKind, Machine, PrivMode
from ..paging import Descheduled, EnclaveFatal, PagingError, Runtime, RuntimeConfig
from ..sm import (
    DEFAULT_WATCHDOG,
    CreateRequest,
    EnclaveState,
    Region,
    SecurityMonitor,
    SmError,
    Tick,
)
from .actions import Attest, Compute, EdgeCall, Exit, Loop, Rdcycle, ReadV, Syscall, WriteV
from .image import EnclaveImage, LoadedLayout, build_initial_pt, pages_needed
from .osmodel import OutOfPhysicalMemory, PhysAllocator

SM_SIZE = 0x40000
SM_IMAGE = b"ksim security monitor\0" + bytes(range(256)) * 4
HOST_HART = 0


def wordcount(payload: bytes) -> bytes:
    return str(len(payload.split())).encode()


def echo(payload: bytes) -> bytes:
    return payload


@dataclass
class HostConfig:
    seed: int = 0
    mem_size: int = 8 << 20
    harts: int = 4
    device_id: int = 1
    watchdog: int = DEFAULT_WATCHDOG
    paging_limit: int | None = None
    encrypt: bool = False
    cache_ways: int | None = None  # None: no cache model, 0: shared, W: W-way enclave partition
    cache_sets: int = 64
    scratchpad: int = 0  # bytes reserved at the top of memory, 0 for none
    dyn_resize: bool = False
    extend_chunk: int = 4
    paranoid: bool = False

    def runtime_config(self) -> RuntimeConfig:
        return RuntimeConfig(self.paging_limit, self.encrypt, self.dyn_resize, self.extend_chunk)


@dataclass
class HostPolicy:
    """Adversarial knobs for the OS's side of upcalls."""

    drop_reply: set = field(default_factory=set)
    refuse_resume: set = field(default_factory=set)
    bad_extend: dict = field(default_factory=dict)  # eid -> "overlap_host" | "non_adjacent" | "lie_size"


@dataclass
class EnclaveHandle:
    eid: int
    image: EnclaveImage
    epm: Region
    utm: Region
    layout: LoadedLayout
    runtime: Runtime
    staging: Region | None = None
    trace: tuple = ()
    pc: int = 0
    hart: int | None = None
    results: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    fatal: str | None = None
    blocked: bool = False
    forced_yields: int = 0
    yielded: bool = False  # last switch-out was the watchdog
    steps: int = 0

    @property
    def trace_done(self) -> bool:
        return self.pc >= len(self.trace)


class Host:
    def __init__(self, config: HostConfig | None = None):
        c = config or HostConfig()
        self.config = c
        self.machine = Machine(c.mem_size, c.harts)
        if c.cache_ways is not None:
            self.machine.cache = Cache(CacheConfig(sets=c.cache_sets), enclave_ways=c.cache_ways)
        sm_region = Region(0, SM_SIZE)
        self.scratchpad = Region(c.mem_size - c.scratchpad, c.scratchpad) if c.scratchpad else None
        device = crypto.device_from_id(c.device_id)
        self.sm = SecurityMonitor(
            self.machine, sm_region, SM_IMAGE, c.seed, device,
            watchdog_budget=c.watchdog, scratchpad=self.scratchpad, paranoid=c.paranoid,
        )
        del device  # only the SM's boot step ever sees the device key
        self.device_public = self.sm.device_public
        reserved = [sm_region] + ([self.scratchpad] if self.scratchpad else [])
        self.alloc = PhysAllocator(c.mem_size, reserved)
        self.rnd = random.Random(c.seed)
        self.fs = ToyFS()
        self.functions = HostFunctionTable()
        self.functions.special[PROXY_FID] = proxy_handler(self.fs)
        self.functions.register(wordcount, "wordcount")
        self.functions.register(echo, "echo")
        self.handles: dict[int, EnclaveHandle] = {}
        self.policy = HostPolicy()
        self.upcalls: list[tuple[int, int, str]] = []
        self.sm.host_handler = self._on_upcall

    # -- helpers ------------------------------------------------------------------

    def hart(self, i: int = HOST_HART):
        return self.machine.harts[i]

    @property
    def log(self):
        return self.machine.log

    def state(self, eid: int) -> EnclaveState:
        return self.sm.enclaves[eid].state

    def host_read(self, paddr: int, n: int = 1, hart: int = HOST_HART, priv: PrivMode = PrivMode.S) -> bytes:
        h = self.hart(hart)
        self.machine.advance(h)
        return self.machine.mem_access(h, paddr, AccessKind.READ, length=n, priv=priv)

    def host_write(self, paddr: int, data: bytes, hart: int = HOST_HART, priv: PrivMode = PrivMode.S) -> None:
        h = self.hart(hart)
        self.machine.advance(h)
        self.machine.mem_access(h, paddr, AccessKind.WRITE, data=data, priv=priv)

    # -- loading ------------------------------------------------------------------------

    def default_utm_pages(self) -> int:
        return 16 if self.config.paging_limit is not None else 2

    def load(
        self,
        image: EnclaveImage,
        epm_pages: int | None = None,
        utm_pages: int | None = None,
        config: bytes | None = None,
        scratchpad: bool = False,
        malicious: str | None = None,
        hart: int = HOST_HART,
        rt_config: RuntimeConfig | None = None,
    ) -> EnclaveHandle:
        """Allocate memory, build the initial page table and call create."""
        utm_pages = utm_pages or self.default_utm_pages()
        utm = self.alloc.alloc_napot(utm_pages)
        try:
            if epm_pages is None:
                epm_pages = pages_needed(image, utm) + 16
            epm = self.alloc.alloc(epm_pages)
        except OutOfPhysicalMemory:
            self.alloc.free(utm)
            raise
        target = self.scratchpad.base if scratchpad and self.scratchpad else None
        try:
            layout = build_initial_pt(self.machine, self.hart(hart), image, epm, utm, target, malicious)
            req = CreateRequest(epm, utm, layout.pt_root, image.rt_entry,
                                image.config if config is None else config, scratchpad)
            eid = self.sm.sbi_call(self.hart(hart), "create", req)
        except Exception:
            self.alloc.free(epm)
            self.alloc.free(utm)
            raise
        desc = self.sm.enclaves[eid]
        staging = None
        if scratchpad:
            staging = epm
            self.alloc.free(epm)
        rt = Runtime(self.sm, eid, rt_config or self.config.runtime_config())
        h = EnclaveHandle(eid, image, desc.epm, utm, layout, rt, staging)
        self.handles[eid] = h
        return h

    # -- lifecycle -------------------------------------------------------------------------

    def _enter(self, op: str, eid: int, hart: int) -> None:
        h = self.handles[eid]
        try:
            self.sm.sbi_call(self.hart(hart), op, eid)
        except EnclaveFatal as e:
            # the runtime died while setting up (e.g. its first eviction found no free slot)
            h.fatal = e.reason
        h.hart = hart
        h.yielded = False

    def run(self, eid: int, hart: int = 1) -> None:
        self._enter("run", eid, hart)

    def resume(self, eid: int, hart: int | None = None) -> None:
        h = self.handles[eid]
        self._enter("resume", eid, h.hart if hart is None else hart)

    def stop(self, eid: int) -> None:
        """The enclave pauses itself (runtime-initiated stop)."""
        h = self.handles[eid]
        self.sm.sbi_call(self.hart(h.hart), "stop")

    def destroy(self, eid: int, hart: int = HOST_HART) -> None:
        desc = self.sm.enclaves[eid]
        epm, utm = desc.epm, desc.utm
        self.sm.sbi_call(self.hart(hart), "destroy", eid)
        if desc.scratchpad is None:
            self.alloc.free(epm)
        self.alloc.free(utm)

    def extend(self, eid: int, pages: int, hart: int = HOST_HART) -> Region:
        desc = self.sm.enclaves[eid]
        ext = self.alloc.grow(desc.epm, pages)
        try:
            self.sm.sbi_call(self.hart(hart), "extend", eid, ext)
        except SmError:
            self.alloc.free(ext)
            raise
        return ext

    def running_on(self, eid: int) -> int | None:
        return self.sm.enclaves[eid].running_hart

    # -- upcalls from the SM -------------------------------------------------------------

    def _on_upcall(self, eid: int, hart, reason: str, payload):
        self.upcalls.append((eid, hart.id, reason))
        h = self.handles.get(eid)
        if h is None:
            return None
        if reason == "edge_call":
            serve_edge_call(self.machine, hart, h.utm, self.functions, drop_reply=eid in self.policy.drop_reply)
            if eid not in self.policy.refuse_resume:
                self.sm.sbi_call(hart, "resume", eid)
            return None
        if reason == "extend_request":
            claimed = self._grant_extension(eid, hart, payload)
            if eid not in self.policy.refuse_resume:
                self.sm.sbi_call(hart, "resume", eid)
            return claimed
        return None

    def _grant_extension(self, eid: int, hart, pages: int) -> Region | None:
        desc = self.sm.enclaves[eid]
        mode = self.policy.bad_extend.get(eid)
        if mode == "overlap_host":
            base = next(r.base for r in self.alloc.free_runs())
            return Region(base, pages * PAGE_SIZE)
        if mode == "non_adjacent":
            try:
                r = self.alloc.alloc_at(desc.epm.end + PAGE_SIZE, pages)
            except OutOfPhysicalMemory:
                return None
            try:
                self.sm.sbi_call(hart, "extend", eid, r)
            except SmError:
                pass
            return r
        try:
            ext = self.alloc.grow(desc.epm, pages)
        except OutOfPhysicalMemory:
            return None
        self.sm.sbi_call(hart, "extend", eid, ext)
        if mode == "lie_size":
            return Region(ext.base, ext.size + PAGE_SIZE)
        return ext

    # -- eapp execution -------------------------------------------------------------------------

    def set_trace(self, eid: int, trace) -> None:
        h = self.handles[eid]
        h.trace = tuple(trace)
        h.pc = 0

    def exec_action(self, eid: int, action):
        """Execute one eapp action on the enclave's hart; one machine step.

        Returns the action's result. Enclave-visible errors (failed
        syscalls, host errors) are returned as ``("error", name)``.
        """
        h = self.handles[eid]
        desc = self.sm.enclaves[eid]
        if desc.state != EnclaveState.RUNNING:
            raise SmError(f"enclave {eid} is not running")
        hart = self.hart(desc.running_hart)
        h.hart = hart.id
        rt = h.runtime
        result = None
        try:
            if isinstance(action, ReadV):
                result = rt.read_v(action.vaddr)
            elif isinstance(action, WriteV):
                rt.write_v(action.vaddr, action.value)
            elif isinstance(action, Syscall):
                result = rt.syscall(action.nr, *action.args)
            elif isinstance(action, EdgeCall):
                result = edge_call(rt, action.fid, action.payload)
            elif isinstance(action, Attest):
                result = self.sm.sbi_call(hart, "attest", action.data)
                h.reports.append(result)
            elif isinstance(action, Exit):
                self.sm.sbi_call(hart, "exit", action.code)
            elif isinstance(action, Rdcycle):
                result = hart.cycle_counter
            elif isinstance(action, Compute):
                result = action.fn(rt, h)
            elif not isinstance(action, Loop):
                raise TypeError(f"unknown action {action!r}")
        except EnclaveFatal as e:
            h.fatal = e.reason
            result = ("fatal", e.reason)
        except Descheduled:
            h.blocked = True
            result = ("descheduled", None)
        except AccessFault:
            try:
                rt._die("AccessFault")
            except EnclaveFatal as e:
                h.fatal = e.reason
            result = ("fatal", "AccessFault")
        except (EdgeError, PagingError, SmError) as e:
            result = ("error", type(e).__name__)
        if not isinstance(action, Loop) and not h.blocked:
            h.pc += 1
        h.steps += 1
        h.results.append((action, result))
        self.machine.advance(hart)
        if hart.enclave == eid and self.sm.watchdog_tick(hart) == Tick.FORCED_YIELD:
            h.forced_yields += 1
            h.yielded = True
        return result

    def step(self, eid: int):
        h = self.handles[eid]
        return self.exec_action(eid, h.trace[h.pc])

    def run_trace(self, eid: int, trace=None, hart: int = 1, resume_on_yield: bool = False,
                  max_steps: int | None = None) -> str:
        """Drive one enclave through its trace on ``hart`` until it stops.

        Returns why it stopped: "exit", "fatal", "descheduled", "forced_yield",
        "stopped" or "end" (trace exhausted while running).
        """
        if trace is not None:
            self.set_trace(eid, trace)
        h = self.handles[eid]
        desc = self.sm.enclaves[eid]
        if desc.state == EnclaveState.CREATED:
            self.run(eid, hart)
        elif desc.state == EnclaveState.STOPPED and not desc.exited:
            self.resume(eid, hart)
        n = 0
        while True:
            if h.fatal:
                return "fatal"
            if desc.exited:
                return "exit"
            if h.blocked:
                return "descheduled"
            if desc.state != EnclaveState.RUNNING:
                if h.yielded:
                    if not resume_on_yield:
                        return "forced_yield"
                    self.resume(eid, h.hart)
                    continue
                return "stopped"
            if h.trace_done:
                return "end"
            if max_steps is not None and n >= max_steps:
                return "limit"
            self.step(eid)
            n += 1


class Scheduler:
    """Deterministic round-robin over harts; each hart runs one task step per round."""

    def __init__(self, host: Host):
        self.host = host
        self.tasks: dict[int, object] = {}
        self.rounds = 0

    def add_enclave(self, hart: int, eid: int, trace, resume_on_yield: bool = True) -> None:
        self.host.set_trace(eid, trace)
        self.tasks[hart] = ("enclave", eid, resume_on_yield)

    def add_host(self, hart: int, steps) -> None:
        """``steps`` is a list of callables ``f(host, hart_id)``, one per round."""
        self.tasks[hart] = ("host", list(steps), [0])

    def _step(self, hart: int, task) -> bool:
        host = self.host
        if task[0] == "host":
            steps, pos = task[1], task[2]
            if pos[0] >= len(steps):
                return False
            steps[pos[0]](host, hart)
            pos[0] += 1
            return True
        _, eid, resume_on_yield = task
        h = host.handles[eid]
        desc = host.sm.enclaves[eid]
        if h.fatal or desc.exited or h.blocked or not desc.live:
            return False
        if desc.state == EnclaveState.CREATED:
            host.run(eid, hart)
            return True
        if desc.state == EnclaveState.STOPPED:
            if not resume_on_yield:
                return False
            host.resume(eid, hart)
            return True
        if desc.running_hart != hart or h.trace_done:
            return False
        host.step(eid)
        return True

    def run(self, max_rounds: int = 1_000_000) -> int:
        while self.rounds < max_rounds:
            progressed = False
            for hart in sorted(self.tasks):
                if self._step(hart, self.tasks[hart]):
                    progressed = True
            if not progressed:
                break
            self.rounds += 1
        return self.rounds
