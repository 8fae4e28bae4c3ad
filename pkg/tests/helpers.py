"""Harnesses shared by the unit tests and the acceptance suite."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from oracles import DictMemory, intervals_disjoint

from ksim import pagetable as pt
from ksim.cache import HOST
from ksim.host import Host, HostConfig, random_image
from ksim.host.actions import Exit, ReadV, Syscall, WriteV, random_trace
from ksim.host.image import data_vaddr
from ksim.host.osmodel import OutOfPhysicalMemory
from ksim.machine import PAGE_SIZE, AccessFault, AccessKind, PrivMode, pmp_check
from ksim.paging import SLOT_SIZE, SYS_MMAP
from ksim.sm import CreateRequest, EnclaveState, Region, SmError, Tick

# -- lifecycle fuzz ---------------------------------------------------------------------

HOST_OPS = ("create", "create_bogus", "run", "resume", "destroy", "extend", "extend_bogus")
RT_OPS = ("stop", "exit", "attest", "random", "extend_request", "tick")
_WEIGHTS = {
    "create": 6, "create_bogus": 2, "run": 10, "resume": 10, "destroy": 5, "extend": 2,
    "extend_bogus": 2, "stop": 6, "exit": 3, "attest": 3, "random": 5, "extend_request": 2,
    "tick": 40,
}


@dataclass
class FuzzResult:
    calls: int = 0
    ok: int = 0
    rejected: int = 0
    violations: list[str] = field(default_factory=list)
    digest: str = ""
    created: int = 0
    forced_yields: int = 0


class SbiFuzzer:
    """Random SBI calls against a model of the lifecycle.

    The model tracks each enclave's state, which hart runs it and its
    remaining watchdog budget, and predicts which calls must succeed and which
    must be refused. After every call an independent check looks at region
    disjointness and at every hart's PMP view.
    """

    def __init__(self, seed: int, harts: int = 4, watchdog: int = 6):
        self.rnd = random.Random(seed)
        self.host = Host(HostConfig(seed=seed, harts=harts, mem_size=16 << 20, watchdog=watchdog))
        self.host.sm.host_handler = None  # bare SBI surface, no OS reactions
        self.sm = self.host.sm
        self.watchdog = watchdog
        self.model: dict[int, str] = {}
        self.on_hart: dict[int, int] = {}
        self.budget: dict[int, int] = {}
        self.images = [random_image(random.Random(i), max_eapp_pages=1, data_pages=1) for i in range(4)]
        self.res = FuzzResult()
        self._h = hashlib.sha256()

    # -- helpers

    def _idle(self, h: int) -> bool:
        return h not in self.on_hart

    def _expect(self, cond: bool, msg: str) -> None:
        if not cond:
            self.res.violations.append(f"call {self.res.calls}: {msg}")

    def _pick_eid(self) -> int:
        r = self.rnd.random()
        if not self.model or r < 0.05:
            return len(self.model) + self.rnd.randrange(3)  # unknown id
        live = [e for e, st in self.model.items() if st != "destroyed"]
        if live and r < 0.85:
            return self.rnd.choice(live)
        return self.rnd.randrange(len(self.model))

    def _record(self, op: str, args, outcome: str) -> None:
        self._h.update(f"{op}{args}{outcome}\n".encode())

    def _call(self, fn, *args):
        try:
            return True, fn(*args)
        except (SmError, OutOfPhysicalMemory, AccessFault) as e:
            return False, type(e).__name__

    # -- one step

    def step(self) -> None:
        ops = list(_WEIGHTS)
        op = self.rnd.choices(ops, [_WEIGHTS[o] for o in ops])[0]
        h = self.rnd.randrange(len(self.host.machine.harts))
        hart = self.host.hart(h)
        eid = self._pick_eid()
        before = dict(self.model)
        ok, out = self._do(op, h, hart, eid)
        self.res.calls += 1
        if ok:
            self.res.ok += 1
        else:
            self.res.rejected += 1
        self._record(op, (h, eid), out if not ok else "ok")
        self._check_transition(op, before)
        self._check_state()

    def _do(self, op: str, h: int, hart, eid: int):
        host, sm, m = self.host, self.sm, self.model
        if op in RT_OPS:
            running = self.on_hart.get(h)
            if op == "tick":
                r = sm.watchdog_tick(hart)
                if running is None:
                    self._expect(r == Tick.CONTINUE, "tick on idle hart did something")
                    return True, r
                self.budget[running] -= 1
                if self.budget[running] <= 0:
                    self._expect(r == Tick.FORCED_YIELD, f"no forced yield for {running} at budget 0")
                    m[running] = "stopped"
                    self.on_hart.pop(h, None)
                    self.res.forced_yields += 1
                else:
                    self._expect(r == Tick.CONTINUE, f"early yield of {running}")
                return True, r
            args = ()
            if op == "exit":
                args = (self.rnd.randrange(4),)
            elif op == "attest":
                args = (bytes(self.rnd.choice((0, 16, 1024, 1025))),)
            elif op == "extend_request":
                args = (1,)
            ok, out = self._call(sm.sbi_call, hart, op, *args)
            legal = running is not None and not (op == "attest" and len(args[0]) > 1024)
            self._expect(ok == legal, f"{op} on hart {h} (running {running}): ok={ok} {out}")
            if ok and op in ("stop", "exit", "extend_request"):
                m[running] = "exited" if op == "exit" else "stopped"
                self.on_hart.pop(h, None)
            return ok, out

        # host-side calls
        if not self._idle(h):
            if op in ("create", "create_bogus"):
                req = CreateRequest(Region(0x80_0000, PAGE_SIZE * 8), Region(0x90_0000, PAGE_SIZE), 0x80_0000, 0, b"")
                ok, out = self._call(sm.sbi_call, hart, "create", req)
            elif op in ("extend", "extend_bogus"):
                ok, out = self._call(sm.sbi_call, hart, "extend", eid, Region(0x80_0000, PAGE_SIZE))
            else:
                ok, out = self._call(sm.sbi_call, hart, op, eid)
            self._expect(not ok and out == "IllegalCaller", f"host call {op} from enclave hart {h}: {out}")
            return ok, out
        state = m.get(eid)
        if op == "create":
            img = self.rnd.choice(self.images)
            ok, out = self._call(host.load, img, None, None, None, False, None, h)
            if ok:
                self._expect(out.eid == len(m), f"create returned id {out.eid}, expected {len(m)}")
                m[out.eid] = "created"
                self.res.created += 1
            else:
                self._expect(out in ("NoFreePmpEntry", "OutOfPhysicalMemory"), f"valid create refused: {out}")
            return ok, out
        if op == "create_bogus":
            live = [d for d in sm.enclaves.values() if d.state != EnclaveState.DESTROYED]
            target = self.rnd.choice([sm.sm_region] + [d.epm for d in live])
            base = target.base + self.rnd.randrange(0, max(1, target.size // PAGE_SIZE)) * PAGE_SIZE
            req = CreateRequest(Region(base, 4 * PAGE_SIZE), Region(0x7F_0000, PAGE_SIZE), base, 0, b"")
            ok, out = self._call(sm.sbi_call, hart, "create", req)
            self._expect(not ok, f"overlapping create accepted at {base:#x}")
            return ok, out
        if op == "run":
            ok, out = self._call(sm.sbi_call, hart, "run", eid)
            legal = state == "created"
            self._expect(ok == legal, f"run {eid} in {state}: ok={ok} {out}")
        elif op == "resume":
            ok, out = self._call(sm.sbi_call, hart, "resume", eid)
            legal = state == "stopped"
            self._expect(ok == legal, f"resume {eid} in {state}: ok={ok} {out}")
        elif op == "destroy":
            destroy = host.destroy if eid in sm.enclaves else (lambda e, _h: sm.sbi_call(hart, "destroy", e))
            ok, out = self._call(destroy, eid, h)
            legal = state in ("created", "stopped", "exited")
            self._expect(ok == legal, f"destroy {eid} in {state}: ok={ok} {out}")
            if ok:
                m[eid] = "destroyed"
            return ok, out
        elif op == "extend":
            if eid in sm.enclaves:
                ok, out = self._call(host.extend, eid, 1, h)
            else:
                ok, out = self._call(sm.sbi_call, hart, "extend", eid, Region(0x60_0000, PAGE_SIZE))
            if state in (None, "destroyed"):
                self._expect(not ok, f"extend of {state} enclave {eid} accepted")
            return ok, out
        else:  # extend_bogus: a region that is not adjacent to the epm
            desc = sm.enclaves.get(eid)
            base = (desc.epm.end + PAGE_SIZE) if desc else 0x60_0000
            ok, out = self._call(sm.sbi_call, hart, "extend", eid, Region(base, PAGE_SIZE))
            self._expect(not ok, f"non-adjacent extend of {eid} accepted")
            return ok, out
        if ok:
            m[eid] = "running"
            self.on_hart[h] = eid
            self.budget[eid] = self.watchdog
        return ok, out

    # -- checks

    _ALLOWED = {
        "create": {(None, "created")},
        "run": {("created", "running")},
        "resume": {("stopped", "running")},
        "stop": {("running", "stopped")},
        "extend_request": {("running", "stopped")},
        "tick": {("running", "stopped")},
        "exit": {("running", "exited")},
        "destroy": {("created", "destroyed"), ("stopped", "destroyed"), ("exited", "destroyed")},
    }

    def _check_transition(self, op: str, before: dict) -> None:
        for eid, d in self.sm.enclaves.items():
            now = "exited" if d.exited and d.state == EnclaveState.STOPPED else d.state.value.lower()
            was = before.get(eid)
            if now != self.model.get(eid):
                self._expect(False, f"enclave {eid} is {now}, model says {self.model.get(eid)}")
            if now != was and (was, now) not in self._ALLOWED.get(op.replace("_bogus", ""), set()):
                self._expect(False, f"illegal transition {was}->{now} on {op}")

    def _check_state(self) -> None:
        sm = self.sm
        live = [d for d in sm.enclaves.values() if d.state != EnclaveState.DESTROYED]
        regions = [(sm.sm_region.base, sm.sm_region.size)] + [(d.epm.base, d.epm.size) for d in live]
        regions += [(d.utm.base, d.utm.size) for d in live]
        self._expect(intervals_disjoint(regions), "live regions overlap")
        for hart in self.host.machine.harts:
            want = self.on_hart.get(hart.id)
            self._expect(hart.enclave == want, f"hart {hart.id} runs {hart.enclave}, model {want}")
            for priv in (PrivMode.S, PrivMode.U):
                self._expect(
                    not pmp_check(hart, sm.sm_region.base + 64, 8, AccessKind.READ, priv),
                    f"hart {hart.id} can read the SM",
                )
            for d in live:
                mine = d.id == want
                for a in (d.epm.base, d.epm.end - 8, d.epm.base + (d.epm.size // 2 & ~7)):
                    got = pmp_check(hart, a, 8, AccessKind.READ, PrivMode.U if mine else PrivMode.S)
                    self._expect(got == mine, f"hart {hart.id} epm {d.id} access={got}, running={mine}")

    def run(self, n: int) -> FuzzResult:
        # stop at the first divergence: after it the model no longer tracks the monitor
        for _ in range(n):
            self.step()
            if self.res.violations:
                break
        self.res.digest = self._h.hexdigest() + hashlib.sha256(self.host.log.text().encode()).hexdigest()
        return self.res


# -- cache non-interference ---------------------------------------------------------------

CACHE_SETS = 64
LINE = 64


def noninterference_trace(rnd: random.Random, data_pages: int, length: int) -> tuple:
    """Reads and writes over the eapp data pages only (no host interaction)."""
    base = data_vaddr()
    out = []
    for _ in range(length):
        v = base + rnd.randrange(data_pages * PAGE_SIZE)
        out.append(WriteV(v, rnd.randrange(256)) if rnd.random() < 0.5 else ReadV(v))
    return tuple(out) + (Exit(0),)


def probe_addresses(host: Host, rnd: random.Random, n: int) -> list[int]:
    """Host-private lines packed into a few cache sets, so enclave evictions would show."""
    region = host.alloc.alloc(16)
    sets = rnd.sample(range(CACHE_SETS), 3)
    lines = [region.base + st * LINE + j * PAGE_SIZE for st in sets for j in range(16)]
    return rnd.sample(lines, min(n, len(lines)))


def _host_view(host: Host, eid: int, trace, probes) -> list:
    """Host primes while the enclave is resident, probes between every enclave step and after exit.

    Both traces of a pair have the same length, so the host's own schedule of
    accesses is identical and only enclave behaviour could change what it sees.
    """
    cache = host.machine.cache
    host.run(eid, 1)
    host.set_trace(eid, trace)
    cache.observations.clear()
    for a in probes:
        host.host_read(a, 1)
    for i in range(len(trace) - 1):
        host.step(eid)
        host.host_read(probes[i % len(probes)], 1)
    for a in probes:
        host.host_read(a, 1)
    host.step(eid)  # Exit
    assert host.sm.enclaves[eid].exited
    for a in probes:
        host.host_read(a, 1)
    return cache.observe(HOST)


def cache_run(image, trace, probes_seed: int, n_probes: int, enclave_ways: int, seed: int = 0):
    """One (probe script, enclave trace) run; returns the host's Hit/Miss trace and the cache."""
    host = Host(HostConfig(seed=seed, cache_ways=enclave_ways, cache_sets=CACHE_SETS))
    probes = probe_addresses(host, random.Random(probes_seed), n_probes)
    h = host.load(image)
    return _host_view(host, h.eid, trace, probes), host.machine.cache


def prime_probe_witness(k: int = 5, k2: int = 9, seed: int = 0) -> dict:
    """Host fills cache set ``k`` with its own lines; the enclave reads one line in set ``k`` or ``k2``."""
    image = random_image(random.Random(seed), data_pages=1)

    def once(target_set: int, ways: int):
        host = Host(HostConfig(seed=seed, cache_ways=ways, cache_sets=CACHE_SETS))
        region = host.alloc.alloc(16)
        probes = [region.base + k * LINE + j * PAGE_SIZE for j in range(16)]
        h = host.load(image)
        trace = (ReadV(data_vaddr() + target_set * LINE), Exit(0))
        return _host_view(host, h.eid, trace, probes)

    return {"off": (once(k, 0), once(k2, 0)), "on": (once(k, 8), once(k2, 8))}


# -- paging transparency ------------------------------------------------------------------


def paging_image(seed: int):
    return random_image(random.Random(seed), data_pages=random.Random(seed).randint(2, 5))


def paging_trace(seed: int, image, length: int = 120) -> tuple:
    pages = sum(s.npages for s in image.eapp_segments if s.flags & pt.W)
    return random_trace(random.Random(seed * 7 + 1), length, data_vaddr(), pages, exit_at_end=False)


def run_paged(image, trace, limit: int | None, encrypt: bool = True, seed: int = 0):
    """Run ``trace`` to its end and return (eapp memory snapshot, read results, handle)."""
    host = Host(HostConfig(seed=seed, paging_limit=limit, encrypt=encrypt))
    h = host.load(image, epm_pages=None if limit is not None else 96, utm_pages=128 if limit is not None else None)
    why = host.run_trace(h.eid, trace, hart=1)
    assert why == "end", (why, h.fatal)
    reads = [r for a, r in h.results if isinstance(a, ReadV)]
    return h.runtime.eapp_memory(), reads, h, host


def dict_model_run(image, trace):
    """Expected memory and read values from the byte-dictionary model."""
    mem = DictMemory([(s.vaddr, s.data) for s in image.eapp_segments])
    reads = []
    nxt = pt.MMAP_BASE
    for a in trace:
        if isinstance(a, WriteV):
            mem.write(a.vaddr, a.value)
        elif isinstance(a, ReadV):
            reads.append(mem.read(a.vaddr))
        elif isinstance(a, Syscall) and a.nr == SYS_MMAP:
            n = -(-a.args[0] // PAGE_SIZE)
            mem.map_zero(nxt, n)
            nxt += (n + 1) * PAGE_SIZE
    return mem, reads


def tamper_trial(seed: int):
    """Evict a page, flip one random bit of its sealed slot, touch it. Returns the fatal reason."""
    rnd = random.Random(seed)
    image = random_image(rnd, data_pages=4)
    host = Host(HostConfig(seed=seed, paging_limit=2, encrypt=True))
    h = host.load(image)
    base = data_vaddr()
    trace = tuple(WriteV(base + p * PAGE_SIZE + rnd.randrange(PAGE_SIZE), rnd.randrange(256)) for p in range(4))
    host.run_trace(h.eid, trace, hart=1)
    rt = h.runtime
    page = rnd.choice(sorted(rt.slots))
    slot, _ = rt.slots[page]
    off = rnd.randrange(SLOT_SIZE)
    addr = rt.store.addr(slot) + off
    old = host.host_read(addr, 1)
    host.host_write(addr, bytes([old[0] ^ (1 << rnd.randrange(8))]))
    res = host.exec_action(h.eid, ReadV(page + rnd.randrange(PAGE_SIZE)))
    return h.fatal, res, off
