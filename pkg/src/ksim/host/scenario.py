"""Line-oriented scenario files: parse everything first, then run on one Host.

See docs/SCENARIO.md for the grammar.
"""

from __future__ import annotations

import os
import random
import shlex
from dataclasses import dataclass, field, fields, replace

from .. import pagetable as pt
from ..machine import PAGE_SIZE, AccessFault, PrivMode
from ..paging import SLOT_SIZE, SYS_BRK, SYS_CLOSE, SYS_GETRANDOM, SYS_MMAP, SYS_OPENAT, SYS_READ, SYS_WRITE
from ..sm import EnclaveState, SmError, verify_report
from . import attacks
from .actions import Attest, EdgeCall, Exit, Loop, Rdcycle, ReadV, Syscall, WriteV, random_trace
from .driver import Host, HostConfig
from .image import MALICIOUS_VARIANTS, EnclaveImage, ImageError, ImageTooLarge, data_vaddr, random_image
from .osmodel import OutOfPhysicalMemory
from .remote import run_wordcount

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class ScenarioParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Command:
    lineno: int
    name: str
    args: tuple[str, ...]
    opts: dict
    text: str


@dataclass
class Outcome:
    status: str = "ok"  # ok | denied | error | fatal | descheduled | forced_yield
    value: object = None
    error: str = ""


@dataclass
class VerdictLine:
    lineno: int
    text: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioResult:
    log: str
    verdicts: list[VerdictLine]
    final_state: dict[int, str]
    output: list[str]
    exit_code: int
    host: Host | None = field(default=None, repr=False, compare=False)

    @property
    def passed(self) -> bool:
        return self.exit_code == EXIT_PASS


# command -> (min positional, max positional, allowed options)
_GRAMMAR: dict[str, tuple[int, int, set]] = {
    "boot": (0, 0, {"seed", "harts", "mem", "watchdog", "paging", "encrypt", "cache", "cache_sets",
                    "scratchpad", "dynresize", "chunk", "device", "paranoid"}),
    "image": (1, 2, {"seed", "pages", "file"}),
    "save-image": (2, 2, set()),
    "create": (0, 0, {"image", "epm", "utm", "config", "scratchpad", "malicious", "hart"}),
    "run": (1, 1, {"hart"}),
    "resume": (1, 1, {"hart"}),
    "stop": (1, 1, set()),
    "destroy": (1, 1, set()),
    "extend": (1, 1, {"pages"}),
    "eapp": (2, 4, set()),
    "trace": (2, 2, {"seed", "len", "resume"}),
    "loop": (1, 1, set()),
    "host": (2, 3, {"len", "hart", "priv"}),
    "attack": (1, 3, {"scenarios", "seed", "len", "hart", "off"}),
    "policy": (3, 3, set()),
    "wordcount": (1, 1, {"hart"}),
    "save": (2, 2, set()),
    "print": (1, 2, set()),
    "expect": (1, 4, {"count"}),
}

_EAPP_ARITY = {
    "readv": 1, "writev": 2, "mmap": 1, "brk": 1, "getrandom": 0, "edge": 2, "attest": (0, 1),
    "exit": (0, 1), "rdcycle": 0, "open": 1, "fwrite": 2, "fread": 2, "close": 1,
}
_DIRECT_ATTACKS = {"hostread": (1, 1), "hostwrite": (1, 2), "mapforeign": (1, 1),
                   "tamperstore": (2, 2), "dropreply": (1, 1)}
_STATES = {"created", "running", "stopped", "destroyed", "exited"}
_EXPECT_RESULT = {"ok", "denied", "error", "fatal", "value", "descheduled", "forced_yield"}
_EXPECT_GLOBAL = {"state", "log", "successes", "reply", "verdict", "steps", "measurement", "nolog"}


def parse_int(tok: str) -> int:
    return int(tok, 0)


def parse_size(tok: str) -> int:
    """``16p`` pages, ``64K``/``1M`` bytes, or a plain byte count."""
    t = tok.strip()
    mult = {"p": PAGE_SIZE, "k": 1 << 10, "m": 1 << 20}.get(t[-1:].lower())
    if mult:
        return int(t[:-1], 0) * mult
    return int(t, 0)


def parse_data(tok: str) -> bytes:
    if tok.startswith("hex:"):
        return bytes.fromhex(tok[4:])
    return tok.encode()


def _split(line: str, lineno: int) -> list[str]:
    try:
        return shlex.split(line, comments=True)
    except ValueError as e:
        raise ScenarioParseError(lineno, str(e)) from None


def parse(text: str) -> list[Command]:
    cmds = []
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = _split(line, lineno)
        if not toks:
            continue
        name = toks[0]
        if name not in _GRAMMAR:
            raise ScenarioParseError(lineno, f"unknown command {name!r}")
        args, opts = [], {}
        for t in toks[1:]:
            if "=" in t and not t.startswith(("hex:", '"')) and t.split("=", 1)[0].isidentifier():
                k, v = t.split("=", 1)
                opts[k] = v
            else:
                args.append(t)
        lo, hi, allowed = _GRAMMAR[name]
        if name == "create":
            allowed = allowed
            flags = [a for a in args if a == "scratchpad"]
            args = [a for a in args if a != "scratchpad"]
            if flags:
                opts["scratchpad"] = "1"
        if not lo <= len(args) <= hi:
            raise ScenarioParseError(lineno, f"{name} takes {lo}..{hi} arguments, got {len(args)}")
        bad = set(opts) - allowed
        if bad:
            raise ScenarioParseError(lineno, f"{name}: unknown option(s) {', '.join(sorted(bad))}")
        cmd = Command(lineno, name, tuple(args), opts, line.strip())
        _check(cmd)
        cmds.append(cmd)
    return cmds


def _need_int(cmd: Command, tok: str, what: str) -> None:
    try:
        parse_int(tok)
    except ValueError:
        raise ScenarioParseError(cmd.lineno, f"{what} must be an integer, got {tok!r}") from None


def _check(cmd: Command) -> None:
    """Static checks so that malformed files fail before anything runs."""
    n, a, o = cmd.name, cmd.args, cmd.opts
    try:
        for k in ("seed", "harts", "watchdog", "paging", "cache", "cache_sets", "device", "pages",
                  "hart", "len", "scenarios", "count", "chunk"):
            if k in o:
                parse_int(o[k])
        for k in ("mem", "scratchpad", "epm", "utm"):
            if k in o and not (n == "create" and k == "scratchpad"):
                parse_size(o[k])
        if "config" in o:
            bytes.fromhex(o["config"])
    except ValueError as e:
        raise ScenarioParseError(cmd.lineno, f"bad option value: {e}") from None
    if n in ("run", "resume", "stop", "destroy", "extend", "loop", "trace"):
        _need_int(cmd, a[0], "enclave id")
    if n == "trace" and a[1] != "random":
        raise ScenarioParseError(cmd.lineno, "trace supports only 'random'")
    if n == "create" and "image" not in o:
        raise ScenarioParseError(cmd.lineno, "create needs image=NAME")
    if n == "create" and o.get("malicious") not in (None, *MALICIOUS_VARIANTS):
        raise ScenarioParseError(cmd.lineno, f"unknown malicious variant {o['malicious']!r}")
    if n == "image" and len(a) == 2 and a[1] != "random":
        raise ScenarioParseError(cmd.lineno, "image NAME [random] [seed=N] | image NAME file=PATH")
    if n == "eapp":
        _need_int(cmd, a[0], "enclave id")
        op = a[1]
        if op not in _EAPP_ARITY:
            raise ScenarioParseError(cmd.lineno, f"unknown eapp action {op!r}")
        arity = _EAPP_ARITY[op]
        lo, hi = arity if isinstance(arity, tuple) else (arity, arity)
        if not lo <= len(a) - 2 <= hi:
            raise ScenarioParseError(cmd.lineno, f"eapp {op} takes {lo}..{hi} arguments")
    if n == "host" and a[0] not in ("read", "write"):
        raise ScenarioParseError(cmd.lineno, "host read ADDR | host write ADDR BYTE")
    if n == "attack":
        if a[0] in _DIRECT_ATTACKS:
            lo, hi = _DIRECT_ATTACKS[a[0]]
            if not lo <= len(a) - 1 <= hi:
                raise ScenarioParseError(cmd.lineno, f"attack {a[0]} takes {lo}..{hi} arguments")
        elif a[0] != "all" and a[0] not in {s.name for s in attacks.CORPUS}:
            raise ScenarioParseError(cmd.lineno, f"unknown attack {a[0]!r}")
        elif len(a) != 1:
            raise ScenarioParseError(cmd.lineno, "corpus attacks take options only")
    if n == "policy" and (a[1].split("=")[0] not in ("drop_reply", "refuse_resume", "bad_extend") or a[2] not in ("on", "off")):
        raise ScenarioParseError(cmd.lineno, "policy ID drop_reply|refuse_resume|bad_extend=MODE on|off")
    if n == "save" and a[0] != "report":
        raise ScenarioParseError(cmd.lineno, "save report PATH")
    if n == "print" and a[0] not in ("measurement", "device-key", "report"):
        raise ScenarioParseError(cmd.lineno, "print measurement ID | print device-key | print report")
    if n == "expect":
        kind = a[0]
        if kind not in _EXPECT_RESULT | _EXPECT_GLOBAL:
            raise ScenarioParseError(cmd.lineno, f"unknown expectation {kind!r}")
        if kind == "state" and (len(a) != 3 or a[2].lower() not in _STATES):
            raise ScenarioParseError(cmd.lineno, "expect state ID Created|Running|Stopped|Destroyed|Exited")
        if kind in ("value", "reply", "successes", "log", "nolog", "verdict") and len(a) < 2:
            raise ScenarioParseError(cmd.lineno, f"expect {kind} needs an argument")
        if kind in ("steps", "measurement") and len(a) != 3:
            raise ScenarioParseError(cmd.lineno, f"expect {kind} ID VALUE")


# -- execution -------------------------------------------------------------------------------------

_BOOT_KEYS = {
    "seed": ("seed", parse_int), "harts": ("harts", parse_int), "mem": ("mem_size", parse_size),
    "watchdog": ("watchdog", parse_int), "paging": ("paging_limit", parse_int),
    "encrypt": ("encrypt", lambda v: v not in ("0", "off", "false")),
    "cache": ("cache_ways", parse_int), "cache_sets": ("cache_sets", parse_int),
    "scratchpad": ("scratchpad", parse_size), "dynresize": ("dyn_resize", lambda v: v not in ("0", "off", "false")),
    "chunk": ("extend_chunk", parse_int), "device": ("device_id", parse_int),
    "paranoid": ("paranoid", lambda v: v not in ("0", "off", "false")),
}


class _Runner:
    def __init__(self, base_dir: str, overrides: dict):
        self.base_dir = base_dir
        self.overrides = overrides
        self.host: Host | None = None
        self.images: dict[str, EnclaveImage] = {}
        self.verdicts: list[VerdictLine] = []
        self.output: list[str] = []
        self.last: Outcome = Outcome()
        self.last_line = 0
        self.checked = True
        self.last_report = None
        self.last_remote = None
        self.last_attack: attacks.AttackReport | None = None
        self.steps_since_run: dict[int, int] = {}

    # -- plumbing

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def boot(self, opts: dict) -> None:
        if self.host is not None:
            raise SmError("machine already booted")
        cfg = HostConfig()
        for k, v in opts.items():
            attr, conv = _BOOT_KEYS[k]
            cfg = replace(cfg, **{attr: conv(v)})
        known = {f.name for f in fields(HostConfig)}
        cfg = replace(cfg, **{k: v for k, v in self.overrides.items() if k in known and v is not None})
        self.host = Host(cfg)

    def ensure_host(self) -> Host:
        if self.host is None:
            self.boot({})
        return self.host

    def addr(self, tok: str) -> int:
        """``0x..`` | ``epm:ID[+OFF]`` | ``utm:ID[+OFF]`` | ``store:ID:SLOT[+OFF]`` |
        ``slot:ID:VADDR[+OFF]`` (the slot currently holding that evicted page) | ``sm[+OFF]``."""
        host = self.ensure_host()
        base, _, off = tok.partition("+")
        off_v = parse_int(off) if off else 0
        parts = base.split(":")
        if parts[0] == "sm":
            return host.sm.sm_region.base + off_v
        if parts[0] == "slot":
            rt = host.handles[parse_int(parts[1])].runtime
            return rt.store.addr(rt.slots[parse_int(parts[2])][0]) + off_v
        if parts[0] in ("epm", "utm", "store"):
            eid = parse_int(parts[1])
            desc = host.sm.enclaves[eid]
            if parts[0] == "epm":
                return desc.epm.base + off_v
            if parts[0] == "utm":
                return desc.utm.base + off_v
            slot = parse_int(parts[2]) if len(parts) > 2 else 0
            return host.handles[eid].runtime.store.addr(slot) + off_v
        return parse_int(tok)

    # -- commands

    def execute(self, cmd: Command) -> None:
        if cmd.name == "expect":
            self.expect(cmd)
            return
        self._flush_unchecked()
        self.last_line = cmd.lineno
        self.checked = False
        try:
            self.last = getattr(self, "cmd_" + cmd.name.replace("-", "_"))(cmd) or Outcome()
        except AccessFault as e:
            self.last = Outcome("denied", error=str(e))
        except (SmError, OutOfPhysicalMemory, ImageError, ImageTooLarge, KeyError, OSError) as e:
            self.last = Outcome("error", error=type(e).__name__)
        if self.last.status == "ok":
            self.checked = True

    def _flush_unchecked(self) -> None:
        if not self.checked:
            self.verdicts.append(VerdictLine(self.last_line, "(implicit)", False,
                                             f"unexpected {self.last.status} {self.last.error}".strip()))
            self.checked = True

    def finish(self) -> None:
        self._flush_unchecked()

    def cmd_boot(self, cmd):
        self.boot(cmd.opts)

    def cmd_image(self, cmd):
        name = cmd.args[0]
        if "file" in cmd.opts:
            with open(self.path(cmd.opts["file"]), "rb") as f:
                self.images[name] = EnclaveImage.from_bytes(f.read())
        else:
            seed = parse_int(cmd.opts.get("seed", "0"))
            pages = parse_int(cmd.opts["pages"]) if "pages" in cmd.opts else None
            self.images[name] = random_image(random.Random(seed), data_pages=pages)

    def cmd_save_image(self, cmd):
        with open(self.path(cmd.args[1]), "wb") as f:
            f.write(self.images[cmd.args[0]].to_bytes())

    def cmd_create(self, cmd):
        host = self.ensure_host()
        o = cmd.opts
        img = self.images.get(o["image"])
        if img is None:
            with open(self.path(o["image"]), "rb") as f:
                img = EnclaveImage.from_bytes(f.read())
        h = host.load(
            img,
            epm_pages=parse_size(o["epm"]) // PAGE_SIZE if "epm" in o else None,
            utm_pages=parse_size(o["utm"]) // PAGE_SIZE if "utm" in o else None,
            config=bytes.fromhex(o["config"]) if "config" in o else None,
            scratchpad="scratchpad" in o,
            malicious=o.get("malicious"),
            hart=parse_int(o.get("hart", "0")),
        )
        self.output.append(f"created {h.eid} epm={h.epm} measurement={host.sm.enclaves[h.eid].measurement.hex()}")
        return Outcome(value=h.eid)

    def cmd_run(self, cmd):
        eid = parse_int(cmd.args[0])
        self.ensure_host().run(eid, parse_int(cmd.opts.get("hart", "1")))
        self.steps_since_run[eid] = 0

    def cmd_resume(self, cmd):
        eid = parse_int(cmd.args[0])
        hart = parse_int(cmd.opts["hart"]) if "hart" in cmd.opts else None
        self.ensure_host().resume(eid, hart)

    def cmd_stop(self, cmd):
        self.ensure_host().stop(parse_int(cmd.args[0]))

    def cmd_destroy(self, cmd):
        self.ensure_host().destroy(parse_int(cmd.args[0]))

    def cmd_extend(self, cmd):
        r = self.ensure_host().extend(parse_int(cmd.args[0]), parse_int(cmd.opts.get("pages", "1")))
        return Outcome(value=r.size)

    def _eapp_action(self, op: str, rest: tuple):
        fs_nr = {"open": SYS_OPENAT, "fwrite": SYS_WRITE, "fread": SYS_READ, "close": SYS_CLOSE}
        if op == "readv":
            return ReadV(self.vaddr(rest[0]))
        if op == "writev":
            return WriteV(self.vaddr(rest[0]), parse_int(rest[1]))
        if op == "mmap":
            return Syscall(SYS_MMAP, (parse_size(rest[0]),))
        if op == "brk":
            return Syscall(SYS_BRK, (parse_int(rest[0]),))
        if op == "getrandom":
            return Syscall(SYS_GETRANDOM)
        if op == "edge":
            fns = self.host.functions
            fid = fns.names[rest[0]] if rest[0] in fns.names else parse_int(rest[0])
            return EdgeCall(fid, parse_data(rest[1]))
        if op == "attest":
            return Attest(parse_data(rest[0]) if rest else b"")
        if op == "exit":
            return Exit(parse_int(rest[0]) if rest else 0)
        if op == "rdcycle":
            return Rdcycle()
        if op == "open":
            return Syscall(SYS_OPENAT, (rest[0],))
        if op == "fwrite":
            return Syscall(SYS_WRITE, (parse_int(rest[0]), parse_data(rest[1])))
        if op == "fread":
            return Syscall(SYS_READ, (parse_int(rest[0]), parse_int(rest[1])))
        return Syscall(fs_nr[op], (parse_int(rest[0]),))

    @staticmethod
    def vaddr(tok: str) -> int:
        if tok.startswith("data"):
            _, _, off = tok.partition("+")
            return data_vaddr() + (parse_int(off) if off else 0)
        if tok.startswith("mmap"):
            _, _, off = tok.partition("+")
            return pt.MMAP_BASE + (parse_int(off) if off else 0)
        return parse_int(tok)

    def _outcome(self, eid: int, res) -> Outcome:
        if isinstance(res, tuple) and len(res) == 2 and res[0] in ("fatal", "error", "descheduled"):
            return Outcome(res[0], error=str(res[1]))
        h = self.host.handles[eid]
        if h.yielded:
            return Outcome("forced_yield", value=res)
        return Outcome(value=res)

    def cmd_eapp(self, cmd):
        host = self.ensure_host()
        eid = parse_int(cmd.args[0])
        action = self._eapp_action(cmd.args[1], cmd.args[2:])
        res = host.exec_action(eid, action)
        self.steps_since_run[eid] = self.steps_since_run.get(eid, 0) + 1
        if isinstance(action, Attest) and not isinstance(res, tuple):
            self.last_report = res
            return Outcome(value=res.enclave_measurement)
        return self._outcome(eid, res)

    def cmd_trace(self, cmd):
        host = self.ensure_host()
        eid = parse_int(cmd.args[0])
        rnd = random.Random(parse_int(cmd.opts.get("seed", "0")))
        n = parse_int(cmd.opts.get("len", "50"))
        pages = sum(s.npages for s in host.handles[eid].image.eapp_segments if s.flags & pt.W)
        trace = random_trace(rnd, n, data_vaddr(), max(1, pages), exit_at_end=False)
        desc = host.sm.enclaves[eid]
        hart = desc.running_hart if desc.running_hart is not None else 1
        why = host.run_trace(eid, trace, hart=hart, resume_on_yield=cmd.opts.get("resume", "1") != "0")
        h = host.handles[eid]
        if why == "fatal":
            return Outcome("fatal", error=h.fatal)
        if why == "descheduled":
            return Outcome("descheduled")
        return Outcome(value=why)

    def cmd_loop(self, cmd):
        host = self.ensure_host()
        eid = parse_int(cmd.args[0])
        h = host.handles[eid]
        host.set_trace(eid, (Loop(),))
        steps = 0
        while host.state(eid) == EnclaveState.RUNNING:
            host.step(eid)
            steps += 1
        self.steps_since_run[eid] = self.steps_since_run.get(eid, 0) + steps
        if h.yielded:
            return Outcome("forced_yield", value=steps)
        return Outcome("error", error="loop ended without a forced yield")

    def cmd_host(self, cmd):
        host = self.ensure_host()
        op, target = cmd.args[0], self.addr(cmd.args[1])
        hart = parse_int(cmd.opts.get("hart", "0"))
        priv = PrivMode.U if cmd.opts.get("priv", "S").upper() == "U" else PrivMode.S
        if op == "read":
            return Outcome(value=host.host_read(target, parse_int(cmd.opts.get("len", "1")), hart, priv))
        host.host_write(target, bytes([parse_int(cmd.args[2]) if len(cmd.args) > 2 else 0]), hart, priv)

    def cmd_attack(self, cmd):
        kind = cmd.args[0]
        if kind in _DIRECT_ATTACKS:
            return getattr(self, "attack_" + kind)(cmd.args[1:], cmd.opts)
        n = parse_int(cmd.opts.get("scenarios", "1"))
        seed = parse_int(cmd.opts.get("seed", str(self.ensure_host().config.seed)))
        scripts = attacks.CORPUS if cmd.args[0] == "all" else [s for s in attacks.CORPUS if s.name == cmd.args[0]]
        report = attacks.run_corpus(attacks.random_scenarios(n, seed), scripts)
        self.last_attack = report
        summary = " ".join(f"{k}={v}" for k, v in sorted(report.summary().items()))
        self.output.append(f"attack {cmd.args[0]}: attempts={len(report.attempts)} successes={report.successes} {summary}")
        self.host.log.emit(None, "attack", script=cmd.args[0], attempts=len(report.attempts), successes=report.successes)
        return Outcome(value=report.successes)

    # direct attacker actions on this scenario's machine; a denial surfaces as ``denied``

    def attack_hostread(self, args, opts):
        host = self.ensure_host()
        hart = parse_int(opts.get("hart", "0"))
        return Outcome(value=host.host_read(self.addr(args[0]), parse_int(opts.get("len", "1")), hart))

    def attack_hostwrite(self, args, opts):
        host = self.ensure_host()
        value = parse_int(args[1]) if len(args) > 1 else 0
        host.host_write(self.addr(args[0]), bytes([value]), parse_int(opts.get("hart", "0")))

    def attack_mapforeign(self, args, opts):
        """Map the target into a fresh host page table and load through it at U-mode."""
        host = self.ensure_host()
        hart = parse_int(opts.get("hart", "0"))
        target = self.addr(args[0])
        tables = host.alloc.alloc(3)
        root, l1, l0 = (tables.base + i * PAGE_SIZE for i in range(3))
        vaddr = 0x1234_5000
        try:
            for t in (root, l1, l0):
                host.host_write(t, bytes(PAGE_SIZE), hart)
            host.host_write(root + pt.vpn(vaddr, 2) * 8, pt.Pte.to(l1, pt.V).encode(), hart)
            host.host_write(l1 + pt.vpn(vaddr, 1) * 8, pt.Pte.to(l0, pt.V).encode(), hart)
            leaf = pt.Pte.to(target & ~(PAGE_SIZE - 1), pt.V | pt.R | pt.W | pt.U)
            host.host_write(l0 + pt.vpn(vaddr, 0) * 8, leaf.encode(), hart)
            leaves, _ = pt.walk(lambda t: host.host_read(t, PAGE_SIZE, hart), root)
            paddr = next(lf.pte.paddr for lf in leaves if lf.vaddr == vaddr) + (target % PAGE_SIZE)
            return Outcome(value=host.host_read(paddr, 1, hart, PrivMode.U))
        finally:
            host.alloc.free(tables)

    def attack_tamperstore(self, args, opts):
        """Flip a byte in the slot holding evicted page VADDR, then have the enclave touch it."""
        host = self.ensure_host()
        eid, page = parse_int(args[0]), self.vaddr(args[1]) & ~(PAGE_SIZE - 1)
        rt = host.handles[eid].runtime
        if page not in rt.slots:
            return Outcome("error", error="NotEvicted")
        addr = rt.store.addr(rt.slots[page][0]) + parse_int(opts.get("off", "64"))
        old = host.host_read(addr, 1)
        host.host_write(addr, bytes([old[0] ^ 0xFF]))
        return self._outcome(eid, host.exec_action(eid, ReadV(page)))

    def attack_dropreply(self, args, opts):
        host = self.ensure_host()
        eid = parse_int(args[0])
        host.policy.drop_reply.add(eid)
        try:
            return self._outcome(eid, host.exec_action(eid, EdgeCall(host.functions.names["echo"], b"ping")))
        finally:
            host.policy.drop_reply.discard(eid)

    def cmd_policy(self, cmd):
        host = self.ensure_host()
        eid = parse_int(cmd.args[0])
        key, _, mode = cmd.args[1].partition("=")
        on = cmd.args[2] == "on"
        pol = host.policy
        if key == "bad_extend":
            if on:
                pol.bad_extend[eid] = mode or "overlap_host"
            else:
                pol.bad_extend.pop(eid, None)
        else:
            s = getattr(pol, key)
            (s.add if on else s.discard)(eid)

    def cmd_wordcount(self, cmd):
        host = self.ensure_host()
        from ..cli import measure_image  # independent measurement oracle

        img = random_image(random.Random(host.config.seed ^ 0x5EED))
        expected = bytes.fromhex(measure_image(img.to_bytes()))
        r = run_wordcount(host, parse_data(cmd.args[0]), img, expected, parse_int(cmd.opts.get("hart", "1")))
        self.last_remote = r
        h = host.handles[r.eid]
        if h.reports:
            self.last_report = h.reports[-1]
        self.output.append(f"wordcount reply={r.reply!r} verdict={r.verdict.reason if r.verdict else 'none'}")
        return Outcome(value=r.reply)

    def cmd_save(self, cmd):
        if self.last_report is None:
            return Outcome("error", error="NoReport")
        with open(self.path(cmd.args[1]), "wb") as f:
            f.write(self.last_report.to_bytes())

    def cmd_print(self, cmd):
        host = self.ensure_host()
        what = cmd.args[0]
        if what == "measurement":
            self.output.append(host.sm.enclaves[parse_int(cmd.args[1])].measurement.hex())
        elif what == "device-key":
            self.output.append(host.device_public.hex())
        elif self.last_report is not None:
            self.output.append(self.last_report.to_bytes().hex())

    # -- expectations

    def expect(self, cmd: Command) -> None:
        kind, a = cmd.args[0], cmd.args
        ok, detail = False, ""
        last = self.last
        if kind in _EXPECT_RESULT:
            self.checked = True
            if kind == "value":
                want = a[1]
                got = last.value
                ok = last.status == "ok" and _value_eq(got, want)
                detail = f"got {last.status} {got!r}"
            else:
                ok = last.status == kind and (len(a) < 2 or last.error == a[1])
                detail = f"got {last.status} {last.error}".strip()
        elif kind == "state":
            host = self.ensure_host()
            eid = parse_int(a[1])
            desc = host.sm.enclaves.get(eid)
            got = "missing" if desc is None else _state_name(desc)
            ok = got == a[2].lower()
            detail = f"state is {got}"
        elif kind in ("log", "nolog"):
            lines = self.ensure_host().log.events(a[1])
            want = parse_int(cmd.opts["count"]) if "count" in cmd.opts else None
            if kind == "nolog":
                ok = not lines
            else:
                ok = bool(lines) if want is None else len(lines) == want
            detail = f"{len(lines)} {a[1]} events"
        elif kind == "successes":
            rep = self.last_attack
            ok = rep is not None and rep.successes == parse_int(a[1]) and rep.unlogged_denials == 0
            detail = "no attack run" if rep is None else f"successes={rep.successes} unlogged={rep.unlogged_denials}"
        elif kind == "reply":
            r = self.last_remote
            ok = r is not None and r.reply == parse_data(a[1])
            detail = f"reply={None if r is None else r.reply!r}"
        elif kind == "verdict":
            rep = self.last_report
            if rep is None:
                detail = "no report"
            else:
                v = verify_report(rep, self.host.device_public, self.host.sm.sm_measurement)
                ok = (a[1] == "valid") == bool(v)
                detail = f"verifier: {v.reason}"
        elif kind == "steps":
            got = self.steps_since_run.get(parse_int(a[1]), 0)
            ok = got == parse_int(a[2])
            detail = f"{got} steps"
        elif kind == "measurement":
            from ..cli import measure_image

            eid = parse_int(a[1])
            desc = self.ensure_host().sm.enclaves[eid]
            want = measure_image(self.images[a[2]].to_bytes()) if a[2] in self.images else a[2].lower()
            ok = desc.measurement.hex() == want
            detail = f"sm={desc.measurement.hex()} want={want}"
        self.verdicts.append(VerdictLine(cmd.lineno, cmd.text, ok, detail))


def _state_name(desc) -> str:
    if desc.exited and desc.state == EnclaveState.STOPPED:
        return "exited"
    return desc.state.value.lower()


def _value_eq(got, want: str) -> bool:
    if isinstance(got, (bytes, bytearray)):
        return bytes(got) == parse_data(want) or (want.startswith("0x") and bytes(got).hex() == want[2:])
    if isinstance(got, bool) or got is None:
        return str(got).lower() == want.lower()
    if isinstance(got, int):
        try:
            return got == parse_int(want)
        except ValueError:
            return False
    return str(got) == want


def run_scenario(source: str, overrides: dict | None = None, text: str | None = None) -> ScenarioResult:
    """Run a scenario file (or ``text`` when given). Deterministic for a fixed seed.

    Raises :class:`ScenarioParseError` before executing anything if any line is malformed.
    """
    if text is None:
        with open(source) as f:
            text = f.read()
        base = os.path.dirname(os.path.abspath(source))
    else:
        base = os.getcwd()
    cmds = parse(text)
    runner = _Runner(base, overrides or {})
    for cmd in cmds:
        runner.execute(cmd)
    runner.finish()
    host = runner.ensure_host()
    final = {eid: _state_name(d) for eid, d in sorted(host.sm.enclaves.items())}
    ok = all(v.passed for v in runner.verdicts)
    return ScenarioResult(host.log.text(), runner.verdicts, final, runner.output,
                          EXIT_PASS if ok else EXIT_FAIL, host)


__all__ = ["run_scenario", "parse", "ScenarioParseError", "ScenarioResult", "SLOT_SIZE"]
