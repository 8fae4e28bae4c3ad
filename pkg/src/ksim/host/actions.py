"""Scripted eapp behaviour. Each action is one machine step for the watchdog."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Union

from .. import pagetable as pt
from ..machine import PAGE_SIZE
from ..paging import SYS_BRK, SYS_GETRANDOM, SYS_MMAP


@dataclass(frozen=True)
class ReadV:
    vaddr: int


@dataclass(frozen=True)
class WriteV:
    vaddr: int
    value: int


@dataclass(frozen=True)
class Syscall:
    nr: int
    args: tuple = ()


@dataclass(frozen=True)
class EdgeCall:
    fid: int
    payload: bytes = b""


@dataclass(frozen=True)
class Attest:
    data: bytes = b""


@dataclass(frozen=True)
class Exit:
    code: int = 0


@dataclass(frozen=True)
class Loop:
    """Spins forever: never advances the trace position."""


@dataclass(frozen=True)
class Rdcycle:
    pass


@dataclass(frozen=True)
class Compute:
    """In-enclave computation on the runtime (used by the demo programs)."""

    fn: Callable
    label: str = "compute"


Action = Union[ReadV, WriteV, Syscall, EdgeCall, Attest, Exit, Loop, Rdcycle, Compute]
ActionTrace = tuple


def random_trace(
    rnd: random.Random,
    length: int,
    data_base: int,
    data_pages: int,
    allow_grow: bool = True,
    exit_at_end: bool = True,
) -> tuple:
    """Random reads/writes over the data pages, with heap/mmap growth and getrandom.

    Accesses only target memory that is mapped by the time they execute, so
    every trace runs to completion on a correctly working runtime.
    """
    regions = [(data_base, data_pages)]
    actions: list = []
    mmap_next = pt.MMAP_BASE
    while len(actions) < length:
        r = rnd.random()
        if allow_grow and r < 0.06:
            n = rnd.randint(1, 2)
            actions.append(Syscall(SYS_MMAP, (n * PAGE_SIZE,)))
            regions.append((mmap_next, n))
            mmap_next += (n + 1) * PAGE_SIZE
            continue
        if r < 0.08:
            actions.append(Syscall(SYS_GETRANDOM))
            continue
        base, n = rnd.choice(regions)
        v = base + rnd.randrange(n * PAGE_SIZE)
        if r < 0.55:
            actions.append(WriteV(v, rnd.randrange(256)))
        else:
            actions.append(ReadV(v))
    if exit_at_end:
        actions.append(Exit(0))
    return tuple(actions)


def brk_trace(pages: int) -> tuple:
    return (Syscall(SYS_BRK, (pages * PAGE_SIZE,)),)


def touched_pages(trace) -> set[int]:
    out = set()
    for a in trace:
        if isinstance(a, (ReadV, WriteV)):
            out.add(a.vaddr & ~(PAGE_SIZE - 1))
    return out
