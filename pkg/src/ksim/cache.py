"""Way-partitioned shared L2 model with per-domain Hit/Miss observation."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import kernels

HOST = -1


class Outcome(enum.Enum):
    HIT = "H"
    MISS = "M"


@dataclass(frozen=True)
class CacheConfig:
    sets: int = 64
    ways: int = 16
    line_size: int = 64

    def __post_init__(self):
        if self.sets <= 0 or self.sets & (self.sets - 1):
            raise ValueError("sets must be a power of two")
        if self.ways < 2 or self.ways > 64:
            raise ValueError("ways must be in 2..64")
        if self.line_size <= 0 or self.line_size & (self.line_size - 1):
            raise ValueError("line size must be a power of two")


class Cache:
    """Shared cache; ``enclave_ways`` > 0 turns on way partitioning.

    The top ``enclave_ways`` ways form the enclave partition. While any
    enclave executes, host fills are confined to the remaining ways and
    enclave fills to the partition; otherwise every way is available to the
    host.
    """

    def __init__(self, config: CacheConfig | None = None, enclave_ways: int = 0):
        self.config = config or CacheConfig()
        if not 0 <= enclave_ways < self.config.ways:
            raise ValueError("enclave partition must leave at least one host way")
        self.enclave_ways = enclave_ways
        n = self.config.sets * self.config.ways
        self._valid = kernels.u8_array(n)
        self._tags = kernels.u64_array(n)
        self._owner = kernels.i64_array(n)
        self._stamps = kernels.u64_array(n)
        self._clock = 0
        self._set_bits = self.config.sets.bit_length() - 1
        self._line_bits = self.config.line_size.bit_length() - 1
        self.active_enclaves = 0
        self.observations: dict[int, list[Outcome]] = {}
        self.mask_violations = 0
        self.fills = 0
        self.audit_fills = False
        self.fill_log: list[tuple[int, int, int]] = []

    @property
    def partitioned(self) -> bool:
        return self.enclave_ways > 0

    @property
    def all_mask(self) -> int:
        return (1 << self.config.ways) - 1

    @property
    def enclave_mask(self) -> int:
        if not self.partitioned:
            return self.all_mask
        return self.all_mask & ~((1 << (self.config.ways - self.enclave_ways)) - 1)

    def mask_for(self, domain: int) -> int:
        if not self.partitioned:
            return self.all_mask
        if domain == HOST:
            if self.active_enclaves:
                return self.all_mask & ~self.enclave_mask
            return self.all_mask
        return self.enclave_mask

    def reset(self) -> None:
        n = self.config.sets * self.config.ways
        for i in range(n):
            self._valid[i] = 0
        self._clock = 0
        self.active_enclaves = 0
        self.observations.clear()
        self.fill_log.clear()

    def access(self, domain: int, paddr: int) -> Outcome:
        line = paddr >> self._line_bits
        set_idx = line & (self.config.sets - 1)
        tag = line >> self._set_bits
        mask = self.mask_for(domain)
        self._clock += 1
        r = kernels.cache_access(
            self._valid, self._tags, self._owner, self._stamps,
            self.config.ways, set_idx, tag, domain, mask, self._clock,
        )
        if r >= 0:
            out = Outcome.HIT
        else:
            out = Outcome.MISS
            way = -r - 1
            if way < self.config.ways:
                self.fills += 1
                if not (mask >> way) & 1:
                    self.mask_violations += 1
                if self.audit_fills:
                    self.fill_log.append((domain, set_idx, way))
        self.observations.setdefault(domain, []).append(out)
        return out

    def touch_range(self, domain: int, addr: int, length: int) -> None:
        """Record one access per cache line covered by ``[addr, addr+length)``."""
        ls = self.config.line_size
        first = addr & ~(ls - 1)
        for a in range(first, addr + length, ls):
            self.access(domain, a)

    def observe(self, domain: int) -> list[Outcome]:
        return list(self.observations.get(domain, ()))

    def _flush_partition(self) -> int:
        if not self.partitioned:
            return 0
        ways = self.config.ways
        emask = self.enclave_mask
        flushed = 0
        for s in range(self.config.sets):
            for w in range(ways):
                if (emask >> w) & 1:
                    j = s * ways + w
                    if self._valid[j]:
                        self._valid[j] = 0
                        flushed += 1
        return flushed

    def switch_partition(self, entering: int) -> int:
        """Context switch into ``entering`` (HOST or an enclave id); returns lines flushed."""
        flushed = self._flush_partition()
        if entering == HOST:
            self.active_enclaves = max(0, self.active_enclaves - 1)
        else:
            self.active_enclaves += 1
        return flushed

    def lines_of(self, domain: int) -> int:
        n = 0
        for j in range(self.config.sets * self.config.ways):
            if self._valid[j] and self._owner[j] == domain:
                n += 1
        return n

    def partition_lines(self) -> list[tuple[int, int]]:
        """(owner, line tag) of every valid line in the enclave partition."""
        out = []
        ways = self.config.ways
        emask = self.enclave_mask if self.partitioned else 0
        for s in range(self.config.sets):
            for w in range(ways):
                j = s * ways + w
                if (emask >> w) & 1 and self._valid[j]:
                    out.append((int(self._owner[j]), int(self._tags[j])))
        return out
