# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled PMP and cache kernels. Mirrors ``_pykernels`` exactly."""

from libc.stdint cimport uint8_t, uint64_t, int64_t

DEF NUM_ENTRIES = 16


cdef inline int _match(const uint64_t[:] lo, const uint64_t[:] hi, const uint8_t[:] perm,
                       uint64_t addr, uint64_t length, int need) nogil:
    cdef uint64_t end = addr + length
    cdef uint64_t l, h
    cdef int i
    for i in range(NUM_ENTRIES):
        l = lo[i]
        h = hi[i]
        if l >= h:
            continue
        if addr < h and end > l:
            if addr >= l and end <= h:
                return 1 if (perm[i] & need) else 0
            return 0
    return 0


def pmp_match(const uint64_t[:] lo, const uint64_t[:] hi, const uint8_t[:] perm,
              uint64_t addr, uint64_t length, int need):
    return _match(lo, hi, perm, addr, length, need)


def pmp_match_batch(const uint64_t[:] lo, const uint64_t[:] hi, const uint8_t[:] perm,
                    const uint64_t[:] addrs, const uint64_t[:] lengths,
                    const uint8_t[:] needs, uint8_t[:] out):
    cdef Py_ssize_t k, n = addrs.shape[0]
    with nogil:
        for k in range(n):
            out[k] = _match(lo, hi, perm, addrs[k], lengths[k], needs[k])
    return out


def cache_access(uint8_t[:] valid, uint64_t[:] tags, int64_t[:] owner, uint64_t[:] stamps,
                 int ways, Py_ssize_t set_idx, uint64_t tag, int64_t domain,
                 uint64_t mask, uint64_t clock):
    cdef Py_ssize_t base = set_idx * ways
    cdef Py_ssize_t j
    cdef int w, victim = -1
    cdef uint64_t oldest = 0
    for w in range(ways):
        j = base + w
        if valid[j] and tags[j] == tag:
            # only refresh recency in ways this domain may fill, so a hit can't
            # reorder another domain's evictions
            if (mask >> w) & 1:
                stamps[j] = clock
            return w
    for w in range(ways):
        if not ((mask >> w) & 1):
            continue
        j = base + w
        if not valid[j]:
            victim = w
            break
        if victim < 0 or stamps[j] < oldest:
            victim = w
            oldest = stamps[j]
    if victim < 0:
        return -(ways + 1)
    j = base + victim
    valid[j] = 1
    tags[j] = tag
    owner[j] = domain
    stamps[j] = clock
    return -(victim + 1)
