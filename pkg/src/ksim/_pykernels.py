"""Pure-Python versions of the hot kernels.

Semantics must stay identical to ``_kernels.pyx``; ``tests/test_kernels.py``
runs both backends against the same cases.
"""

NUM_ENTRIES = 16


def pmp_match(lo, hi, perm, addr, length, need):
    """Return 1 if the lowest matching entry fully contains the access and grants ``need``.

    ``lo``/``hi``/``perm`` are the decoded region bounds and r/w/x bitmask of
    each entry, ``lo >= hi`` marks an entry that matches nothing.
    """
    end = addr + length
    for i in range(NUM_ENTRIES):
        l = lo[i]
        h = hi[i]
        if l >= h:
            continue
        if addr < h and end > l:
            if addr >= l and end <= h:
                return 1 if perm[i] & need else 0
            return 0
    return 0


def pmp_match_batch(lo, hi, perm, addrs, lengths, needs, out):
    for k in range(len(addrs)):
        out[k] = pmp_match(lo, hi, perm, int(addrs[k]), int(lengths[k]), int(needs[k]))
    return out


def cache_access(valid, tags, owner, stamps, ways, set_idx, tag, domain, mask, clock):
    """Look up one line; fill on miss into a way allowed by ``mask`` (LRU).

    Returns ``way`` on a hit, ``-(way + 1)`` on a miss filled into ``way`` and
    ``-(ways + 1)`` when ``mask`` allows no way at all (no fill).
    """
    base = set_idx * ways
    for w in range(ways):
        j = base + w
        if valid[j] and tags[j] == tag:
            # only refresh recency in ways this domain may fill, so a hit can't
            # reorder another domain's evictions
            if (mask >> w) & 1:
                stamps[j] = clock
            return w
    victim = -1
    oldest = 0
    for w in range(ways):
        if not (mask >> w) & 1:
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
