import random

import pytest
from helpers import cache_run, noninterference_trace, prime_probe_witness
from hypothesis import given, settings
from hypothesis import strategies as st

from ksim.cache import HOST, Cache, CacheConfig, Outcome
from ksim.host import random_image


def test_config_validation():
    for bad in ({"sets": 3}, {"ways": 1}, {"line_size": 48}):
        with pytest.raises(ValueError):
            CacheConfig(**bad)
    with pytest.raises(ValueError):
        Cache(CacheConfig(ways=4), enclave_ways=4)


def test_hit_after_fill_and_line_granularity():
    c = Cache(CacheConfig(sets=4, ways=2))
    assert c.access(HOST, 0x100) == Outcome.MISS
    assert c.access(HOST, 0x13F) == Outcome.HIT
    assert c.access(HOST, 0x140) == Outcome.MISS
    assert c.observe(HOST) == [Outcome.MISS, Outcome.HIT, Outcome.MISS]


def test_masks():
    c = Cache(CacheConfig(ways=8), enclave_ways=3)
    assert c.enclave_mask == 0b1110_0000
    assert c.mask_for(HOST) == 0xFF
    c.active_enclaves = 1
    assert c.mask_for(HOST) == 0b0001_1111
    assert c.mask_for(0) == 0b1110_0000
    assert Cache(CacheConfig(ways=8)).mask_for(0) == 0xFF


@settings(max_examples=30)
@given(st.lists(st.tuples(st.sampled_from([HOST, 0, 1]), st.integers(0, 1 << 16)), max_size=300))
def test_fills_respect_masks(accesses):
    c = Cache(CacheConfig(sets=8, ways=4), enclave_ways=2)
    c.audit_fills = True
    c.active_enclaves = 1
    for dom, addr in accesses:
        c.access(dom, addr)
    assert c.mask_violations == 0
    for dom, _, way in c.fill_log:
        assert (way >= 2) == (dom != HOST)


def test_prime_probe_witness():
    w = prime_probe_witness()
    assert w["off"][0] != w["off"][1]
    assert w["on"][0] == w["on"][1]


def test_host_view_independent_of_enclave_trace():
    img = random_image(random.Random(8), data_pages=3)
    for i in range(10):
        rnd = random.Random(i)
        t1 = noninterference_trace(rnd, 3, 20)
        t2 = noninterference_trace(rnd, 3, 20)
        o1, c1 = cache_run(img, t1, i, 24, enclave_ways=8)
        o2, c2 = cache_run(img, t2, i, 24, enclave_ways=8)
        assert o1 == o2
        assert c1.mask_violations == c2.mask_violations == 0
