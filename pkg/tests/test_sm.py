import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import intervals_disjoint

from ksim import crypto, sm as smmod
from ksim.host import Host, HostConfig, OutOfPhysicalMemory, random_image
from ksim.host.actions import Attest, Exit
from ksim.machine import PAGE_SIZE, AccessFault, AccessKind, PrivMode, pmp_check
from ksim.sm import (
    AttestationReport,
    CreateRequest,
    EnclaveState,
    IllegalCaller,
    OverlapError,
    Region,
    Tick,
    UnknownEnclave,
    WrongState,
    verify_report,
)


def _host(**kw):
    return Host(HostConfig(seed=kw.pop("seed", 0), **kw))


def test_region_helpers():
    a, b = Region(0x1000, 0x2000), Region(0x2000, 0x1000)
    assert a.end == 0x3000 and a.overlaps(b) and not Region(0x3000, 0x1000).overlaps(a)
    assert a.contains(0x2FFF) and not a.contains(0x2FFF, 2)
    assert list(a.pages()) == [0x1000, 0x2000]


def test_pmp_layout_sm_first_os_last():
    h = _host()
    hart = h.hart(0)
    assert hart.pmp[smmod.SM_ENTRY].perm_bits == 0
    assert hart.pmp[smmod.OS_ENTRY].perm_bits == 7
    assert not pmp_check(hart, 0x100, 8, AccessKind.READ, PrivMode.S)
    assert pmp_check(hart, 0x100, 8, AccessKind.READ, PrivMode.M)


def test_lifecycle_and_pmp_views():
    h = _host()
    e = h.load(random_image(random.Random(1)))
    d = h.sm.enclaves[e.eid]
    assert d.state == EnclaveState.CREATED
    with pytest.raises(AccessFault):
        h.host_read(d.epm.base, 8)
    h.run(e.eid, 1)
    assert d.state == EnclaveState.RUNNING and d.running_hart == 1
    hart1 = h.hart(1)
    assert pmp_check(hart1, d.epm.base, 8, AccessKind.WRITE, PrivMode.U)
    # the OS region is closed while the enclave runs, the host hart still cannot see the epm
    assert not pmp_check(hart1, 0x7F_0000, 8, AccessKind.READ, PrivMode.U)
    assert not pmp_check(h.hart(0), d.epm.base, 8, AccessKind.READ, PrivMode.S)
    h.sm.sbi_call(hart1, "stop")
    assert d.state == EnclaveState.STOPPED and hart1.enclave is None
    with pytest.raises(WrongState):
        h.sm.sbi_call(h.hart(2), "run", e.eid)
    h.resume(e.eid, 2)
    h.exec_action(e.eid, Exit(3))
    assert d.exited
    with pytest.raises(WrongState):
        h.resume(e.eid, 2)
    h.destroy(e.eid)
    assert d.state == EnclaveState.DESTROYED
    assert h.machine.memory.read(d.epm.base, d.epm.size) == bytes(d.epm.size)
    assert h.log.events("destroy")


def test_caller_checks():
    h = _host()
    e = h.load(random_image(random.Random(2)))
    with pytest.raises(IllegalCaller):
        h.sm.sbi_call(h.hart(0), "attest", b"")
    h.run(e.eid, 1)
    with pytest.raises(IllegalCaller):
        h.sm.sbi_call(h.hart(1), "destroy", e.eid)
    with pytest.raises(IllegalCaller):
        h.sm.sbi_call(h.hart(1), "create", None)
    with pytest.raises(UnknownEnclave):
        h.sm.sbi_call(h.hart(0), "run", 99)
    with pytest.raises(smmod.HartBusy):
        h.sm.run(e.eid, h.hart(1))


def test_create_rejects_overlap_and_bad_layouts():
    h = _host()
    e = h.load(random_image(random.Random(3)))
    d = h.sm.enclaves[e.eid]
    for epm in (Region(0, 4 * PAGE_SIZE), Region(d.epm.base + PAGE_SIZE, 4 * PAGE_SIZE)):
        with pytest.raises(OverlapError):
            h.sm.sbi_call(h.hart(0), "create", CreateRequest(epm, Region(0x7F_0000, PAGE_SIZE), epm.base, 0))
    base = 0x60_0000
    with pytest.raises(smmod.InvalidMapping):
        h.sm.sbi_call(h.hart(0), "create",
                      CreateRequest(Region(base, 4 * PAGE_SIZE), Region(0x7F_0000, PAGE_SIZE), 0x50_0000, 0))
    with pytest.raises(smmod.UnalignedRegion):
        h.sm.sbi_call(h.hart(0), "create",
                      CreateRequest(Region(base + 1, 4 * PAGE_SIZE), Region(0x7F_0000, PAGE_SIZE), base, 0))
    assert len(h.sm.enclaves) == 1


@pytest.mark.parametrize("variant", ["host_map", "alias", "table_alias", "shared_user", "table_escape"])
def test_malicious_page_tables_refused(variant):
    h = _host()
    before = h.log.text()
    with pytest.raises(smmod.SmError):
        h.load(random_image(random.Random(4)), malicious=variant)
    assert not h.sm.enclaves
    assert "create " not in h.log.text()[len(before):]


def test_pmp_entries_run_out_cleanly():
    h = _host(mem_size=32 << 20)
    made = 0
    with pytest.raises(smmod.NoFreePmpEntry):
        for i in range(20):
            h.load(random_image(random.Random(i), max_eapp_pages=1, data_pages=1))
            made += 1
    assert 1 <= made <= len(smmod.ENCLAVE_ENTRIES)
    h.sm.check_invariants()


def test_watchdog_forced_yield_exact():
    h = _host(watchdog=5)
    e = h.load(random_image(random.Random(5)))
    h.run(e.eid, 1)
    hart = h.hart(1)
    ticks = [h.sm.watchdog_tick(hart) for _ in range(5)]
    assert ticks == [Tick.CONTINUE] * 4 + [Tick.FORCED_YIELD]
    assert h.sm.enclaves[e.eid].state == EnclaveState.STOPPED
    assert h.sm.watchdog_tick(hart) == Tick.CONTINUE
    assert len(h.log.events("forced_yield")) == 1
    h.resume(e.eid, 1)  # the budget reloads on resume
    assert [h.sm.watchdog_tick(hart) for _ in range(5)][-1] == Tick.FORCED_YIELD


def test_trap_routing():
    h = _host()
    e = h.load(random_image(random.Random(6)))
    h.run(e.eid, 1)
    r, _ = h.sm.delegate_trap(e.eid, h.hart(1), smmod.Trap(smmod.TrapKind.USER_EXCEPTION, 0))
    assert r == "handled-by-RT"
    r, _ = h.sm.delegate_trap(e.eid, h.hart(1), smmod.Trap(smmod.TrapKind.TIMER, 0))
    assert r == "forwarded-to-OS"
    assert h.sm.enclaves[e.eid].state == EnclaveState.STOPPED


def test_extend_must_be_adjacent():
    h = _host()
    e = h.load(random_image(random.Random(7)))
    d = h.sm.enclaves[e.eid]
    with pytest.raises(smmod.NotAdjacent):
        h.sm.sbi_call(h.hart(0), "extend", e.eid, Region(d.epm.end + PAGE_SIZE, PAGE_SIZE))
    size = d.epm.size
    h.extend(e.eid, 2)
    assert d.epm.size == size + 2 * PAGE_SIZE
    h.sm.check_invariants()


def test_attestation_report_roundtrip_and_reasons():
    h = _host(seed=8)
    e = h.load(random_image(random.Random(8)))
    h.run(e.eid, 1)
    rep = h.exec_action(e.eid, Attest(b"nonce"))
    raw = rep.to_bytes()
    assert len(raw) == AttestationReport.SIZE == 1260 and raw[:4] == b"KSRP"
    assert AttestationReport.from_bytes(raw) == rep
    d = h.sm.enclaves[e.eid]
    assert verify_report(raw, h.device_public, h.sm.sm_measurement, d.measurement)
    assert verify_report(raw, crypto.device_from_id(9).public).reason == "chain"
    assert verify_report(raw, h.device_public, b"\0" * 32).reason == "sm-measurement"
    assert verify_report(raw, h.device_public, None, b"\0" * 32).reason == "measurement"
    forged = AttestationReport(rep.sm_measurement, rep.sm_attest_public, rep.device_signature,
                               b"\1" * 32, rep.data, rep.sm_signature)
    assert verify_report(forged, h.device_public).reason == "enclave-signature"
    assert verify_report(raw[:-1], h.device_public).reason.startswith("parse:")
    with pytest.raises(smmod.DataTooLarge):
        h.sm.sbi_call(h.hart(1), "attest", bytes(1025))


def test_measure_skips_shared_pages_and_depends_on_config():
    img = random_image(random.Random(9))
    a = _host().load(img)
    h2 = _host()
    b = h2.load(img, utm_pages=4)
    assert a.runtime.sm.enclaves[a.eid].measurement == h2.sm.enclaves[b.eid].measurement
    h3 = _host()
    c = h3.load(img, config=b"other")
    assert h3.sm.enclaves[c.eid].measurement != h2.sm.enclaves[b.eid].measurement


def test_sm_random_is_seeded_splitmix():
    h = _host(seed=77)
    e = h.load(random_image(random.Random(1)))
    h.run(e.eid, 1)
    got = [h.sm.sbi_call(h.hart(1), "random") for _ in range(3)]
    rng = crypto.Rng(77)
    assert got == [rng.next() for _ in range(3)]


@settings(max_examples=25)
@given(st.lists(st.integers(1, 24), min_size=1, max_size=8), st.integers(0, 2**16))
def test_live_regions_stay_disjoint(sizes, seed):
    h = _host(mem_size=16 << 20, seed=seed)
    rnd = random.Random(seed)
    for n in sizes:
        try:
            e = h.load(random_image(rnd, max_eapp_pages=1, data_pages=1), epm_pages=n + 12)
        except (smmod.SmError, OutOfPhysicalMemory):
            continue
        if rnd.random() < 0.3:
            h.destroy(e.eid)
    live = [d for d in h.sm.enclaves.values() if d.live]
    regions = [(h.sm.sm_region.base, h.sm.sm_region.size)] + [(d.epm.base, d.epm.size) for d in live]
    regions += [(d.utm.base, d.utm.size) for d in live]
    assert intervals_disjoint(regions)
    h.sm.check_invariants()


def test_device_secret_never_leaves(tmp_path):
    h = _host(seed=12)
    secret = crypto.device_from_id(h.config.device_id)._audit_secret()
    e = h.load(random_image(random.Random(12)))
    h.run(e.eid, 1)
    rep = h.exec_action(e.eid, Attest(b"x"))
    h.exec_action(e.eid, Exit(0))
    h.machine.dump(tmp_path / "mem.bin")
    blobs = [h.log.text().encode(), rep.to_bytes(), (tmp_path / "mem.bin").read_bytes(),
             repr(h.sm.__dict__).encode(), h.sm.boot_certificate.to_bytes()]
    for b in blobs:
        assert secret not in b and secret.hex().encode() not in b
