"""The lifecycle fuzzer, plus a check that it notices a broken monitor."""

import pytest
from helpers import SbiFuzzer

from ksim import sm as smmod


def test_short_fuzz_clean_and_reproducible():
    a = SbiFuzzer(seed=1).run(3000)
    b = SbiFuzzer(seed=1).run(3000)
    assert not a.violations, a.violations[:3]
    assert a.digest == b.digest
    assert a.created > 0 and a.forced_yields > 0 and a.rejected > 0


def test_other_seed_other_trace():
    assert SbiFuzzer(seed=1).run(500).digest != SbiFuzzer(seed=2).run(500).digest


@pytest.mark.parametrize("fault", ["double_run", "no_overlap_check", "lazy_watchdog"])
def test_fuzzer_detects_injected_faults(monkeypatch, fault):
    if fault == "double_run":
        real = smmod.SecurityMonitor.run

        def run(self, eid, hart):
            d = self._get(eid)
            if d.state == smmod.EnclaveState.STOPPED and not d.exited and hart.enclave is None:
                d.state = smmod.EnclaveState.CREATED
            return real(self, eid, hart)

        monkeypatch.setattr(smmod.SecurityMonitor, "run", run)
    elif fault == "no_overlap_check":
        monkeypatch.setattr(smmod.SecurityMonitor, "_check_disjoint", lambda self, r, what, exclude=None: None)
    else:
        monkeypatch.setattr(smmod.SecurityMonitor, "watchdog_tick", lambda self, hart: smmod.Tick.CONTINUE)
    res = SbiFuzzer(seed=5).run(3000)
    assert res.violations
