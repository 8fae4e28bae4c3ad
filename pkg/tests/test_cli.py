import random

import pytest

from ksim import cli
from ksim.host import Host, HostConfig, random_image
from ksim.host.actions import Attest


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_measure_matches_the_monitor(tmp_path, capsys):
    for seed in range(10):
        img = random_image(random.Random(seed))
        path = tmp_path / f"{seed}.img"
        path.write_bytes(img.to_bytes())
        h = Host(HostConfig(seed=seed))
        e = h.load(img)
        code, out, _ = _run(capsys, "measure", str(path), "--epm-base", hex(e.epm.base))
        assert code == 0 and out.strip() == h.sm.enclaves[e.eid].measurement.hex()
        code, out2, _ = _run(capsys, "measure", str(path), "--epm-base", "0x0", "--config", "00")
        assert code == 0 and out2 != out


def test_measure_rejects_bad_input(tmp_path, capsys):
    p = tmp_path / "junk"
    p.write_bytes(b"junk")
    assert _run(capsys, "measure", str(p), "--epm-base", "0")[0] == 2
    assert _run(capsys, "measure", str(p), "--epm-base", "0x123")[0] == 2
    assert _run(capsys, "measure", str(tmp_path / "missing"), "--epm-base", "0")[0] == 2


def test_verify_exit_codes(tmp_path, capsys):
    h = Host(HostConfig(seed=1))
    e = h.load(random_image(random.Random(1)))
    h.run(e.eid, 1)
    raw = h.exec_action(e.eid, Attest(b"hi")).to_bytes()
    p = tmp_path / "r.bin"
    p.write_bytes(raw)
    code, out, _ = _run(capsys, "verify", str(p), "--device-key", h.device_public.hex())
    assert (code, out.strip()) == (0, "valid")
    meas = h.sm.enclaves[e.eid].measurement.hex()
    assert _run(capsys, "verify", str(p), "--device-key", h.device_public.hex(), "--expect", meas)[0] == 0
    code, out, _ = _run(capsys, "verify", str(p), "--device-key", "00" * 32, "--expect", meas)
    assert code == 1 and out.startswith("invalid:")
    p.write_bytes(raw[:100])
    assert _run(capsys, "verify", str(p), "--device-key", h.device_public.hex())[0] == 2


def test_device_key_matches_host(capsys):
    code, out, _ = _run(capsys, "device-key", "--device", "1")
    assert code == 0 and out.strip() == Host(HostConfig()).device_public.hex()


def test_run_and_log(tmp_path, capsys):
    scn = tmp_path / "a.scn"
    scn.write_text("boot seed=3\nimage app random\ncreate image=app\nrun 0\neapp 0 exit\nexpect state 0 exited\n")
    log = tmp_path / "a.log"
    code, out, _ = _run(capsys, "run", str(scn), "--log", str(log))
    assert code == 0 and "result: pass" in out
    code, out, _ = _run(capsys, "log", str(log))
    assert code == 0 and "create" in out
    scn.write_text("boot\nwat\n")
    assert _run(capsys, "run", str(scn))[0] == 2
    scn.write_text("boot\nimage app random\ncreate image=app\nexpect state 0 running\n")
    assert _run(capsys, "run", str(scn))[0] == 1


def test_usage_errors(capsys):
    assert _run(capsys, "bogus")[0] == 2
    assert _run(capsys, "run", "x.scn", "--scratchpad", "lots")[0] == 2
    assert _run(capsys, "measure", "x")[0] == 2
