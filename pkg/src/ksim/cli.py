"""ksim command line: run scenarios, measure images, verify reports, read logs.

``measure`` is a second, self-contained implementation of the enclave
measurement. It reads the image file directly and never touches the SM or the
host loader, so agreement between the two is a real cross-check.
"""

from __future__ import annotations

import argparse
import hashlib
import struct
import sys

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# -- independent measurement ------------------------------------------------------

_PAGE = 4096
_IMG_HDR = "<5sBHQQII"  # magic, version, reserved, rt_entry, eapp_entry, config_len, seg_count
_IMG_SEG = "<QIB3x"  # vaddr, length, flags
_LEAF_VALID = 0x01
_LEAF_MASK = 0x1F  # V R W X U
_SEG_ALLOWED = 0x02 | 0x04 | 0x08 | 0x10


class MeasureError(ValueError):
    pass


def _parse_image(raw: bytes) -> tuple[int, bytes, list[tuple[int, int, bytes]]]:
    hsize = struct.calcsize(_IMG_HDR)
    if len(raw) < hsize:
        raise MeasureError("image shorter than its header")
    magic, version, _, rt_entry, _, clen, nseg = struct.unpack_from(_IMG_HDR, raw)
    if magic != b"KSIM1" or version != 1:
        raise MeasureError("not a ksim image")
    pos = hsize
    config = raw[pos : pos + clen]
    if len(config) != clen:
        raise MeasureError("config runs past end of file")
    pos += clen
    ssize = struct.calcsize(_IMG_SEG)
    segs = []
    for _ in range(nseg):
        if pos + ssize > len(raw):
            raise MeasureError("segment table runs past end of file")
        vaddr, length, flags = struct.unpack_from(_IMG_SEG, raw, pos)
        pos += ssize
        body = raw[pos : pos + length]
        if len(body) != length or length == 0:
            raise MeasureError("bad segment length")
        if vaddr % _PAGE or flags & ~_SEG_ALLOWED:
            raise MeasureError("bad segment address or flags")
        pos += length
        segs.append((vaddr, flags, body))
    if pos != len(raw):
        raise MeasureError("trailing bytes after last segment")
    return rt_entry, config, segs


def measure_image(raw: bytes, config: bytes | None = None) -> str:
    """Lowercase hex SHA3-256 of the layout the loader will build for ``raw``."""
    entry, img_config, segs = _parse_image(raw)
    pages = []
    for vaddr, flags, body in segs:
        for i in range(0, len(body), _PAGE):
            chunk = body[i : i + _PAGE]
            pages.append((vaddr + i, (flags | _LEAF_VALID) & _LEAF_MASK, chunk + b"\0" * (_PAGE - len(chunk))))
    pages.sort(key=lambda p: p[0])
    h = hashlib.sha3_256()
    h.update(img_config if config is None else config)
    h.update(entry.to_bytes(8, "little"))
    for vaddr, flags, page in pages:
        h.update(vaddr.to_bytes(8, "little") + bytes([flags]) + page)
    return h.hexdigest()


# -- subcommands -----------------------------------------------------------------


def _hex(s: str) -> bytes:
    try:
        return bytes.fromhex(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not hex: {s!r}") from None


def _int(s: str) -> int:
    try:
        return int(s, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None


def _size(s: str) -> int:
    from .host.scenario import parse_size

    try:
        return parse_size(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a size: {s!r}") from None


def cmd_run(args) -> int:
    from .host.scenario import ScenarioParseError, run_scenario

    overrides = {
        "seed": args.seed,
        "paging_limit": args.paging_limit,
        "encrypt": True if args.encrypt else None,
        "cache_ways": args.cache_partition,
        "scratchpad": args.scratchpad,
        "dyn_resize": True if args.dyn_resize else None,
    }
    try:
        res = run_scenario(args.file, overrides)
    except (OSError, ScenarioParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.log:
        with open(args.log, "w") as f:
            f.write(res.log)
    else:
        sys.stdout.write(res.log)
    for line in res.output:
        print(line)
    for v in res.verdicts:
        tag = "PASS" if v.passed else "FAIL"
        print(f"{tag} line {v.lineno}: {v.text}" + ("" if v.passed else f" ({v.detail})"))
    print("final: " + " ".join(f"{eid}={st}" for eid, st in res.final_state.items()))
    print("result: " + ("pass" if res.exit_code == EXIT_PASS else "fail"))
    return res.exit_code


def cmd_measure(args) -> int:
    if args.epm_base < 0 or args.epm_base % _PAGE:
        print("error: --epm-base must be a non-negative page-aligned address", file=sys.stderr)
        return EXIT_USAGE
    try:
        with open(args.image, "rb") as f:
            raw = f.read()
        print(measure_image(raw, args.config))
    except (OSError, MeasureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_PASS


def cmd_verify(args) -> int:
    from .sm import AttestationReport, ReportParseError, verify_report

    try:
        with open(args.report, "rb") as f:
            report = AttestationReport.from_bytes(f.read())
    except (OSError, ReportParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    v = verify_report(report, args.device_key, None, args.expect)
    print("valid" if v else f"invalid: {v.reason}")
    return EXIT_PASS if v else EXIT_FAIL


def cmd_log(args) -> int:
    try:
        with open(args.file) as f:
            lines = f.read().splitlines()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    for ln in lines:
        fields = dict(p.split("=", 1) for p in ln.split(" ", 3) if "=" in p)
        if not {"step", "hart", "event"} <= fields.keys():
            print(f"error: malformed log line: {ln!r}", file=sys.stderr)
            return EXIT_USAGE
        print(f"{fields['step']:>8}  hart {fields['hart']:>2}  {fields['event']:<18} {fields.get('args', '')}")
    return EXIT_PASS


def cmd_device_key(args) -> int:
    from .crypto import device_from_id

    print(device_from_id(args.device).public.hex())
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksim", description="Enclave security monitor simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("file")
    r.add_argument("--seed", type=_int)
    r.add_argument("--paging-limit", type=_int)
    r.add_argument("--encrypt", action="store_true")
    r.add_argument("--cache-partition", type=_int, metavar="W")
    r.add_argument("--scratchpad", type=_size, metavar="SIZE")
    r.add_argument("--dyn-resize", action="store_true")
    r.add_argument("--log", metavar="PATH")
    r.set_defaults(fn=cmd_run)

    m = sub.add_parser("measure", help="print the measurement an image will get")
    m.add_argument("image")
    m.add_argument("--epm-base", type=_int, required=True)
    m.add_argument("--config", type=_hex)
    m.set_defaults(fn=cmd_measure)

    v = sub.add_parser("verify", help="check an attestation report")
    v.add_argument("report")
    v.add_argument("--device-key", type=_hex, required=True)
    v.add_argument("--expect", type=_hex, metavar="HEX")
    v.set_defaults(fn=cmd_verify)

    lg = sub.add_parser("log", help="pretty-print an audit log")
    lg.add_argument("file")
    lg.set_defaults(fn=cmd_log)

    d = sub.add_parser("device-key", help="print a device's public key")
    d.add_argument("--device", type=_int, default=1)
    d.set_defaults(fn=cmd_device_key)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_PASS
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
