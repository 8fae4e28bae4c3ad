"""Remote computation demo: a client sends text to an attested enclave and gets the word count back.

The enclave generates an X25519 key, binds its public half and the client's
challenge into an attestation report, and the client only sends its request
after the report verifies. Messages are AES-128-CTR with a SHA3 tag, keyed by
the X25519 shared secret. The host only relays bytes (an in-process queue
stands in for the network).
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from .. import crypto
from ..edge import edge_call
from ..sm import AttestationReport, Verdict, verify_report
from .actions import Compute, Exit
from .driver import Host
from .image import EnclaveImage, data_vaddr, random_image

TAG = 32


class ChannelError(Exception):
    pass


def _raw(pub: X25519PublicKey) -> bytes:
    return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def channel_key(shared: bytes) -> bytes:
    return crypto.hash(shared + b"ksim-channel")[:16]


def seal(key: bytes, nonce: bytes, msg: bytes) -> bytes:
    ct = crypto.aes_ctr(key, nonce, msg)
    return nonce + ct + crypto.hash(key + nonce + ct)


def open_sealed(key: bytes, wire: bytes) -> bytes:
    if len(wire) < 16 + TAG:
        raise ChannelError("short message")
    nonce, ct, tag = wire[:16], wire[16:-TAG], wire[-TAG:]
    if crypto.hash(key + nonce + ct) != tag:
        raise ChannelError("bad channel tag")
    return crypto.aes_ctr(key, nonce, ct)


@dataclass
class RemoteClient:
    """The remote user. Knows the device key and the expected measurements."""

    device_public: bytes
    expected_enclave: bytes
    expected_sm: bytes | None = None
    seed: int = 0
    verdict: Verdict | None = None
    reply: bytes | None = None
    transcript: list[str] = field(default_factory=list)

    def __post_init__(self):
        rnd = random.Random(self.seed)
        self._key = X25519PrivateKey.from_private_bytes(rnd.randbytes(32))
        self._challenge = rnd.randbytes(16)
        self._session: bytes | None = None

    def challenge(self) -> bytes:
        self.transcript.append("challenge")
        return self._challenge

    def accept_report(self, raw: bytes) -> bool:
        self.verdict = verify_report(raw, self.device_public, self.expected_sm, self.expected_enclave)
        if not self.verdict:
            self.transcript.append(f"report rejected: {self.verdict.reason}")
            return False
        report = AttestationReport.from_bytes(raw)
        if len(report.data) != 48 or report.data[32:] != self._challenge:
            self.verdict = Verdict(False, "challenge")
            self.transcript.append("report rejected: challenge")
            return False
        enclave_pub = X25519PublicKey.from_public_bytes(report.data[:32])
        self._session = channel_key(self._key.exchange(enclave_pub))
        self.transcript.append("report accepted")
        return True

    def request(self, message: bytes) -> bytes:
        if self._session is None:
            raise ChannelError("no attested session")
        self.transcript.append("request sent")
        nonce = b"\x01" + bytes(15)
        return _raw(self._key.public_key()) + seal(self._session, nonce, message)

    def receive(self, wire: bytes) -> bytes:
        if self._session is None:
            raise ChannelError("no attested session")
        self.reply = open_sealed(self._session, wire)
        self.transcript.append("reply received")
        return self.reply


@dataclass
class RemoteResult:
    reply: bytes | None
    verdict: Verdict | None
    expected: bytes
    transcript: list[str]
    eid: int

    @property
    def ok(self) -> bool:
        return bool(self.verdict) and self.reply == self.expected


def wordcount_program(fids: dict[str, int]) -> tuple:
    """The enclave application, as a sequence of in-enclave steps."""
    key_at = data_vaddr()
    msg_at = data_vaddr() + 64

    def keygen(rt, h):
        seed = b"".join(struct.pack("<Q", rt.syscall_getrandom()) for _ in range(4))
        rt.write_bytes(key_at, seed)

    def attest(rt, h):
        sk = X25519PrivateKey.from_private_bytes(rt.read_bytes(key_at, 32))
        challenge = edge_call(rt, fids["challenge"], b"")
        report = rt.sm.sbi_call(rt.hart, "attest", _raw(sk.public_key()) + challenge)
        h.reports.append(report)
        return edge_call(rt, fids["report"], report.to_bytes())

    def serve(rt, h):
        wire = edge_call(rt, fids["request"], b"")
        if len(wire) < 32:
            return b"no-request"
        sk = X25519PrivateKey.from_private_bytes(rt.read_bytes(key_at, 32))
        session = channel_key(sk.exchange(X25519PublicKey.from_public_bytes(wire[:32])))
        try:
            message = open_sealed(session, wire[32:])
        except ChannelError:
            return b"bad-request"
        rt.write_bytes(msg_at, struct.pack("<I", len(message)) + message)
        n = struct.unpack("<I", rt.read_bytes(msg_at, 4))[0]
        count = str(len(rt.read_bytes(msg_at + 4, n).split())).encode()
        nonce = b"\x02" + bytes(15)
        return edge_call(rt, fids["reply"], seal(session, nonce, count))

    return (Compute(keygen, "keygen"), Compute(attest, "attest"), Compute(serve, "serve"), Exit(0))


def run_wordcount(
    host: Host,
    message: bytes = b"hello world",
    image: EnclaveImage | None = None,
    expected_measurement: bytes | None = None,
    hart: int = 1,
) -> RemoteResult:
    """Attest, bind a channel, send ``message``, and return what the client received.

    ``expected_measurement`` is what the client trusts; callers normally
    compute it offline with the measurement tool.
    """
    image = image or random_image(random.Random(host.config.seed ^ 0x5EED))
    h = host.load(image)
    expected = expected_measurement if expected_measurement is not None else host.sm.enclaves[h.eid].measurement
    client = RemoteClient(host.device_public, expected, host.sm.sm_measurement, seed=host.config.seed)
    fns = host.functions

    def on_report(raw: bytes) -> bytes:
        return b"ok" if client.accept_report(raw) else b"rejected"

    def on_request(_: bytes) -> bytes:
        return client.request(message) if client.verdict else b""

    def on_reply(wire: bytes) -> bytes:
        client.receive(wire)
        return b"ack"

    fids = {
        "challenge": fns.register(lambda _: client.challenge(), "challenge"),
        "report": fns.register(on_report, "report"),
        "request": fns.register(on_request, "request"),
        "reply": fns.register(on_reply, "reply"),
    }
    host.run_trace(h.eid, wordcount_program(fids), hart=hart)
    oracle = str(len(message.split())).encode()
    return RemoteResult(client.reply, client.verdict, oracle, client.transcript, h.eid)
