"""Deterministic primitives and the simulated boot-time key hierarchy.

SHA3-256 comes from :mod:`hashlib`; Ed25519 and AES-128-CTR from
``cryptography``. Nothing here reads ambient entropy.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

PAGE_SIZE = 4096
MASK64 = (1 << 64) - 1


class MalformedKey(ValueError):
    pass


class IntegrityError(Exception):
    pass


def hash(data: bytes) -> bytes:  # noqa: A001 - the module's name for SHA3-256
    return hashlib.sha3_256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes  # 32-byte Ed25519 seed

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()}, secret=<hidden>)"


def keypair_from_seed(seed: bytes) -> KeyPair:
    if len(seed) != 32:
        raise MalformedKey("Ed25519 seed must be 32 bytes")
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pub = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return KeyPair(pub, bytes(seed))


def sign(secret: bytes, msg: bytes) -> bytes:
    if len(secret) == 64:
        secret = secret[:32]
    if len(secret) != 32:
        raise MalformedKey("Ed25519 secret must be 32 (or 64) bytes")
    return Ed25519PrivateKey.from_private_bytes(secret).sign(msg)


def verify(public: bytes, msg: bytes, sig: bytes) -> bool:
    if len(public) != 32:
        raise MalformedKey("Ed25519 public key must be 32 bytes")
    if len(sig) != 64:
        return False
    try:
        pk = Ed25519PublicKey.from_public_bytes(public)
    except ValueError as e:
        raise MalformedKey(str(e)) from e
    try:
        pk.verify(sig, msg)
    except InvalidSignature:
        return False
    return True


# -- page sealing ------------------------------------------------------------


@dataclass(frozen=True)
class SealedPage:
    ciphertext: bytes
    nonce: bytes
    tag: bytes


def mac_key(key: bytes) -> bytes:
    return hash(key + b"mac")


def aes_ctr(key: bytes, nonce: bytes, data: bytes) -> bytes:
    """AES-128-CTR keystream XOR (encryption and decryption are the same)."""
    c = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return c.update(data) + c.finalize()


_ctr = aes_ctr


def seal_page(key: bytes, nonce: bytes, plaintext: bytes) -> SealedPage:
    if len(key) != 16:
        raise MalformedKey("page key must be 16 bytes (AES-128)")
    if len(nonce) != 16:
        raise ValueError("nonce must be 16 bytes")
    if len(plaintext) != PAGE_SIZE:
        raise ValueError("plaintext must be exactly one page")
    ct = _ctr(key, nonce, plaintext)
    return SealedPage(ct, nonce, hash(mac_key(key) + nonce + ct))


def unseal_page(key: bytes, sealed: SealedPage) -> bytes:
    """Verify the tag, then decrypt. Raises :class:`IntegrityError` on mismatch."""
    if len(key) != 16:
        raise MalformedKey("page key must be 16 bytes (AES-128)")
    expect = hash(mac_key(key) + sealed.nonce + sealed.ciphertext)
    if len(sealed.ciphertext) != PAGE_SIZE or expect != sealed.tag:
        raise IntegrityError("page tag mismatch")
    return _ctr(key, sealed.nonce, sealed.ciphertext)


# -- randomness --------------------------------------------------------------


class Rng:
    """SplitMix64 stream."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.state = self.seed
        self.counter = 0

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        self.counter += 1
        return z ^ (z >> 31)

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += struct.pack("<Q", self.next())
        return bytes(out[:n])

    def below(self, n: int) -> int:
        """Uniform-ish integer in ``[0, n)`` (modulo bias is irrelevant at these sizes)."""
        return self.next() % n


def next_random(rng: Rng) -> int:
    return rng.next()


# -- secure boot ---------------------------------------------------------------


class DeviceSecret:
    """Device root key. Only :func:`secure_boot` signs with it."""

    def __init__(self, device_seed: bytes):
        self.__keys = keypair_from_seed(hash(b"ksim-device-root" + device_seed))
        self.public = self.__keys.public

    def __repr__(self) -> str:
        return f"DeviceSecret(public={self.public.hex()})"

    def _boot_sign(self, msg: bytes) -> bytes:
        return sign(self.__keys.secret, msg)

    def _derive(self, label: bytes) -> bytes:
        return hash(self.__keys.secret + label)

    def _audit_secret(self) -> bytes:
        """Raw secret, for the leak-audit tests only."""
        return self.__keys.secret


def device_from_id(device_id: int) -> DeviceSecret:
    return DeviceSecret(struct.pack("<Q", device_id))


@dataclass(frozen=True)
class BootCertificate:
    sm_measurement: bytes
    sm_attest_public: bytes
    signature: bytes

    SIZE = 32 + 32 + 64

    def signed_blob(self) -> bytes:
        return self.sm_measurement + self.sm_attest_public

    def to_bytes(self) -> bytes:
        return self.sm_measurement + self.sm_attest_public + self.signature

    @classmethod
    def from_bytes(cls, b: bytes) -> "BootCertificate":
        if len(b) != cls.SIZE:
            raise ValueError("boot certificate must be 128 bytes")
        return cls(b[:32], b[32:64], b[64:])

    def verify(self, device_public: bytes) -> bool:
        return verify(device_public, self.signed_blob(), self.signature)


@dataclass(frozen=True)
class BootResult:
    sm_measurement: bytes
    attest_keys: KeyPair
    certificate: BootCertificate


def secure_boot(device: DeviceSecret, sm_image: bytes, seed: int) -> BootResult:
    if not sm_image:
        raise ValueError("empty SM image")
    measurement = hash(sm_image)
    attest = keypair_from_seed(device._derive(b"attest" + struct.pack("<Q", seed & MASK64)))
    sig = device._boot_sign(measurement + attest.public)
    return BootResult(measurement, attest, BootCertificate(measurement, attest.public, sig))


# -- key records -----------------------------------------------------------------


def public_key_record(public: bytes) -> bytes:
    """Fixed-width public key record: b"KSPK" | u32 length | key."""
    return b"KSPK" + struct.pack("<I", len(public)) + public


def parse_public_key_record(b: bytes) -> bytes:
    if len(b) != 40 or b[:4] != b"KSPK" or struct.unpack("<I", b[4:8])[0] != 32:
        raise MalformedKey("bad public key record")
    return b[8:]
