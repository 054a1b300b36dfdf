"""Algorithm-agnostic crypto provider with elemental-operation accounting.

Every public method of :class:`CipherSuite` increments exactly one counter in
its :class:`OpCounters`; protocol code never calls an algorithm directly, so
the counters reproduce the per-operation cost model.

Two suites are registered:

* ``0x0000`` :class:`ToySuite` -- FNV-1a based, fully deterministic and
  implementable from scratch. Its "encryption" models access control
  (opening requires the matching private key), not confidentiality.
* ``0x0001`` :class:`ClassicSuite` -- SHA-512 / HMAC-SHA-512 / HKDF /
  X25519 + AES-256-GCM sealing / Ed25519 signatures.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass

from .errors import BadKey, BadKeyLength, DecryptionFailure, EmptySecret, EmptySeed, UnknownSuite

TOY_SUITE = 0x0000
CLASSIC_SUITE = 0x0001

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> bytes:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h.to_bytes(8, "big")


@dataclass
class OpCounters:
    """Counts of elemental operations.

    E public-key seal/open, S sign, M MAC compute/verify, G randomness,
    V signature verify, K seeded key pair, H hash, D KDF, N nonce compare.
    """

    E: int = 0
    S: int = 0
    M: int = 0
    G: int = 0
    V: int = 0
    K: int = 0
    H: int = 0
    D: int = 0
    N: int = 0

    CATEGORIES = "ESMGVKHDN"

    def copy(self) -> OpCounters:
        return OpCounters(**self.as_dict())

    def as_dict(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in self.CATEGORIES}

    def total(self) -> int:
        return sum(self.as_dict().values())

    def __sub__(self, other: OpCounters) -> OpCounters:
        return OpCounters(**{k: v - getattr(other, k) for k, v in self.as_dict().items()})

    def __add__(self, other: OpCounters) -> OpCounters:
        return OpCounters(**{k: v + getattr(other, k) for k, v in self.as_dict().items()})

    def nonzero(self) -> dict[str, int]:
        return {k: v for k, v in self.as_dict().items() if v}


@dataclass(frozen=True)
class KeyPair:
    private: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}…)"


class CipherSuite:
    """Base provider; subclasses implement the underscored primitives."""

    suite_id: int = -1
    name: str = "abstract"
    digest_len: int = 0
    key_len: int = 0  # epoch / MAC key length
    public_len: int = 0
    nonce_len: int = 16

    def __init__(self) -> None:
        self.counters = OpCounters()

    # accounting
    def counters_snapshot(self) -> OpCounters:
        return self.counters.copy()

    def counters_reset(self) -> None:
        self.counters = OpCounters()

    # metered interface
    def hash(self, data: bytes) -> bytes:
        self.counters.H += 1
        return self._hash(data)

    def kdf(self, secret: bytes, context: bytes) -> bytes:
        if not secret:
            raise EmptySecret("kdf requires a non-empty secret")
        self.counters.D += 1
        return self._kdf(secret, context)

    def mac_compute(self, key: bytes, data: bytes) -> bytes:
        self._check_mac_key(key)
        self.counters.M += 1
        return self._mac(key, data)

    def mac_verify(self, key: bytes, data: bytes, tag: bytes) -> bool:
        self._check_mac_key(key)
        self.counters.M += 1
        return hmac.compare_digest(self._mac(key, data), tag)

    def sign(self, private: bytes, data: bytes) -> bytes:
        self.counters.S += 1
        return self._sign(private, data)

    def verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        self.counters.V += 1
        try:
            return self._verify(public, data, signature)
        except BadKey:
            return False

    def keypair_from_seed(self, seed: bytes) -> KeyPair:
        if not seed:
            raise EmptySeed("seed must be non-empty")
        self.counters.K += 1
        return self._keypair_from_seed(seed)

    def keypair_random(self, rng: random.Random) -> KeyPair:
        self.counters.G += 1
        return self._keypair_from_entropy(rng.randbytes(self.key_len))

    def random(self, rng: random.Random, n: int | None = None) -> bytes:
        self.counters.G += 1
        return rng.randbytes(self.nonce_len if n is None else n)

    def nonce_equal(self, a: bytes, b: bytes) -> bool:
        self.counters.N += 1
        return hmac.compare_digest(a, b)

    def seal(self, recipient_public: bytes, plaintext: bytes) -> bytes:
        self.counters.E += 1
        return self._seal(recipient_public, plaintext)

    def open(self, recipient_private: bytes, ciphertext: bytes) -> bytes:
        self.counters.E += 1
        return self._open(recipient_private, ciphertext)

    # unmetered helpers
    def zero_key(self) -> bytes:
        return bytes(self.key_len)

    def fingerprint(self, data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()[:16]

    def _check_mac_key(self, key: bytes) -> None:
        if len(key) != self.key_len:
            raise BadKeyLength(f"MAC key must be {self.key_len} bytes, got {len(key)}")

    def _keypair_from_entropy(self, entropy: bytes) -> KeyPair:
        return self._keypair_from_seed(entropy)

    def _hash(self, data: bytes) -> bytes:
        raise NotImplementedError

    def _kdf(self, secret: bytes, context: bytes) -> bytes:
        raise NotImplementedError

    def _mac(self, key: bytes, data: bytes) -> bytes:
        raise NotImplementedError

    def _sign(self, private: bytes, data: bytes) -> bytes:
        raise NotImplementedError

    def _verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        raise NotImplementedError

    def _keypair_from_seed(self, seed: bytes) -> KeyPair:
        raise NotImplementedError

    def _seal(self, public: bytes, plaintext: bytes) -> bytes:
        raise NotImplementedError

    def _open(self, private: bytes, ciphertext: bytes) -> bytes:
        raise NotImplementedError


PUBLIC_KEY_LABEL = b"pk"


class ToySuite(CipherSuite):
    """Deterministic test suite built on FNV-1a 64.

    Lengths: digest 8, MAC tag 8, public key 8, signature 16.

    Signatures ``fnv(sk||m) || fnv(m||sk)`` cannot be checked from the public
    key alone, so verification consults a suite-wide registry of key pairs
    produced by this suite. This models an ideal signature scheme: only the
    holder of ``sk`` can produce a signature that verifies under ``fnv(sk)``.
    """

    suite_id = TOY_SUITE
    name = "toy-fnv1a64"
    digest_len = 8
    key_len = 8
    public_len = 8
    signature_len = 16

    _registry: dict[bytes, bytes] = {}

    def _hash(self, data: bytes) -> bytes:
        return fnv1a64(data)

    def _kdf(self, secret: bytes, context: bytes) -> bytes:
        return fnv1a64(secret + b"\x7c" + context)

    def _mac(self, key: bytes, data: bytes) -> bytes:
        return fnv1a64(b"mac" + key + data)

    def _sign(self, private: bytes, data: bytes) -> bytes:
        if not private:
            raise BadKey("empty signing key")
        return fnv1a64(private + data) + fnv1a64(data + private)

    def _verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        private = self._registry.get(public)
        if private is None or len(signature) != self.signature_len:
            return False
        return hmac.compare_digest(self._sign(private, data), signature)

    def _keypair_from_seed(self, seed: bytes) -> KeyPair:
        pair = KeyPair(private=bytes(seed), public=self._public_of(seed))
        self._registry.setdefault(pair.public, pair.private)
        return pair

    @staticmethod
    def _public_of(private: bytes) -> bytes:
        # Labelled so a public key never equals hash(seed), which is the next
        # secret up a path chain.
        return fnv1a64(PUBLIC_KEY_LABEL + private)

    @staticmethod
    def keystream(public: bytes, length: int) -> bytes:
        out = bytearray()
        counter = 0
        while len(out) < length:
            out += fnv1a64(public + struct.pack(">I", counter))
            counter += 1
        return bytes(out[:length])

    def _seal(self, public: bytes, plaintext: bytes) -> bytes:
        if len(public) != self.public_len:
            raise BadKey("recipient public key has wrong length")
        body = plaintext + fnv1a64(public + plaintext)
        masked = bytes(a ^ b for a, b in zip(body, self.keystream(public, len(body))))
        return public + masked

    def _open(self, private: bytes, ciphertext: bytes) -> bytes:
        if len(ciphertext) < self.public_len + 8:
            raise DecryptionFailure("ciphertext too short")
        tag, masked = ciphertext[: self.public_len], ciphertext[self.public_len :]
        if not hmac.compare_digest(self._public_of(private), tag):
            raise DecryptionFailure("private key does not match recipient")
        body = bytes(a ^ b for a, b in zip(masked, self.keystream(tag, len(masked))))
        plaintext, check = body[:-8], body[-8:]
        if not hmac.compare_digest(fnv1a64(tag + plaintext), check):
            raise DecryptionFailure("ciphertext corrupted")
        return plaintext


class ClassicSuite(CipherSuite):
    """SHA-512 / HMAC-SHA-512 / HKDF-SHA-512 / X25519+AES-256-GCM / Ed25519.

    A private key is a 32-byte seed; the public key is the X25519 public key
    followed by the Ed25519 public key, both derived from that seed.
    """

    suite_id = CLASSIC_SUITE
    name = "classic-x25519-ed25519-sha512"
    digest_len = 64
    key_len = 64
    public_len = 64
    signature_len = 64

    def __init__(self) -> None:
        super().__init__()
        # deferred import keeps ToySuite usable without the dependency
        from cryptography.hazmat.primitives import hashes, serialization
        from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM
        from cryptography.hazmat.primitives.kdf.hkdf import HKDF

        self._hashes = hashes
        self._ser = serialization
        self._ed = ed25519
        self._x = x25519
        self._aes = AESGCM
        self._hkdf = HKDF

    def _hkdf_bytes(self, ikm: bytes, salt: bytes, info: bytes, length: int) -> bytes:
        return self._hkdf(algorithm=self._hashes.SHA512(), length=length, salt=salt or None, info=info).derive(ikm)

    def _raw_public(self, key) -> bytes:
        return key.public_key().public_bytes(self._ser.Encoding.Raw, self._ser.PublicFormat.Raw)

    def _subkeys(self, private: bytes):
        if len(private) != 32:
            raise BadKey("private key must be 32 bytes")
        xk = self._x.X25519PrivateKey.from_private_bytes(self._hkdf_bytes(private, b"", b"x25519", 32))
        ek = self._ed.Ed25519PrivateKey.from_private_bytes(self._hkdf_bytes(private, b"", b"ed25519", 32))
        return xk, ek

    def _hash(self, data: bytes) -> bytes:
        return hashlib.sha512(data).digest()

    def _kdf(self, secret: bytes, context: bytes) -> bytes:
        return self._hkdf_bytes(secret, context, b"gracybus epoch", self.key_len)

    def _mac(self, key: bytes, data: bytes) -> bytes:
        return hmac.new(key, data, hashlib.sha512).digest()

    def _sign(self, private: bytes, data: bytes) -> bytes:
        _, ek = self._subkeys(private)
        return ek.sign(data)

    def _verify(self, public: bytes, data: bytes, signature: bytes) -> bool:
        if len(public) != self.public_len:
            return False
        from cryptography.exceptions import InvalidSignature

        try:
            self._ed.Ed25519PublicKey.from_public_bytes(public[32:]).verify(signature, data)
        except (InvalidSignature, ValueError):
            return False
        return True

    def _keypair_from_seed(self, seed: bytes) -> KeyPair:
        private = hashlib.sha512(b"gracybus keypair" + seed).digest()[:32]
        xk, ek = self._subkeys(private)
        return KeyPair(private=private, public=self._raw_public(xk) + self._raw_public(ek))

    def _keypair_from_entropy(self, entropy: bytes) -> KeyPair:
        private = entropy[:32].ljust(32, b"\0")
        xk, ek = self._subkeys(private)
        return KeyPair(private=private, public=self._raw_public(xk) + self._raw_public(ek))

    def _seal(self, public: bytes, plaintext: bytes) -> bytes:
        if len(public) != self.public_len:
            raise BadKey("recipient public key has wrong length")
        eph = self._x.X25519PrivateKey.generate()
        eph_pub = self._raw_public(eph)
        shared = eph.exchange(self._x.X25519PublicKey.from_public_bytes(public[:32]))
        key = self._hkdf_bytes(shared, eph_pub + public, b"gracybus seal", 32)
        return eph_pub + self._aes(key).encrypt(bytes(12), plaintext, public)

    def _open(self, private: bytes, ciphertext: bytes) -> bytes:
        from cryptography.exceptions import InvalidTag

        if len(ciphertext) < 32 + 16:
            raise DecryptionFailure("ciphertext too short")
        try:
            xk, ek = self._subkeys(private)
        except BadKey as exc:
            raise DecryptionFailure(str(exc)) from exc
        public = self._raw_public(xk) + self._raw_public(ek)
        eph_pub, body = ciphertext[:32], ciphertext[32:]
        try:
            shared = xk.exchange(self._x.X25519PublicKey.from_public_bytes(eph_pub))
            key = self._hkdf_bytes(shared, eph_pub + public, b"gracybus seal", 32)
            return self._aes(key).decrypt(bytes(12), body, public)
        except (InvalidTag, ValueError) as exc:
            raise DecryptionFailure("cannot open ciphertext") from exc


SUITES: dict[int, type[CipherSuite]] = {
    TOY_SUITE: ToySuite,
    CLASSIC_SUITE: ClassicSuite,
}


def make_provider(suite_id: int = TOY_SUITE) -> CipherSuite:
    try:
        return SUITES[suite_id]()
    except KeyError:
        raise UnknownSuite(f"no cipher suite registered for id {suite_id:#06x}") from None


def entropy(seed: int, *labels: object) -> random.Random:
    """Deterministic RNG for a (scenario seed, label...) pair."""
    material = repr((seed,) + labels).encode()
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "big"))


def system_entropy() -> random.Random:
    return random.SystemRandom()
