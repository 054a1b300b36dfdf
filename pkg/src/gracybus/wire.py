"""Bit-exact codec for the ten protocol messages and their auth trailers.

Layout (all integers big-endian, no padding)::

    header   version:u8 suite:u16 type:u8 epoch:u64 sender_leaf:u32 body_length:u32
    body     type specific, see the ``*Body`` classes
    trailer  [mac_len:u16 mac] [sig_len:u16 sig]   -- presence fixed per type

``sender_leaf`` is a leaf *position* (0-based, stable across tree expansion
and truncation) or ``NO_LEAF`` for devices that are not yet members. MACs
and signatures cover ``header || body``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar

from .crypto import CipherSuite
from .errors import (
    AuthFailure,
    BadVersion,
    EpochMismatch,
    LengthMismatch,
    Malformed,
    MissingCredential,
    Truncated,
    UnknownType,
)
from .pki import Certificate, TrustAnchor, verify_certificate

VERSION = 0x01
HEADER_LEN = 20
NO_LEAF = 0xFFFFFFFF
_HEADER = struct.Struct(">BHBQII")


class MsgType(IntEnum):
    JOIN_REQUEST = 0x01
    JOIN_CHALLENGE = 0x02
    JOIN_SEND_SECRET = 0x03
    JOIN_SUCCESS_JOINER = 0x04
    JOIN_SUCCESS_GKA = 0x05
    JOIN_SUCCESS_COMBINED = 0x06
    JOIN_FAILED = 0x07
    UPDATE = 0x08
    LEAVE_REQUEST = 0x09
    LEAVE_UPDATE = 0x0A


@dataclass(frozen=True)
class Protection:
    encrypted: bool
    mac: bool
    signature: bool


PROTECTION: dict[MsgType, Protection] = {
    MsgType.JOIN_REQUEST: Protection(False, False, False),
    MsgType.JOIN_CHALLENGE: Protection(False, False, True),
    MsgType.JOIN_SEND_SECRET: Protection(True, False, True),
    MsgType.JOIN_SUCCESS_JOINER: Protection(True, False, True),
    MsgType.JOIN_SUCCESS_GKA: Protection(True, True, False),
    MsgType.JOIN_SUCCESS_COMBINED: Protection(True, True, True),
    MsgType.JOIN_FAILED: Protection(False, False, True),
    MsgType.UPDATE: Protection(True, True, False),
    MsgType.LEAVE_REQUEST: Protection(False, True, False),
    MsgType.LEAVE_UPDATE: Protection(True, True, False),
}


class Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> Writer:
        self.buf += struct.pack(">B", v)
        return self

    def u16(self, v: int) -> Writer:
        self.buf += struct.pack(">H", v)
        return self

    def u32(self, v: int) -> Writer:
        self.buf += struct.pack(">I", v)
        return self

    def u64(self, v: int) -> Writer:
        self.buf += struct.pack(">Q", v)
        return self

    def opaque16(self, data: bytes) -> Writer:
        if len(data) > 0xFFFF:
            raise Malformed("field longer than 65535 bytes")
        return self.u16(len(data)).raw(data)

    def opaque32(self, data: bytes) -> Writer:
        return self.u32(len(data)).raw(data)

    def text(self, s: str) -> Writer:
        return self.opaque16(s.encode("utf-8"))

    def raw(self, data: bytes) -> Writer:
        self.buf += data
        return self

    def count(self, items: list) -> Writer:
        if len(items) > 0xFFFF:
            raise Malformed("list longer than 65535 entries")
        return self.u16(len(items))


class Reader:
    def __init__(self, data: bytes, *, overrun: type[Exception] = Truncated) -> None:
        self.data = memoryview(data)
        self.pos = 0
        self.overrun = overrun

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self.overrun(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def opaque16(self) -> bytes:
        return self.take(self.u16())

    def opaque32(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        try:
            return self.opaque16().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed("invalid UTF-8 text field") from exc

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def done(self) -> None:
        if self.remaining():
            raise LengthMismatch(f"{self.remaining()} unexpected trailing bytes")


# sub-messages


@dataclass(frozen=True)
class PublishPublicKey:
    node_index: int
    public_key: bytes

    def write(self, w: Writer) -> None:
        w.u32(self.node_index).opaque16(self.public_key)

    @classmethod
    def read(cls, r: Reader) -> PublishPublicKey:
        return cls(r.u32(), r.opaque16())


@dataclass(frozen=True)
class UpdateNodesSecretKey:
    node_index: int
    recipient_node: int
    ciphertext: bytes

    def write(self, w: Writer) -> None:
        w.u32(self.node_index).u32(self.recipient_node).opaque16(self.ciphertext)

    @classmethod
    def read(cls, r: Reader) -> UpdateNodesSecretKey:
        return cls(r.u32(), r.u32(), r.opaque16())


def write_certificate(w: Writer, cert: Certificate) -> None:
    w.text(cert.identity).opaque16(cert.subject_public).text(cert.issuer).opaque16(cert.signature)


def read_certificate(r: Reader) -> Certificate:
    return Certificate(identity=r.text(), subject_public=r.opaque16(), issuer=r.text(), signature=r.opaque16())


def _write_list(w: Writer, items: tuple) -> None:
    w.count(list(items))
    for item in items:
        item.write(w)


def _read_list(r: Reader, cls) -> tuple:
    return tuple(cls.read(r) for _ in range(r.u16()))


# bodies


class Body:
    TYPE: ClassVar[MsgType]

    def write(self, w: Writer) -> None:
        raise NotImplementedError

    @classmethod
    def read(cls, r: Reader) -> Body:
        raise NotImplementedError

    def to_bytes(self) -> bytes:
        w = Writer()
        self.write(w)
        return bytes(w.buf)


@dataclass(frozen=True)
class JoinRequest(Body):
    TYPE: ClassVar[MsgType] = MsgType.JOIN_REQUEST
    certificate: Certificate
    joiner_nonce: bytes

    def write(self, w: Writer) -> None:
        write_certificate(w, self.certificate)
        w.opaque16(self.joiner_nonce)

    @classmethod
    def read(cls, r: Reader) -> JoinRequest:
        return cls(read_certificate(r), r.opaque16())


@dataclass(frozen=True)
class JoinChallenge(Body):
    TYPE: ClassVar[MsgType] = MsgType.JOIN_CHALLENGE
    joiner_nonce: bytes
    sponsor_nonce: bytes
    certificate: Certificate

    def write(self, w: Writer) -> None:
        w.opaque16(self.joiner_nonce).opaque16(self.sponsor_nonce)
        write_certificate(w, self.certificate)

    @classmethod
    def read(cls, r: Reader) -> JoinChallenge:
        return cls(r.opaque16(), r.opaque16(), read_certificate(r))


@dataclass(frozen=True)
class JoinSendSecret(Body):
    """``sealed_secret`` is the joiner's hashed leaf secret sealed to the sponsor."""

    TYPE: ClassVar[MsgType] = MsgType.JOIN_SEND_SECRET
    sponsor_nonce: bytes
    joiner_nonce: bytes
    certificate: Certificate
    leaf_public: bytes
    sealed_secret: bytes

    def write(self, w: Writer) -> None:
        w.opaque16(self.sponsor_nonce).opaque16(self.joiner_nonce)
        write_certificate(w, self.certificate)
        w.opaque16(self.leaf_public).opaque16(self.sealed_secret)

    @classmethod
    def read(cls, r: Reader) -> JoinSendSecret:
        return cls(r.opaque16(), r.opaque16(), read_certificate(r), r.opaque16(), r.opaque16())


@dataclass(frozen=True)
class JoinSuccessGka(Body):
    """Group part of a join: the joiner's new path, mirroring an Update."""

    TYPE: ClassVar[MsgType] = MsgType.JOIN_SUCCESS_GKA
    joiner_leaf: int  # leaf position
    height: int  # tree height after insertion
    joiner_identity: str
    publishes: tuple[PublishPublicKey, ...] = ()
    secrets: tuple[UpdateNodesSecretKey, ...] = ()

    def write(self, w: Writer) -> None:
        w.u32(self.joiner_leaf).u8(self.height).text(self.joiner_identity)
        _write_list(w, self.publishes)
        _write_list(w, self.secrets)

    @classmethod
    def read(cls, r: Reader) -> JoinSuccessGka:
        return cls(r.u32(), r.u8(), r.text(), _read_list(r, PublishPublicKey), _read_list(r, UpdateNodesSecretKey))


@dataclass(frozen=True)
class JoinSuccessJoiner(Body):
    """Joiner part: a :class:`Welcome` sealed to the joiner's certificate key."""

    TYPE: ClassVar[MsgType] = MsgType.JOIN_SUCCESS_JOINER
    joiner_nonce: bytes
    sealed_welcome: bytes

    def write(self, w: Writer) -> None:
        w.opaque16(self.joiner_nonce).opaque32(self.sealed_welcome)

    @classmethod
    def read(cls, r: Reader) -> JoinSuccessJoiner:
        return cls(r.opaque16(), r.opaque32())


@dataclass(frozen=True)
class JoinSuccessCombined(Body):
    TYPE: ClassVar[MsgType] = MsgType.JOIN_SUCCESS_COMBINED
    gka: JoinSuccessGka
    joiner: JoinSuccessJoiner

    def write(self, w: Writer) -> None:
        self.gka.write(w)
        self.joiner.write(w)

    @classmethod
    def read(cls, r: Reader) -> JoinSuccessCombined:
        return cls(JoinSuccessGka.read(r), JoinSuccessJoiner.read(r))


@dataclass(frozen=True)
class JoinFailed(Body):
    TYPE: ClassVar[MsgType] = MsgType.JOIN_FAILED
    rejected_nonces: tuple[bytes, ...] = ()

    def write(self, w: Writer) -> None:
        w.count(list(self.rejected_nonces))
        for n in self.rejected_nonces:
            w.opaque16(n)

    @classmethod
    def read(cls, r: Reader) -> JoinFailed:
        return cls(tuple(r.opaque16() for _ in range(r.u16())))


@dataclass(frozen=True)
class Update(Body):
    TYPE: ClassVar[MsgType] = MsgType.UPDATE
    publishes: tuple[PublishPublicKey, ...] = ()
    secrets: tuple[UpdateNodesSecretKey, ...] = ()

    def write(self, w: Writer) -> None:
        _write_list(w, self.publishes)
        _write_list(w, self.secrets)

    @classmethod
    def read(cls, r: Reader) -> Update:
        return cls(_read_list(r, PublishPublicKey), _read_list(r, UpdateNodesSecretKey))


@dataclass(frozen=True)
class LeaveRequest(Body):
    TYPE: ClassVar[MsgType] = MsgType.LEAVE_REQUEST
    leaver_leaf: int

    def write(self, w: Writer) -> None:
        w.u32(self.leaver_leaf)

    @classmethod
    def read(cls, r: Reader) -> LeaveRequest:
        return cls(r.u32())


@dataclass(frozen=True)
class LeaveUpdate(Body):
    TYPE: ClassVar[MsgType] = MsgType.LEAVE_UPDATE
    leaver_leaf: int
    publishes: tuple[PublishPublicKey, ...] = ()
    secrets: tuple[UpdateNodesSecretKey, ...] = ()

    def write(self, w: Writer) -> None:
        w.u32(self.leaver_leaf)
        _write_list(w, self.publishes)
        _write_list(w, self.secrets)

    @classmethod
    def read(cls, r: Reader) -> LeaveUpdate:
        return cls(r.u32(), _read_list(r, PublishPublicKey), _read_list(r, UpdateNodesSecretKey))


BODY_TYPES: dict[MsgType, type[Body]] = {
    cls.TYPE: cls
    for cls in (
        JoinRequest,
        JoinChallenge,
        JoinSendSecret,
        JoinSuccessJoiner,
        JoinSuccessGka,
        JoinSuccessCombined,
        JoinFailed,
        Update,
        LeaveRequest,
        LeaveUpdate,
    )
}


# sealed welcome payload for joiners


@dataclass(frozen=True)
class WelcomeNode:
    index: int
    flags: int  # bit0 occupied leaf, bit1 sealable
    public_key: bytes

    def write(self, w: Writer) -> None:
        w.u32(self.index).u8(self.flags).opaque16(self.public_key)

    @classmethod
    def read(cls, r: Reader) -> WelcomeNode:
        return cls(r.u32(), r.u8(), r.opaque16())


@dataclass(frozen=True)
class WelcomeMember:
    position: int
    identity: str
    last_update_epoch: int

    def write(self, w: Writer) -> None:
        w.u32(self.position).text(self.identity).u64(self.last_update_epoch)

    @classmethod
    def read(cls, r: Reader) -> WelcomeMember:
        return cls(r.u32(), r.text(), r.u64())


@dataclass(frozen=True)
class Welcome:
    epoch: int
    epoch_key: bytes
    confirmation_key: bytes
    height: int
    nodes: tuple[WelcomeNode, ...]
    members: tuple[WelcomeMember, ...]

    def to_bytes(self) -> bytes:
        w = Writer().u64(self.epoch).opaque16(self.epoch_key).opaque16(self.confirmation_key).u8(self.height)
        _write_list(w, self.nodes)
        _write_list(w, self.members)
        return bytes(w.buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> Welcome:
        r = Reader(data, overrun=Malformed)
        out = cls(r.u64(), r.opaque16(), r.opaque16(), r.u8(), _read_list(r, WelcomeNode), _read_list(r, WelcomeMember))
        r.done()
        return out


# envelope


@dataclass(frozen=True)
class Message:
    suite: int
    epoch: int
    sender_leaf: int
    body: Body
    mac: bytes = field(default=b"", repr=False)
    signature: bytes = field(default=b"", repr=False)
    version: int = VERSION

    @property
    def msg_type(self) -> MsgType:
        return self.body.TYPE

    @property
    def protection(self) -> Protection:
        return PROTECTION[self.msg_type]

    def covered_bytes(self) -> bytes:
        """``header || body``: the bytes MACs and signatures cover."""
        body = self.body.to_bytes()
        header = _HEADER.pack(self.version, self.suite, int(self.msg_type), self.epoch, self.sender_leaf, len(body))
        return header + body


def encode(msg: Message) -> bytes:
    w = Writer().raw(msg.covered_bytes())
    if msg.protection.mac:
        w.opaque16(msg.mac)
    if msg.protection.signature:
        w.opaque16(msg.signature)
    return bytes(w.buf)


def decode(data: bytes) -> Message:
    """Parse one whole message; raises a :class:`WireError` subclass on any defect."""
    if len(data) < HEADER_LEN:
        raise Truncated(f"header needs {HEADER_LEN} bytes, got {len(data)}")
    version, suite, raw_type, epoch, sender, body_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version:#04x}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownType(f"unknown message type {raw_type:#04x}") from None
    if HEADER_LEN + body_len > len(data):
        raise Truncated("body shorter than announced length")
    body_reader = Reader(data[HEADER_LEN : HEADER_LEN + body_len], overrun=LengthMismatch)
    body = BODY_TYPES[msg_type].read(body_reader)
    body_reader.done()
    trailer = Reader(data[HEADER_LEN + body_len :])
    prot = PROTECTION[msg_type]
    mac = trailer.opaque16() if prot.mac else b""
    sig = trailer.opaque16() if prot.signature else b""
    trailer.done()
    return Message(suite=suite, epoch=epoch, sender_leaf=sender, body=body, mac=mac, signature=sig, version=version)


def message_size(msg: Message) -> int:
    return len(encode(msg))


def seal_auth(
    msg: Message,
    crypto: CipherSuite,
    *,
    epoch_key: bytes | None = None,
    signing_key: bytes | None = None,
) -> bytes:
    """Attach the trailer demanded by the message type and encode."""
    prot = msg.protection
    covered = msg.covered_bytes()
    mac, sig = b"", b""
    if prot.mac and epoch_key is None:
        raise MissingCredential(f"{msg.msg_type.name} requires the epoch key")
    if prot.signature:
        if signing_key is None:
            raise MissingCredential(f"{msg.msg_type.name} requires a signing key")
        sig = crypto.sign(signing_key, covered)
    if prot.mac:
        mac = crypto.mac_compute(epoch_key, covered + sig)
    return encode(Message(msg.suite, msg.epoch, msg.sender_leaf, msg.body, mac, sig, msg.version))


def verify_mac(msg: Message, crypto: CipherSuite, key: bytes) -> None:
    """The MAC covers ``header || body || signature`` so that, on types with
    both, whoever checks only one of the two still sees every byte covered."""
    if not crypto.mac_verify(key, msg.covered_bytes() + msg.signature, msg.mac):
        raise AuthFailure("MAC verification failed")


def embedded_certificate(body: Body) -> Certificate | None:
    if isinstance(body, (JoinChallenge, JoinSendSecret, JoinRequest)):
        return body.certificate
    return None


def check_auth(
    data: bytes,
    crypto: CipherSuite,
    *,
    epoch: int | None = None,
    epoch_key: bytes | None = None,
    anchor: TrustAnchor | None = None,
    signer_public: bytes | None = None,
) -> Message:
    """Decode and authenticate.

    MAC'd types need ``epoch``/``epoch_key``; the header epoch must equal the
    receiver's epoch. Signed types carrying a certificate need ``anchor``
    (certificate V, then signature V); other signed types need
    ``signer_public``. For the combined join success, which carries both a
    MAC and a signature, each check runs when its credential is supplied and
    at least one must be.
    """
    msg = decode(data)
    if msg.suite != crypto.suite_id:
        raise AuthFailure(f"message suite {msg.suite:#06x} does not match {crypto.suite_id:#06x}")
    prot = msg.protection
    cert = embedded_certificate(msg.body)
    have_mac = epoch_key is not None
    have_sig = signer_public is not None or (cert is not None and anchor is not None)
    do_mac = prot.mac and (have_mac or not prot.signature)
    do_sig = prot.signature and (have_sig or not prot.mac)
    if prot.mac and prot.signature and not (have_mac or have_sig):
        raise MissingCredential(f"{msg.msg_type.name} requires an epoch key or a signer key")
    covered = msg.covered_bytes()
    if do_mac:
        if epoch_key is None or epoch is None:
            raise MissingCredential(f"{msg.msg_type.name} requires the epoch key")
        if msg.epoch != epoch:
            raise EpochMismatch(f"message epoch {msg.epoch} != current epoch {epoch}")
        verify_mac(msg, crypto, epoch_key)
    if do_sig:
        if cert is not None:
            if anchor is None:
                raise MissingCredential("a trust anchor is needed to check the embedded certificate")
            if not verify_certificate(crypto, anchor, cert):
                raise AuthFailure("certificate does not chain to the trust anchor")
            signer_public = cert.subject_public
        if signer_public is None:
            raise MissingCredential(f"{msg.msg_type.name} requires the signer's public key")
        if not crypto.verify(signer_public, covered, msg.signature):
            raise AuthFailure("signature verification failed")
    return msg
