"""Single-level test PKI: a CA issues device certificates, members verify them."""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from .crypto import CipherSuite, KeyPair
from .errors import EmptyIdentity


def _lp(data: bytes) -> bytes:
    return struct.pack(">H", len(data)) + data


@dataclass(frozen=True)
class Certificate:
    identity: str
    subject_public: bytes
    issuer: str
    signature: bytes

    def tbs(self) -> bytes:
        return _lp(self.identity.encode()) + _lp(self.subject_public)


@dataclass(frozen=True)
class TrustAnchor:
    ca_name: str
    ca_public: bytes


@dataclass(frozen=True)
class CertificateAuthority:
    name: str
    keys: KeyPair

    @classmethod
    def create(cls, crypto: CipherSuite, name: str, rng: random.Random) -> CertificateAuthority:
        return cls(name=name, keys=crypto.keypair_random(rng))

    @property
    def anchor(self) -> TrustAnchor:
        return TrustAnchor(ca_name=self.name, ca_public=self.keys.public)

    def issue(self, crypto: CipherSuite, identity: str, subject_public: bytes) -> Certificate:
        return issue_certificate(crypto, self.keys.private, self.name, identity, subject_public)


@dataclass(frozen=True)
class Credential:
    """A device's certificate together with the matching key pair."""

    certificate: Certificate
    keys: KeyPair

    @property
    def identity(self) -> str:
        return self.certificate.identity


def issue_certificate(
    crypto: CipherSuite, ca_private: bytes, issuer: str, identity: str, subject_public: bytes
) -> Certificate:
    if not identity:
        raise EmptyIdentity("certificate identity must be non-empty")
    unsigned = Certificate(identity, subject_public, issuer, b"")
    return Certificate(identity, subject_public, issuer, crypto.sign(ca_private, unsigned.tbs()))


def verify_certificate(crypto: CipherSuite, anchor: TrustAnchor, cert: Certificate) -> bool:
    """Accept iff the issuer matches and the CA signature verifies. Counts one V."""
    ok = crypto.verify(anchor.ca_public, cert.tbs(), cert.signature)
    return ok and cert.issuer == anchor.ca_name


def enroll(crypto: CipherSuite, ca: CertificateAuthority, identity: str, rng: random.Random) -> Credential:
    keys = crypto.keypair_random(rng)
    return Credential(ca.issue(crypto, identity, keys.public), keys)
