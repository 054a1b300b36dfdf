import dataclasses

import pytest

from gracybus.crypto import OpCounters, entropy
from gracybus.errors import EmptyIdentity
from gracybus.pki import CertificateAuthority, enroll, issue_certificate, verify_certificate


def test_issue_then_verify(toy, ca, cred):
    assert verify_certificate(toy, ca.anchor, cred.certificate)


def test_other_ca_rejects(toy, cred):
    other = CertificateAuthority.create(toy, "other-ca", entropy(1, "ca"))
    assert not verify_certificate(toy, other.anchor, cred.certificate)


def test_same_name_different_key_rejects(toy, ca, cred):
    impostor = CertificateAuthority.create(toy, ca.name, entropy(2, "ca"))
    assert not verify_certificate(toy, impostor.anchor, cred.certificate)


def test_self_signed_rejected(toy, ca):
    keys = toy.keypair_random(entropy(0, "self"))
    cert = issue_certificate(toy, keys.private, ca.name, "mallory", keys.public)
    assert not verify_certificate(toy, ca.anchor, cert)


def test_identity_tamper_sweep(toy, ca):
    cred = enroll(toy, ca, "device-17", entropy(0, "d17"))
    ident = cred.certificate.identity.encode()
    for i in range(len(ident)):
        for mask in (0x01, 0x20):
            bad = bytearray(ident)
            bad[i] ^= mask
            try:
                name = bad.decode()
            except UnicodeDecodeError:
                continue
            forged = dataclasses.replace(cred.certificate, identity=name)
            assert not verify_certificate(toy, ca.anchor, forged)


def test_subject_key_tamper_rejected(toy, ca, cred):
    pub = bytearray(cred.certificate.subject_public)
    pub[0] ^= 0x80
    forged = dataclasses.replace(cred.certificate, subject_public=bytes(pub))
    assert not verify_certificate(toy, ca.anchor, forged)


def test_verification_counts_one_v(toy, ca, cred):
    toy.counters_reset()
    verify_certificate(toy, ca.anchor, cred.certificate)
    assert toy.counters_snapshot() == OpCounters(V=1)


def test_issue_counts_one_s(toy, ca):
    toy.counters_reset()
    ca.issue(toy, "x", b"\x00" * 8)
    assert toy.counters_snapshot() == OpCounters(S=1)


def test_empty_identity(toy, ca):
    with pytest.raises(EmptyIdentity):
        ca.issue(toy, "", b"\x00" * 8)


def test_classic_suite_pki():
    from gracybus.crypto import make_provider

    c = make_provider(1)
    ca = CertificateAuthority.create(c, "ca", entropy(0, "ca"))
    cred = enroll(c, ca, "dev", entropy(0, "dev"))
    assert verify_certificate(c, ca.anchor, cred.certificate)
    other = CertificateAuthority.create(c, "ca", entropy(1, "ca"))
    assert not verify_certificate(c, other.anchor, cred.certificate)
