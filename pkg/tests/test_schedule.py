import pytest

from gracybus.crypto import OpCounters, fnv1a64
from gracybus.errors import EmptySecret
from gracybus.schedule import EpochState, advance, genesis


def test_genesis_toy_value(toy):
    st = genesis(toy, b"root")
    assert st.epoch == 0
    assert st.epoch_key == fnv1a64(b"root" + b"\x7c" + bytes(8))


def test_genesis_distinct_secrets(toy):
    assert genesis(toy, b"a").epoch_key != genesis(toy, b"b").epoch_key


def test_advance_matches_manual_chain(toy):
    st = genesis(toy, b"a")
    advance(toy, st, b"b")
    advance(toy, st, b"c")
    manual = toy.kdf(b"c", toy.kdf(b"b", toy.kdf(b"a", bytes(8))))
    assert (st.epoch, st.epoch_key) == (2, manual)


def test_advance_counts_one_d(toy):
    st = genesis(toy, b"a")
    toy.counters_reset()
    advance(toy, st, b"b")
    assert toy.counters_snapshot() == OpCounters(D=1)


def test_chain_binding(toy):
    secrets = [b"s0", b"s1", b"s2", b"s3", b"s4"]

    def run(seq):
        st = genesis(toy, seq[0])
        keys = []
        for s in seq[1:]:
            keys.append(advance(toy, st, s).epoch_key)
        return keys

    base = run(secrets)
    perturbed = run(secrets[:2] + [b"XX"] + secrets[3:])
    assert base[0] == perturbed[0]
    assert all(a != b for a, b in zip(base[1:], perturbed[1:]))


def test_state_holds_only_current_key(toy):
    st = genesis(toy, b"a")
    old = st.epoch_key
    advance(toy, st, b"b")
    fields = vars(st)
    assert set(fields) == {"epoch", "epoch_key"}
    assert old not in fields.values()
    assert "epoch_key" not in repr(st)


def test_empty_secret(toy):
    with pytest.raises(EmptySecret):
        genesis(toy, b"")
    with pytest.raises(EmptySecret):
        advance(toy, EpochState(0, bytes(8)), b"")
