"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
"acceptance criteria" section at the end of the pytest run.
"""

import dataclasses
import pickle
import random
from pathlib import Path

import pytest

from gracybus import analysis, engine
from gracybus.crypto import entropy
from gracybus.errors import DecryptionFailure, GracybusError
from gracybus.network import Network, NetworkConfig, build_group
from gracybus.scenario import random_scenario, run_scenario
from gracybus.schedule import join_confirmation_key
from gracybus.sim import ADVERSARY, Heal, Inject, Partition, Replay
from gracybus.wire import MsgType, decode, encode, verify_mac

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


# 1. storage


def test_storage_table(criterion):
    rec = criterion(1, "storage 2n+1 / log2(n)+1 / 1")
    table = analysis.storage_table(ns=(2, 4, 8, 16, 32))
    bad = {n: seen for n, seen in table.items() if seen != {analysis.expected_storage(n)}}
    if bad:
        rec.fail(f"mismatch at {bad}")
    assert not bad
    # independent statement of the expected values
    assert [analysis.expected_storage(n) for n in (2, 4, 8, 16, 32)] == [(5, 2, 1), (9, 3, 1), (17, 4, 1), (33, 5, 1), (65, 6, 1)]
    rec.ok("n=2..32 exact")


# 2. message sizes


def test_message_size_scaling(criterion):
    rec = criterion(2, "message-size scaling")
    table = analysis.size_table(ns=(4, 8, 16, 32))
    problems = []
    for row in ("JoinRequest", "JoinChallenge", "JoinSendSecret", "LeaveRequest"):
        if len({table[n][row] for n in table}) != 1:
            problems.append(f"{row} varies with n")
    for row in ("Update", "LeaveUpdate", "JoinSuccess (GKA part)"):
        points = {n.bit_length() - 1: table[n][row] for n in table}
        if analysis.affine_residual(points) != 0:
            problems.append(f"{row} not affine in h: {points}")
        if not points[5] > points[2]:
            problems.append(f"{row} does not grow with h")
    failed = analysis.join_failed_sizes(max_rejections=5)
    if not all(a < b for a, b in zip(failed, failed[1:])):
        problems.append(f"JoinFailed not strictly increasing: {failed}")
    if problems:
        rec.fail("; ".join(problems))
    assert not problems
    rec.ok(f"constant rows fixed, affine residual 0, JoinFailed {failed}")


# 3. cost model


def test_cost_model_conformance(criterion):
    rec = criterion(3, "cost-model conformance")
    rep = analysis.conformance(heights=(2, 3, 4, 5), tolerance=1)
    # every row and phase was measured at every height
    for h in rep.heights:
        assert set(rep.measured[h]) == set(analysis.ROWS)
    if not rep.ok:
        rows = sorted({(d.row, d.phase) for d in rep.deviations})
        rec.fail(f"{len(rep.deviations)} deviations in " + ", ".join(f"{r}/{p}" for r, p in rows))
    for d in rep.deviations:
        print(d.line())
    assert rep.ok, "\n".join(d.line() for d in rep.deviations)
    rec.ok("all rows, h=2..5")


# 4. convergence


def test_random_scenarios_converge(criterion):
    rec = criterion(4, "convergence of 200 random scenarios")
    failures = []
    for seed in range(200):
        sc = random_scenario(seed, max_devices=32, n_events=100)
        report, net = run_scenario(sc, keep_network=True)
        members = net.members()
        views = {m.view() for m in members}
        if not report.converged or len(views) > 1 or net.bus.pending():
            failures.append(seed)
            continue
        # the fingerprint check compares trees independently of view()
        if len({(m.epoch.epoch, m.epoch.epoch_key, m.tree.fingerprint()) for m in members}) > 1:
            failures.append(seed)
    if failures:
        rec.fail(f"diverged seeds {failures[:10]}")
    assert not failures
    rec.ok("200/200")


# shared helpers for the security criteria


def state_of(m):
    """Everything a delivery could legitimately change."""
    return (m.status, m.view(), repr(m.sponsor_ctx), repr(m.joiner_ctx), m.staged is not None, tuple(m.rejected_nonces))


def views(net):
    return {n: (m.status, m.view()) for n, m in net.devices.items()}


def all_secrets(net):
    out = set()
    for m in net.devices.values():
        out.update(s for s in m.secret_material() if s)
    return out


def ciphertexts(obj):
    """Every sealed field inside a message body, found structurally."""
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if f.name in ("sealed_secret", "sealed_welcome", "ciphertext"):
            out.append(v)
        elif dataclasses.is_dataclass(v):
            out += ciphertexts(v)
        elif isinstance(v, tuple):
            for item in v:
                if dataclasses.is_dataclass(item):
                    out += ciphertexts(item)
    return out


def try_open(crypto, keys, ct):
    for k in keys:
        try:
            return crypto.open(k, ct)
        except (DecryptionFailure, GracybusError):
            continue
    return None


@dataclasses.dataclass
class Captured:
    payload: bytes
    origin: str
    before: dict  # name -> clone taken just before delivery
    secrets: set
    sender_public: bytes
    epoch_key: bytes | None


def capture_one_of_each(seed=0):
    """Drive a join, a rejected join, an update and a leave; keep the first
    instance of every message type with the recipients' state before it."""
    net = build_group(4, NetworkConfig(seed=seed))
    captured = {}

    def drive():
        bus = net.bus
        while bus.queue:
            ev = bus.queue[0]
            t = MsgType(ev.payload[3])
            if t in captured:
                bus.step()
                continue
            before = {n: e.clone() for n, e in bus.engines.items()}
            secrets = all_secrets(net)
            members = [m for m in net.devices.values() if m.in_group]
            epoch_key = members[0].epoch.epoch_key if members else None
            bus.step()
            captured[t] = Captured(
                ev.payload,
                ev.origin,
                before,
                secrets | all_secrets(net),
                net.devices[ev.origin].credential.certificate.subject_public,
                epoch_key,
            )

    joiner = net.add_device("joiner")
    net.bus.broadcast("joiner", joiner.request_join())
    drive()
    rogue = analysis._rogue(net, "rogue")
    net.bus.broadcast("rogue", rogue.request_join())
    drive()
    net.bus.broadcast("d00", net.device("d00").make_update())
    drive()
    net.bus.broadcast("d01", net.device("d01").make_leave_request())
    drive()
    return net, captured


# expected protection per message: (encrypted, MAC, signature)
PROTECTION_ROWS = {
    "Join Request": (MsgType.JOIN_REQUEST, (False, False, False)),
    "Join Challenge": (MsgType.JOIN_CHALLENGE, (False, False, True)),
    "Join Send Secret": (MsgType.JOIN_SEND_SECRET, (True, False, True)),
    "Join Success": (MsgType.JOIN_SUCCESS_COMBINED, (True, True, True)),
    "Join Failed": (MsgType.JOIN_FAILED, (False, False, True)),
    "Update": (MsgType.UPDATE, (True, True, False)),
    "Leave Request": (MsgType.LEAVE_REQUEST, (False, True, False)),
    "Leave Update": (MsgType.LEAVE_UPDATE, (True, True, False)),
}


def tamper_detected(c: Captured) -> tuple[bool, int]:
    """True when no single-bit flip anywhere in the message is acted on.

    A flip counts as undetected when some recipient both reports the
    delivery accepted and changes its state. Returns (detected, flips tried).
    """
    tried = 0
    for i in range(len(c.payload)):
        for mask in (0x01, 0x80):
            bad = bytearray(c.payload)
            bad[i] ^= mask
            tried += 1
            for m0 in c.before.values():
                m = m0.clone()
                s0 = state_of(m)
                m.deliver(bytes(bad))
                if m.last_outcome.verdict == "accepted" and state_of(m) != s0:
                    return False, tried
    return True, tried


def derived_row(c: Captured, crypto) -> tuple[bool, bool, bool]:
    msg = decode(c.payload)
    has_mac = False
    if msg.mac and c.epoch_key is not None:
        key = c.epoch_key
        if msg.msg_type is MsgType.JOIN_SUCCESS_COMBINED:
            key = join_confirmation_key(crypto, key)
        try:
            verify_mac(msg, crypto, key)
            has_mac = True
        except GracybusError:
            pass
    has_sig = bool(msg.signature) and crypto.verify(c.sender_public, msg.covered_bytes(), msg.signature)
    keys = [s for s in c.secrets if len(s) == crypto.key_len]
    opened = [try_open(crypto, keys, ct) for ct in ciphertexts(msg.body)]
    transports = any(p is not None for p in opened)
    leaked = [s for s in c.secrets | {p for p in opened if p} if s in c.payload]
    assert not leaked, f"{msg.msg_type.name} carries secret bytes in clear"
    return transports, has_mac, has_sig


def test_protection_matrix(criterion, toy):
    rec = criterion(5, "protection matrix")
    _, captured = capture_one_of_each()
    mismatches = []
    total = 0
    for row, (t, expected) in PROTECTION_ROWS.items():
        c = captured[t]
        enc, mac, sig = derived_row(c, toy)
        detected, tried = tamper_detected(c)
        total += tried
        if (enc, mac, sig) != expected:
            mismatches.append(f"{row}: derived {(enc, mac, sig)} expected {expected}")
        if detected != (expected[1] or expected[2]):
            mismatches.append(f"{row}: tamper detected={detected}")
    if mismatches:
        rec.fail("; ".join(mismatches))
    assert not mismatches
    rec.ok(f"8 rows exact, {total} bit flips")


def derivable_keys(crypto, material, depth=6):
    """Keys an attacker holding ``material`` reaches with the suite's own
    one-way functions: hash chains, pairwise KDF and the join MAC key."""
    base = {x for x in material if x}
    chained = set(base)
    for x in base:
        for _ in range(depth):
            x = crypto.hash(x)
            chained.add(x)
    out = set(chained)
    for a in chained:
        out.add(join_confirmation_key(crypto, a))
        for b in chained:
            out.add(crypto.kdf(a, b))
    return out


def dump_bytes(m):
    state = {k: v for k, v in vars(m).items() if k != "crypto"}
    return pickle.dumps(state)


@pytest.fixture
def root_secrets(monkeypatch):
    """Every root secret fed to the epoch schedule, in order."""
    seen = []
    real_advance, real_genesis = engine.advance, engine.genesis

    def advance(crypto, state, root_secret):
        seen.append((state.epoch + 1, root_secret))
        return real_advance(crypto, state, root_secret)

    def genesis(crypto, root_secret):
        seen.append((0, root_secret))
        return real_genesis(crypto, root_secret)

    monkeypatch.setattr(engine, "advance", advance)
    monkeypatch.setattr(engine, "genesis", genesis)
    return seen


# 6. forward secrecy


def test_forward_secrecy(criterion, toy, root_secrets):
    rec = criterion(6, "forward secrecy at epoch 10")
    net = Network(NetworkConfig(seed=31))
    epoch_keys = {}

    def note():
        for m in net.members():
            epoch_keys.setdefault(m.epoch.epoch, m.epoch.epoch_key)

    net.create_group("n0")
    note()
    for i in range(1, 8):
        net.join(f"n{i}")
        note()
    for name in ("n3", "n6", "n1"):
        net.update(name)
        note()
    assert net.epoch() == 10 and net.converged()
    assert sorted(epoch_keys) == list(range(11))

    old_roots = {s for e, s in root_secrets if e < 10}
    old_keys = {epoch_keys[e] for e in range(10)}
    dumps = {m.identity: dump_bytes(m) for m in net.members()}
    leaks = [
        (name, "epoch key" if secret in old_keys else "root secret")
        for name, blob in dumps.items()
        for secret in old_keys | old_roots
        if secret in blob
    ]
    assert not leaks, leaks

    material = set()
    for m in net.members():
        material.update(m.secret_material())
    candidates = derivable_keys(toy, material)
    assert not candidates & old_keys

    old_macd = [
        decode(ev.payload)
        for ev in net.bus.history.values()
        if ev.payload[3] in (MsgType.UPDATE, MsgType.LEAVE_UPDATE, MsgType.LEAVE_REQUEST, MsgType.JOIN_SUCCESS_COMBINED)
        and decode(ev.payload).epoch == 9
    ]
    assert old_macd
    forged = 0
    for msg in old_macd:
        for k in candidates:
            try:
                verify_mac(msg, toy, k)
                forged += 1
            except GracybusError:
                pass
    assert forged == 0
    rec.ok(f"{len(dumps)} dumps, {len(old_roots)} root secrets, {len(candidates)} derived keys tried")


# 7. post-compromise security


def test_post_compromise_security(criterion, toy):
    rec = criterion(7, "post-compromise security, all 8 positions")
    for pos in range(8):
        net = build_group(8, NetworkConfig(seed=40 + pos))
        victim = net.by_position()[pos]
        clone = victim.clone()
        e = victim.epoch.epoch
        # the attacker copied the state, not the device's future entropy
        victim.rng = entropy(1000 + pos, "fresh")
        healing = net.update(victim.identity)[-1]
        assert net.epoch() == e + 1
        group_key = victim.epoch.epoch_key
        other = net.by_position()[(pos + 1) % 8]
        traffic = net.update(other.identity)[-1]
        after_traffic_key = other.epoch.epoch_key

        msgs = [decode(net.bus.history[r.seq].payload) for r in (healing, traffic)]
        material = [s for s in clone.secret_material() if s]
        for msg in msgs:
            for ct in ciphertexts(msg.body):
                assert try_open(toy, material, ct) is None, f"position {pos} clone opened a ciphertext"
        candidates = derivable_keys(toy, material)
        assert group_key not in candidates and after_traffic_key not in candidates
        for k in candidates:
            with pytest.raises(GracybusError):
                verify_mac(msgs[1], toy, k)

        # the clone playing the victim's protocol role ends up elsewhere
        s0 = state_of(clone)
        clone.deliver(net.bus.history[traffic.seq].payload)
        assert clone.last_outcome.verdict != "accepted" and state_of(clone) == s0
        clone.make_update()
        clone._commit_staged()
        assert clone.epoch.epoch_key != group_key
    rec.ok("clone locked out after one honest update at every position")


# 8. leave security


def test_leave_security(criterion, toy):
    rec = criterion(8, "leave security and truncation")
    opened_total = 0
    for pos in range(8):
        net = build_group(8, NetworkConfig(seed=60 + pos))
        leaver = net.by_position()[pos]
        retained = leaver.clone()
        records = net.leave(leaver.identity)
        assert [r.msg_type for r in records] == ["LEAVE_REQUEST", "LEAVE_UPDATE"]
        assert net.converged() and len(net.members()) == 7
        lu = decode(net.bus.history[records[-1].seq].payload)
        material = [s for s in retained.secret_material() if s]
        opened = [ct for ct in ciphertexts(lu.body) if try_open(toy, material, ct) is not None]
        opened_total += len(opened)
        assert not opened, f"leaver at {pos} opened {len(opened)} ciphertexts"
        new_key = net.members()[0].epoch.epoch_key
        assert new_key not in derivable_keys(toy, material)
        assert retained.epoch.epoch_key != new_key

    # emptying the right half of an 8-leaf tree drops exactly one level
    net = build_group(8, NetworkConfig(seed=70))
    for name in ("d04", "d05", "d06"):
        net.leave(name)
        assert {m.tree.height for m in net.members()} == {3}
    net.leave("d07")
    assert {m.tree.height for m in net.members()} == {2}
    assert net.converged()
    rec.ok("0 of the LeaveUpdate ciphertexts opened at all 8 positions; h 3 -> 2")


# 9. replay, forgery, partition


MACD = (MsgType.UPDATE, MsgType.LEAVE_REQUEST, MsgType.LEAVE_UPDATE, MsgType.JOIN_SUCCESS_COMBINED)


def group_state(net):
    return {n: (m.view(), tuple(m.tree.private_nodes()) if m.tree else ()) for n, m in net.devices.items()}


def fuzz_payloads(seeds, count, rng):
    """Mutations of real messages plus unstructured noise."""
    out = []
    while len(out) < count:
        base = bytearray(rng.choice(seeds))
        kind = rng.randrange(6)
        if kind == 0:
            for _ in range(rng.randint(1, 4)):
                i = rng.randrange(len(base))
                base[i] ^= 1 << rng.randrange(8)
        elif kind == 1:
            base = base[: rng.randrange(len(base))]
        elif kind == 2:
            base += rng.randbytes(rng.randint(1, 16))
        elif kind == 3:
            i = rng.randrange(20, len(base))
            base[i:] = rng.randbytes(len(base) - i)
        elif kind == 4:
            base[3] = rng.randrange(1, 11)
        else:
            base = bytearray(rng.randbytes(rng.randint(0, 300)))
        out.append(bytes(base))
    return out


def test_replay_forgery_partition(criterion):
    rec = criterion(9, "replay, forgery and partition")
    net = build_group(4, NetworkConfig(seed=80))
    net.join("x")
    net.update("d01")
    net.leave("d02")
    net.update("x")
    seqs = {}
    for seq, ev in sorted(net.bus.history.items()):
        t = MsgType(ev.payload[3])
        if t in MACD:
            seqs.setdefault(t, seq)
    assert set(seqs) == set(MACD)

    replays = 0
    for t, seq in seqs.items():
        before = group_state(net)
        net.bus.apply(Replay(seq))
        for r in net.settle():
            assert not any(v == "accepted" for n, v in r.verdicts.items() if net.devices[n].in_group), t.name
        assert group_state(net) == before, t.name
        replays += 1

    rng = random.Random(81)
    seeds = [ev.payload for ev in net.bus.history.values()]
    before = group_state(net)
    for payload in fuzz_payloads(seeds, 1000, rng):
        net.bus.apply(Inject(payload))
        net.settle()
    net.tick()
    assert group_state(net) == before
    net.update("d00")
    assert net.converged()

    # partition: both halves move on, nothing crosses over
    report, pnet = run_scenario(SCENARIOS / "partition.scn", keep_network=True)
    assert not report.converged
    side = {"A": 0, "B": 0, "C": 1, "D": 1}
    split_at = next(i for i, e in enumerate(report.events) if e.event.startswith("adversary partition"))
    after = {m["seq"] for e in report.events[split_at:] for m in e.messages}
    crossed = [
        (r.seq, n)
        for r in pnet.bus.log
        if r.seq in after
        for n, v in r.verdicts.items()
        if r.origin in side and side[r.origin] != side[n] and v == "accepted" and MsgType[r.msg_type] in MACD
    ]
    assert not crossed, crossed
    for r in pnet.bus.log:
        if r.msg_type == "UPDATE" and r.origin == "C":
            pnet.bus.apply(Replay(r.seq))
    a_state = group_state(pnet)
    for r in pnet.settle():
        assert all(r.verdicts[n] != "accepted" for n in ("A", "B"))
    assert group_state(pnet) == a_state
    rec.ok(f"{replays} MAC'd types replayed, 1000 injections, partition diverged with 0 cross acceptances")
