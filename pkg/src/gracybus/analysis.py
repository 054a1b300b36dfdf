"""Measured message sizes, operation counts and storage, next to the reference cost model.

Every number here comes from running the protocol over the simulated bus
with instrumented providers; nothing is computed from the formulas except
the ``expected`` side of :func:`conformance`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .crypto import OpCounters, entropy, make_provider
from .engine import Member
from .network import Network, NetworkConfig, build_group
from .pki import CertificateAuthority, enroll
from .wire import Message, MsgType, decode, encode

PHASES = ("generation", "verification", "update")

# row -> phase -> category -> (constant, per-height coefficient)
REFERENCE_COSTS: dict[str, dict[str, dict[str, tuple[int, int]]]] = {
    "Join Request": {"generation": {}, "verification": {}, "update": {}},
    "Join Challenge": {
        "generation": {"G": (1, 0), "S": (1, 0)},
        "verification": {"V": (2, 0)},
        "update": {},
    },
    "Join Send Secret": {
        "generation": {"G": (2, 0), "H": (1, 0), "K": (1, 0), "S": (1, 0)},
        "verification": {"V": (2, 0), "N": (1, 0)},
        "update": {},
    },
    "Join Success (Joining Node)": {
        "generation": {"D": (1, 0), "E": (1, 0), "S": (1, 0)},
        "verification": {"V": (1, 0), "N": (1, 0)},
        "update": {"H": (-2, 1), "K": (-2, 1), "E": (1, 0)},
    },
    "Join Success (Other Nodes)": {
        "generation": {"H": (-2, 1), "K": (-3, 2), "M": (1, 0)},
        "verification": {"M": (1, 0)},
        "update": {"E": (1, 0), "H": (-2, 1), "K": (-1, 1)},
    },
    "Join Failed": {"generation": {"S": (1, 0)}, "verification": {"V": (1, 0)}, "update": {}},
    "Update": {
        "generation": {"G": (1, 0), "H": (-1, 1), "E": (-1, 1), "K": (-1, 1), "M": (1, 0)},
        "verification": {"M": (1, 0)},
        "update": {"E": (1, 0), "H": (-2, 1), "K": (-1, 1)},
    },
    "Leave Request": {"generation": {"M": (1, 0)}, "verification": {"M": (1, 0)}, "update": {}},
    "Leave Update": {
        "generation": {"G": (1, 0), "H": (-1, 1), "E": (-1, 1), "K": (-2, 1), "M": (1, 0)},
        "verification": {"M": (1, 0)},
        "update": {"E": (1, 0), "H": (-2, 1), "K": (-1, 1)},
    },
}

ROWS = tuple(REFERENCE_COSTS)


def reference(row: str, phase: str, h: int) -> OpCounters:
    terms = REFERENCE_COSTS[row][phase]
    return OpCounters(**{k: a + b * h for k, (a, b) in terms.items()})


# instrumentation helpers


def _phase(m: Member, name: str) -> OpCounters:
    return m.phase_costs.get(name, OpCounters())


def _only(c: OpCounters, cats: str) -> OpCounters:
    return OpCounters(**{k: (v if k in cats else 0) for k, v in c.as_dict().items()})


def _without(c: OpCounters, cats: str) -> OpCounters:
    return OpCounters(**{k: (0 if k in cats else v) for k, v in c.as_dict().items()})


def _worst(costs: list[OpCounters]) -> OpCounters:
    # ties keep the first (lowest position) receiver
    best = OpCounters()
    for c in costs:
        if c.total() > best.total():
            best = c
    return best


def _generate(m: Member, fn) -> tuple[bytes, OpCounters]:
    before = m.crypto.counters_snapshot()
    out = fn()
    return out, m.crypto.counters_snapshot() - before


def _receivers(net: Network, skip: set[str]) -> list[Member]:
    return [m for m in sorted(net.members(), key=lambda m: m.position) if m.identity not in skip]


def _rogue(net: Network, name: str) -> Member:
    """A device whose certificate comes from a CA the group does not trust."""
    crypto = make_provider(net.config.suite)
    rogue_ca = CertificateAuthority.create(crypto, "gracybus-ca", entropy(net.config.seed, "rogue-ca"))
    cred = enroll(crypto, rogue_ca, name, entropy(net.config.seed, "rogue", name))
    m = Member(cred, net.ca.anchor, make_provider(net.config.suite), entropy(net.config.seed, "rogue-dev", name))
    net.devices[name] = m
    net.bus.attach(m)
    return m


# cost measurement


def measure_costs(h: int, seed: int = 0, suite: int = 0) -> dict[str, dict[str, OpCounters]]:
    """Counters for every row and phase at tree height ``h`` (h >= 2)."""
    if h < 2:
        raise ValueError("cost rows are defined for h >= 2")
    out: dict[str, dict[str, OpCounters]] = {}
    cfg = NetworkConfig(seed=seed, suite=suite)

    # join: 2^h - 1 members, the joiner fills the rightmost leaf
    net = build_group(2**h - 1, cfg)
    joiner = net.add_device("joiner")
    req, gen_req = _generate(joiner, joiner.request_join)
    bus = net.bus
    bus.broadcast("joiner", req)
    bus.step()  # JoinRequest
    sponsor = next(m for m in net.members() if m.sponsor_ctx is not None)
    out["Join Request"] = {"generation": gen_req, "verification": _phase(sponsor, "verify"), "update": OpCounters()}
    gen_challenge = _phase(sponsor, "process")
    bus.step()  # JoinChallenge
    out["Join Challenge"] = {
        "generation": gen_challenge,
        "verification": _phase(joiner, "verify"),
        "update": OpCounters(),
    }
    gen_send = _phase(joiner, "process")
    bus.step()  # JoinSendSecret
    finalize = _phase(sponsor, "process")
    out["Join Send Secret"] = {
        "generation": gen_send,
        "verification": _phase(sponsor, "verify"),
        "update": OpCounters(),
    }
    gen_other = _phase(sponsor, "gka") + _only(finalize, "M")
    gen_joining = _phase(sponsor, "welcome") + _without(finalize, "M")
    others = _receivers(net, {sponsor.identity})
    bus.step()  # JoinSuccessCombined
    out["Join Success (Joining Node)"] = {
        "generation": gen_joining,
        "verification": _phase(joiner, "verify"),
        "update": _phase(joiner, "process"),
    }
    out["Join Success (Other Nodes)"] = {
        "generation": gen_other,
        "verification": _worst([_phase(m, "verify") for m in others]),
        "update": _worst([_phase(m, "process") for m in others]),
    }
    net.settle()

    # join failure: a device with an untrusted certificate
    rogue = _rogue(net, "rogue")
    bus.broadcast("rogue", rogue.request_join())
    bus.step()
    sponsor = next(m for m in net.members() if m.sponsor_ctx is not None)
    bus.step()
    bus.step()  # JoinSendSecret, rejected
    gen_failed = _phase(sponsor, "process")
    bus.step()  # JoinFailed
    out["Join Failed"] = {
        "generation": gen_failed,
        "verification": _phase(rogue, "verify"),
        "update": OpCounters(),
    }
    net.settle()

    # update and leave in a full group
    net = build_group(2**h, cfg)
    bus = net.bus
    pos = net.by_position()
    updater = pos[0]
    data, gen_upd = _generate(updater, updater.make_update)
    bus.broadcast(updater.identity, data)
    bus.step()
    others = _receivers(net, {updater.identity})
    out["Update"] = {
        "generation": gen_upd,
        "verification": _worst([_phase(m, "verify") for m in others]),
        "update": _worst([_phase(m, "process") for m in others]),
    }

    leaver = pos[1]
    data, gen_lr = _generate(leaver, leaver.make_leave_request)
    bus.broadcast(leaver.identity, data)
    bus.step()  # LeaveRequest
    executor = pos[0]
    others = _receivers(net, set())
    out["Leave Request"] = {
        "generation": gen_lr,
        "verification": _worst([_phase(m, "verify") for m in others]),
        "update": OpCounters(),
    }
    gen_lu = _phase(executor, "process")
    bus.step()  # LeaveUpdate
    others = _receivers(net, {executor.identity})
    out["Leave Update"] = {
        "generation": gen_lu,
        "verification": _worst([_phase(m, "verify") for m in others]),
        "update": _worst([_phase(m, "process") for m in others]),
    }
    net.settle()
    return out


@dataclass
class Deviation:
    row: str
    phase: str
    category: str
    kind: str  # "delta" or "absolute"
    h: int
    measured: int
    expected: int

    def line(self) -> str:
        return (
            f"{self.row:<28} {self.phase:<12} {self.category} {self.kind:<8} h={self.h}"
            f" measured={self.measured} expected={self.expected}"
        )


@dataclass
class ConformanceReport:
    heights: tuple[int, ...]
    measured: dict[int, dict[str, dict[str, OpCounters]]]
    deviations: list[Deviation] = field(default_factory=list)

    def delta_ok(self, row: str, phase: str) -> bool:
        return not any(d.row == row and d.phase == phase and d.kind == "delta" for d in self.deviations)

    def absolute_ok(self, row: str, phase: str) -> bool:
        return not any(d.row == row and d.phase == phase and d.kind == "absolute" for d in self.deviations)

    @property
    def ok(self) -> bool:
        return not self.deviations


def conformance(heights=(2, 3, 4, 5), seed: int = 0, suite: int = 0, tolerance: int = 1) -> ConformanceReport:
    """Compare measured counters with the reference model.

    Deltas between consecutive heights must match exactly; absolute counts
    may differ by at most ``tolerance`` per category.
    """
    measured = {h: measure_costs(h, seed, suite) for h in heights}
    rep = ConformanceReport(tuple(heights), measured)
    for row in ROWS:
        for phase in PHASES:
            for h in heights:
                got, want = measured[h][row][phase].as_dict(), reference(row, phase, h).as_dict()
                for cat in OpCounters.CATEGORIES:
                    if abs(got[cat] - want[cat]) > tolerance:
                        rep.deviations.append(Deviation(row, phase, cat, "absolute", h, got[cat], want[cat]))
            for lo, hi in zip(heights, heights[1:]):
                got_lo, got_hi = measured[lo][row][phase].as_dict(), measured[hi][row][phase].as_dict()
                ref_lo, ref_hi = reference(row, phase, lo).as_dict(), reference(row, phase, hi).as_dict()
                for cat in OpCounters.CATEGORIES:
                    d_got, d_ref = got_hi[cat] - got_lo[cat], ref_hi[cat] - ref_lo[cat]
                    if d_got != d_ref:
                        rep.deviations.append(Deviation(row, phase, cat, "delta", hi, d_got, d_ref))
    return rep


# sizes


SIZE_ROWS = (
    "JoinRequest",
    "JoinChallenge",
    "JoinSendSecret",
    "JoinSuccess (GKA part)",
    "JoinSuccess (joiner part)",
    "JoinSuccessCombined",
    "Update",
    "LeaveRequest",
    "LeaveUpdate",
)


def _size_of(net: Network, start: int, t: MsgType) -> bytes:
    for rec in net.bus.log[start:]:
        ev = net.bus.history[rec.seq]
        if ev.payload[3] == t:
            return ev.payload
    raise LookupError(f"no {t.name} on the bus")


def _part_size(combined: bytes, part: str) -> int:
    msg = decode(combined)
    if part == "gka":
        return len(encode(Message(msg.suite, msg.epoch, msg.sender_leaf, msg.body.gka, mac=msg.mac)))
    return len(encode(Message(msg.suite, msg.epoch, msg.sender_leaf, msg.body.joiner, signature=msg.signature)))


def measure_sizes(n: int, seed: int = 0, suite: int = 0) -> dict[str, int]:
    """Encoded sizes in a group growing to ``n`` members (n a power of two >= 2)."""
    cfg = NetworkConfig(seed=seed, suite=suite)
    out: dict[str, int] = {}
    net = build_group(n - 1, cfg)
    start = len(net.bus.log)
    net.join("joiner")
    for t, row in (
        (MsgType.JOIN_REQUEST, "JoinRequest"),
        (MsgType.JOIN_CHALLENGE, "JoinChallenge"),
        (MsgType.JOIN_SEND_SECRET, "JoinSendSecret"),
    ):
        out[row] = len(_size_of(net, start, t))
    combined = _size_of(net, start, MsgType.JOIN_SUCCESS_COMBINED)
    out["JoinSuccess (GKA part)"] = _part_size(combined, "gka")
    out["JoinSuccess (joiner part)"] = _part_size(combined, "joiner")
    out["JoinSuccessCombined"] = len(combined)

    net = build_group(n, cfg)
    pos = net.by_position()
    start = len(net.bus.log)
    net.update(pos[0].identity)
    out["Update"] = len(_size_of(net, start, MsgType.UPDATE))
    start = len(net.bus.log)
    net.leave(pos[1].identity)
    out["LeaveRequest"] = len(_size_of(net, start, MsgType.LEAVE_REQUEST))
    out["LeaveUpdate"] = len(_size_of(net, start, MsgType.LEAVE_UPDATE))
    return out


def join_failed_sizes(max_rejections: int = 5, seed: int = 0, suite: int = 0) -> list[int]:
    """JoinFailed size after 1..max_rejections consecutive rejected joins."""
    net = build_group(4, NetworkConfig(seed=seed, suite=suite))
    sizes = []
    for k in range(max_rejections):
        rogue = _rogue(net, f"rogue{k}")
        start = len(net.bus.log)
        net.send(rogue.identity, rogue.request_join())
        sizes.append(len(_size_of(net, start, MsgType.JOIN_FAILED)))
    return sizes


def size_table(ns=(4, 8, 16, 32), seed: int = 0, suite: int = 0) -> dict[int, dict[str, int]]:
    return {n: measure_sizes(n, seed, suite) for n in ns}


def affine_residual(points: dict[int, int]) -> Fraction:
    """Largest deviation from the line through the first two ``(h, size)`` points, in exact arithmetic."""
    xs = sorted(points)
    if len(xs) < 3:
        return Fraction(0)
    (x0, x1) = xs[:2]
    slope = Fraction(points[x1] - points[x0], x1 - x0)
    return max(abs(points[x] - (points[x0] + slope * (x - x0))) for x in xs)


# storage


def storage_table(ns=(2, 4, 8, 16, 32), seed: int = 0, suite: int = 0) -> dict[int, set[tuple[int, int, int]]]:
    """Distinct (public, private, epoch) storage tuples across the members of each full group."""
    out = {}
    for n in ns:
        net = build_group(n, NetworkConfig(seed=seed, suite=suite))
        out[n] = {(s["public_keys"], s["private_keys"], s["epoch_keys"]) for s in (m.storage() for m in net.members())}
    return out


def expected_storage(n: int) -> tuple[int, int, int]:
    return (2 * n + 1, (n - 1).bit_length() + 1, 1)
