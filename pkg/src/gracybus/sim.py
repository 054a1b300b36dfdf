"""Deterministic totally-ordered broadcast bus with a scripted adversary.

Every broadcast gets the next sequence number and is delivered, in sequence
order, to every attached engine in the sender's partition, sender included.
Responses an engine returns are appended to the queue, so one run of
:meth:`Bus.run_until_quiescent` plays a whole protocol exchange out.

The adversary sees everything. It can drop queued events, tamper with them
in flight, replay or inject payloads and split the bus into partitions.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .errors import BadScript, DuplicateAttach, StepLimitExceeded, UnknownDevice
from .wire import HEADER_LEN, MsgType

log = logging.getLogger(__name__)

ADVERSARY = "<adversary>"


class Engine(Protocol):
    identity: str

    def deliver(self, data: bytes) -> list[bytes]: ...


@dataclass(frozen=True)
class BusEvent:
    seq: int
    origin: str
    payload: bytes


def type_name(payload: bytes) -> str:
    if len(payload) >= 4:
        try:
            return MsgType(payload[3]).name
        except ValueError:
            pass
    return "?"


@dataclass
class DeliveryRecord:
    seq: int
    origin: str
    msg_type: str
    size: int
    verdicts: dict[str, str] = field(default_factory=dict)
    dropped: bool = False
    tampered: bool = False

    def line(self) -> str:
        if self.dropped:
            return f"{self.seq:5d} {self.msg_type:<22} {self.size:6d} dropped"
        marks = " ".join(f"{k}:{v}" for k, v in self.verdicts.items())
        flag = " tampered" if self.tampered else ""
        return f"{self.seq:5d} {self.msg_type:<22} {self.size:6d}{flag} {marks}".rstrip()


# adversary actions


@dataclass(frozen=True)
class Drop:
    """Drop queued events matching ``predicate``; ``count=None`` keeps dropping forever."""

    predicate: Callable[[BusEvent], bool]
    count: int | None = 1


@dataclass(frozen=True)
class Tamper:
    seq: int
    offset: int
    mask: int


@dataclass(frozen=True)
class TamperMatching:
    """Tamper the next ``count`` queued events matching ``predicate`` when they reach the head."""

    predicate: Callable[[BusEvent], bool]
    offset: int
    mask: int
    count: int = 1


@dataclass(frozen=True)
class Replay:
    seq: int


@dataclass(frozen=True)
class Inject:
    payload: bytes


@dataclass(frozen=True)
class Partition:
    groups: tuple[frozenset[str], ...]


@dataclass(frozen=True)
class Heal:
    pass


AdversaryAction = Drop | Tamper | TamperMatching | Replay | Inject | Partition | Heal


def of_type(msg_type: MsgType) -> Callable[[BusEvent], bool]:
    return lambda ev: len(ev.payload) >= 4 and ev.payload[3] == msg_type


def drop_type(msg_type: MsgType, count: int | None = 1) -> Drop:
    return Drop(of_type(msg_type), count)


class Bus:
    def __init__(self) -> None:
        self.engines: dict[str, Engine] = {}
        self.queue: deque[BusEvent] = deque()
        self.history: dict[int, BusEvent] = {}
        self.log: list[DeliveryRecord] = []
        self.next_seq = 1
        self._drops: list[list] = []  # [Drop, remaining]
        self._tampers: dict[int, list[Tamper]] = {}
        self._tamper_rules: list[list] = []  # [TamperMatching, remaining]
        self._partition: dict[str, int] | None = None

    # membership

    def attach(self, engine: Engine) -> str:
        name = engine.identity
        if name in self.engines:
            raise DuplicateAttach(f"{name} is already attached")
        self.engines[name] = engine
        return name

    def detach(self, name: str) -> Engine:
        try:
            return self.engines.pop(name)
        except KeyError:
            raise UnknownDevice(name) from None

    # traffic

    def broadcast(self, origin: str, payload: bytes) -> BusEvent:
        ev = BusEvent(self.next_seq, origin, bytes(payload))
        self.next_seq += 1
        self.queue.append(ev)
        self.history[ev.seq] = ev
        return ev

    def pending(self) -> int:
        return len(self.queue)

    def _recipients(self, origin: str) -> list[str]:
        if self._partition is None or origin == ADVERSARY:
            return list(self.engines)
        side = self._partition.get(origin)
        return [n for n in self.engines if self._partition.get(n) == side]

    def _should_drop(self, ev: BusEvent) -> bool:
        for entry in self._drops:
            rule, remaining = entry
            if remaining != 0 and rule.predicate(ev):
                if remaining is not None:
                    entry[1] = remaining - 1
                return True
        return False

    def step(self) -> DeliveryRecord | None:
        if not self.queue:
            return None
        ev = self.queue.popleft()
        payload = ev.payload
        rec = DeliveryRecord(ev.seq, ev.origin, type_name(payload), len(payload))
        if self._should_drop(ev):
            rec.dropped = True
            self.log.append(rec)
            log.debug("drop %d", ev.seq)
            return rec
        pending = list(self._tampers.pop(ev.seq, []))
        for entry in self._tamper_rules:
            if entry[1] > 0 and entry[0].predicate(ev):
                entry[1] -= 1
                pending.append(entry[0])
        for t in pending:
            if t.offset >= len(payload):
                continue
            buf = bytearray(payload)
            buf[t.offset] ^= t.mask
            payload = bytes(buf)
            rec.tampered = True
        for name in self._recipients(ev.origin):
            engine = self.engines[name]
            emitted = engine.deliver(payload)
            outcome = getattr(engine, "last_outcome", None)
            rec.verdicts[name] = outcome.verdict if outcome is not None else "accepted"
            for out in emitted:
                self.broadcast(name, out)
        self.log.append(rec)
        return rec

    def run_until_quiescent(self, max_steps: int = 10_000) -> list[DeliveryRecord]:
        start = len(self.log)
        steps = 0
        while self.queue:
            if steps >= max_steps:
                raise StepLimitExceeded(f"bus still busy after {max_steps} deliveries")
            self.step()
            steps += 1
        return self.log[start:]

    # adversary

    def apply(self, action: AdversaryAction) -> None:
        if isinstance(action, Drop):
            if action.count is not None and action.count < 1:
                raise BadScript("drop count must be positive")
            self._drops.append([action, action.count])
        elif isinstance(action, Tamper):
            ev = self.history.get(action.seq)
            if ev is None:
                raise BadScript(f"tamper references unseen sequence number {action.seq}")
            if ev not in self.queue:
                raise BadScript(f"event {action.seq} was already delivered")
            if not 0 <= action.offset < len(ev.payload) or not 0 < action.mask < 256:
                raise BadScript("tamper offset or mask out of range")
            self._tampers.setdefault(action.seq, []).append(action)
        elif isinstance(action, TamperMatching):
            if action.offset < 0 or not 0 < action.mask < 256 or action.count < 1:
                raise BadScript("tamper offset, mask or count out of range")
            self._tamper_rules.append([action, action.count])
        elif isinstance(action, Replay):
            ev = self.history.get(action.seq)
            if ev is None:
                raise BadScript(f"replay references unseen sequence number {action.seq}")
            self.broadcast(ADVERSARY, ev.payload)
        elif isinstance(action, Inject):
            self.broadcast(ADVERSARY, action.payload)
        elif isinstance(action, Partition):
            names = [n for g in action.groups for n in g]
            if len(names) != len(set(names)):
                raise BadScript("partition groups overlap")
            self._partition = {n: i for i, g in enumerate(action.groups) for n in g}
        elif isinstance(action, Heal):
            self._partition = None
        else:
            raise BadScript(f"unknown adversary action {action!r}")

    def clear_rules(self) -> None:
        self._drops.clear()
        self._tampers.clear()
        self._tamper_rules.clear()

    def log_lines(self) -> list[str]:
        return [r.line() for r in self.log]


def header_offset(field_name: str) -> int:
    """Byte offset of a header field, for tamper scripts."""
    offsets = {"version": 0, "suite": 1, "type": 3, "epoch": 4, "sender_leaf": 12, "body_length": 16, "body": HEADER_LEN}
    try:
        return offsets[field_name]
    except KeyError:
        raise BadScript(f"no header field {field_name!r}") from None
