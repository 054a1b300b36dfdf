"""Line-oriented scenario files and the runner that turns them into reports.

One event per line, fields separated by spaces, ``#`` starts a comment::

    seed 7
    suite toy
    window 8
    create_group A
    join B
    update *
    adversary drop UPDATE 1
    leave B
    tick

Adversary lines: ``drop TYPE [COUNT|all]``, ``tamper TYPE OFFSET MASK``,
``replay SEQ|last``, ``inject HEX``, ``partition A,B | C,D``, ``heal``.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .crypto import SUITES, OpCounters
from .engine import DEFAULT_UPDATE_WINDOW
from .errors import BadScript, GracybusError, ParseError, StepLimitExceeded, UnknownDevice
from .network import Network, NetworkConfig
from .sim import Drop, Heal, Inject, Partition, Replay, TamperMatching, of_type
from .wire import MsgType

VERBS = ("create_group", "join", "leave", "crash", "update", "tick", "adversary")
_ALIASES = {"create": "create_group"}
_SUITE_NAMES = {"toy": 0x0000, "classic": 0x0001}


@dataclass(frozen=True)
class Event:
    verb: str
    args: tuple[str, ...] = ()
    line: int = 0

    def __str__(self) -> str:
        return " ".join((self.verb, *self.args))


@dataclass
class Scenario:
    seed: int = 0
    suite: int = 0
    window: int = DEFAULT_UPDATE_WINDOW
    events: list[Event] = field(default_factory=list)

    def to_text(self) -> str:
        head = [f"seed {self.seed}", f"suite {self.suite}", f"window {self.window}"]
        return "\n".join(head + [str(e) for e in self.events]) + "\n"


def _int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(f"line {line}: expected an integer, got {tok!r}") from None


def parse_suite(tok: str) -> int:
    if tok.lower() in _SUITE_NAMES:
        return _SUITE_NAMES[tok.lower()]
    try:
        value = int(tok, 0)
    except ValueError:
        raise ParseError(f"unknown suite {tok!r}") from None
    if value not in SUITES:
        raise ParseError(f"unknown suite {tok!r}")
    return value


def _msg_type(tok: str, line: int) -> MsgType:
    try:
        return MsgType[tok.upper()]
    except KeyError:
        raise ParseError(f"line {line}: unknown message type {tok!r}") from None


def _check_adversary(args: tuple[str, ...], line: int) -> None:
    if not args:
        raise ParseError(f"line {line}: adversary needs an action")
    action, rest = args[0], args[1:]
    if action == "drop":
        if len(rest) not in (1, 2):
            raise ParseError(f"line {line}: drop TYPE [COUNT|all]")
        _msg_type(rest[0], line)
        if len(rest) == 2 and rest[1] != "all" and _int(rest[1], line) < 1:
            raise ParseError(f"line {line}: drop count must be positive")
    elif action == "tamper":
        if len(rest) != 3:
            raise ParseError(f"line {line}: tamper TYPE OFFSET MASK")
        _msg_type(rest[0], line)
        if _int(rest[1], line) < 0 or not 0 < _int(rest[2], line) < 256:
            raise ParseError(f"line {line}: bad tamper offset or mask")
    elif action == "replay":
        if len(rest) != 1 or (rest[0] != "last" and _int(rest[0], line) < 1):
            raise ParseError(f"line {line}: replay SEQ|last")
    elif action == "inject":
        if len(rest) != 1:
            raise ParseError(f"line {line}: inject HEX")
        try:
            bytes.fromhex(rest[0])
        except ValueError:
            raise ParseError(f"line {line}: inject payload is not hex") from None
    elif action == "partition":
        groups = [g for g in " ".join(rest).split("|")]
        if len(groups) < 2 or any(not g.strip() for g in groups):
            raise ParseError(f"line {line}: partition A,B | C,D")
    elif action == "heal":
        if rest:
            raise ParseError(f"line {line}: heal takes no arguments")
    else:
        raise ParseError(f"line {line}: unknown adversary action {action!r}")


def parse_scenario(text: str) -> Scenario:
    sc = Scenario()
    for no, raw in enumerate(text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        verb, args = toks[0].lower(), tuple(toks[1:])
        verb = _ALIASES.get(verb, verb)
        if verb in ("seed", "suite", "window"):
            if sc.events:
                raise ParseError(f"line {no}: {verb} must precede the events")
            if len(args) != 1:
                raise ParseError(f"line {no}: {verb} takes one value")
            if verb == "seed":
                sc.seed = _int(args[0], no)
            elif verb == "suite":
                sc.suite = parse_suite(args[0])
            else:
                sc.window = _int(args[0], no)
                if sc.window < 1:
                    raise ParseError(f"line {no}: window must be >= 1")
            continue
        if verb not in VERBS:
            raise ParseError(f"line {no}: unknown event {verb!r}")
        if verb == "tick":
            if args:
                raise ParseError(f"line {no}: tick takes no arguments")
        elif verb == "adversary":
            _check_adversary(args, no)
        elif len(args) != 1:
            raise ParseError(f"line {no}: {verb} takes one device id")
        if verb == "create_group" and sc.events:
            raise ParseError(f"line {no}: create_group must be the first event and appear once")
        if verb != "create_group" and not sc.events:
            raise ParseError(f"line {no}: the first event must be create_group")
        sc.events.append(Event(verb, args, no))
    if not sc.events:
        raise ParseError("scenario has no events")
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text)


# running


@dataclass
class EventRecord:
    index: int
    event: str
    group_size: int
    height: int | None
    messages: list[dict]
    counters_delta: dict[str, dict[str, int]]
    post_epoch: int | None
    storage: dict[str, dict[str, int]]
    note: str = ""


@dataclass
class RunReport:
    seed: int
    suite: int
    window: int
    events: list[EventRecord]
    converged: bool
    members: list[str]
    final_epoch: int | None
    delivery_log: list[str]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class _Runner:
    def __init__(self, sc: Scenario, max_steps: int) -> None:
        self.sc = sc
        self.net = Network(NetworkConfig(sc.seed, sc.suite, sc.window, max_steps))

    def _require_known(self, name: str) -> None:
        if name not in self.net.devices:
            raise UnknownDevice(f"{name} has not been introduced by create_group or join")

    def _adversary(self, args: tuple[str, ...]) -> str:
        bus = self.net.bus
        action, rest = args[0], args[1:]
        if action == "drop":
            count = None if len(rest) > 1 and rest[1] == "all" else int(rest[1], 0) if len(rest) > 1 else 1
            bus.apply(Drop(of_type(MsgType[rest[0].upper()]), count))
        elif action == "tamper":
            bus.apply(TamperMatching(of_type(MsgType[rest[0].upper()]), int(rest[1], 0), int(rest[2], 0)))
        elif action == "replay":
            seq = bus.next_seq - 1 if rest[0] == "last" else int(rest[0], 0)
            bus.apply(Replay(seq))
            self.net.settle()
        elif action == "inject":
            bus.apply(Inject(bytes.fromhex(rest[0])))
            self.net.settle()
        elif action == "partition":
            groups = tuple(frozenset(n.strip() for n in g.split(",") if n.strip()) for g in " ".join(rest).split("|"))
            for g in groups:
                for n in g:
                    self._require_known(n)
            bus.apply(Partition(groups))
        elif action == "heal":
            bus.apply(Heal())
        return action

    def _do(self, ev: Event) -> str:
        net = self.net
        if ev.verb == "create_group":
            net.create_group(ev.args[0])
        elif ev.verb == "join":
            name = ev.args[0]
            if name in net.devices and net.devices[name].in_group:
                return "already a member"
            if name in net.crashed:
                return "crashed device cannot join"
            net.join(name)
            return "" if net.devices[name].in_group else "join did not complete"
        elif ev.verb == "update":
            if ev.args[0] == "*":
                net.update_all()
            else:
                self._require_known(ev.args[0])
                net.update(ev.args[0])
        elif ev.verb == "leave":
            self._require_known(ev.args[0])
            net.leave(ev.args[0])
        elif ev.verb == "crash":
            self._require_known(ev.args[0])
            if ev.args[0] not in net.crashed:
                net.crash(ev.args[0])
        elif ev.verb == "tick":
            net.tick()
        else:
            self._adversary(ev.args)
        return ""

    def run(self) -> RunReport:
        net = self.net
        records = []
        for i, ev in enumerate(self.sc.events):
            before = net.counters()
            members = net.members()
            size = len(members)
            height = members[0].tree.height if members else None
            start = len(net.bus.log)
            try:
                note = self._do(ev)
            except (UnknownDevice, BadScript, StepLimitExceeded):
                raise
            except GracybusError as exc:
                note = f"skipped: {type(exc).__name__}: {exc}"
            after = net.counters()
            delta = {}
            for name, c in after.items():
                d = (c - before.get(name, OpCounters())).nonzero()
                if d:
                    delta[name] = d
            msgs = [
                {"seq": r.seq, "origin": r.origin, "type": r.msg_type, "bytes": r.size, "dropped": r.dropped}
                for r in net.bus.log[start:]
            ]
            records.append(
                EventRecord(
                    index=i,
                    event=str(ev),
                    group_size=size,
                    height=height,
                    messages=msgs,
                    counters_delta=delta,
                    post_epoch=net.epoch(),
                    storage={m.identity: m.storage() for m in net.members()},
                    note=note,
                )
            )
        return RunReport(
            seed=self.sc.seed,
            suite=self.sc.suite,
            window=self.sc.window,
            events=records,
            converged=net.converged(),
            members=sorted(m.identity for m in net.members()),
            final_epoch=net.epoch(),
            delivery_log=net.bus.log_lines(),
        )


def run_scenario(
    source: str | Path | Scenario,
    seed: int | None = None,
    suite: int | None = None,
    max_steps: int = 10_000,
    keep_network: bool = False,
):
    """Run a scenario (a path or a parsed :class:`Scenario`) and return its report.

    With ``keep_network`` the live :class:`Network` is returned alongside.
    """
    sc = source if isinstance(source, Scenario) else load_scenario(source)
    if seed is not None or suite is not None:
        sc = Scenario(sc.seed if seed is None else seed, sc.suite if suite is None else suite, sc.window, list(sc.events))
    runner = _Runner(sc, max_steps)
    report = runner.run()
    return (report, runner.net) if keep_network else report


# random scenarios


def random_scenario(seed: int, max_devices: int = 32, n_events: int = 100, window: int = DEFAULT_UPDATE_WINDOW) -> Scenario:
    """A well-formed scenario with joins, leaves, crashes, updates and ticks (no adversary)."""
    rng = random.Random(seed)
    names = [f"n{i:02d}" for i in range(max_devices)]
    sc = Scenario(seed=seed, suite=0, window=window)
    sc.events.append(Event("create_group", (names[0],)))
    active = [names[0]]
    fresh = names[1:]
    gone: list[str] = []
    while len(sc.events) < n_events:
        r = rng.random()
        if r < 0.35 and fresh:
            name = fresh.pop(0)
            sc.events.append(Event("join", (name,)))
            active.append(name)
        elif r < 0.45 and gone and rng.random() < 0.5:
            # a departed device comes back
            name = gone.pop(rng.randrange(len(gone)))
            sc.events.append(Event("join", (name,)))
            active.append(name)
        elif r < 0.55 and len(active) > 2:
            name = active.pop(rng.randrange(len(active)))
            sc.events.append(Event("leave", (name,)))
            gone.append(name)
        elif r < 0.60 and len(active) > 2:
            name = active.pop(rng.randrange(len(active)))
            sc.events.append(Event("crash", (name,)))
        elif r < 0.85 and active:
            sc.events.append(Event("update", (rng.choice(active + ["*"]),)))
        else:
            sc.events.append(Event("tick"))
    return sc
