"""A CA, a bus and a set of devices, driven by name."""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import OpCounters, entropy, make_provider
from .engine import DEFAULT_UPDATE_WINDOW, Member, Status
from .errors import GracybusError, UnknownDevice
from .pki import CertificateAuthority, enroll
from .sim import Bus, DeliveryRecord


@dataclass
class NetworkConfig:
    seed: int = 0
    suite: int = 0
    window: int = DEFAULT_UPDATE_WINDOW
    max_steps: int = 10_000


@dataclass
class Network:
    config: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self) -> None:
        self.ca_crypto = make_provider(self.config.suite)
        self.ca = CertificateAuthority.create(self.ca_crypto, "gracybus-ca", entropy(self.config.seed, "ca"))
        self.bus = Bus()
        self.devices: dict[str, Member] = {}
        self.crashed: set[str] = set()

    # devices

    def device(self, name: str) -> Member:
        try:
            return self.devices[name]
        except KeyError:
            raise UnknownDevice(name) from None

    def add_device(self, name: str) -> Member:
        if name in self.devices:
            return self.devices[name]
        cred = enroll(self.ca_crypto, self.ca, name, entropy(self.config.seed, "cert", name))
        m = Member(
            cred,
            self.ca.anchor,
            make_provider(self.config.suite),
            entropy(self.config.seed, "device", name),
            update_window=self.config.window,
        )
        self.devices[name] = m
        self.bus.attach(m)
        return m

    def members(self) -> list[Member]:
        """Live devices that consider themselves in the group."""
        return [m for n, m in self.devices.items() if m.in_group and n not in self.crashed]

    def by_position(self) -> dict[int, Member]:
        return {m.position: m for m in self.members()}

    # events

    def settle(self) -> list[DeliveryRecord]:
        return self.bus.run_until_quiescent(self.config.max_steps)

    def send(self, name: str, payload: bytes | None) -> list[DeliveryRecord]:
        if payload is not None:
            self.bus.broadcast(name, payload)
        return self.settle()

    def create_group(self, name: str) -> None:
        self.add_device(name).create_group()

    def join(self, name: str) -> list[DeliveryRecord]:
        m = self.add_device(name)
        if m.status is Status.JOINING:
            m.status = Status.OUTSIDE
        return self.send(name, m.request_join())

    def update(self, name: str) -> list[DeliveryRecord]:
        return self.send(name, self.device(name).make_update())

    def update_all(self) -> list[DeliveryRecord]:
        """Every live member broadcasts an update at once; the bus picks the winner."""
        for m in self.members():
            self.bus.broadcast(m.identity, m.make_update())
        return self.settle()

    def update_round(self) -> None:
        """Every member updates once, one after the other."""
        for m in sorted(self.members(), key=lambda m: m.position):
            self.update(m.identity)

    def leave(self, name: str) -> list[DeliveryRecord]:
        return self.send(name, self.device(name).make_leave_request())

    def crash(self, name: str) -> None:
        self.device(name)
        self.crashed.add(name)
        self.bus.detach(name)

    def tick(self) -> list[DeliveryRecord]:
        for m in self.members():
            out = m.tick()
            if out is not None:
                self.bus.broadcast(m.identity, out)
        return self.settle()

    # observation

    def converged(self) -> bool:
        views = {m.view() for m in self.members()}
        return len(views) <= 1

    def epoch(self) -> int | None:
        epochs = {m.epoch.epoch for m in self.members()}
        return max(epochs) if epochs else None

    def counters(self) -> dict[str, OpCounters]:
        return {n: m.crypto.counters_snapshot() for n, m in self.devices.items()}


def build_group(n: int, config: NetworkConfig | None = None, refresh: bool = True, prefix: str = "d") -> Network:
    """A group of ``n`` members grown by joins; ``refresh`` adds one update round."""
    net = Network(config or NetworkConfig())
    names = [f"{prefix}{i:02d}" for i in range(n)]
    net.create_group(names[0])
    for name in names[1:]:
        net.join(name)
        if not net.device(name).in_group:
            raise GracybusError(f"{name} failed to join")
    if refresh and n > 1:
        net.update_round()
    return net
