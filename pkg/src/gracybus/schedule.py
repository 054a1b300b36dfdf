"""Epoch key chain: ``key_e = KDF(root_secret_e, key_{e-1})``.

Only the current key is ever retained; :func:`advance` overwrites it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import CipherSuite
from .errors import EmptySecret


@dataclass
class EpochState:
    epoch: int
    epoch_key: bytes

    def __repr__(self) -> str:
        return f"EpochState(epoch={self.epoch})"


def genesis(crypto: CipherSuite, root_secret: bytes) -> EpochState:
    if not root_secret:
        raise EmptySecret("root secret must be non-empty")
    return EpochState(0, crypto.kdf(root_secret, crypto.zero_key()))


def advance(crypto: CipherSuite, state: EpochState, root_secret: bytes) -> EpochState:
    """Move ``state`` to the next epoch in place and return it."""
    if not root_secret:
        raise EmptySecret("root secret must be non-empty")
    state.epoch_key = crypto.kdf(root_secret, state.epoch_key)
    state.epoch += 1
    return state


JOIN_CONFIRMATION_LABEL = b"gracybus join confirmation"


def join_confirmation_key(crypto: CipherSuite, epoch_key: bytes) -> bytes:
    """One-way MAC key for the join success of the epoch keyed by ``epoch_key``.

    Members derive it themselves; the joiner receives it in the welcome and
    so can check the same MAC without learning the epoch key.
    """
    return crypto.kdf(epoch_key, JOIN_CONFIRMATION_LABEL)
