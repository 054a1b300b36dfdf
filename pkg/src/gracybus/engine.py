"""Per-device protocol state machine.

A :class:`Member` talks to the world only through bytes: :meth:`Member.deliver`
consumes one bus message and returns the messages it wants broadcast,
:meth:`Member.tick` runs the update-window check. Operations a member starts
itself (update, leave execution, join sponsoring) are *staged* and only
committed when the bus delivers the member's own message back, so the bus
order decides which of two racing commits wins.

Path commits follow one scheme for UPDATE, JOIN and LEAVE: a committer picks
a start node on a path, gives it a fresh secret, hashes the secret up to the
root, derives seeded key pairs for the nodes above the start, and seals each
level's secret to the resolution of the subtree that does not learn it from
below.
"""

from __future__ import annotations

import copy
import logging
import random
from dataclasses import dataclass, field
from enum import Enum

from . import wire
from .crypto import CipherSuite, KeyPair, OpCounters
from .errors import (
    AuthFailure,
    BadCertificate,
    DecryptionFailure,
    GracybusError,
    InconsistentTree,
    NoDecryptableCiphertext,
    NonceMismatch,
    NotInGroup,
)
from .pki import Credential, TrustAnchor, verify_certificate
from .schedule import EpochState, advance, genesis, join_confirmation_key
from .tree import RatchetTree, is_ancestor_or_self, sibling
from .wire import (
    NO_LEAF,
    JoinChallenge,
    JoinFailed,
    JoinRequest,
    JoinSendSecret,
    JoinSuccessCombined,
    JoinSuccessGka,
    JoinSuccessJoiner,
    LeaveRequest,
    LeaveUpdate,
    Message,
    MsgType,
    PublishPublicKey,
    Update,
    UpdateNodesSecretKey,
    Welcome,
    WelcomeMember,
    WelcomeNode,
)

log = logging.getLogger(__name__)

DEFAULT_UPDATE_WINDOW = 8


class Status(str, Enum):
    OUTSIDE = "outside"
    JOINING = "joining"
    MEMBER = "member"
    LEFT = "left"
    EVICTED = "evicted"


# elections: pure functions of a tree view, so every member agrees


def stale_positions(tree: RatchetTree, last_update: dict[int, int], epoch: int, window: int) -> set[int]:
    out = set()
    for leaf in tree.occupied_leaves():
        pos = tree.leaf_position(leaf)
        if epoch - last_update.get(pos, 0) > window:
            out.add(pos)
    return out


def elect_sponsor(tree: RatchetTree, exclude: set[int] = frozenset()) -> int | None:
    """Rightmost occupied leaf, skipping excluded (stale) positions."""
    for leaf in reversed(tree.occupied_leaves()):
        if tree.leaf_position(leaf) not in exclude:
            return leaf
    return None


def elect_executor(tree: RatchetTree, leaver: int, exclude: set[int] = frozenset()) -> tuple[int, int] | None:
    """``(anchor, executor)`` for removing ``leaver``.

    The anchor is the smallest ancestor of the leaver whose subtree holds
    another eligible occupied leaf; the executor is the smallest such leaf.
    """
    node = leaver
    while node > 1:
        node >>= 1
        candidates = [
            i
            for i in tree.subtree_leaves(node)
            if i != leaver and tree.nodes[i].occupied and tree.leaf_position(i) not in exclude
        ]
        if candidates:
            return node, candidates[0]
    return None


@dataclass
class PathCommit:
    publishes: list[PublishPublicKey]
    secrets: list[UpdateNodesSecretKey]
    root_secret: bytes
    pairs: dict[int, KeyPair]  # node index -> pair, root excluded


def commit_path(
    crypto: CipherSuite,
    tree: RatchetTree,
    leaf: int,
    start_level: int,
    start_secret: bytes,
    start_pair: KeyPair | None,
    served: set[int],
) -> PathCommit:
    """Fresh secrets on ``tree.path(leaf)`` from ``start_level`` up to the root.

    ``start_pair`` is the key pair of the start node (random generation);
    ``None`` derives it from ``start_secret``. Leaves in ``served`` already know
    every new secret; subtrees holding only them get no ciphertext. Does not modify ``tree``.
    """
    path = tree.path(leaf)
    h = tree.height
    secrets = {start_level: start_secret}
    for lvl in range(start_level + 1, h + 1):
        secrets[lvl] = crypto.hash(secrets[lvl - 1])
    pairs: dict[int, KeyPair] = {}
    publishes = []
    for lvl in range(start_level, h + 1):
        if lvl == start_level and start_pair is not None:
            pair = start_pair
        else:
            pair = crypto.keypair_from_seed(secrets[lvl])
        publishes.append(PublishPublicKey(path[lvl], pair.public))
        if lvl < h or h == 0:
            pairs[path[lvl]] = pair

    def only_served(index: int) -> bool:
        return all(i in served for i in tree.subtree_leaves(index) if tree.nodes[i].occupied)

    sealed = []
    for lvl in range(start_level, h + 1):
        if lvl == start_level:
            if lvl == 0:
                continue
            covers = [2 * path[lvl], 2 * path[lvl] + 1]
        else:
            covers = [sibling(path[lvl - 1])]
        for cover in covers:
            for target in tree.resolution(cover):
                if only_served(target):
                    continue
                ct = crypto.seal(tree.nodes[target].public_key, secrets[lvl])
                sealed.append(UpdateNodesSecretKey(path[lvl], target, ct))
    return PathCommit(publishes, sealed, secrets[h], pairs)


@dataclass
class _Staged:
    wire_bytes: bytes
    tree: RatchetTree
    epoch: EpochState
    last_update: dict[int, int]
    kind: str


@dataclass
class _SponsorContext:
    joiner_nonce: bytes
    sponsor_nonce: bytes
    joiner_certificate: object


@dataclass
class _JoinerContext:
    joiner_nonce: bytes
    sponsor_certificate: object = None
    response_nonce: bytes = b""
    leaf_secret: bytes = b""
    hashed_secret: bytes = b""
    leaf_pair: KeyPair | None = None


@dataclass
class Outcome:
    """What happened to one delivery: ``accepted``, ``ignored`` or ``rejected``."""

    verdict: str
    note: str = ""
    emitted: list[bytes] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.verdict == "accepted"

    @property
    def rejected(self) -> bool:
        return self.verdict == "rejected"


def _ok(note: str, emitted: list[bytes] | None = None) -> Outcome:
    return Outcome("accepted", note, emitted or [])


def _skip(note: str) -> Outcome:
    return Outcome("ignored", note)


class Member:
    def __init__(
        self,
        credential: Credential,
        anchor: TrustAnchor,
        crypto: CipherSuite,
        rng: random.Random,
        update_window: int = DEFAULT_UPDATE_WINDOW,
    ) -> None:
        self.credential = credential
        self.anchor = anchor
        self.crypto = crypto
        self.rng = rng
        self.update_window = update_window
        self.status = Status.OUTSIDE
        self.tree: RatchetTree | None = None
        self.position: int | None = None
        self.epoch: EpochState | None = None
        self.last_update: dict[int, int] = {}
        self.staged: _Staged | None = None
        self.sponsor_ctx: _SponsorContext | None = None
        self.joiner_ctx: _JoinerContext | None = None
        self.rejected_nonces: list[bytes] = []
        self.last_outcome: Outcome | None = None
        self.phase_costs: dict[str, OpCounters] = {}
        self._marks: list[tuple[str, OpCounters]] = []

    # identity & views

    @property
    def identity(self) -> str:
        return self.credential.identity

    @property
    def in_group(self) -> bool:
        return self.status is Status.MEMBER

    @property
    def own_leaf(self) -> int:
        return self.tree.leaf_index(self.position)

    def _require_member(self) -> None:
        if not self.in_group:
            raise NotInGroup(f"{self.identity} is not a group member ({self.status.value})")

    def storage(self) -> dict[str, int]:
        if not self.in_group:
            return {"public_keys": 0, "private_keys": 0, "epoch_keys": 0}
        return {
            "public_keys": self.tree.public_key_count() + 2,  # + own certificate + CA
            "private_keys": self.tree.private_key_count() + 1,  # + certificate key
            "epoch_keys": 1,
        }

    def inspect(self) -> dict:
        out = {
            "identity": self.identity,
            "status": self.status.value,
            "epoch": self.epoch.epoch if self.epoch else None,
            "epoch_key": self.crypto.fingerprint(self.epoch.epoch_key) if self.epoch else None,
            "tree": self.tree.fingerprint() if self.tree else None,
            "height": self.tree.height if self.tree else None,
            "position": self.position,
            "storage": self.storage(),
            "counters": self.crypto.counters_snapshot().as_dict(),
        }
        return out

    def view(self) -> tuple | None:
        """``(epoch, epoch_key, tree public state)`` for convergence checks."""
        if not self.in_group:
            return None
        return (self.epoch.epoch, self.epoch.epoch_key, self.tree.public_state())

    def secret_material(self) -> list[bytes]:
        """Every secret byte string this member retains."""
        out = [self.credential.keys.private]
        if self.epoch is not None:
            out.append(self.epoch.epoch_key)
        if self.tree is not None:
            out += [self.tree.nodes[i].private_key for i in self.tree.private_nodes()]
        if self.joiner_ctx is not None:
            out += [b for b in (self.joiner_ctx.leaf_secret, self.joiner_ctx.hashed_secret) if b]
        if self.staged is not None:
            out.append(self.staged.epoch.epoch_key)
            out += [self.staged.tree.nodes[i].private_key for i in self.staged.tree.private_nodes()]
        return out

    def clone(self) -> Member:
        """Verbatim state copy (models a full state compromise)."""
        twin = copy.copy(self)
        for name in ("tree", "epoch", "last_update", "staged", "sponsor_ctx", "joiner_ctx"):
            setattr(twin, name, copy.deepcopy(getattr(self, name)))
        twin.crypto = type(self.crypto)()
        twin.rng = random.Random()
        twin.rng.setstate(self.rng.getstate())
        return twin

    # message helpers

    def _message(self, body, epoch: int | None = None, sender: int | None = None) -> Message:
        return Message(
            suite=self.crypto.suite_id,
            epoch=self.epoch.epoch if epoch is None else epoch,
            sender_leaf=self.position if sender is None else sender,
            body=body,
        )

    def _mac_seal(self, body) -> bytes:
        return wire.seal_auth(self._message(body), self.crypto, epoch_key=self.epoch.epoch_key)

    def _keep_private(self, tree: RatchetTree, index: int) -> bool:
        own = tree.leaf_index(self.position)
        return is_ancestor_or_self(index, own) and (index != 1 or tree.height == 0)

    def _install_commit(self, tree: RatchetTree, commit: PathCommit) -> None:
        tree.apply_public_update([(p.node_index, p.public_key) for p in commit.publishes])
        for p in commit.publishes:
            if p.node_index in commit.pairs and self._keep_private(tree, p.node_index):
                tree.set_keys(p.node_index, p.public_key, commit.pairs[p.node_index].private)
            else:
                tree.set_keys(p.node_index, p.public_key, None)

    def _stage(self, kind: str, data: bytes, tree: RatchetTree, root_secret: bytes, last_update: dict) -> None:
        epoch = EpochState(self.epoch.epoch, self.epoch.epoch_key)
        advance(self.crypto, epoch, root_secret)
        self.staged = _Staged(data, tree, epoch, last_update, kind)

    def _commit_staged(self) -> None:
        s = self.staged
        self.tree, self.epoch, self.last_update = s.tree, s.epoch, s.last_update
        self.staged = None
        if s.kind == "join":
            self.sponsor_ctx = None

    def _epoch_moved(self) -> None:
        # a competing commit won the bus; our staged one is now stale
        self.staged = None

    # group creation

    def create_group(self) -> None:
        if not verify_certificate(self.crypto, self.anchor, self.credential.certificate):
            raise BadCertificate("own certificate does not verify under the trust anchor")
        pair = self.crypto.keypair_random(self.rng)
        tree = RatchetTree(0)
        tree.set_keys(1, pair.public, pair.private)
        tree.nodes[1].occupied = True
        tree.nodes[1].identity = self.identity
        self.tree = tree
        self.position = 0
        # the lone leaf is also the root; keying epoch 0 from a separate
        # secret keeps the leaf private key from unlocking it later
        self.epoch = genesis(self.crypto, self.crypto.random(self.rng, self.crypto.key_len))
        self.last_update = {0: 0}
        self.status = Status.MEMBER

    # UPDATE

    def make_update(self) -> bytes:
        self._require_member()
        tree = self.tree.copy()
        leaf = tree.leaf_index(self.position)
        pair = self.crypto.keypair_random(self.rng)
        commit = commit_path(self.crypto, tree, leaf, 0, pair.private, pair, {leaf})
        data = self._mac_seal(Update(tuple(commit.publishes), tuple(commit.secrets)))
        self._install_commit(tree, commit)
        last = dict(self.last_update)
        last[self.position] = self.epoch.epoch + 1
        self._stage("update", data, tree, commit.root_secret, last)
        return data

    def _receive_path(
        self,
        tree: RatchetTree,
        committer_leaf: int,
        start_level: int,
        publishes: tuple[PublishPublicKey, ...],
        secrets: tuple[UpdateNodesSecretKey, ...],
        extra_publishes: int = 0,
    ) -> bytes:
        """Apply a path commit authored by someone else to ``tree``; return the root secret."""
        path = tree.path(committer_leaf)
        h = tree.height
        expected = [path[lvl] for lvl in range(start_level, h + 1)]
        got = [p.node_index for p in publishes[extra_publishes:]]
        if got != expected:
            raise InconsistentTree(f"published nodes {got} do not match path {expected}")
        own = tree.leaf_index(self.position)
        mine = [
            s
            for s in secrets
            if 1 <= s.recipient_node <= tree.size
            and is_ancestor_or_self(s.recipient_node, own)
            and tree.nodes[s.recipient_node].private_key is not None
        ]
        if len(mine) != 1:
            raise NoDecryptableCiphertext(f"{len(mine)} ciphertexts addressed to {self.identity}")
        entry = mine[0]
        if entry.node_index not in expected:
            raise InconsistentTree("secret carried for a node off the committed path")
        try:
            opened = self.crypto.open(tree.nodes[entry.recipient_node].private_key, entry.ciphertext)
        except DecryptionFailure as exc:
            raise NoDecryptableCiphertext(str(exc)) from exc
        lvl0 = tree.level(entry.node_index)
        secrets_by_level = {lvl0: opened}
        for lvl in range(lvl0 + 1, h + 1):
            secrets_by_level[lvl] = self.crypto.hash(secrets_by_level[lvl - 1])
        published = {p.node_index: p.public_key for p in publishes}
        derived = {}
        for lvl in range(lvl0, h):
            pair = self.crypto.keypair_from_seed(secrets_by_level[lvl])
            if pair.public != published[path[lvl]]:
                raise InconsistentTree(f"derived key for node {path[lvl]} does not match the published one")
            derived[path[lvl]] = pair
        tree.apply_public_update([(p.node_index, p.public_key) for p in publishes])
        for p in publishes:
            pair = derived.get(p.node_index)
            keep = pair is not None and self._keep_private(tree, p.node_index)
            tree.set_keys(p.node_index, p.public_key, pair.private if keep else None)
        return secrets_by_level[h]

    def _handle_update(self, data: bytes, msg: Message) -> Outcome:
        body: Update = msg.body
        tree = self.tree.copy()
        if not 0 <= msg.sender_leaf < tree.n_slots:
            raise InconsistentTree("sender outside the tree")
        sender = tree.leaf_index(msg.sender_leaf)
        if not tree.nodes[sender].occupied:
            raise InconsistentTree("update from an unoccupied leaf")
        root_secret = self._receive_path(tree, sender, 0, body.publishes, body.secrets)
        self._finish(tree, root_secret)
        self.last_update[msg.sender_leaf] = self.epoch.epoch
        return _ok("update")

    def _finish(self, tree: RatchetTree, root_secret: bytes) -> None:
        self.tree = tree
        advance(self.crypto, self.epoch, root_secret)
        self._epoch_moved()

    # JOIN, joiner side

    def request_join(self) -> bytes:
        if self.in_group:
            raise GracybusError(f"{self.identity} is already a member")
        self.tree = self.epoch = self.position = None
        self.staged = None
        nonce = self.crypto.random(self.rng)
        self.joiner_ctx = _JoinerContext(joiner_nonce=nonce)
        self.status = Status.JOINING
        body = JoinRequest(self.credential.certificate, nonce)
        return wire.encode(Message(self.crypto.suite_id, 0, NO_LEAF, body))

    def _handle_join_challenge(self, data: bytes) -> Outcome:
        ctx = self.joiner_ctx
        msg = wire.check_auth(data, self.crypto, anchor=self.anchor)
        self._mark("verify")
        body: JoinChallenge = msg.body
        ctx.sponsor_certificate = body.certificate
        leaf_secret = self.crypto.random(self.rng, self.crypto.key_len)
        ctx.response_nonce = self.crypto.random(self.rng)
        ctx.hashed_secret = self.crypto.hash(leaf_secret)
        ctx.leaf_pair = self.crypto.keypair_from_seed(leaf_secret)
        ctx.leaf_secret = leaf_secret
        sealed = self.crypto.seal(body.certificate.subject_public, ctx.hashed_secret)
        reply = JoinSendSecret(
            sponsor_nonce=body.sponsor_nonce,
            joiner_nonce=ctx.response_nonce,
            certificate=self.credential.certificate,
            leaf_public=ctx.leaf_pair.public,
            sealed_secret=sealed,
        )
        out = wire.seal_auth(
            Message(self.crypto.suite_id, msg.epoch, NO_LEAF, reply), self.crypto, signing_key=self.credential.keys.private
        )
        return _ok("join-challenge", [out])

    def _handle_join_success_as_joiner(self, data: bytes) -> Outcome:
        ctx = self.joiner_ctx
        msg = wire.check_auth(data, self.crypto, signer_public=ctx.sponsor_certificate.subject_public)
        body: JoinSuccessCombined = msg.body
        if not self.crypto.nonce_equal(body.joiner.joiner_nonce, ctx.response_nonce):
            raise NonceMismatch("join success does not echo our nonce")
        self._mark("verify")
        try:
            welcome = Welcome.from_bytes(self.crypto.open(self.credential.keys.private, body.joiner.sealed_welcome))
        except DecryptionFailure as exc:
            raise AuthFailure("cannot open welcome") from exc
        wire.verify_mac(msg, self.crypto, welcome.confirmation_key)
        if welcome.epoch != msg.epoch + 1:
            raise InconsistentTree("welcome epoch does not follow the message epoch")
        tree = RatchetTree(welcome.height)
        for n in welcome.nodes:
            node = tree.node(n.index)
            node.public_key = n.public_key
            node.occupied = bool(n.flags & 1) and tree.is_leaf(n.index)
            node.sealable = bool(n.flags & 2) and n.index != 1
        for m in welcome.members:
            leaf = tree.leaf_index(m.position)
            tree.nodes[leaf].identity = m.identity
            tree.nodes[leaf].occupied = True
        gka = body.gka
        if gka.height != welcome.height:
            raise InconsistentTree("welcome and group part disagree on height")
        leaf = tree.leaf_index(gka.joiner_leaf)
        if tree.nodes[leaf].public_key != ctx.leaf_pair.public or tree.nodes[leaf].identity != self.identity:
            raise InconsistentTree("welcome places someone else at our leaf")
        tree.nodes[leaf].private_key = ctx.leaf_pair.private
        path = tree.path(leaf)
        secret = ctx.hashed_secret
        for lvl in range(1, tree.height):
            if lvl > 1:
                secret = self.crypto.hash(secret)
            pair = self.crypto.keypair_from_seed(secret)
            if tree.nodes[path[lvl]].public_key != pair.public:
                raise InconsistentTree(f"path key mismatch at node {path[lvl]}")
            tree.nodes[path[lvl]].private_key = pair.private
        self.tree = tree
        self.position = gka.joiner_leaf
        self.epoch = EpochState(welcome.epoch, welcome.epoch_key)
        self.last_update = {m.position: m.last_update_epoch for m in welcome.members}
        self.joiner_ctx = None
        self.status = Status.MEMBER
        return _ok("joined")

    def _handle_join_failed(self, data: bytes) -> Outcome:
        ctx = self.joiner_ctx
        wire.check_auth(data, self.crypto, signer_public=ctx.sponsor_certificate.subject_public)
        self._mark("verify")
        body: JoinFailed = wire.decode(data).body
        if ctx.response_nonce in body.rejected_nonces or ctx.joiner_nonce in body.rejected_nonces:
            self.joiner_ctx = None
            self.status = Status.OUTSIDE
            return _ok("join-rejected")
        return _skip("join-failed for someone else")

    # JOIN, sponsor side

    def _stale(self, tree: RatchetTree | None = None) -> set[int]:
        return stale_positions(tree or self.tree, self.last_update, self.epoch.epoch, self.update_window)

    def is_sponsor(self) -> bool:
        return self.in_group and elect_sponsor(self.tree, self._stale()) == self.own_leaf

    def _handle_join_request(self, data: bytes) -> Outcome:
        msg = wire.check_auth(data, self.crypto)
        self._mark("verify")
        body: JoinRequest = msg.body
        if not self.is_sponsor():
            return _ok("not sponsor")
        if self.sponsor_ctx is not None or self.staged is not None:
            return _skip("handshake already in flight")
        sponsor_nonce = self.crypto.random(self.rng)
        self.sponsor_ctx = _SponsorContext(body.joiner_nonce, sponsor_nonce, body.certificate)
        reply = JoinChallenge(body.joiner_nonce, sponsor_nonce, self.credential.certificate)
        out = wire.seal_auth(self._message(reply), self.crypto, signing_key=self.credential.keys.private)
        return _ok("challenge", [out])

    def _join_failed(self, ctx: _SponsorContext, reason: str) -> Outcome:
        self._mark("verify")
        self.rejected_nonces.append(ctx.joiner_nonce)
        body = JoinFailed(tuple(self.rejected_nonces))
        out = wire.seal_auth(self._message(body), self.crypto, signing_key=self.credential.keys.private)
        self.sponsor_ctx = None
        return Outcome("rejected", f"join failed: {reason}", [out])

    def _handle_join_send_secret(self, data: bytes) -> Outcome:
        ctx = self.sponsor_ctx
        try:
            msg = wire.check_auth(data, self.crypto, anchor=self.anchor)
        except AuthFailure as exc:
            return self._join_failed(ctx, str(exc))
        body: JoinSendSecret = msg.body
        if not self.crypto.nonce_equal(body.sponsor_nonce, ctx.sponsor_nonce):
            return self._join_failed(ctx, "sponsor nonce mismatch")
        if body.certificate != ctx.joiner_certificate:
            return self._join_failed(ctx, "certificate differs from the join request")
        if self.tree.find_identity(body.certificate.identity) is not None:
            return self._join_failed(ctx, "identity already in the group")
        try:
            hashed = self.crypto.open(self.credential.keys.private, body.sealed_secret)
        except DecryptionFailure:
            return self._join_failed(ctx, "cannot open the joiner secret")
        self._mark("verify")
        ctx.joiner_nonce = body.joiner_nonce
        return self._sponsor_join(ctx, body, hashed)

    def _sponsor_join(self, ctx: _SponsorContext, body: JoinSendSecret, hashed: bytes) -> Outcome:
        tree = self.tree.copy()
        if tree.is_full():
            tree.expand()
        leaf = tree.leftmost_unused_leaf()
        node = tree.nodes[leaf]
        node.public_key, node.private_key = body.leaf_public, None
        node.occupied, node.identity, node.sealable = True, body.certificate.identity, True
        joiner_pos = tree.leaf_position(leaf)
        commit = commit_path(self.crypto, tree, leaf, 1, hashed, None, {leaf, tree.leaf_index(self.position)})
        self._mark("gka")
        publishes = (PublishPublicKey(leaf, body.leaf_public), *commit.publishes)
        gka = JoinSuccessGka(joiner_pos, tree.height, body.certificate.identity, publishes, tuple(commit.secrets))
        self._install_commit(tree, commit)
        last = dict(self.last_update)
        new_epoch = EpochState(self.epoch.epoch, self.epoch.epoch_key)
        advance(self.crypto, new_epoch, commit.root_secret)
        last[joiner_pos] = new_epoch.epoch
        confirm = join_confirmation_key(self.crypto, self.epoch.epoch_key)
        welcome = Welcome(
            epoch=new_epoch.epoch,
            epoch_key=new_epoch.epoch_key,
            confirmation_key=confirm,
            height=tree.height,
            nodes=tuple(
                WelcomeNode(i, int(tree.nodes[i].occupied) | (int(tree.nodes[i].sealable) << 1), tree.nodes[i].public_key)
                for i in range(1, tree.size + 1)
                if tree.nodes[i].public_key is not None
            ),
            members=tuple(
                WelcomeMember(tree.leaf_position(i), tree.nodes[i].identity or "", last.get(tree.leaf_position(i), 0))
                for i in tree.occupied_leaves()
            ),
        )
        sealed = self.crypto.seal(body.certificate.subject_public, welcome.to_bytes())
        self._mark("welcome")
        combined = JoinSuccessCombined(gka, JoinSuccessJoiner(body.joiner_nonce, sealed))
        out = wire.seal_auth(
            self._message(combined), self.crypto, epoch_key=confirm, signing_key=self.credential.keys.private
        )
        self.staged = _Staged(out, tree, new_epoch, last, "join")
        self.rejected_nonces = []
        return _ok("join success", [out])

    def _handle_join_success_as_member(self, data: bytes, msg: Message) -> Outcome:
        gka: JoinSuccessGka = msg.body.gka
        tree = self.tree.copy()
        if gka.height == tree.height + 1 and tree.is_full():
            tree.expand()
        if gka.height != tree.height:
            raise InconsistentTree("join success height does not match our tree")
        leaf = tree.leftmost_unused_leaf()
        if leaf is None or tree.leaf_position(leaf) != gka.joiner_leaf:
            raise InconsistentTree("joiner not placed at the leftmost unused leaf")
        if not gka.publishes or gka.publishes[0].node_index != leaf:
            raise InconsistentTree("join success must publish the joiner leaf first")
        node = tree.nodes[leaf]
        node.public_key, node.private_key = gka.publishes[0].public_key, None
        node.occupied, node.identity, node.sealable = True, gka.joiner_identity, True
        root_secret = self._receive_path(tree, leaf, 1, gka.publishes, gka.secrets, extra_publishes=1)
        self._finish(tree, root_secret)
        self.last_update[gka.joiner_leaf] = self.epoch.epoch
        self.sponsor_ctx = None
        return _ok("member joined")

    # LEAVE

    def make_leave_request(self) -> bytes:
        self._require_member()
        data = self._mac_seal(LeaveRequest(self.position))
        self.status = Status.LEFT
        self.staged = None
        return data

    def make_leave_update(self, leaver_position: int, exclude: set[int] = frozenset()) -> bytes:
        self._require_member()
        tree = self.tree.copy()
        leaver = tree.leaf_index(leaver_position)
        elected = elect_executor(tree, leaver, set(exclude))
        if elected is None or elected[1] != self.own_leaf:
            raise NotInGroup(f"{self.identity} is not the executor for position {leaver_position}")
        anchor, own = elected
        start = tree.level(anchor)
        self._blank_leaver(tree, leaver, start)
        pair = self.crypto.keypair_random(self.rng)
        commit = commit_path(self.crypto, tree, own, start, pair.private, pair, {own})
        data = self._mac_seal(LeaveUpdate(leaver_position, tuple(commit.publishes), tuple(commit.secrets)))
        self._install_commit(tree, commit)
        tree.truncate_if_possible()
        last = {p: e for p, e in self.last_update.items() if p != leaver_position}
        self._stage("leave", data, tree, commit.root_secret, last)
        return data

    @staticmethod
    def _blank_leaver(tree: RatchetTree, leaver: int, start_level: int) -> None:
        for index in tree.path(leaver)[:start_level]:
            tree.blank_node(index)

    def _handle_leave_request(self, data: bytes, msg: Message) -> Outcome:
        body: LeaveRequest = msg.body
        if body.leaver_leaf != msg.sender_leaf:
            raise AuthFailure("leave request for a different member")
        if not 0 <= body.leaver_leaf < self.tree.n_slots or not self.tree.nodes[self.tree.leaf_index(body.leaver_leaf)].occupied:
            raise InconsistentTree("leave request from an unoccupied leaf")
        leaver = self.tree.leaf_index(body.leaver_leaf)
        exclude = self._stale() - {body.leaver_leaf}
        elected = elect_executor(self.tree, leaver, exclude)
        if elected is None or elected[1] != self.own_leaf or self.staged is not None:
            return _ok("leave request noted")
        return _ok("executing leave", [self.make_leave_update(body.leaver_leaf, exclude)])

    def _handle_leave_update(self, data: bytes, msg: Message) -> Outcome:
        body: LeaveUpdate = msg.body
        tree = self.tree.copy()
        n = tree.n_slots
        if not (0 <= body.leaver_leaf < n and 0 <= msg.sender_leaf < n) or body.leaver_leaf == msg.sender_leaf:
            raise InconsistentTree("bad leaver/executor positions")
        leaver, executor = tree.leaf_index(body.leaver_leaf), tree.leaf_index(msg.sender_leaf)
        if not (tree.nodes[leaver].occupied and tree.nodes[executor].occupied):
            raise InconsistentTree("leaver or executor not in the tree")
        if body.leaver_leaf == self.position:
            self.status = Status.EVICTED
            self.staged = None
            return _ok("we were removed")
        start = tree.level(tree.lca(leaver, executor))
        self._blank_leaver(tree, leaver, start)
        root_secret = self._receive_path(tree, executor, start, body.publishes, body.secrets)
        tree.truncate_if_possible()
        self._finish(tree, root_secret)
        self.last_update.pop(body.leaver_leaf, None)
        return _ok("member removed")

    def tick(self) -> bytes | None:
        """A timer period passed: expire stalled exchanges, then evict at most
        one member whose last update lags by more than the window.

        Ticks only come when the bus is idle, so a handshake or own commit
        still pending here was lost in transit.
        """
        if not self.in_group:
            return None
        if self.sponsor_ctx is not None or self.staged is not None:
            log.info("%s: abandoning stalled %s", self.identity, "commit" if self.staged else "handshake")
            self.sponsor_ctx = None
            self.staged = None
        stale = self._stale()
        for pos in sorted(stale):
            elected = elect_executor(self.tree, self.tree.leaf_index(pos), stale)
            if elected is None:
                continue
            if elected[1] == self.own_leaf:
                return self.make_leave_update(pos, stale)
            return None
        return None

    # dispatch

    def _mark(self, label: str) -> None:
        self._marks.append((label, self.crypto.counters_snapshot()))

    def deliver(self, data: bytes) -> list[bytes]:
        """Process one bus message; returns the messages to broadcast in response.

        Afterwards ``phase_costs`` splits the operations spent on this delivery
        by phase (``verify``, then handler specific segments, then ``process``).
        """
        self._marks = [("", self.crypto.counters_snapshot())]
        try:
            outcome = self._dispatch(data)
        except GracybusError as exc:
            outcome = Outcome("rejected", f"{type(exc).__name__}: {exc}")
        self._mark("process")
        costs: dict[str, OpCounters] = {}
        for (_, before), (label, after) in zip(self._marks, self._marks[1:]):
            costs[label] = costs.get(label, OpCounters()) + (after - before)
        self.phase_costs = costs
        self.last_outcome = outcome
        return outcome.emitted

    def _dispatch(self, data: bytes) -> Outcome:
        if self.status in (Status.LEFT, Status.EVICTED):
            return _skip("not participating")
        msg = wire.decode(data)
        t = msg.msg_type
        if self.status is Status.JOINING:
            ctx = self.joiner_ctx
            if t is MsgType.JOIN_CHALLENGE and ctx.sponsor_certificate is None and msg.body.joiner_nonce == ctx.joiner_nonce:
                return self._handle_join_challenge(data)
            if t is MsgType.JOIN_SUCCESS_COMBINED and ctx.response_nonce and msg.body.joiner.joiner_nonce == ctx.response_nonce:
                return self._handle_join_success_as_joiner(data)
            if t is MsgType.JOIN_FAILED and ctx.sponsor_certificate is not None:
                return self._handle_join_failed(data)
            return _skip("ignored while joining")
        if not self.in_group:
            return _skip("not a member")
        if self.staged is not None and data == self.staged.wire_bytes:
            self._commit_staged()
            return _ok("own commit confirmed")
        if msg.sender_leaf == self.position and t in (MsgType.JOIN_CHALLENGE, MsgType.JOIN_FAILED):
            return _skip("own handshake message")
        if msg.sender_leaf == self.position and t in _GROUP_TYPES:
            return Outcome("rejected", "own message without staged commit")
        if t is MsgType.JOIN_REQUEST:
            return self._handle_join_request(data)
        if t is MsgType.JOIN_SEND_SECRET:
            if self.sponsor_ctx is None or self.staged is not None:
                return _skip("no handshake in flight")
            return self._handle_join_send_secret(data)
        if t in (MsgType.JOIN_CHALLENGE, MsgType.JOIN_FAILED):
            return _ok("handshake traffic for others")
        if t in (MsgType.JOIN_SUCCESS_JOINER, MsgType.JOIN_SUCCESS_GKA):
            return _skip("split join success is not processed")
        key = self.epoch.epoch_key
        if t is MsgType.JOIN_SUCCESS_COMBINED:
            key = join_confirmation_key(self.crypto, key)
        msg = wire.check_auth(data, self.crypto, epoch=self.epoch.epoch, epoch_key=key)
        self._mark("verify")
        if t is MsgType.UPDATE:
            return self._handle_update(data, msg)
        if t is MsgType.JOIN_SUCCESS_COMBINED:
            return self._handle_join_success_as_member(data, msg)
        if t is MsgType.LEAVE_REQUEST:
            return self._handle_leave_request(data, msg)
        if t is MsgType.LEAVE_UPDATE:
            return self._handle_leave_update(data, msg)
        return _skip(f"unhandled {t.name}")


_GROUP_TYPES = {
    MsgType.UPDATE,
    MsgType.LEAVE_REQUEST,
    MsgType.LEAVE_UPDATE,
    MsgType.JOIN_SUCCESS_COMBINED,
}
