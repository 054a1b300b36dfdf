"""Perfect binary key tree with level-order indexing.

Root is node 1, the children of ``i`` are ``2i`` and ``2i+1``; with
``L = 2**height`` leaf slots the leaves are ``L .. 2L-1``. A node's *level*
counts up from the leaves (leaf 0, root ``height``).

A node is *sealable* when every occupied leaf below it holds its private
key; only sealable nodes may receive ciphertexts. The root is never
sealable. Resolution descends through non-sealable nodes to the sealable
ones covering the same occupied leaves.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .crypto import CipherSuite
from .errors import BadIndex, EmptySecret, NotALeaf, NotFull, SameLeaf


@dataclass
class TreeNode:
    public_key: bytes | None = None
    private_key: bytes | None = field(default=None, repr=False)
    occupied: bool = False
    identity: str | None = None
    sealable: bool = False

    def blank(self) -> None:
        self.public_key = None
        self.private_key = None
        self.occupied = False
        self.identity = None
        self.sealable = False


def depth(index: int) -> int:
    return index.bit_length() - 1


def parent(index: int) -> int:
    return index >> 1


def sibling(index: int) -> int:
    if index <= 1:
        raise BadIndex("the root has no sibling")
    return index ^ 1


def is_ancestor_or_self(anc: int, node: int) -> bool:
    shift = depth(node) - depth(anc)
    return shift >= 0 and (node >> shift) == anc


def derive_path_chain(crypto: CipherSuite, leaf_secret: bytes, height: int) -> list[bytes]:
    """``[s_0 .. s_h]`` with ``s_i = hash(s_{i-1})``; exactly ``height`` hashes."""
    if not leaf_secret:
        raise EmptySecret("leaf secret must be non-empty")
    chain = [leaf_secret]
    for _ in range(height):
        chain.append(crypto.hash(chain[-1]))
    return chain


class RatchetTree:
    def __init__(self, height: int = 0) -> None:
        if height < 0:
            raise ValueError("height must be >= 0")
        self.height = height
        # slot 0 unused so that list index == node index
        self.nodes: list[TreeNode] = [TreeNode() for _ in range(2 ** (height + 1))]

    # geometry
    @property
    def n_slots(self) -> int:
        return 1 << self.height

    @property
    def size(self) -> int:
        return (1 << (self.height + 1)) - 1

    def node(self, index: int) -> TreeNode:
        self._check(index)
        return self.nodes[index]

    def _check(self, index: int) -> None:
        if not 1 <= index <= self.size:
            raise BadIndex(f"node {index} outside tree of height {self.height}")

    def is_leaf(self, index: int) -> bool:
        return self.n_slots <= index <= self.size

    def level(self, index: int) -> int:
        self._check(index)
        return self.height - depth(index)

    def leaf_index(self, position: int) -> int:
        if not 0 <= position < self.n_slots:
            raise BadIndex(f"leaf position {position} outside tree of height {self.height}")
        return self.n_slots + position

    def leaf_position(self, leaf: int) -> int:
        self._require_leaf(leaf)
        return leaf - self.n_slots

    def leaves(self) -> range:
        return range(self.n_slots, 2 * self.n_slots)

    def subtree_leaves(self, index: int) -> range:
        self._check(index)
        shift = self.height - depth(index)
        return range(index << shift, (index + 1) << shift)

    def _require_leaf(self, leaf: int) -> None:
        if not self.is_leaf(leaf):
            raise NotALeaf(f"{leaf} is not a leaf of a tree with height {self.height}")

    def path(self, leaf: int) -> list[int]:
        self._require_leaf(leaf)
        out = [leaf]
        while out[-1] > 1:
            out.append(parent(out[-1]))
        return out

    def copath(self, leaf: int) -> list[int]:
        return [sibling(i) for i in self.path(leaf)[:-1]]

    def lca(self, a: int, b: int) -> int:
        while a != b:
            a, b = parent(a), parent(b)
        return a

    def decrypt_point(self, self_leaf: int, updater_leaf: int) -> int:
        """The co-path node of ``updater_leaf`` whose subtree contains ``self_leaf``."""
        self._require_leaf(self_leaf)
        self._require_leaf(updater_leaf)
        if self_leaf == updater_leaf:
            raise SameLeaf("a member cannot decrypt its own update")
        a, b = self_leaf, updater_leaf
        while parent(a) != parent(b):
            a, b = parent(a), parent(b)
        return a

    # occupancy
    def occupied_leaves(self) -> list[int]:
        return [i for i in self.leaves() if self.nodes[i].occupied]

    def member_count(self) -> int:
        return len(self.occupied_leaves())

    def has_occupant(self, index: int, exclude: int | None = None) -> bool:
        return any(self.nodes[i].occupied and i != exclude for i in self.subtree_leaves(index))

    def leftmost_unused_leaf(self) -> int | None:
        for i in self.leaves():
            if not self.nodes[i].occupied:
                return i
        return None

    def is_full(self) -> bool:
        return self.leftmost_unused_leaf() is None

    def rightmost_occupied_leaf(self) -> int | None:
        occ = self.occupied_leaves()
        return occ[-1] if occ else None

    def find_identity(self, identity: str) -> int | None:
        for i in self.occupied_leaves():
            if self.nodes[i].identity == identity:
                return i
        return None

    def resolution(self, index: int) -> list[int]:
        """Minimal sealable nodes covering every occupied leaf below ``index``."""
        if not self.has_occupant(index):
            return []
        node = self.nodes[index]
        if node.sealable and node.public_key is not None and index != 1:
            return [index]
        if self.is_leaf(index):
            return []
        return self.resolution(2 * index) + self.resolution(2 * index + 1)

    # reshaping
    def expand(self) -> RatchetTree:
        """Old tree becomes the left subtree of a new root; node i moves to i + 2**depth(i)."""
        if not self.is_full():
            raise NotFull("expand requires a full tree")
        old = self.nodes
        self.height += 1
        self.nodes = [TreeNode() for _ in range(2 ** (self.height + 1))]
        for i in range(1, len(old)):
            self.nodes[i + (1 << depth(i))] = old[i]
        if self.height == 1:
            self.nodes[2].sealable = self.nodes[2].occupied
        else:
            # the old root becomes an intermediate nobody holds a private key for
            self.nodes[2].private_key = None
            self.nodes[2].sealable = False
        return self

    def can_truncate(self) -> bool:
        return self.height > 0 and not self.has_occupant(3)

    def truncate_if_possible(self) -> RatchetTree:
        while self.can_truncate():
            old = self.nodes
            self.height -= 1
            self.nodes = [TreeNode() for _ in range(2 ** (self.height + 1))]
            for i in range(1, len(self.nodes)):
                self.nodes[i] = old[i + (1 << depth(i))]
            root = self.nodes[1]
            if not (self.height == 0 and root.occupied):
                root.private_key = None
                root.sealable = False
        return self

    # key material
    def apply_public_update(self, updates: list[tuple[int, bytes]]) -> RatchetTree:
        for index, _ in updates:
            self._check(index)
        for index, public in updates:
            node = self.nodes[index]
            if node.public_key != public:
                node.private_key = None
            node.public_key = public
        return self

    def set_keys(self, index: int, public: bytes, private: bytes | None, sealable: bool = True) -> None:
        node = self.node(index)
        node.public_key = public
        node.private_key = private
        node.sealable = sealable and index != 1

    def blank_node(self, index: int) -> None:
        self.node(index).blank()

    def public_key_count(self) -> int:
        return sum(1 for i in range(1, self.size + 1) if self.nodes[i].public_key is not None)

    def private_key_count(self) -> int:
        return sum(1 for i in range(1, self.size + 1) if self.nodes[i].private_key is not None)

    def private_nodes(self) -> list[int]:
        return [i for i in range(1, self.size + 1) if self.nodes[i].private_key is not None]

    # views
    def public_state(self) -> bytes:
        """Canonical encoding of everything every member should agree on."""
        out = bytearray(struct.pack(">B", self.height))
        for i in range(1, self.size + 1):
            n = self.nodes[i]
            flags = (n.public_key is not None) | (n.occupied << 1) | (n.sealable << 2)
            out += struct.pack(">IB", i, flags)
            if n.public_key is not None:
                out += struct.pack(">H", len(n.public_key)) + n.public_key
            if n.identity is not None:
                ident = n.identity.encode()
                out += struct.pack(">H", len(ident)) + ident
        return bytes(out)

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(self.public_state()).hexdigest()[:16]

    def dump(self) -> str:
        lines = [f"height={self.height} slots={self.n_slots} members={self.member_count()}"]
        for i in range(1, self.size + 1):
            n = self.nodes[i]
            key = n.public_key.hex()[:8] if n.public_key else "--------"
            kind = "leaf" if self.is_leaf(i) else "node"
            occ = ("occupied " + (n.identity or "?")) if n.occupied else ("blank" if kind == "leaf" else "")
            priv = " priv" if n.private_key is not None else ""
            seal = " sealable" if n.sealable else ""
            lines.append(f"{i:4d} {kind} {key}{priv}{seal} {occ}".rstrip())
        return "\n".join(lines)

    def copy(self) -> RatchetTree:
        t = RatchetTree.__new__(RatchetTree)
        t.height = self.height
        t.nodes = [TreeNode(n.public_key, n.private_key, n.occupied, n.identity, n.sealable) for n in self.nodes]
        return t

    def public_copy(self) -> RatchetTree:
        t = self.copy()
        for n in t.nodes:
            n.private_key = None
        return t
