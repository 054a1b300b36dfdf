import itertools

import pytest

from gracybus.errors import BadIndex, EmptySecret, NotALeaf, NotFull, SameLeaf
from gracybus.tree import RatchetTree, derive_path_chain


def tree_with(h, occupied):
    t = RatchetTree(h)
    for leaf in occupied:
        t.nodes[leaf].occupied = True
        t.nodes[leaf].public_key = leaf.to_bytes(8, "big")
    return t


# brute-force references: explicit parent/child maps, no bit tricks


def ref_parent_map(h):
    parents = {}
    frontier = [1]
    for _ in range(h):
        nxt = []
        for n in frontier:
            for c in (2 * n, 2 * n + 1):
                parents[c] = n
                nxt.append(c)
        frontier = nxt
    return parents, frontier


def ref_path(h, leaf):
    parents, _ = ref_parent_map(h)
    out = [leaf]
    while out[-1] in parents:
        out.append(parents[out[-1]])
    return out


def ref_copath(h, leaf):
    parents, _ = ref_parent_map(h)
    children = {}
    for c, p in parents.items():
        children.setdefault(p, []).append(c)
    return [next(s for s in children[parents[n]] if s != n) for n in ref_path(h, leaf)[:-1]]


def ref_leaves_below(h, node):
    parents, leaves = ref_parent_map(h)
    def below(leaf):
        n = leaf
        while True:
            if n == node:
                return True
            if n not in parents:
                return False
            n = parents[n]
    return [lf for lf in leaves if below(lf)]


def test_path_examples():
    assert RatchetTree(0).path(1) == [1]
    assert RatchetTree(2).path(4) == [4, 2, 1]
    assert RatchetTree(3).path(13) == [13, 6, 3, 1]


def test_copath_examples():
    assert RatchetTree(0).copath(1) == []
    assert RatchetTree(2).copath(4) == [5, 3]


@pytest.mark.parametrize("h", range(7))
def test_path_and_copath_against_reference(h):
    t = RatchetTree(h)
    for leaf in t.leaves():
        assert t.path(leaf) == ref_path(h, leaf)
        assert t.copath(leaf) == ref_copath(h, leaf)
        assert len(t.copath(leaf)) == len(t.path(leaf)) - 1


def test_not_a_leaf():
    with pytest.raises(NotALeaf):
        RatchetTree(2).path(2)


@pytest.mark.parametrize("h", range(7))
def test_perfect_shape(h):
    t = RatchetTree(h)
    assert t.size == 2 ** (h + 1) - 1
    assert len(t.nodes) - 1 == t.size
    for i in range(1, t.size + 1):
        assert list(t.subtree_leaves(i)) == ref_leaves_below(h, i)


def test_leftmost_unused():
    t = tree_with(3, [8, 9, 11])
    assert t.leftmost_unused_leaf() == 10
    t = tree_with(2, [4])
    assert t.leftmost_unused_leaf() == 5
    assert tree_with(2, [4, 5, 6, 7]).leftmost_unused_leaf() is None


def test_expand_examples():
    t = tree_with(0, [1]).expand()
    assert t.height == 1 and t.nodes[2].occupied and not t.nodes[3].occupied
    t = tree_with(2, [4, 5, 6, 7])
    t.nodes[2].public_key = b"n2"
    t.expand()
    assert t.height == 3
    assert [t.nodes[i].occupied for i in range(8, 16)] == [True] * 4 + [False] * 4
    assert t.nodes[4].public_key == b"n2"
    with pytest.raises(NotFull):
        tree_with(2, [4]).expand()


@pytest.mark.parametrize("h", range(5))
def test_expand_index_mapping_keeps_keys(h):
    t = tree_with(h, list(range(2**h, 2 ** (h + 1))))
    for i in range(1, t.size + 1):
        t.nodes[i].public_key = b"k%d" % i
    t.expand()
    for i in range(1, 2 ** (h + 1)):
        depth = i.bit_length() - 1
        assert t.nodes[i + 2**depth].public_key == b"k%d" % i


def ref_truncated_height(h, occupied_positions):
    # shrink while the right half of the slot range is empty
    while h > 0 and not any(p >= 2 ** (h - 1) for p in occupied_positions):
        h -= 1
    return h


@pytest.mark.parametrize("h", range(4))
def test_truncation_exhaustive(h):
    n = 2**h
    for mask in range(1, 2**n):
        positions = [p for p in range(n) if mask >> p & 1]
        t = tree_with(h, [n + p for p in positions])
        t.truncate_if_possible()
        want = ref_truncated_height(h, positions)
        assert t.height == want
        assert [t.leaf_position(lf) for lf in t.occupied_leaves()] == positions
        assert len(t.nodes) - 1 == 2 ** (want + 1) - 1


def test_truncation_examples():
    t = tree_with(3, [8, 9, 10, 11]).truncate_if_possible()
    assert t.height == 2
    t = tree_with(2, [4, 7]).truncate_if_possible()
    assert t.height == 2
    t = tree_with(3, [8, 9]).truncate_if_possible()
    assert t.height == 1


def test_truncate_noop_iff_right_side_occupied():
    for h in range(1, 4):
        n = 2**h
        for mask in range(1, 2**n):
            positions = [p for p in range(n) if mask >> p & 1]
            t = tree_with(h, [n + p for p in positions])
            assert (not t.can_truncate()) == any(p >= n // 2 for p in positions)


def test_expand_then_truncate_round_trip():
    t = tree_with(2, [4, 5, 6, 7]).expand()
    assert t.height == 3 and t.can_truncate()
    t.truncate_if_possible()
    assert t.height == 2  # right side never used
    t = tree_with(2, [4, 5, 6, 7]).expand()
    t.nodes[12].occupied = True
    assert not t.can_truncate()
    t.nodes[12].occupied = False
    assert t.truncate_if_possible().height == 2


def test_derive_path_chain(toy):
    assert derive_path_chain(toy, b"s", 0) == [b"s"]
    toy.counters_reset()
    chain = derive_path_chain(toy, b"s", 2)
    assert chain == [b"s", toy.hash(b"s"), toy.hash(toy.hash(b"s"))]
    assert toy.counters_snapshot().H == 2 + 3
    with pytest.raises(EmptySecret):
        derive_path_chain(toy, b"", 2)


def test_path_chain_toy_values(toy):
    from conftest import reference_fnv1a64

    s1 = reference_fnv1a64(b"seed").to_bytes(8, "big")
    s2 = reference_fnv1a64(s1).to_bytes(8, "big")
    assert derive_path_chain(toy, b"seed", 2) == [b"seed", s1, s2]


def test_decrypt_point_examples():
    assert RatchetTree(1).decrypt_point(3, 2) == 3
    assert RatchetTree(2).decrypt_point(7, 4) == 3
    with pytest.raises(SameLeaf):
        RatchetTree(2).decrypt_point(4, 4)


@pytest.mark.parametrize("h", range(1, 5))
def test_decrypt_point_brute_force(h):
    t = RatchetTree(h)
    for me, other in itertools.permutations(t.leaves(), 2):
        ancestors = set(ref_path(h, me))
        hits = [n for n in ref_copath(h, other) if n in ancestors]
        assert [t.decrypt_point(me, other)] == hits


def test_apply_public_update():
    t = tree_with(2, [4, 5])
    t.nodes[2].private_key = b"priv"
    t.nodes[2].public_key = b"old"
    t.apply_public_update([(2, b"new")])
    assert t.nodes[2].public_key == b"new"
    assert t.nodes[2].private_key is None
    with pytest.raises(BadIndex):
        t.apply_public_update([(99, b"x")])


def test_apply_public_update_idempotent():
    a = tree_with(2, [4, 5, 6])
    updates = [(2, b"a"), (3, b"b"), (5, b"c")]
    a.apply_public_update(updates)
    b = a.copy().apply_public_update(updates)
    assert a.public_state() == b.public_state()


def test_resolution_descends_through_unsealable():
    t = tree_with(2, [4, 5, 6])
    for i in (4, 5, 6):
        t.nodes[i].sealable = True
    t.nodes[2].public_key, t.nodes[2].sealable = b"n2", True
    t.nodes[3].public_key, t.nodes[3].sealable = b"n3", True
    assert t.resolution(2) == [2]
    t.nodes[2].sealable = False
    assert t.resolution(2) == [4, 5]
    assert t.resolution(3) == [3]
    assert t.resolution(1) == [4, 5, 3]


def test_key_counts_at_full_occupancy(group8):
    m = next(iter(group8.members()))
    assert m.tree.public_key_count() == 2 * 8 - 1
    assert m.tree.private_key_count() == 3


def test_dump_is_deterministic(group8):
    views = {m.tree.dump().replace(" priv", "") for m in group8.members()}
    assert len(views) == 1
