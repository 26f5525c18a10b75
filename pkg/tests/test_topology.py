from collections import Counter

import pytest

from meshfed.core import NodeId, SharingMode
from meshfed.topology import (
    DuplicateNode,
    HubInLeaves,
    SizeMismatch,
    TooFewNodes,
    TooManyEdgesRequested,
    UnknownNode,
    build_complete,
    build_grid,
    build_neighborhood,
    build_star,
    neighbors,
)


def ids(n):
    return [NodeId(bytes([i] * 16)) for i in range(n)]


def out_degrees(t):
    return Counter(a for (a, _b) in t.edges)


class TestStar:
    def test_hub_and_four_leaves(self):
        ns = ids(5)
        t = build_star(ns[0], ns[1:])
        assert t.directed_edge_count() == 8
        assert out_degrees(t)[ns[0]] == 4
        assert all(t.mode(leaf, ns[0]) is SharingMode.PEER for leaf in ns[1:])
        # no leaf-leaf edges
        assert t.mode(ns[1], ns[2]) is SharingMode.BLOCK

    def test_minimal(self):
        ns = ids(2)
        t = build_star(ns[0], [ns[1]])
        assert t.directed_edge_count() == 2

    def test_hub_in_leaves(self):
        ns = ids(3)
        with pytest.raises(HubInLeaves):
            build_star(ns[0], [ns[1], ns[0]])

    def test_duplicate_leaves(self):
        ns = ids(3)
        with pytest.raises(DuplicateNode):
            build_star(ns[0], [ns[1], ns[1]])

    def test_no_leaves(self):
        with pytest.raises(TooFewNodes):
            build_star(ids(1)[0], [])


class TestComplete:
    def test_four_nodes_twelve_edges(self):
        t = build_complete(ids(4))
        assert t.directed_edge_count() == 12

    def test_two_nodes(self):
        assert build_complete(ids(2)).directed_edge_count() == 2

    def test_one_node_rejected(self):
        with pytest.raises(TooFewNodes):
            build_complete(ids(1))

    def test_duplicates_rejected(self):
        ns = ids(2)
        with pytest.raises(DuplicateNode):
            build_complete([ns[0], ns[0], ns[1]])


class TestNeighborhood:
    def test_round_robin_assignment(self):
        hubs = ids(2)
        leaves = [NodeId(bytes([100 + i] * 16)) for i in range(4)]
        t = build_neighborhood(hubs, 1, leaves)
        # hubs interconnect
        assert t.mode(hubs[0], hubs[1]) is SharingMode.PEER
        # leaves alternate: 0->hub0, 1->hub1, 2->hub0, 3->hub1
        assert t.mode(leaves[0], hubs[0]) is SharingMode.PEER
        assert t.mode(leaves[1], hubs[1]) is SharingMode.PEER
        assert t.mode(leaves[2], hubs[0]) is SharingMode.PEER
        assert t.mode(leaves[3], hubs[1]) is SharingMode.PEER
        assert t.mode(leaves[0], hubs[1]) is SharingMode.BLOCK

    def test_saturated_leaf(self):
        hubs = ids(3)
        leaf = NodeId(bytes([99] * 16))
        t = build_neighborhood(hubs, 3, [leaf])
        assert all(t.mode(leaf, h) is SharingMode.PEER for h in hubs)

    def test_too_many_edges(self):
        with pytest.raises(TooManyEdgesRequested):
            build_neighborhood(ids(3), 4, [NodeId(bytes([99] * 16))])


class TestGrid:
    def test_3x3_degrees(self):
        ns = ids(9)
        t = build_grid(3, 3, ns)
        deg = out_degrees(t)
        # corners 2, edge cells 3, center 4
        assert deg[ns[0]] == deg[ns[2]] == deg[ns[6]] == deg[ns[8]] == 2
        assert deg[ns[1]] == deg[ns[3]] == deg[ns[5]] == deg[ns[7]] == 3
        assert deg[ns[4]] == 4

    def test_1x5_is_path(self):
        ns = ids(5)
        t = build_grid(1, 5, ns)
        deg = out_degrees(t)
        assert deg[ns[0]] == deg[ns[4]] == 1
        assert deg[ns[1]] == deg[ns[2]] == deg[ns[3]] == 2

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            build_grid(2, 2, ids(6))


class TestDegreeSequencesExhaustive:
    """Builder degree sequences vs closed forms, all sizes up to 10x10."""

    def test_complete(self):
        for n in range(2, 11):
            deg = out_degrees(build_complete(ids(n)))
            assert all(deg[x] == n - 1 for x in ids(n))

    def test_star(self):
        for n_leaves in range(1, 10):
            ns = ids(n_leaves + 1)
            deg = out_degrees(build_star(ns[0], ns[1:]))
            assert deg[ns[0]] == n_leaves
            assert all(deg[leaf] == 1 for leaf in ns[1:])

    def test_grid(self):
        for rows in range(1, 11):
            for cols in range(1, 11):
                ns = [NodeId(bytes([r, c] * 8)) for r in range(rows) for c in range(cols)]
                deg = out_degrees(build_grid(rows, cols, ns))
                for r in range(rows):
                    for c in range(cols):
                        expected = sum(
                            1
                            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                            if 0 <= rr < rows and 0 <= cc < cols
                        )
                        assert deg[ns[r * cols + c]] == expected

    def test_neighborhood(self):
        for n_hubs in range(1, 5):
            for epl in range(1, n_hubs + 1):
                for n_leaves in range(0, 8):
                    hubs = ids(n_hubs)
                    leaves = [NodeId(bytes([50 + i] * 16)) for i in range(n_leaves)]
                    deg = out_degrees(build_neighborhood(hubs, epl, leaves))
                    expected_hub_leaves = Counter()
                    for i in range(n_leaves):
                        for j in range(epl):
                            expected_hub_leaves[(i + j) % n_hubs] += 1
                    for h_idx, hub in enumerate(hubs):
                        assert deg[hub] == (n_hubs - 1) + expected_hub_leaves[h_idx]
                    for leaf in leaves:
                        assert deg[leaf] == epl


class TestNeighbors:
    def test_star_hub_outbound(self):
        ns = ids(5)
        t = build_star(ns[0], ns[1:])
        out = neighbors(t, ns[0], "outbound")
        assert [x for x, _ in out] == sorted(ns[1:], key=lambda n: n.value)
        assert all(mode is SharingMode.PEER for _, mode in out)

    def test_isolated_node(self):
        ns = ids(3)
        t = build_complete(ns[:2]).with_node(ns[2])
        assert neighbors(t, ns[2], "outbound") == []
        assert neighbors(t, ns[2], "inbound") == []

    def test_unknown_node(self):
        t = build_complete(ids(2))
        with pytest.raises(UnknownNode):
            neighbors(t, NodeId(bytes([77] * 16)), "outbound")

    def test_block_excluded_and_override_reflected(self):
        ns = ids(3)
        t = build_complete(ns)
        t2 = t.with_edge(ns[0], ns[1], SharingMode.SEED)
        assert dict(neighbors(t2, ns[0], "outbound"))[ns[1]] is SharingMode.SEED
        t3 = t2.with_edge(ns[0], ns[1], SharingMode.BLOCK)
        assert ns[1] not in dict(neighbors(t3, ns[0], "outbound"))
        # Block override equals edge removal
        assert (ns[0], ns[1]) not in t3.edges
        # reverse direction untouched
        assert t3.mode(ns[1], ns[0]) is SharingMode.PEER

    def test_inbound_vs_outbound_after_override(self):
        ns = ids(2)
        t = build_complete(ns).with_edge(ns[0], ns[1], SharingMode.SEED)
        assert dict(neighbors(t, ns[1], "inbound"))[ns[0]] is SharingMode.SEED
        assert dict(neighbors(t, ns[1], "outbound"))[ns[0]] is SharingMode.PEER


class TestDeterminism:
    def test_builders_deterministic(self):
        ns = ids(9)
        for build in (
            lambda: build_complete(ns),
            lambda: build_star(ns[0], ns[1:]),
            lambda: build_grid(3, 3, ns),
            lambda: build_neighborhood(ns[:2], 2, ns[2:]),
        ):
            a, b = build(), build()
            assert a.nodes == b.nodes
            assert dict(a.edges) == dict(b.edges)
