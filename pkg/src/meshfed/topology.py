"""Compute-graph construction and queries.

A Topology is a directed multigraph over node ids with a SharingMode per
directed edge; edge (a, b) is a's stance toward b. Absent edges behave as
Block. Values are immutable; overrides produce a new Topology.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

from .core import NodeId, SharingMode


class TopologyError(ValueError):
    pass


class DuplicateNode(TopologyError):
    pass


class HubInLeaves(TopologyError):
    pass


class TooFewNodes(TopologyError):
    pass


class TooManyEdgesRequested(TopologyError):
    pass


class SizeMismatch(TopologyError):
    pass


class UnknownNode(TopologyError):
    pass


@dataclass(frozen=True)
class Topology:
    nodes: frozenset
    edges: MappingProxyType  # (from, to) -> SharingMode

    def __post_init__(self):
        for (a, b), mode in self.edges.items():
            if a == b:
                raise TopologyError("self-edges are not allowed")
            if a not in self.nodes or b not in self.nodes:
                raise TopologyError("edge endpoint outside node set")
            if not isinstance(mode, SharingMode):
                raise TopologyError("edge value must be a SharingMode")

    def mode(self, a: NodeId, b: NodeId) -> SharingMode:
        """a's stance toward b; absent edges are Block."""
        return self.edges.get((a, b), SharingMode.BLOCK)

    def with_edge(self, a: NodeId, b: NodeId, mode: SharingMode) -> "Topology":
        """Override one directed edge; Block removes it."""
        if a not in self.nodes or b not in self.nodes:
            raise UnknownNode("override endpoint not in topology")
        edges = dict(self.edges)
        if mode is SharingMode.BLOCK:
            edges.pop((a, b), None)
        else:
            edges[(a, b)] = mode
        return Topology(self.nodes, MappingProxyType(edges))

    def with_node(self, n: NodeId, attach_peer_to=()) -> "Topology":
        """Add a node, optionally with bidirectional Peer edges to others."""
        if n in self.nodes:
            raise DuplicateNode(f"node {n.short()} already present")
        edges = dict(self.edges)
        for other in attach_peer_to:
            if other not in self.nodes:
                raise UnknownNode("attach target not in topology")
            edges[(n, other)] = SharingMode.PEER
            edges[(other, n)] = SharingMode.PEER
        return Topology(self.nodes | {n}, MappingProxyType(edges))

    def without_node(self, n: NodeId) -> "Topology":
        if n not in self.nodes:
            raise UnknownNode(f"node {n.short()} not in topology")
        edges = {k: v for k, v in self.edges.items() if n not in k}
        return Topology(self.nodes - {n}, MappingProxyType(edges))

    def directed_edge_count(self) -> int:
        return len(self.edges)


def _check_distinct(ids, what="nodes"):
    if len(set(ids)) != len(ids):
        raise DuplicateNode(f"duplicate {what}")


def _from_pairs(nodes, pairs) -> Topology:
    edges = {}
    for a, b in pairs:
        edges[(a, b)] = SharingMode.PEER
        edges[(b, a)] = SharingMode.PEER
    return Topology(frozenset(nodes), MappingProxyType(edges))


def build_star(hub: NodeId, leaves: list) -> Topology:
    """Centralized shape: every leaf exchanges with the hub only."""
    if not leaves:
        raise TooFewNodes("star needs at least one leaf")
    _check_distinct(leaves, "leaves")
    if hub in leaves:
        raise HubInLeaves("hub listed among leaves")
    return _from_pairs([hub, *leaves], [(hub, leaf) for leaf in leaves])


def build_complete(nodes: list) -> Topology:
    """Fully connected: every unordered pair exchanges in both directions."""
    _check_distinct(nodes)
    if len(nodes) < 2:
        raise TooFewNodes("complete graph needs at least 2 nodes")
    pairs = [(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1 :]]
    return _from_pairs(nodes, pairs)


def build_neighborhood(hubs: list, edges_per_leaf: int, leaves: list) -> Topology:
    """Edge devices around a smaller set of interconnected servers.

    Hubs form a complete subgraph. Leaf i connects to edges_per_leaf hubs
    chosen round-robin from the hub list starting at i % len(hubs); the
    assignment is deterministic.
    """
    _check_distinct(list(hubs) + list(leaves))
    if not hubs:
        raise TooFewNodes("neighborhood needs at least one hub")
    if edges_per_leaf < 1:
        raise TopologyError("edges_per_leaf must be positive")
    if edges_per_leaf > len(hubs):
        raise TooManyEdgesRequested(
            f"edges_per_leaf {edges_per_leaf} exceeds hub count {len(hubs)}"
        )
    pairs = [(a, b) for i, a in enumerate(hubs) for b in hubs[i + 1 :]]
    for idx, leaf in enumerate(leaves):
        for j in range(edges_per_leaf):
            pairs.append((leaf, hubs[(idx + j) % len(hubs)]))
    return _from_pairs(list(hubs) + list(leaves), pairs)


def build_grid(rows: int, cols: int, nodes: list) -> Topology:
    """Row-major grid with 4-neighbor links, no wraparound."""
    if rows < 1 or cols < 1:
        raise TopologyError("rows and cols must be positive")
    if len(nodes) != rows * cols:
        raise SizeMismatch(f"grid {rows}x{cols} needs {rows * cols} nodes, got {len(nodes)}")
    _check_distinct(nodes)
    pairs = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                pairs.append((nodes[i], nodes[i + 1]))
            if r + 1 < rows:
                pairs.append((nodes[i], nodes[i + cols]))
    return _from_pairs(nodes, pairs)


def neighbors(t: Topology, n: NodeId, direction: str = "outbound") -> list:
    """Non-Block neighbors of n with their edge modes, ordered by id bytes.

    direction "outbound" lists edges n->x (n's stance toward x);
    "inbound" lists x->n.
    """
    if n not in t.nodes:
        raise UnknownNode(f"node {n.short()} not in topology")
    if direction not in ("outbound", "inbound"):
        raise ValueError(f"direction must be outbound or inbound, got {direction!r}")
    out = []
    for (a, b), mode in t.edges.items():
        if mode is SharingMode.BLOCK:
            continue
        if direction == "outbound" and a == n:
            out.append((b, mode))
        elif direction == "inbound" and b == n:
            out.append((a, mode))
    out.sort(key=lambda pair: pair[0].value)
    return out
