"""Namespace-scoped peer membership: announcements, heartbeats, expiry.

A PeerTable is owned by exactly one node runtime and mutated only on that
node's event loop; snapshots may be copied out for metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import Namespace, NodeId, SharingMode
from .wire import Message, MessageKind


@dataclass
class PeerRecord:
    id: NodeId
    namespace: Namespace
    address: str
    advertised_mode: SharingMode
    last_seen: float

    def age(self, now: float) -> float:
        return now - self.last_seen


@dataclass
class PeerTable:
    """Liveness-tracked membership for one namespace.

    A record expires once its age exceeds heartbeat_interval * ttl_multiplier.
    Heartbeats from senders we have never seen announce are counted but not
    applied: without an ANNOUNCE there is no address to reach them at.
    """

    namespace: Namespace
    heartbeat_interval: float = 1.0
    ttl_multiplier: int = 3
    records: dict = field(default_factory=dict)
    namespace_mismatches: int = 0
    unknown_heartbeats: int = 0

    def __post_init__(self):
        if self.ttl_multiplier < 1:
            raise ValueError("ttl_multiplier must be a positive integer")
        if self.heartbeat_interval <= 0:
            raise ValueError("heartbeat_interval must be positive")

    @property
    def ttl(self) -> float:
        return self.heartbeat_interval * self.ttl_multiplier

    def remove(self, node_id: NodeId) -> bool:
        return self.records.pop(node_id, None) is not None

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self.records

    def __len__(self) -> int:
        return len(self.records)


def on_announce(table: PeerTable, msg: Message, now: float) -> PeerTable:
    """Apply an ANNOUNCE or HEARTBEAT to the table.

    ANNOUNCE inserts or refreshes the full record (mode and address update);
    HEARTBEAT only refreshes last_seen. Foreign-namespace traffic is counted
    and ignored; multiple communities may share a transport.
    """
    if msg.kind not in (MessageKind.ANNOUNCE, MessageKind.HEARTBEAT):
        raise ValueError(f"not a membership message: {msg.kind.name}")
    if msg.namespace != table.namespace:
        table.namespace_mismatches += 1
        return table
    rec = table.records.get(msg.sender)
    if msg.kind is MessageKind.ANNOUNCE:
        if rec is None:
            table.records[msg.sender] = PeerRecord(
                id=msg.sender,
                namespace=msg.namespace,
                address=msg.body.address,
                advertised_mode=msg.body.mode,
                last_seen=now,
            )
        else:
            rec.address = msg.body.address
            rec.advertised_mode = msg.body.mode
            rec.last_seen = max(rec.last_seen, now)
    else:
        if rec is None:
            table.unknown_heartbeats += 1
        else:
            rec.last_seen = max(rec.last_seen, now)
    return table


def sweep_expired(table: PeerTable, now: float) -> tuple[PeerTable, list[NodeId]]:
    """Drop every record older than the TTL; returns the expelled ids."""
    expelled = [nid for nid, rec in table.records.items() if rec.age(now) > table.ttl]
    for nid in expelled:
        del table.records[nid]
    return table, sorted(expelled)


def alive_peers(table: PeerTable) -> list[PeerRecord]:
    """Current records in deterministic order (by id bytes)."""
    return [table.records[nid] for nid in sorted(table.records)]
