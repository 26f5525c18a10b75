import pytest

from meshfed.core import Namespace, NodeId, SharingMode
from meshfed import wire
from meshfed.discovery import PeerTable, alive_peers, on_announce, sweep_expired

NS = Namespace("net")


def nid(i):
    return NodeId(bytes([i] * 16))


def ann(i, mode=SharingMode.PEER, ns=NS, addr=None):
    return wire.announce(nid(i), ns, mode, addr if addr is not None else f"mem://{i}")


def hb(i, ns=NS):
    return wire.heartbeat(nid(i), ns)


def table(interval=1.0, ttl=3):
    return PeerTable(namespace=NS, heartbeat_interval=interval, ttl_multiplier=ttl)


class TestOnAnnounce:
    def test_unknown_sender_announce_inserts(self):
        t = table()
        on_announce(t, ann(1), now=0.0)
        assert len(t) == 1
        assert t.records[nid(1)].address == "mem://1"

    def test_heartbeat_refreshes_last_seen(self):
        t = table()
        on_announce(t, ann(1), now=1.0)
        on_announce(t, hb(1), now=2.0)
        assert t.records[nid(1)].last_seen == 2.0

    def test_foreign_namespace_counted_not_applied(self):
        t = table()
        on_announce(t, ann(1, ns=Namespace("other")), now=0.0)
        assert len(t) == 0
        assert t.namespace_mismatches == 1

    def test_announce_updates_mode_heartbeat_preserves(self):
        t = table()
        on_announce(t, ann(1, SharingMode.LEECH), now=0.0)
        on_announce(t, hb(1), now=1.0)
        assert t.records[nid(1)].advertised_mode is SharingMode.LEECH
        on_announce(t, ann(1, SharingMode.PEER), now=2.0)
        assert t.records[nid(1)].advertised_mode is SharingMode.PEER

    def test_heartbeat_from_unknown_sender_is_counted(self):
        t = table()
        on_announce(t, hb(9), now=0.0)
        assert len(t) == 0
        assert t.unknown_heartbeats == 1

    def test_last_seen_never_decreases(self):
        t = table()
        on_announce(t, ann(1), now=5.0)
        on_announce(t, hb(1), now=3.0)  # late-arriving older beat
        assert t.records[nid(1)].last_seen == 5.0

    def test_wrong_kind_rejected(self):
        t = table()
        with pytest.raises(ValueError):
            on_announce(t, wire.goodbye(nid(1), NS), now=0.0)


class TestSweepExpired:
    def test_fresh_records_survive(self):
        t = table()
        on_announce(t, ann(1), now=0.0)
        _, expelled = sweep_expired(t, now=3.0)  # age == ttl, not over it
        assert expelled == []
        assert len(t) == 1

    def test_aged_record_expelled(self):
        t = table(interval=1.0, ttl=3)
        on_announce(t, ann(1), now=0.0)
        _, expelled = sweep_expired(t, now=4.0)  # age 4 > 3
        assert expelled == [nid(1)]
        assert len(t) == 0

    def test_empty_table(self):
        _, expelled = sweep_expired(table(), now=100.0)
        assert expelled == []


class TestAlivePeers:
    def test_sorted_by_id_bytes(self):
        t = table()
        on_announce(t, ann(2), now=0.0)
        on_announce(t, ann(1), now=0.0)
        assert [r.id for r in alive_peers(t)] == [nid(1), nid(2)]

    def test_empty(self):
        assert alive_peers(table()) == []

    def test_after_sweep(self):
        t = table()
        on_announce(t, ann(1), now=0.0)
        sweep_expired(t, now=10.0)
        assert alive_peers(t) == []


class TestLivenessProperties:
    def test_steady_heartbeats_never_expelled(self):
        t = table(interval=1.0, ttl=3)
        on_announce(t, ann(1), now=0.0)
        for tick in range(1, 1001):
            on_announce(t, hb(1), now=float(tick))
            _, expelled = sweep_expired(t, now=float(tick))
            assert expelled == []
        assert nid(1) in t

    def test_silent_peer_expelled_within_ttl_plus_one(self):
        t = table(interval=1.0, ttl=3)
        on_announce(t, ann(1), now=0.0)
        gone_at = None
        for tick in range(1, 10):
            _, expelled = sweep_expired(t, now=float(tick))
            if expelled:
                gone_at = tick
                break
        assert gone_at is not None and gone_at <= 4  # ttl_multiplier + 1

    def test_reannounce_after_expiry_readmits(self):
        t = table()
        on_announce(t, ann(1, SharingMode.LEECH), now=0.0)
        sweep_expired(t, now=10.0)
        assert nid(1) not in t
        on_announce(t, ann(1, SharingMode.PEER, addr="mem://new"), now=10.0)
        rec = t.records[nid(1)]
        assert rec.address == "mem://new"
        assert rec.advertised_mode is SharingMode.PEER
        assert rec.last_seen == 10.0
