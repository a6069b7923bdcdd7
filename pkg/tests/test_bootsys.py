import random

import pytest

from chanos import bootsys
from chanos.fabric import Engine
from chanos.words import encode_port_id

from conftest import (ROM, bfs_distances, boot_topology, random_topology,
                      topology_oracle)


def test_single_processor_boots_alone():
    eng = boot_topology([], 1)
    assert eng.enumerated == [8]
    assert eng.processors[0].table == {8: "LOCAL"}
    assert eng.processors[0].boot_receipts == 0
    assert eng.balance_history == [(8, 0)]


def test_two_processors_single_link():
    eng = boot_topology([(0, 0, 1, 2)], 2)
    assert eng.enumerated == [8, 9]
    a, b = eng.processors
    assert a.table == {8: "LOCAL", 9: 0}
    assert b.table == {9: "LOCAL", 8: 2}
    assert [bal for _, bal in eng.balance_history] == [0, 0]


def test_torus_2x2_boot_exactly_once_with_discards():
    from chanos.cli import torus_links
    eng = boot_topology(torus_links(2, 2), 4)
    assert all(p.booted for p in eng.processors)
    assert sorted(eng.enumerated) == [8, 9, 10, 11]
    # every processor has degree 4, so 16 images travel; 3 boot a processor
    receipts = sum(p.boot_receipts for p in eng.processors)
    discards = sum(p.boot_discards for p in eng.processors)
    assert receipts == 16
    assert discards == receipts - 3
    assert discards > 0


def test_torus_4x4_all_sixteen_boot():
    from chanos.cli import torus_links
    eng = boot_topology(torus_links(4, 4), 16)
    assert sum(p.booted for p in eng.processors) == 16
    assert sorted(eng.enumerated) == list(range(8, 24))


def test_enumeration_numbers_contiguous_from_8():
    rng = random.Random(7)
    links = random_topology(rng, 9)
    eng = boot_topology(links, 9)
    numbers = sorted(p.number for p in eng.processors)
    assert numbers == list(range(8, 17))
    assert eng.enumerated[0] == 8
    assert sorted(eng.enumerated) == numbers


def test_every_processor_reaches_every_other():
    rng = random.Random(21)
    links = random_topology(rng, 6)
    eng = boot_topology(links, 6)
    for p in eng.processors:
        for q in eng.processors:
            assert q.number in p.table, (p.number, q.number)
    # follow tables hop by hop
    adj, peer = topology_oracle(eng)
    for p in eng.processors:
        for q in eng.processors:
            cur = p.number
            hops = 0
            while cur != q.number:
                entry = eng.proc_by_number[cur].table[q.number]
                assert entry != "LOCAL"
                cur = peer[(cur, entry)]
                hops += 1
                assert hops <= len(eng.processors)


def test_routing_tables_bfs_optimal_random_topologies():
    rng = random.Random(1234)
    for trial in range(12):
        n = rng.randrange(2, 17)
        links = random_topology(rng, n)
        eng = boot_topology(links, n)
        adj, peer = topology_oracle(eng)
        dist = {s: bfs_distances(adj, s) for s in adj}
        for p in eng.processors:
            s = p.number
            for d, entry in p.table.items():
                if entry == "LOCAL":
                    assert d == s
                    continue
                nxt = peer[(s, entry)]
                assert dist[nxt][d] == dist[s][d] - 1, \
                    f"trial {trial}: {s}->{d} via {nxt} not on a shortest path"
        assert all(b == 0 for _, b in eng.balance_history)
        assert eng.establish_in_flight == 0


def test_balance_credits_on_four_connected_grid():
    # On a fully 4-connected torus every improving receiver credits +3 and
    # every non-improving receipt debits 1; the trace must cancel exactly.
    from chanos.cli import torus_links
    eng = boot_topology(torus_links(4, 4), 16)
    assert len(eng.balance_history) == 16
    assert all(b == 0 for _, b in eng.balance_history)


def test_reinit_reproducible():
    rng = random.Random(99)
    links = random_topology(rng, 8)

    def snapshot():
        eng = boot_topology(links, 8)
        return ([p.number for p in eng.processors],
                [dict(p.table) for p in eng.processors])

    assert snapshot() == snapshot()


def test_routine_operation_layout():
    from chanos.cli import torus_links
    eng = boot_topology(torus_links(2, 2), 4)
    first = eng.proc_by_number[8]
    names = {i: (c.record.name if c.record else None)
             for i, c in enumerate(first.nodes[0].cores)}
    assert names[1] == "console"
    assert names[2] == "dispatcher"
    assert names[3] == "loader"
    assert names[4] == "fileserver"
    assert names[0] is None  # boot stopped, no scheduler on the first node
    schedulers = 0
    for p in eng.processors:
        for node in p.nodes:
            rec = node.cores[0].record
            if rec is not None and rec.name == "scheduler":
                schedulers += 1
    assert schedulers == 15  # 16 nodes minus the first


def test_missing_route_is_a_fault_not_a_hang():
    # Circuits require tables; init-phase traffic never uses them, so a
    # connect toward an unknown processor faults the offending process.
    from chanos.fabric import Connect, Send
    from chanos.words import END

    def bad(ctx):
        yield Connect(1, encode_port_id(0, 99, 0, 0, 0))
        yield Send(1, 1)

    eng = boot_topology([(0, 0, 1, 2)], 2)
    eng.spawn_system(0, 1, 1, bad, "bad")
    assert eng.run(2_000_000)
    assert not eng.processors[0].nodes[1].cores[1].alive
