import random
from collections import deque

import pytest

from chanos import bootsys, cli
from chanos.fabric import Connect, Engine, Idle, Send, Wait, EventGuard, WORD, ENDK
from chanos.words import END, encode_port_id

ROM = tuple(ord(c) for c in "test boot image")
FOX = "The quick brown fox jumps over the lazy dog."


@pytest.fixture
def machine_dir(tmp_path):
    files = tmp_path / "files"
    cli.install_default_files(str(files))
    (files / "fox.text").write_text(FOX)
    rom = tmp_path / "boot.rom"
    cli.write_boot_rom(str(rom))
    return {"files": str(files), "rom": str(rom), "tmp": tmp_path}


def boot_config(machine_dir, processors=4, **kw):
    return cli.default_config(machine_dir["files"], machine_dir["rom"],
                              processors=processors, **kw)


def run_script(machine_dir, lines, processors=4, **kw):
    cfg = boot_config(machine_dir, processors=processors, **kw)
    return cli.run_machine(cfg, script=lines)


# ---------------------------------------------------------------------------
# Topology generation and the independent BFS oracle.

def random_topology(rng, n):
    """Random connected multigraph, every processor using at most 4 links."""
    free = {i: [0, 1, 2, 3] for i in range(n)}
    for slots in free.values():
        rng.shuffle(slots)
    links = []
    order = list(range(1, n))
    rng.shuffle(order)
    attached = [0]
    for node in order:
        # attach to somebody already connected that still has a free slot
        candidates = [a for a in attached if free[a]]
        a = rng.choice(candidates)
        links.append((a, free[a].pop(), node, free[node].pop()))
        attached.append(node)
    # extra edges while slots remain, with some probability
    for _ in range(n):
        have = [i for i in range(n) if free[i]]
        if len(have) < 2:
            break
        a, b = rng.sample(have, 2)
        if rng.random() < 0.6:
            links.append((a, free[a].pop(), b, free[b].pop()))
    return links


def bfs_distances(adj, src):
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def topology_oracle(eng):
    """Adjacency over assigned numbers plus link->peer resolution."""
    adj = {p.number: set() for p in eng.processors}
    peer = {}
    for link in eng.links:
        if link.b is None:
            continue
        a, b = link.a.number, link.b.number
        adj[a].add(b)
        adj[b].add(a)
        peer[(a, link.a_index)] = b
        peer[(b, link.b_index)] = a
    return adj, peer


def boot_topology(links, n, max_ticks=2_000_000):
    eng = Engine(n)
    for quad in links:
        eng.wire_link(*quad)
    bootsys.install(eng)
    bootsys.start_first(eng, ROM)
    assert eng.run(max_ticks), eng.quiescence_report()
    return eng


# ---------------------------------------------------------------------------
# Bare-fabric harness for driving a single tool through real negotiation.

def run_tool(behavior, inputs, dimension=0, n_out=1, n_in=None,
             sink_delay=0, capacity=8):
    """Runs one tool against in-memory streams; returns its output streams.

    `inputs` lists the streams in consumption order (first-consumed first).
    """
    if n_in is None:
        n_in = len(inputs)
    eng = Engine(1, capacity=capacity)
    proc = eng.processors[0]
    proc.number = 8
    proc.booted = True
    eng.proc_by_number[8] = proc
    outs = [[] for _ in range(n_out)]
    done = []

    def sink(ctx, out):
        while True:
            for _ in range(sink_delay):
                yield Idle()
            _, tok = yield ctx.wait(1)
            if tok is END:
                return
            out.append(tok)

    def driver(ctx):
        CMD = 1
        yield Connect(CMD, encode_port_id(0, 8, 0, 2, 0))  # tool ctrl
        yield Send(CMD, ctx.port_word(CMD))
        _, n = yield ctx.wait(CMD)
        assert n == n_out, f"announced {n} outputs, expected {n_out}"
        for k in range(n):
            yield Send(CMD, encode_port_id(0, 8, 0, 4 + k, 1))
        _, n = yield ctx.wait(CMD)
        assert n == n_in, f"announced {n} inputs, expected {n_in}"
        ins = []
        for _ in range(n):
            _, w = yield ctx.wait(CMD)
            assert w is not END
            ins.append(w)
        _, fin = yield ctx.wait(CMD)
        assert fin is END
        yield Send(CMD, END)
        # announced order is reverse consumption order
        for stream, dest in zip(inputs, reversed(ins)):
            yield Connect(CMD, dest)
            for w in stream:
                yield Send(CMD, w)
            yield Send(CMD, END)
        done.append(True)

    node = proc.nodes[0]
    eng.spawn_system(proc, 0, 2, behavior, "tool")
    node.cores[2].ctx.privileged = False  # tools run unprivileged
    node.cores[2].ctx.dimension = dimension
    for k in range(n_out):
        eng.spawn_system(proc, 0, 4 + k, sink, "sink", args=(outs[k],))
    eng.spawn_system(proc, 0, 3, driver, "driver")
    assert eng.run(1_000_000), eng.quiescence_report()
    assert done, "driver did not finish negotiation"
    return outs
