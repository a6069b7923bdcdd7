"""Deterministic discrete-event engine for the multinode channel machine.

A machine is a row of processors, each with four nodes of eight cores and a
switch with four external links.  Processes are Python generators yielding
effect objects (Wait, Send, Connect, ...); the engine drives every runnable
core in a fixed round-robin order, one effect per step, so a full run is
reproducible bit for bit.

Channels are circuit style: a connection opens with a two-word header
(destination, source), streams tokens in order, and closes with END.  A
destination port serializes concurrent connections message-wise.  Senders
block while more than `capacity` tokens are unconsumed downstream.  Inter-
processor circuits lock every link on their path (wormhole head acquisition)
and release at END; links otherwise move one item per direction per step.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import deque
from typing import NamedTuple

from .runtime import (CORES_PER_NODE, MemoryLedger, ProcessRecord,
                      ProgramRegistry)
from .words import (END, FIRST_PROCESSOR, WORD_MASK, decode_port_id,
                    encode_port_id)

NODES_PER_PROC = 4
LINKS_PER_PROC = 4
DEFAULT_CAPACITY = 8
LOCAL = "LOCAL"

# Guard kinds.
WORD = "word"
ENDK = "end"

# Frame kinds on the init-phase link protocol (see bootsys).
FR_BOOT = 1

_HOP_LIMIT = 64
_FEED_HIGH_WATER_FACTOR = 16


class SimFault(Exception):
    """A process violated channel discipline; the process aborts."""


class EngineInvariant(Exception):
    """The engine caught itself in an inconsistent state."""


class EventGuard(NamedTuple):
    """One awaited event: a port and the token kind that satisfies it."""

    port: int
    kind: str
    label: str = ""


# ---------------------------------------------------------------------------
# Effects yielded by process behaviors.

class Wait(NamedTuple):
    guards: tuple


class Send(NamedTuple):
    port: int
    token: object


class Connect(NamedTuple):
    port: int
    dest: int


class Poll(NamedTuple):
    """Non-blocking input readiness check; resumes with True/False."""

    port: int


class Idle(NamedTuple):
    """Burn one instruction doing nothing."""


# System effects, available to privileged behaviors only.

class SendFrame(NamedTuple):
    link: int
    frame: tuple


class InstallRoute(NamedTuple):
    processor: int
    link: object  # link index or LOCAL


class HostWrite(NamedTuple):
    word: int


class KillProcess(NamedTuple):
    node: int
    core: int


class SpawnSystem(NamedTuple):
    node: int
    core: int
    behavior: object
    name: str
    feed_link: object = None
    defer: bool = False
    args: tuple = ()


# ---------------------------------------------------------------------------
# Channel machinery.

class Connection:
    """One open circuit from a source port toward a destination port."""

    __slots__ = ("seq", "src_word", "dest_word", "queue", "pre", "sent",
                 "consumed", "closed", "dead", "void", "established", "path",
                 "next_arrival", "acquired", "sender_core", "dest_core",
                 "dest_gen", "dest_port", "egress", "egress_buf", "feed")

    def __init__(self, seq, src_word, dest_word, sender_core=None):
        self.seq = seq
        self.src_word = src_word
        self.dest_word = dest_word
        self.queue = deque()
        self.pre = deque()
        self.sent = 0
        self.consumed = 0
        self.closed = False
        self.dead = False
        self.void = False
        self.established = False
        self.path = ()
        self.next_arrival = 0
        self.acquired = 0
        self.sender_core = sender_core
        self.dest_core = None
        self.dest_gen = 0
        self.dest_port = None
        self.egress = None
        self.egress_buf = None
        self.feed = False


class Port:
    """A channel endpoint: inbound message queue plus one outbound circuit."""

    __slots__ = ("core", "index", "conns", "out_dest", "out_conn", "last_src")

    def __init__(self, core, index):
        self.core = core
        self.index = index
        self.conns = deque()
        self.out_dest = None
        self.out_conn = None
        self.last_src = 0

    def head(self):
        if self.conns:
            q = self.conns[0].queue
            if q:
                return q[0]
        return None


class LinkDir:
    """One direction of an external link: FIFO of frames and circuit heads."""

    __slots__ = ("link", "far_proc", "far_index", "pending", "holder")

    def __init__(self, link, far_proc, far_index):
        self.link = link
        self.far_proc = far_proc
        self.far_index = far_index
        self.pending = deque()
        self.holder = None


class Link:
    """External link between two processors (or dangling/socket-backed)."""

    __slots__ = ("a", "a_index", "b", "b_index", "dirs", "adapter")

    def __init__(self):
        self.a = self.b = None
        self.a_index = self.b_index = 0
        self.dirs = {}
        self.adapter = None


class Core:
    __slots__ = ("node", "index", "sort_key", "generation", "gen", "pending",
                 "record", "ports", "ctx", "alive")

    def __init__(self, node, index):
        self.node = node
        self.index = index
        self.sort_key = (node.processor.index, node.index, index)
        self.generation = 0
        self.gen = None
        self.pending = None
        self.record = None
        self.ports = {}
        self.ctx = None
        self.alive = False

    def port(self, idx):
        p = self.ports.get(idx)
        if p is None:
            p = self.ports[idx] = Port(self, idx)
        return p


class Node:
    __slots__ = ("processor", "index", "cores", "ledger", "c_total")

    def __init__(self, processor, index):
        self.processor = processor
        self.index = index
        self.cores = [Core(self, i) for i in range(CORES_PER_NODE)]
        self.ledger = MemoryLedger()
        self.c_total = 0


class Processor:
    """One chip: four nodes, a switch with routing table, four links."""

    __slots__ = ("engine", "index", "number", "booted", "transitioned",
                 "nodes", "links", "table", "best_hops", "link_feeds",
                 "boot_discards", "boot_receipts")

    def __init__(self, engine, index):
        self.engine = engine
        self.index = index
        self.number = None
        self.booted = False
        self.transitioned = False
        self.nodes = [Node(self, i) for i in range(NODES_PER_PROC)]
        self.links = [None] * LINKS_PER_PROC
        self.table = {}
        self.best_hops = {}
        self.link_feeds = {}
        self.boot_discards = 0
        self.boot_receipts = 0

    def link_connected(self, idx) -> bool:
        link = self.links[idx]
        return link is not None and (link.adapter is not None or
                                     link.dirs.get(id(self)) is not None)

    def connected_links(self):
        return [i for i in range(LINKS_PER_PROC) if self.link_connected(i)]

    def route_step(self, dest_word):
        """Switch decision for a routed header: LOCAL delivery or a link."""
        pid = decode_port_id(dest_word)
        if self.number is not None and pid.processor == self.number:
            return LOCAL
        return self.table.get(pid.processor)

    def port_word(self, node, core, local_port, privileged=0):
        number = self.number if self.number is not None else FIRST_PROCESSOR
        return encode_port_id(privileged, number, node, core, local_port)


# ---------------------------------------------------------------------------
# Behavior-side context and helpers.

class Ctx:
    """What a running process sees of the machine.

    User behaviors use only the effect builders and port-word queries; the
    node/engine accessors are reserved for system processes (the scheduler
    owns its node's ledger, boot owns initialization).
    """

    __slots__ = ("engine", "core", "name", "dimension", "privileged", "args")

    def __init__(self, engine, core, name, dimension, privileged, args=()):
        self.engine = engine
        self.core = core
        self.name = name
        self.dimension = dimension
        self.privileged = privileged
        self.args = args

    def port_word(self, idx) -> int:
        node = self.core.node
        return node.processor.port_word(node.index, self.core.index, idx,
                                        1 if self.privileged else 0)

    def wait(self, port, label="") -> Wait:
        """Wait for a word or END on one port."""
        return Wait((EventGuard(port, WORD, label), EventGuard(port, ENDK, label)))

    def last_source(self, port) -> int:
        return self.core.port(port).last_src

    @property
    def processor_number(self):
        return self.core.node.processor.number

    @property
    def node_index(self):
        return self.core.node.index

    @property
    def core_index(self):
        return self.core.index

    @property
    def processor_count(self):
        return len(self.engine.processors)

    # System-process surface.

    @property
    def node(self):
        if not self.privileged:
            raise SimFault("node access from unprivileged process")
        return self.core.node

    @property
    def processor(self):
        if not self.privileged:
            raise SimFault("processor access from unprivileged process")
        return self.core.node.processor

    def clock(self):
        node = self.core.node
        return self.engine.now & WORD_MASK, node.c_total & WORD_MASK


def recv_token(ctx, port):
    _, tok = yield ctx.wait(port)
    return tok


def recv_message(ctx, port):
    """Consume one whole message (through END); returns its data words."""
    words = []
    while True:
        _, tok = yield ctx.wait(port)
        if tok is END:
            return words
        words.append(tok)


def send_message(ctx, port, words):
    for w in words:
        yield Send(port, w)
    yield Send(port, END)


# ---------------------------------------------------------------------------
# The engine.

class Engine:
    def __init__(self, n_processors, capacity=DEFAULT_CAPACITY, trace=False,
                 registry=None, files_dir=None):
        self.processors = [Processor(self, i) for i in range(n_processors)]
        self.capacity = capacity
        self.registry = registry or ProgramRegistry()
        self.files_dir = files_dir
        self.now = 0
        self.active = set()
        self.wire = []
        self.links = []
        self.linkdirs = []
        self.deferred = []
        self.proc_by_number = {}
        self.boot_hook = None
        self.console_write = None
        self.console_feed = None
        self.console_out = []
        self._seq = 0
        # Accounting for conservation and lifecycle checks.
        self.tokens_sent = 0
        self.tokens_delivered = 0
        self.tokens_dropped = 0
        self.frames_dropped = 0
        self.spawn_count = 0
        self.exception_count = 0
        self.establish_in_flight = 0
        self.flood_balance = 0
        self.flood_origin_done = False
        self.balance_history = []
        self.init_failed = False
        self.trace = trace
        self.trace_events = []
        self._hasher = hashlib.blake2b(digest_size=16) if trace else None

    # -- wiring ------------------------------------------------------------

    def wire_link(self, ia, la, ib, lb):
        pa, pb = self.processors[ia], self.processors[ib]
        if pa.links[la] is not None or pb.links[lb] is not None:
            raise EngineInvariant(f"link endpoint reused: {ia}.{la}/{ib}.{lb}")
        link = Link()
        link.a, link.a_index, link.b, link.b_index = pa, la, pb, lb
        link.dirs[id(pa)] = LinkDir(link, pb, lb)
        link.dirs[id(pb)] = LinkDir(link, pa, la)
        pa.links[la] = link
        pb.links[lb] = link
        self.links.append(link)
        self.linkdirs.extend([link.dirs[id(pa)], link.dirs[id(pb)]])

    def attach_external(self, ia, la, adapter):
        pa = self.processors[ia]
        if pa.links[la] is not None:
            raise EngineInvariant(f"link endpoint reused: {ia}.{la}")
        link = Link()
        link.a, link.a_index = pa, la
        link.adapter = adapter
        pa.links[la] = link
        self.links.append(link)

    # -- tracing -----------------------------------------------------------

    def _wake(self, core):
        if core is not None and core.alive:
            self.active.add(core)

    def _trace(self, *event):
        if self._hasher is not None:
            self._hasher.update(repr(event).encode())
            self.trace_events.append(event)

    def trace_hash(self):
        if self._hasher is None:
            return None
        return self._hasher.hexdigest()

    # -- process lifecycle ---------------------------------------------------

    def spawn_system(self, proc_index_or_proc, node_idx, core_idx, behavior,
                     name, feed_link=None, defer=False, args=()):
        proc = (proc_index_or_proc if isinstance(proc_index_or_proc, Processor)
                else self.processors[proc_index_or_proc])
        node = proc.nodes[node_idx]
        core = node.cores[core_idx]
        if core.record is not None or core.alive:
            if defer:
                self.deferred.append((proc, node_idx, core_idx, behavior, name,
                                      feed_link, args))
                return None
            raise EngineInvariant(f"core busy: {core.sort_key}")
        return self._start(core, behavior, name, dimension=0, privileged=True,
                           system=True, feed_link=feed_link, args=args)

    def spawn_user(self, node, manifest, dimension):
        """Scheduler-side process start: lowest free core, code then data."""
        core = None
        for i in range(1, CORES_PER_NODE):
            c = node.cores[i]
            if c.record is None and not c.alive:
                core = c
                break
        if core is None:
            return None
        behavior = self.registry.behavior(manifest.name)
        if behavior is None:
            return None
        regions = node.ledger.allocate_pair(manifest.code_words,
                                            manifest.data_words(dimension))
        if regions is None:
            return None
        record = self._start(core, behavior, manifest.name, dimension,
                             privileged=False, system=False)
        record.code, record.data = regions
        return record

    def _start(self, core, behavior, name, dimension, privileged, system,
               feed_link=None, args=()):
        node = core.node
        proc = node.processor
        core.generation += 1
        core.ports = {}
        core.alive = True
        core.pending = None
        ctrl = proc.port_word(node.index, core.index, 0,
                              1 if privileged else 0)
        record = ProcessRecord(
            processor=proc.number if proc.number is not None else -1,
            node=node.index, core=core.index, name=name, dimension=dimension,
            code=None, data=None, ctrl_word=ctrl, system=system)
        core.record = record
        core.ctx = Ctx(self, core, name, dimension, privileged, args)
        core.gen = behavior(core.ctx) if not args else behavior(core.ctx, *args)
        if feed_link is not None:
            self._attach_feed(proc, feed_link, core)
        self.active.add(core)
        if not system:
            self.spawn_count += 1
        self._trace("spawn", core.sort_key, name)
        return record

    def _attach_feed(self, proc, link_idx, core):
        self._seq += 1
        feed = Connection(self._seq, 0, 0)
        feed.established = True
        feed.feed = True
        feed.dest_core = core
        feed.dest_gen = core.generation
        port = core.port(1)
        feed.dest_port = port
        port.conns.append(feed)
        proc.link_feeds[link_idx] = feed

    def kill_process(self, node, core_idx):
        core = node.cores[core_idx]
        if core.alive:
            self._terminate(core, reason=None, notify=False)

    def _terminate(self, core, reason, notify=True):
        record = core.record
        for port in core.ports.values():
            conn = port.out_conn
            if conn is not None and not conn.closed:
                self._push(conn, END, force=True)
            for c in port.conns:
                if not c.feed:
                    c.dead = True
                    self.tokens_dropped += sum(1 for t in c.queue if t is not END)
                    self._wake(c.sender_core)
            port.conns.clear()
        core.alive = False
        core.gen = None
        core.pending = None
        self.active.discard(core)
        self._trace("stop", core.sort_key, reason if reason is not None else -1)
        if record is not None and record.system:
            core.record = None
        elif record is not None and notify:
            self.exception_count += 1
            self._send_exception(core, 0 if reason is None else reason)
        self._run_deferred()

    def _run_deferred(self):
        if not self.deferred:
            return
        still = []
        for item in self.deferred:
            proc, node_idx, core_idx, behavior, name, feed_link, args = item
            core = proc.nodes[node_idx].cores[core_idx]
            if core.record is None and not core.alive:
                self._start(core, behavior, name, 0, True, True,
                            feed_link=feed_link, args=args)
            else:
                still.append(item)
        self.deferred = still

    def _send_exception(self, core, reason):
        """Hardware-crafted termination exception to the node's scheduler."""
        node = core.node
        proc = node.processor
        src = proc.port_word(node.index, core.index, 0, privileged=1)
        dest = proc.port_word(node.index, 0, 0, privileged=1)
        conn = self._open_raw(src, dest, proc)
        for w in (3, core.index, reason):
            self._push(conn, w, force=True)
        self._push(conn, END, force=True)

    # -- connections ---------------------------------------------------------

    def open_connection(self, port, dest_word):
        conn = self._open_raw(port.core.ctx.port_word(port.index), dest_word,
                              port.core.node.processor,
                              sender_core=port.core)
        port.out_conn = conn
        return conn

    def _open_raw(self, src_word, dest_word, from_proc, sender_core=None):
        self._seq += 1
        conn = Connection(self._seq, src_word, dest_word, sender_core)
        pid = decode_port_id(dest_word)
        local = (pid.processor == from_proc.number
                 or from_proc.number is None)
        if local:
            self._establish(conn, from_proc, pid)
            return conn
        path = []
        cur = from_proc
        for _ in range(_HOP_LIMIT):
            entry = cur.table.get(pid.processor)
            if entry is None:
                raise SimFault(f"no route to processor {pid.processor}")
            link = cur.links[entry]
            if link is None:
                conn.void = True
                conn.established = True
                return conn
            if link.adapter is not None:
                conn.egress = link.adapter
                conn.egress_buf = [dest_word, src_word]
                conn.established = True
                conn.path = tuple(path)
                if path:
                    self._enqueue_open(conn)
                return conn
            ld = link.dirs[id(cur)]
            path.append(ld)
            cur = ld.far_proc
            if cur.number == pid.processor:
                break
        else:
            raise SimFault(f"routing loop toward processor {pid.processor}")
        conn.path = tuple(path)
        self._enqueue_open(conn)
        return conn

    def _enqueue_open(self, conn):
        conn.path[0].pending.append(("open", conn))

    def _establish(self, conn, dest_proc, pid=None):
        if pid is None:
            pid = decode_port_id(conn.dest_word)
        node = dest_proc.nodes[pid.node]
        core = node.cores[pid.core]
        conn.dest_core = core
        conn.dest_gen = core.generation
        if not core.alive:
            conn.dead = True
            conn.established = True
            return
        port = core.port(pid.local_port)
        conn.dest_port = port
        conn.established = True
        conn.next_arrival = self.now
        port.conns.append(conn)
        self._wake(core)
        while conn.pre:
            self._push_established(conn, conn.pre.popleft())

    def _push(self, conn, token, force=False):
        """Move one token into a connection; returns False when blocked."""
        if conn.dead or conn.void:
            conn.sent += 1
            conn.consumed += 1
            if token is END:
                conn.closed = True
            else:
                self.tokens_sent += 1
                self.tokens_dropped += 1
            return True
        if not force and conn.sent - conn.consumed >= self.capacity:
            return False
        conn.sent += 1
        if token is END:
            conn.closed = True
        if token is not END:
            self.tokens_sent += 1
        if conn.egress is not None:
            conn.egress_buf.append(token)
            conn.consumed += 1
            if token is END:
                conn.egress.send_burst(conn.egress_buf)
                conn.egress_buf = None
            return True
        if not conn.established:
            conn.pre.append(token)
            return True
        self._push_established(conn, token)
        return True

    def _push_established(self, conn, token):
        if conn.dead:
            if token is not END:
                self.tokens_dropped += 1
            conn.consumed += 1
            return
        if not conn.path:
            conn.queue.append(token)
            if token is END:
                self._release_path(conn)
            self._wake(conn.dest_core)
        else:
            arrival = max(self.now + len(conn.path), conn.next_arrival + 1)
            conn.next_arrival = arrival
            self._seq += 1
            heapq.heappush(self.wire, (arrival, self._seq, conn, token))

    def _release_path(self, conn):
        for ld in conn.path:
            if ld.holder is conn:
                ld.holder = None
        conn.path = ()

    def consume(self, port):
        """Receiver side: take the head token of the active message."""
        conn = port.conns[0]
        tok = conn.queue.popleft()
        conn.consumed += 1
        port.last_src = conn.src_word
        if tok is not END:
            self.tokens_delivered += 1
        self._wake(conn.sender_core)
        if tok is END:
            port.conns.popleft()
        return tok

    # -- frames (init-phase link protocol) -----------------------------------

    def send_frame(self, proc, link_idx, frame):
        link = proc.links[link_idx]
        if link is None:
            self.frames_dropped += 1
            return
        if link.adapter is not None:
            link.adapter.send_frame(frame)
            return
        link.dirs[id(proc)].pending.append(("frame", frame))

    def deliver_frame_on(self, proc, link_idx, frame):
        if not proc.booted:
            if frame[0] == FR_BOOT:
                proc.boot_receipts += 1
                if self.boot_hook is None:
                    raise EngineInvariant("no boot hook installed")
                self.boot_hook(proc, bool(frame[1]), tuple(frame[3:]))
                return True
            raise EngineInvariant(f"frame {frame[0]} at unbooted processor")
        if frame[0] == FR_BOOT:
            proc.boot_receipts += 1
            proc.boot_discards += 1
            return True
        feed = proc.link_feeds.get(link_idx)
        if feed is None or not feed.dest_core.alive:
            self.frames_dropped += 1
            return True
        return self._feed_frame(feed, frame)

    def _feed_frame(self, feed, frame):
        if len(feed.queue) >= self.capacity * _FEED_HIGH_WATER_FACTOR:
            return False
        feed.queue.append(len(frame))
        feed.queue.extend(frame)
        self._wake(feed.dest_core)
        return True

    # -- the step loop -------------------------------------------------------

    def step(self):
        self.now += 1
        self._deliver_due()
        if self.active:
            for core in sorted(self.active, key=lambda c: c.sort_key):
                if not core.alive:
                    self.active.discard(core)
                elif core in self.active:
                    self._attempt(core)
        for ld in self.linkdirs:
            self._link_step(ld)
        self._drain_external()

    def _deliver_due(self):
        wire = self.wire
        while wire and wire[0][0] <= self.now:
            _, _, conn, tok = heapq.heappop(wire)
            if conn.dead:
                if tok is not END:
                    self.tokens_dropped += 1
                conn.consumed += 1
                if tok is END:
                    self._release_path(conn)
                continue
            conn.queue.append(tok)
            if tok is END:
                self._release_path(conn)
            self._wake(conn.dest_core)

    def _attempt(self, core):
        eff = core.pending
        if eff is None:
            self._resume(core, None)
            return
        kind = type(eff)
        if kind is Wait:
            for i, g in enumerate(eff.guards):
                port = core.port(g.port)
                head = port.head()
                if head is None:
                    continue
                if (head is END) == (g.kind == ENDK):
                    tok = self.consume(port)
                    self._resume(core, (i, tok))
                    return
            self.active.discard(core)
        elif kind is Send:
            port = core.port(eff.port)
            conn = port.out_conn
            if conn is None or conn.closed:
                if port.out_dest is None:
                    self._fault(core, "send on never-connected channel")
                    return
                try:
                    conn = self.open_connection(port, port.out_dest)
                except SimFault as f:
                    self._fault(core, str(f))
                    return
            if self._push(conn, eff.token):
                self._trace("send", core.sort_key, eff.port,
                            -1 if eff.token is END else eff.token)
                self._resume(core, None)
            else:
                self.active.discard(core)
        elif kind is Connect:
            port = core.port(eff.port)
            if port.out_conn is not None and not port.out_conn.closed:
                self._fault(core, "connect while connected")
                return
            port.out_dest = eff.dest
            try:
                self.open_connection(port, eff.dest)
            except SimFault as f:
                self._fault(core, str(f))
                return
            self._trace("connect", core.sort_key, eff.port, eff.dest)
            self._resume(core, None)
        elif kind is Poll:
            self._resume(core, core.port(eff.port).head() is not None)
        elif kind is Idle:
            self._resume(core, None)
        elif kind is SendFrame:
            if not self._system_only(core):
                return
            self.send_frame(core.node.processor, eff.link, eff.frame)
            self._trace("frame", core.sort_key, eff.link, eff.frame)
            self._resume(core, None)
        elif kind is InstallRoute:
            if not self._system_only(core):
                return
            core.node.processor.table[eff.processor] = eff.link
            self._resume(core, None)
        elif kind is HostWrite:
            self.console_out.append(eff.word)
            if self.console_write is not None:
                self.console_write(eff.word)
            self._trace("host", eff.word)
            self._resume(core, None)
        elif kind is KillProcess:
            if not self._system_only(core):
                return
            self.kill_process(core.node.processor.nodes[eff.node], eff.core)
            self._resume(core, None)
        elif kind is SpawnSystem:
            if not self._system_only(core):
                return
            self.spawn_system(core.node.processor, eff.node, eff.core,
                              eff.behavior, eff.name, feed_link=eff.feed_link,
                              defer=eff.defer, args=eff.args)
            self._resume(core, None)
        else:
            self._fault(core, f"unknown effect {eff!r}")

    def _system_only(self, core):
        if not core.ctx.privileged:
            self._fault(core, "system effect from unprivileged process")
            return False
        return True

    def _resume(self, core, value):
        try:
            core.pending = core.gen.send(value)
        except StopIteration:
            self._terminate(core, reason=0)
        except SimFault as f:
            self._trace("fault", core.sort_key, str(f))
            self._terminate(core, reason=1)
        else:
            core.node.c_total += 1
            self._trace("step", core.sort_key)

    def _fault(self, core, msg):
        self._trace("fault", core.sort_key, msg)
        self._terminate(core, reason=1)

    def _link_step(self, ld):
        if ld.holder is not None or not ld.pending:
            return
        kind, payload = ld.pending[0]
        if kind == "frame":
            if self.deliver_frame_on(ld.far_proc, ld.far_index, payload):
                ld.pending.popleft()
                self._trace("link", id(ld.link) & 0xFFFF, payload[0])
        else:
            conn = payload
            ld.pending.popleft()
            if conn.dead:
                return
            ld.holder = conn
            conn.acquired += 1
            if conn.acquired == len(conn.path):
                self._establish(conn, ld.far_proc)
            else:
                conn.path[conn.acquired].pending.append(("open", conn))

    def _drain_external(self):
        for link in self.links:
            if link.adapter is None:
                continue
            backlog = link.adapter.backlog
            backlog.extend(link.adapter.drain())
            while backlog:
                if not self._inject_burst(link.a, link.a_index,
                                          tuple(backlog[0])):
                    break  # feed full; retry next step
                backlog.popleft()

    def _inject_burst(self, proc, link_idx, burst):
        if not burst:
            return True
        if burst[0] < (FIRST_PROCESSOR << 16):
            # Small leading word: an init-phase frame.
            return self.deliver_frame_on(proc, link_idx, burst)
        dest_word, src_word = burst[0], burst[1]
        pid = decode_port_id(dest_word)
        if pid.processor == proc.number:
            conn = self._open_raw(src_word, dest_word, proc)
            for w in burst[2:]:
                self._push(conn, w, force=True)
            self._push(conn, END, force=True)
            return True
        entry = proc.table.get(pid.processor)
        if entry is None:
            self.frames_dropped += 1
            return True
        link = proc.links[entry]
        if link is None:
            self.frames_dropped += 1
        elif link.adapter is not None:
            link.adapter.send_burst(list(burst))
        else:
            conn = self._open_raw(src_word, dest_word, proc)
            for w in burst[2:]:
                self._push(conn, w, force=True)
            self._push(conn, END, force=True)
        return True

    # -- run control ---------------------------------------------------------

    def quiescent(self):
        if self.active or self.wire or self.deferred:
            return False
        for ld in self.linkdirs:
            if ld.pending:
                return False
        for link in self.links:
            if link.adapter is not None and link.adapter.backlog:
                return False
        return True

    def run(self, max_ticks, on_idle=None):
        """Steps until quiescence or tick exhaustion; True when it quiesced."""
        while self.now < max_ticks:
            if not self.active and not self.deferred and self.wire:
                pending_links = any(ld.pending for ld in self.linkdirs)
                if not pending_links:
                    self.now = max(self.now, self.wire[0][0] - 1)
            if self.quiescent():
                if on_idle is not None and on_idle():
                    continue
                return True
            self.step()
        return self.quiescent()

    def quiescence_report(self):
        """Which cores are blocked on what; surfaces deadlocks."""
        lines = []
        for proc in self.processors:
            for node in proc.nodes:
                for core in node.cores:
                    if core.alive and core not in self.active:
                        name = core.record.name if core.record else "?"
                        lines.append(f"{core.sort_key} {name}: "
                                     f"blocked on {core.pending!r}")
        return "\n".join(lines)

    # -- console peripheral ----------------------------------------------------

    def make_console_feed(self, core, port_idx):
        self._seq += 1
        feed = Connection(self._seq, 0, 0)
        feed.established = True
        feed.feed = True
        feed.dest_core = core
        feed.dest_gen = core.generation
        port = core.port(port_idx)
        feed.dest_port = port
        port.conns.append(feed)
        self.console_feed = feed
        return feed

    def feed_console(self, words, end=False):
        feed = self.console_feed
        feed.queue.extend(words)
        if end:
            feed.queue.append(END)
        self._wake(feed.dest_core)

    def proc_of(self, number):
        return self.proc_by_number.get(number)
