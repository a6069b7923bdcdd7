"""Routine-operation system services.

Each service is one process with documented port protocols:

  console     (8,0) core 1   port 1 input reservations, port 2 output
  dispatcher  (8,0) core 2   port 0 starts + resource reports, port 1 queries
  loader      (8,0) core 3   port 0 requests
  file server (8,0) core 4   port 1 requests/acks/chunks
  scheduler   (p,n) core 0   port 0 starts + exceptions (privileged), port 1 queries

Start/report/exception messages are tagged with a leading word; file-server
traffic is TFTP-flavored (1=read request, 2=write request, 3=data chunk,
one-word messages are acks).  Every message is a connection: header, words,
END.
"""

from __future__ import annotations

import os

from .fabric import (Connect, ENDK, EventGuard, HostWrite, Send, Wait, WORD,
                     recv_message, send_message)
from .runtime import CORES_PER_NODE, ConfigError, ProgramManifest
from .words import END, encode_port_id, is_privileged, text_to_words, \
    words_to_text

# Well-known placement on the first node (8,0).
CONSOLE_CORE = 1
DISPATCH_CORE = 2
LOADER_CORE = 3
FS_CORE = 4

CONSOLE_FEED_PORT = 0   # host peripheral line
CONSOLE_IN_PORT = 1     # input reservations ("first port")
CONSOLE_OUT_PORT = 2    # output ("second port")

DISPATCH_MAIN_PORT = 0
DISPATCH_QUERY_PORT = 1
LOADER_PORT = 0
FS_PORT = 1
SCHED_MAIN_PORT = 0
SCHED_QUERY_PORT = 1

# Message tags on dispatcher/scheduler main ports.  MSG_EXC mirrors the
# hardware-crafted termination exception in fabric._send_exception.
MSG_START = 1
MSG_REPORT = 2
MSG_EXC = 3

# File server message tags.
FS_RRQ = 1
FS_WRQ = 2
FS_DATA = 3
FS_CHUNK_WORDS = 128

NODE_LETTERS = "abcd"


def console_in_word():
    return encode_port_id(1, 8, 0, CONSOLE_CORE, CONSOLE_IN_PORT)


def console_out_word():
    return encode_port_id(1, 8, 0, CONSOLE_CORE, CONSOLE_OUT_PORT)


def dispatcher_main_word():
    return encode_port_id(1, 8, 0, DISPATCH_CORE, DISPATCH_MAIN_PORT)


def dispatcher_query_word():
    return encode_port_id(1, 8, 0, DISPATCH_CORE, DISPATCH_QUERY_PORT)


def loader_word():
    return encode_port_id(1, 8, 0, LOADER_CORE, LOADER_PORT)


PORT_LOADER = None  # filled below; the constant user programs link against


def fileserver_word():
    return encode_port_id(1, 8, 0, FS_CORE, FS_PORT)


def scheduler_main_word(proc, node):
    return encode_port_id(1, proc, node, 0, SCHED_MAIN_PORT)


def scheduler_query_word(proc, node):
    return encode_port_id(1, proc, node, 0, SCHED_QUERY_PORT)


# ---------------------------------------------------------------------------
# Console: driver for the host input/output lines.

def console(ctx):
    """Word-wise console; input is exclusively reservable, output is
    message-atomic (concurrent writers interleave only at message ends)."""
    ctx.engine.make_console_feed(ctx.core, CONSOLE_FEED_PORT)
    FWD = 3
    holder = False
    fwd_open = False
    feed_eof = False
    base = (EventGuard(CONSOLE_OUT_PORT, WORD), EventGuard(CONSOLE_OUT_PORT, ENDK),
            EventGuard(CONSOLE_IN_PORT, WORD), EventGuard(CONSOLE_IN_PORT, ENDK))
    feed = (EventGuard(CONSOLE_FEED_PORT, WORD), EventGuard(CONSOLE_FEED_PORT, ENDK))
    while True:
        guards = base + feed if (holder and not feed_eof) else base
        i, tok = yield Wait(guards)
        if i == 0:
            yield HostWrite(tok)
        elif i == 1:
            pass  # output message boundary
        elif i == 2:
            if not holder:
                holder = True
                yield Connect(FWD, tok)
                fwd_open = True
                if feed_eof:
                    yield Send(FWD, END)
                    fwd_open = False
            # extra words on a held reservation are ignored
        elif i == 3:
            if holder and fwd_open:
                yield Send(FWD, END)
            holder = False
            fwd_open = False
        elif i == 4:
            yield Send(FWD, tok)
        else:
            feed_eof = True
            if holder and fwd_open:
                yield Send(FWD, END)
                fwd_open = False


# ---------------------------------------------------------------------------
# Dispatcher: tracks every node's free cores and two largest regions.

def _fits(rec, code, data):
    cores, largest, second = rec
    if cores < 1 or largest < code:
        return False
    return largest >= code + data or second >= data


def dispatcher(ctx, n_procs):
    FWD, ACK = 2, 3
    records = {}
    for p in range(8, 8 + n_procs):
        for n in range(4):
            records[(p, n)] = (0, 0, 0)
    reportable = len(records) - 1  # all nodes except (8,0) run a scheduler
    reported = set()
    pending = []

    def select(code, data):
        for key in records:
            if key == (8, 0):
                continue
            if _fits(records[key], code, data):
                return key
        return None

    def dispatch(msg):
        # (MSG_START, requester, dim, code, static, perdim, name...)
        requester, dim, code, static, perdim = msg[1:6]
        data = static + perdim * dim
        key = select(code, data)
        if key is None:
            return False
        records[key] = (0, 0, 0)
        return key

    guards = (EventGuard(DISPATCH_MAIN_PORT, WORD), EventGuard(DISPATCH_MAIN_PORT, ENDK),
              EventGuard(DISPATCH_QUERY_PORT, WORD), EventGuard(DISPATCH_QUERY_PORT, ENDK))
    while True:
        i, tok = yield Wait(guards)
        if i == 1 or i == 3 or tok is END:
            continue
        if i == 0:
            msg = [tok] + (yield from recv_message(ctx, DISPATCH_MAIN_PORT))
            src = ctx.last_source(DISPATCH_MAIN_PORT)
            if tok == MSG_START and len(msg) >= 6:
                key = dispatch(msg)
                if key:
                    yield Connect(FWD, scheduler_main_word(*key))
                    yield from send_message(ctx, FWD, msg)
                elif len(reported) < reportable:
                    pending.append(msg)  # no scheduler has reported yet
                else:
                    yield Connect(ACK, msg[1])
                    yield from send_message(ctx, ACK, [0])
            elif tok == MSG_REPORT and len(msg) == 6:
                if not is_privileged(src):
                    continue  # resource reports come from schedulers only
                p, n, cores, largest, second = msg[1:]
                if (p, n) in records:
                    records[(p, n)] = (cores, largest, second)
                    reported.add((p, n))
                still = []
                for m in pending:
                    key = dispatch(m)
                    if key:
                        yield Connect(FWD, scheduler_main_word(*key))
                        yield from send_message(ctx, FWD, m)
                    elif len(reported) < reportable:
                        still.append(m)
                    else:
                        yield Connect(ACK, m[1])
                        yield from send_message(ctx, ACK, [0])
                pending = still
        else:
            yield from recv_message(ctx, DISPATCH_QUERY_PORT)
            reply = tok
            text = "".join(
                f"{p}{NODE_LETTERS[n]}: {rec[0]}/{rec[1]:04x}/{rec[2]:04x}\n"
                for (p, n), rec in records.items())
            yield Connect(ACK, reply)
            yield from send_message(ctx, ACK, text_to_words(text))


# ---------------------------------------------------------------------------
# Scheduler: one per node (core 0); allocates memory, starts and reaps
# processes, reports resources.

def scheduler(ctx):
    node = ctx.node
    eng = ctx.engine
    FWD, ACK = 2, 3
    me = (ctx.processor_number, ctx.node_index)

    def report_msg():
        free = sum(1 for k in range(1, CORES_PER_NODE)
                   if node.cores[k].record is None)
        largest, second = node.ledger.two_largest()
        return [MSG_REPORT, me[0], me[1], free, largest, second]

    yield Connect(FWD, dispatcher_main_word())
    yield from send_message(ctx, FWD, report_msg())

    guards = (EventGuard(SCHED_MAIN_PORT, WORD), EventGuard(SCHED_MAIN_PORT, ENDK),
              EventGuard(SCHED_QUERY_PORT, WORD), EventGuard(SCHED_QUERY_PORT, ENDK))
    while True:
        i, tok = yield Wait(guards)
        if i == 1 or i == 3 or tok is END:
            continue
        if i == 0:
            msg = [tok] + (yield from recv_message(ctx, SCHED_MAIN_PORT))
            src = ctx.last_source(SCHED_MAIN_PORT)
            if not is_privileged(src):
                continue  # the start port only accepts privileged traffic
            if tok == MSG_START and len(msg) >= 6:
                requester, dim, code, static, perdim = msg[1:6]
                name = words_to_text(msg[6:])
                rec = None
                try:
                    manifest = ProgramManifest(name, code, static, perdim)
                except ConfigError:
                    manifest = None
                if manifest is not None:
                    rec = eng.spawn_user(node, manifest, dim)
                yield Connect(ACK, requester)
                yield from send_message(
                    ctx, ACK, [rec.ctrl_word if rec is not None else 0])
                yield from send_message(ctx, FWD, report_msg())
            elif tok == MSG_EXC and len(msg) == 3:
                core_idx, _reason = msg[1], msg[2]
                if 1 <= core_idx < CORES_PER_NODE:
                    rec = node.cores[core_idx].record
                    if rec is not None:
                        node.ledger.release(rec.code)
                        node.ledger.release(rec.data)
                        node.cores[core_idx].record = None
                        yield from send_message(ctx, FWD, report_msg())
        else:
            yield from recv_message(ctx, SCHED_QUERY_PORT)
            reply = tok
            t, c = ctx.clock()
            lines = [f" {me[0]}{NODE_LETTERS[me[1]]}: 0101..4000 "
                     f"t:{t:08x} c:{c:08x}\n"]
            for k in range(1, CORES_PER_NODE):
                rec = node.cores[k].record
                if rec is None or rec.code is None:
                    lines.append(f" {k}:\n")
                else:
                    lines.append(f" {k}: {rec.code.start:04x}..{rec.code.end:04x}"
                                 f"/{rec.data.start:04x}..{rec.data.end:04x}\n")
            yield Connect(ACK, reply)
            yield from send_message(ctx, ACK, text_to_words("".join(lines)))


# ---------------------------------------------------------------------------
# File server: whole-file chunkwise transfers against the host directory.

def _safe_path(files_dir, name):
    if files_dir is None or not name or "/" in name or "\\" in name \
            or name.startswith("."):
        return None
    return os.path.join(files_dir, name)


def _load_file(files_dir, name):
    path = _safe_path(files_dir, name)
    if path is None or not os.path.isfile(path):
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return text_to_words(fh.read())
    except (OSError, UnicodeDecodeError):
        return None


def _store_file(files_dir, name, words):
    path = _safe_path(files_dir, name)
    if path is None:
        return False
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(words_to_text(words))
        return True
    except OSError:
        return False


class _Session:
    __slots__ = ("kind", "port", "chunks", "at", "words", "name")

    def __init__(self, kind, port, name):
        self.kind = kind
        self.port = port
        self.name = name
        self.chunks = []
        self.at = 0
        self.words = []


def fileserver(ctx):
    files_dir = ctx.engine.files_dir
    sessions = {}
    free_ports = []
    next_port = 16

    def grab_port():
        nonlocal next_port
        if free_ports:
            return free_ports.pop()
        next_port += 1
        return next_port - 1

    def close(src):
        s = sessions.pop(src, None)
        if s is not None:
            free_ports.append(s.port)

    while True:
        i, tok = yield Wait((EventGuard(FS_PORT, WORD), EventGuard(FS_PORT, ENDK)))
        if tok is END:
            continue
        msg = [tok] + (yield from recv_message(ctx, FS_PORT))
        src = ctx.last_source(FS_PORT)
        if len(msg) == 1:
            # one-word ack for a read session
            s = sessions.get(src)
            if s is None or s.kind != "read":
                continue
            if msg[0] == 0:
                close(src)
                continue
            if s.at < len(s.chunks):
                yield from send_message(ctx, s.port, [FS_DATA] + s.chunks[s.at])
                s.at += 1
            else:
                yield from send_message(ctx, s.port, [])
                close(src)
        elif msg[0] == FS_RRQ:
            name = words_to_text(msg[1:])
            close(src)
            port = grab_port()
            yield Connect(port, src)
            content = _load_file(files_dir, name)
            if content is None:
                yield from send_message(ctx, port, [0])
                free_ports.append(port)
                continue
            s = _Session("read", port, name)
            s.chunks = [content[i:i + FS_CHUNK_WORDS]
                        for i in range(0, len(content), FS_CHUNK_WORDS)]
            if not s.chunks:
                yield from send_message(ctx, port, [])
                free_ports.append(port)
                continue
            sessions[src] = s
            yield from send_message(ctx, s.port, [FS_DATA] + s.chunks[0])
            s.at = 1
        elif msg[0] == FS_WRQ:
            name = words_to_text(msg[1:])
            close(src)
            port = grab_port()
            yield Connect(port, src)
            if _safe_path(files_dir, name) is None:
                yield from send_message(ctx, port, [0])
                free_ports.append(port)
                continue
            sessions[src] = _Session("write", port, name)
            yield from send_message(ctx, sessions[src].port, [1])
        elif msg[0] == FS_DATA:
            s = sessions.get(src)
            if s is None or s.kind != "write":
                continue
            data = msg[1:]
            s.words.extend(data)
            if len(data) < FS_CHUNK_WORDS:
                ok = _store_file(files_dir, s.name, s.words)
                yield from send_message(ctx, s.port, [1 if ok else 0])
                close(src)
            else:
                yield from send_message(ctx, s.port, [1])


def fs_read(ctx, port, name):
    """Client side of a whole-file read; returns the words or None."""
    yield Connect(port, fileserver_word())
    yield from send_message(ctx, port, [FS_RRQ] + text_to_words(name))
    words = []
    while True:
        msg = yield from recv_message(ctx, port)
        if not msg:
            return words
        if msg[0] == FS_DATA:
            words.extend(msg[1:])
            yield from send_message(ctx, port, [1])
        else:
            return None


def fs_write(ctx, port, name, words):
    """Client side of a whole-file write; returns True on success."""
    yield Connect(port, fileserver_word())
    yield from send_message(ctx, port, [FS_WRQ] + text_to_words(name))
    ack = yield from recv_message(ctx, port)
    if ack != [1]:
        return False
    at = 0
    while True:
        chunk = words[at:at + FS_CHUNK_WORDS]
        at += FS_CHUNK_WORDS
        yield from send_message(ctx, port, [FS_DATA] + list(chunk))
        ack = yield from recv_message(ctx, port)
        if ack != [1]:
            return False
        if len(chunk) < FS_CHUNK_WORDS:
            return True


# ---------------------------------------------------------------------------
# Loader: name -> file -> manifest -> dispatcher.

def parse_manifest(text):
    """Parses the .nop manifest format; None when malformed."""
    lines = text.splitlines()
    if len(lines) < 5 or lines[0] != "NOP1":
        return None
    fields = {}
    for line in lines[1:5]:
        parts = line.split(None, 1)
        if len(parts) != 2:
            return None
        fields[parts[0]] = parts[1]
    try:
        return ProgramManifest(fields["name"],
                               int(fields["code"], 16),
                               int(fields["data"], 16),
                               int(fields["perdim"], 16))
    except (KeyError, ValueError, ConfigError):
        return None


def loader(ctx):
    FS, FWD, ACK = 2, 3, 4
    while True:
        i, tok = yield Wait((EventGuard(LOADER_PORT, WORD),
                             EventGuard(LOADER_PORT, ENDK)))
        if tok is END:
            continue
        msg = [tok] + (yield from recv_message(ctx, LOADER_PORT))
        if len(msg) < 2:
            continue
        requester, dim = msg[0], msg[1]
        name = words_to_text(msg[2:])
        content = yield from fs_read(ctx, FS, name)
        manifest = parse_manifest(words_to_text(content)) if content is not None \
            else None
        if manifest is None or ctx.engine.registry.behavior(manifest.name) is None:
            yield Connect(ACK, requester)
            yield from send_message(ctx, ACK, [0])
            continue
        fwd = [MSG_START, requester, dim, manifest.code_words,
               manifest.static_data_words, manifest.words_per_dimension]
        fwd += text_to_words(manifest.name)
        yield Connect(FWD, dispatcher_main_word())
        yield from send_message(ctx, FWD, fwd)


PORT_LOADER = loader_word()
