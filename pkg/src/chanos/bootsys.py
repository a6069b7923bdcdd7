"""System initialization: boot distribution, enumeration, routing, handover.

During initialization the external links carry short word frames, parsed and
forwarded by per-link distribution processes (software routing); the switch
only routes port circuits once tables exist.  Frame kinds:

  BOOT     (1, first_flag, n, rom...)          flooded, duplicates discarded
  PROBE    (2, prober, candidate, prober_link) link-local
  REPLY    (3, prober, link_echo, replier, replier_link, already) broadcast
  CONFIRM  (4, prober, replier_link)           link-local
  ENUM     (5, dest, next_number)              routed first -> dest
  COUNT    (6, dest=8, origin, k, n1..nk)      routed dest -> 8, installs
                                               routes to n1..nk at every hop
  FLOOD    (7, dest)                           routed: flood for yourself
  EST      (8, origin, hops)                   link-local shortest-path flood
  BAL      (9, dest=8, delta, origin_flag)     routed balance report
  ROUTINE  (10, n_processors)                  flooded, duplicates discarded

The enumerator addresses processors one by one and, per flood origin, waits
for its balance counter (credited +k by the origin, +k'-1 per improving
receiver, -1 per non-improving receiver) to return to zero.
"""

from __future__ import annotations

from .fabric import (Connect, ENDK, EngineInvariant, EventGuard, FR_BOOT,
                     InstallRoute, KillProcess, LOCAL, Send, SendFrame,
                     SpawnSystem, Wait, WORD, recv_message, send_message)
from . import kernel
from .words import END, WORD_MASK, text_to_words

FR_PROBE = 2
FR_REPLY = 3
FR_CONFIRM = 4
FR_ENUM = 5
FR_COUNT = 6
FR_FLOOD = 7
FR_EST = 8
FR_BAL = 9
FR_ROUTINE = 10

_ROUTED = (FR_ENUM, FR_COUNT, FR_FLOOD, FR_BAL)

# Core layout on node 0 during initialization (figs: boot, enumerator and
# console on the first processor only, one distributor per link).
BOOT_CORE = 0
ENUM_CORE = 2
DIST_CORES = (3, 4, 5, 6)

# Port plan for the init-phase plumbing (long-lived, length-prefixed conns).
_BOOT_FROM_DIST = 4          # .. 7, one per link
_BOOT_FROM_ENUM = 8
_ENUM_FROM_DIST = 4          # .. 7 on the enumerator core
_ENUM_FROM_BOOT = 8
_CMD = 12                    # boot's loader/negotiation port
_DIAG = 13


def _signed(w):
    return w - (1 << 32) if w >= (1 << 31) else w


def send_frame_words(port, frame):
    yield Send(port, len(frame))
    for w in frame:
        yield Send(port, w)


def read_frame(ctx, ports):
    """Next length-prefixed frame from any of the given ports.

    Returns (port, frame) with frame None when that channel closed.
    """
    guards = tuple(EventGuard(p, WORD) for p in ports) + \
        tuple(EventGuard(p, ENDK) for p in ports)
    i, tok = yield Wait(guards)
    if tok is END:
        return ports[i - len(ports)], None
    port = ports[i]
    frame = []
    for _ in range(tok):
        _, w = yield ctx.wait(port)
        if w is END:
            return port, None
        frame.append(w)
    return port, tuple(frame)


def distributor(ctx, link_idx, first):
    """Inbound link parser: local delivery to boot/enumerator or forwarding
    along the routing table; installs routes carried by count reports."""
    proc = ctx.processor
    yield Connect(2, proc.port_word(0, BOOT_CORE, _BOOT_FROM_DIST + link_idx, 1))
    if first:
        yield Connect(3, proc.port_word(0, ENUM_CORE, _ENUM_FROM_DIST + link_idx, 1))
    while True:
        _, frame = yield from read_frame(ctx, (1,))
        if frame is None:
            return
        kind = frame[0]
        if kind in _ROUTED:
            dest = frame[1]
            if kind == FR_COUNT:
                for n in frame[4:]:
                    yield InstallRoute(n, link_idx)
            if dest == proc.number:
                port = 3 if (kind in (FR_COUNT, FR_BAL) and first) else 2
                yield from send_frame_words(port, frame)
            else:
                entry = proc.table.get(dest)
                if entry is not None:
                    yield SendFrame(entry, frame)
                else:
                    ctx.engine.frames_dropped += 1
        else:
            yield from send_frame_words(2, frame)


def make_boot(console_behavior=None):
    console_behavior = console_behavior or kernel.console

    def boot(ctx, first, rom):
        eng = ctx.engine
        proc = ctx.processor
        if first:
            proc.number = 8
            eng.proc_by_number[8] = proc
            yield InstallRoute(8, LOCAL)
            yield SpawnSystem(0, kernel.CONSOLE_CORE, console_behavior,
                              "console")
            yield SpawnSystem(0, ENUM_CORE, enumerator, "enumerator")
        for k, core in enumerate(DIST_CORES):
            yield SpawnSystem(0, core, distributor, f"dist{k}",
                              feed_link=k, args=(k, first))
        image = (FR_BOOT, 0, len(rom)) + tuple(rom)
        for k in proc.connected_links():
            yield SendFrame(k, image)

        ports = (_BOOT_FROM_DIST, _BOOT_FROM_DIST + 1, _BOOT_FROM_DIST + 2,
                 _BOOT_FROM_DIST + 3, _BOOT_FROM_ENUM)
        best = proc.best_hops

        def report_balance(delta, origin_flag):
            frame = (FR_BAL, 8, delta & WORD_MASK, origin_flag)
            if proc.number == 8:
                return send_frame_words(_ENUM_FROM_BOOT + 1, frame)
            return _route_out(frame)

        def _route_out(frame):
            yield SendFrame(proc.table[frame[1]], frame)

        # boot(8) reports locally through a dedicated conn to the enumerator
        if first:
            yield Connect(_ENUM_FROM_BOOT + 1,
                          proc.port_word(0, ENUM_CORE, _ENUM_FROM_BOOT, 1))

        while True:
            port, frame = yield from read_frame(ctx, ports)
            if frame is None:
                continue
            kind = frame[0]
            link_in = port - _BOOT_FROM_DIST
            if kind == FR_PROBE:
                prober, candidate, plink = frame[1], frame[2], frame[3]
                if proc.number is None:
                    proc.number = candidate
                    eng.proc_by_number[candidate] = proc
                    yield InstallRoute(candidate, LOCAL)
                    reply = (FR_REPLY, prober, plink, proc.number, link_in, 0)
                else:
                    reply = (FR_REPLY, prober, plink, proc.number, link_in, 1)
                for k in proc.connected_links():
                    yield SendFrame(k, reply)
            elif kind == FR_CONFIRM:
                prober, rlink = frame[1], frame[2]
                yield InstallRoute(prober, rlink)
                if proc.number != 8 and 8 not in proc.table:
                    yield InstallRoute(8, rlink)
            elif kind == FR_ENUM and frame[1] == proc.number:
                candidate = frame[2]
                new = []
                for k in proc.connected_links():
                    yield SendFrame(k, (FR_PROBE, proc.number, candidate, k))
                    while True:
                        p2, fr2 = yield from read_frame(ctx, ports)
                        if fr2 is None:
                            continue
                        if (fr2[0] == FR_REPLY and fr2[1] == proc.number
                                and fr2[2] == k):
                            _, _, _, rnum, rlink, already = fr2
                            yield InstallRoute(rnum, k)
                            if not already:
                                yield SendFrame(k, (FR_CONFIRM, proc.number,
                                                    rlink))
                                new.append(rnum)
                                candidate += 1
                            break
                        # stale duplicate broadcasts are dropped silently
                count = (FR_COUNT, 8, proc.number, len(new)) + tuple(new)
                if proc.number == 8:
                    yield from send_frame_words(_ENUM_FROM_BOOT + 1, count)
                else:
                    yield SendFrame(proc.table[8], count)
            elif kind == FR_FLOOD and frame[1] == proc.number:
                best[proc.number] = 0
                links = proc.connected_links()
                eng.establish_in_flight += len(links)
                yield from report_balance(len(links), 1)
                for k in links:
                    yield SendFrame(k, (FR_EST, proc.number, 1))
            elif kind == FR_EST:
                origin, hops = frame[1], frame[2]
                eng.establish_in_flight -= 1
                if hops < best.get(origin, 1 << 30):
                    best[origin] = hops
                    yield InstallRoute(origin, link_in)
                    links = proc.connected_links()
                    # report first, then re-flood: keeps positive balance
                    # credits ahead of the negatives they will fund
                    eng.establish_in_flight += len(links)
                    yield from report_balance(len(links) - 1, 0)
                    for k in links:
                        yield SendFrame(k, (FR_EST, origin, hops + 1))
                else:
                    yield from report_balance(-1, 0)
            elif kind == FR_ROUTINE:
                for k in proc.connected_links():
                    yield SendFrame(k, frame)
                yield from _transition(ctx, frame[1])
                return
            # anything else: stray duplicate, dropped

    return boot


def enumerator(ctx):
    """Drives enumeration, routing floods, and the switch to routine mode."""
    eng = ctx.engine
    proc = ctx.processor
    ports = (_ENUM_FROM_DIST, _ENUM_FROM_DIST + 1, _ENUM_FROM_DIST + 2,
             _ENUM_FROM_DIST + 3, _ENUM_FROM_BOOT)
    yield Connect(9, proc.port_word(0, BOOT_CORE, _BOOT_FROM_ENUM, 1))

    def cmd(frame):
        if frame[1] == 8:
            return send_frame_words(9, frame)
        return _send_routed(frame)

    def _send_routed(frame):
        yield SendFrame(proc.table[frame[1]], frame)

    numbered = [8]
    next_number = 9
    idx = 0
    while idx < len(numbered):
        target = numbered[idx]
        yield from cmd((FR_ENUM, target, next_number))
        while True:
            _, frame = yield from read_frame(ctx, ports)
            if frame is not None and frame[0] == FR_COUNT and frame[2] == target:
                new = list(frame[4:])
                break
        numbered.extend(new)
        next_number += len(new)
        idx += 1
    eng.enumerated = list(numbered)

    for target in numbered:
        yield from cmd((FR_FLOOD, target))
        balance = 0
        origin_seen = False
        while not (origin_seen and balance == 0):
            _, frame = yield from read_frame(ctx, ports)
            if frame is None or frame[0] != FR_BAL:
                continue
            balance += _signed(frame[2])
            origin_seen = origin_seen or bool(frame[3])
        if eng.establish_in_flight != 0:
            raise EngineInvariant(
                f"balance zero with {eng.establish_in_flight} floods in flight")
        eng.balance_history.append((target, balance))

    yield from send_frame_words(9, (FR_ROUTINE, len(numbered)))
    while True:  # killed by boot at the transition
        yield from read_frame(ctx, ports)


def _transition(ctx, n_procs):
    """Shut down the init-phase processes and enter routine operation."""
    eng = ctx.engine
    proc = ctx.processor
    proc.transitioned = True
    if proc.number == 8:
        yield KillProcess(0, ENUM_CORE)
        for core in DIST_CORES:
            yield KillProcess(0, core)
        yield SpawnSystem(0, kernel.DISPATCH_CORE, kernel.dispatcher,
                          "dispatcher", args=(n_procs,))
        yield SpawnSystem(0, kernel.LOADER_CORE, kernel.loader, "loader")
        yield SpawnSystem(0, kernel.FS_CORE, kernel.fileserver, "fileserver")
        for nd in range(1, 4):
            yield SpawnSystem(nd, 0, kernel.scheduler, "scheduler")
        yield from _launch_init(ctx)
    else:
        for core in DIST_CORES:
            yield KillProcess(0, core)
        for nd in range(1, 4):
            yield SpawnSystem(nd, 0, kernel.scheduler, "scheduler")
        # core 0 frees when this process returns
        yield SpawnSystem(0, 0, kernel.scheduler, "scheduler", defer=True)


def _launch_init(ctx):
    eng = ctx.engine
    me = ctx.port_word(_CMD)
    yield Connect(_CMD, kernel.loader_word())
    yield from send_message(ctx, _CMD, [me, 0] + text_to_words("init.nop"))
    ack = yield from recv_message(ctx, _CMD)
    if not ack or ack[0] == 0:
        eng.init_failed = True
        yield Connect(_DIAG, kernel.console_out_word())
        yield from send_message(ctx, _DIAG, text_to_words("init fault\n"))
        return
    yield Connect(_CMD, ack[0])
    yield Send(_CMD, me)
    _, n_out = yield ctx.wait(_CMD)
    if n_out is END:
        return
    for _ in range(n_out):
        yield Send(_CMD, kernel.console_out_word())
    _, n_in = yield ctx.wait(_CMD)
    if n_in is END:
        return
    for _ in range(n_in):
        _, w = yield ctx.wait(_CMD)
        if w is END:
            return
    _, fin = yield ctx.wait(_CMD)
    if fin is END:
        yield Send(_CMD, END)


def install(engine, console_behavior=None):
    """Hook the first-stage loader; boot images instantiate the boot process."""
    boot = make_boot(console_behavior)

    def hook(proc, first_flag, rom):
        proc.booted = True
        engine.spawn_system(proc, 0, BOOT_CORE, boot, "boot",
                            args=(first_flag, tuple(rom)))

    engine.boot_hook = hook
    engine.enumerated = []
    return boot


def start_first(engine, rom_words):
    """Boot the first processor from the simulated boot ROM."""
    proc = engine.processors[0]
    proc.booted = True
    if engine.boot_hook is None:
        raise EngineInvariant("bootsys not installed")
    engine.boot_hook(proc, True, tuple(rom_words))
