"""The user shell and the tool suite.

The shell is a command-line process-network builder: commands spawn tools
through the loader, a stack of port identifiers wires them together (output
ports are popped, announced input ports are pushed), quoted strings feed a
popped port directly, and at end of line the top port receives one forwarded
console line while the rest are closed.  Data usually flows right to left.

Every tool follows the same control-channel negotiation: receive the
invoker's port, connect back, announce output-port count, receive the
destinations, announce input ports (first-consumed last), close.
"""

from __future__ import annotations

from collections import deque

from .fabric import (Connect, ENDK, EventGuard, Poll, Send, Wait, WORD)
from .kernel import (FS_CHUNK_WORDS, FS_DATA, FS_RRQ, FS_WRQ, PORT_LOADER,
                     console_in_word, dispatcher_query_word, fileserver_word,
                     scheduler_query_word)
from .fabric import recv_message, send_message
from .words import END, text_to_words, words_to_text

STACK_CAP = 128
NAME_CAP = 80

QUOTE = 0x22
COLON = 0x3A
NL = 0x0A
SP = 0x20

CTRL = 0


def negotiate_callee(ctx, out_ports, in_ports):
    """Callee side of the port negotiation.

    Connects each output port as its destination word arrives; announces
    the given input ports in order (list the first-consumed port last).
    Returns the destination words, or None when told to stop immediately.
    """
    _, tok = yield ctx.wait(CTRL)
    if tok is END:
        return None
    yield Connect(CTRL, tok)
    yield Send(CTRL, len(out_ports))
    outs = []
    for p in out_ports:
        _, w = yield ctx.wait(CTRL)
        if w is END:
            return None
        yield Connect(p, w)
        outs.append(w)
    yield Send(CTRL, len(in_ports))
    for p in in_ports:
        yield Send(CTRL, ctx.port_word(p))
    yield Send(CTRL, END)
    return outs


# ---------------------------------------------------------------------------
# Stream tools.

def tool_upper(ctx):
    """Latin lower case to upper case, word by word."""
    OUT, IN = 1, 2
    if (yield from negotiate_callee(ctx, (OUT,), (IN,))) is None:
        return
    while True:
        _, tok = yield ctx.wait(IN)
        if tok is END:
            yield Send(OUT, END)
            return
        if 0x61 <= tok <= 0x7A:
            tok -= 0x20
        yield Send(OUT, tok)


def tool_parafill(ctx):
    """Reflow text greedily to lines of at most `dimension` characters;
    over-long tokens go alone on their own line."""
    OUT, IN = 1, 2
    if (yield from negotiate_callee(ctx, (OUT,), (IN,))) is None:
        return
    n = max(1, ctx.dimension)
    line_len = 0
    token = []
    while True:
        _, tok = yield ctx.wait(IN)
        done = tok is END
        if done or tok in (SP, NL):
            if token:
                if line_len == 0:
                    pass
                elif line_len + 1 + len(token) <= n:
                    yield Send(OUT, SP)
                    line_len += 1
                else:
                    yield Send(OUT, NL)
                    line_len = 0
                for w in token:
                    yield Send(OUT, w)
                line_len += len(token)
                token = []
            if done:
                if line_len:
                    yield Send(OUT, NL)
                yield Send(OUT, END)
                return
        else:
            token.append(tok)


def tool_concat(ctx):
    """First input entirely, then the second."""
    OUT, IN1, IN2 = 1, 2, 3
    if (yield from negotiate_callee(ctx, (OUT,), (IN2, IN1))) is None:
        return
    for src in (IN1, IN2):
        while True:
            _, tok = yield ctx.wait(src)
            if tok is END:
                break
            yield Send(OUT, tok)
    yield Send(OUT, END)


def tool_dup(ctx):
    OUT1, OUT2, IN = 1, 2, 3
    if (yield from negotiate_callee(ctx, (OUT1, OUT2), (IN,))) is None:
        return
    while True:
        _, tok = yield ctx.wait(IN)
        if tok is END:
            yield Send(OUT1, END)
            yield Send(OUT2, END)
            return
        yield Send(OUT1, tok)
        yield Send(OUT2, tok)


def tool_buf(ctx):
    """Ring buffer of `dimension` words; blocks rather than spilling."""
    OUT, IN = 1, 2
    if (yield from negotiate_callee(ctx, (OUT,), (IN,))) is None:
        return
    cap = max(1, ctx.dimension)
    ring = deque()
    in_done = False
    while True:
        if not in_done and len(ring) < cap and (yield Poll(IN)):
            _, tok = yield ctx.wait(IN)
            if tok is END:
                in_done = True
            else:
                ring.append(tok)
        elif ring:
            yield Send(OUT, ring.popleft())
        elif in_done:
            yield Send(OUT, END)
            return
        else:
            _, tok = yield ctx.wait(IN)
            if tok is END:
                in_done = True
            else:
                ring.append(tok)


def tool_merge(ctx):
    """Both inputs in availability order, each input's order preserved."""
    OUT, IN1, IN2 = 1, 2, 3
    if (yield from negotiate_callee(ctx, (OUT,), (IN2, IN1))) is None:
        return
    open1 = open2 = True
    while open1 or open2:
        guards = []
        if open1:
            guards += [EventGuard(IN1, WORD), EventGuard(IN1, ENDK)]
        if open2:
            guards += [EventGuard(IN2, WORD), EventGuard(IN2, ENDK)]
        i, tok = yield Wait(tuple(guards))
        port = guards[i].port
        if tok is END:
            if port == IN1:
                open1 = False
            else:
                open2 = False
        else:
            yield Send(OUT, tok)
    yield Send(OUT, END)


def tool_nil(ctx):
    OUT = 1
    if (yield from negotiate_callee(ctx, (OUT,), ())) is None:
        return
    yield Send(OUT, END)


def tool_absorb(ctx):
    IN = 1
    if (yield from negotiate_callee(ctx, (), (IN,))) is None:
        return
    while True:
        _, tok = yield ctx.wait(IN)
        if tok is END:
            return


def tool_hello(ctx):
    OUT = 1
    if (yield from negotiate_callee(ctx, (OUT,), ())) is None:
        return
    for w in text_to_words("Hello World\n"):
        yield Send(OUT, w)
    yield Send(OUT, END)


def tool_fread(ctx):
    """Reads a file name on its input, streams the file to its output."""
    OUT, NAME, FSP = 1, 2, 3
    if (yield from negotiate_callee(ctx, (OUT,), (NAME,))) is None:
        return
    name = words_to_text((yield from recv_message(ctx, NAME)))
    yield Connect(FSP, fileserver_word())
    yield from send_message(ctx, FSP, [FS_RRQ] + text_to_words(name))
    while True:
        msg = yield from recv_message(ctx, FSP)
        if not msg or msg[0] != FS_DATA:
            break  # end of file, or a failure status: close early
        for w in msg[1:]:
            yield Send(OUT, w)
        yield from send_message(ctx, FSP, [1])
    yield Send(OUT, END)


def tool_fwrite(ctx):
    """Reads a file name first, then streams its data input into the file."""
    DATA, NAME, FSP = 1, 2, 3
    if (yield from negotiate_callee(ctx, (), (DATA, NAME))) is None:
        return
    name = words_to_text((yield from recv_message(ctx, NAME)))
    yield Connect(FSP, fileserver_word())
    yield from send_message(ctx, FSP, [FS_WRQ] + text_to_words(name))
    ack = yield from recv_message(ctx, FSP)
    ok = ack == [1]
    chunk = []
    while True:
        _, tok = yield ctx.wait(DATA)
        done = tok is END
        if not done:
            chunk.append(tok)
        if ok and (len(chunk) == FS_CHUNK_WORDS or done):
            yield from send_message(ctx, FSP, [FS_DATA] + chunk)
            ack = yield from recv_message(ctx, FSP)
            ok = ack == [1]
            chunk = []
        if done:
            return


# ---------------------------------------------------------------------------
# System inspection tools.

def tool_qdisp(ctx):
    OUT, QRY = 1, 2
    if (yield from negotiate_callee(ctx, (OUT,), ())) is None:
        return
    yield Connect(QRY, dispatcher_query_word())
    yield from send_message(ctx, QRY, [ctx.port_word(QRY)])
    for w in (yield from recv_message(ctx, QRY)):
        yield Send(OUT, w)
    yield Send(OUT, END)


def tool_qsched(ctx):
    """Scheduler query; dimension 4*processor+node selects the node, 0 means
    the node the tool itself runs on."""
    OUT, QRY = 1, 2
    if (yield from negotiate_callee(ctx, (OUT,), ())) is None:
        return
    d = ctx.dimension
    if d == 0:
        proc, node = ctx.processor_number, ctx.node_index
    else:
        proc, node = divmod(d, 4)
    if d != 0 and (d < 33 or proc >= 8 + ctx.processor_count):
        for w in text_to_words("fault\n"):
            yield Send(OUT, w)
        yield Send(OUT, END)
        return
    yield Connect(QRY, scheduler_query_word(proc, node))
    yield from send_message(ctx, QRY, [ctx.port_word(QRY)])
    for w in (yield from recv_message(ctx, QRY)):
        yield Send(OUT, w)
    yield Send(OUT, END)


# ---------------------------------------------------------------------------
# The shell.

def shell(ctx):
    """Line interpreter over a port-identifier stack (init process)."""
    OUT, IN, CMD, RES = 1, 2, 3, 4
    outs = yield from negotiate_callee(ctx, (OUT,), (IN,))
    if outs is None:
        return
    console_out = outs[0]  # conceptual stack bottom: endless console ports
    # reserve console input, naming our own input port; holding the
    # connection open keeps the reservation
    yield Connect(RES, console_in_word())
    yield Send(RES, ctx.port_word(IN))

    stack = []
    name = []
    c = SP
    d = 0
    cmd_dirty = False
    state = "prompt"

    while True:
        if state == "prompt":
            yield Send(OUT, 0x3E)
            yield Send(OUT, SP)
            yield Send(OUT, END)
            state = "input"

        elif state == "input":
            _, c = yield ctx.wait(IN)
            if c is END:
                state = "stop"
            elif c == QUOTE:
                dest = stack.pop() if stack else console_out
                yield Connect(CMD, dest)
                cmd_dirty = True
                state = "string"
            elif c > SP:
                name = [c]
                state = "name"
            else:
                state = "space"

        elif state == "space":
            if c == NL:
                if stack:
                    top = stack.pop()
                    while stack:  # remaining ports are closed immediately
                        w = stack.pop()
                        yield Connect(CMD, w)
                        yield Send(CMD, END)
                    yield Connect(CMD, top)
                    cmd_dirty = True
                    state = "console"
                else:
                    state = "prompt"
            else:
                state = "input"

        elif state == "console":
            # one console line forwarded into the popped top port
            _, c = yield ctx.wait(IN)
            if c is END:
                state = "stop"
            else:
                yield Send(CMD, c)
                if c == NL:
                    yield Send(CMD, END)
                    cmd_dirty = False
                    state = "space"

        elif state == "name":
            _, c = yield ctx.wait(IN)
            d = 0
            if c is END:
                state = "stop"
            elif c == COLON:
                state = "dimension"
            elif c > SP:
                if len(name) == NAME_CAP:
                    state = "error"
                else:
                    name.append(c)
            else:
                state = "command"

        elif state == "dimension":
            _, c = yield ctx.wait(IN)
            if c is END:
                state = "stop"
            elif c <= SP:
                state = "command"
            elif 0x30 <= c <= 0x39:
                d = d * 10 + c - 0x30
            else:
                state = "error"

        elif state == "string":
            _, c = yield ctx.wait(IN)
            if c is END:
                state = "stop"
            elif c == QUOTE:
                state = "quote"
            else:
                yield Send(CMD, c)

        elif state == "quote":
            _, c = yield ctx.wait(IN)
            if c is END:
                state = "stop"
            elif c == QUOTE:
                yield Send(CMD, QUOTE)  # doubled quote: literal quote
                state = "string"
            else:
                yield Send(CMD, END)
                cmd_dirty = False
                state = "space"

        elif state == "command":
            me = ctx.port_word(CMD)
            yield Connect(CMD, PORT_LOADER)
            yield Send(CMD, me)
            yield Send(CMD, d)
            for w in name:
                yield Send(CMD, w)
            for w in (0x2E, 0x6E, 0x6F, 0x70):  # ".nop"
                yield Send(CMD, w)
            yield Send(CMD, END)
            # scheduler's acknowledgment: the new control port, or 0
            _, ack = yield ctx.wait(CMD)
            if ack is END:
                state = "error"
                continue
            _, fin = yield ctx.wait(CMD)
            if fin is not END or ack == 0:
                state = "error"
                continue
            yield Connect(CMD, ack)
            cmd_dirty = True
            yield Send(CMD, me)
            _, n = yield ctx.wait(CMD)
            if n is END:
                state = "error"
                continue
            for _ in range(n):
                w = stack.pop() if stack else console_out
                yield Send(CMD, w)
            _, n = yield ctx.wait(CMD)
            if n is END:
                state = "error"
                continue
            overflow = False
            broken = False
            for _ in range(n):
                _, w = yield ctx.wait(CMD)
                if w is END:
                    broken = True
                    break
                if len(stack) < STACK_CAP:
                    stack.append(w)
                else:
                    overflow = True
            if broken:
                state = "error"  # our half-open message closes in the error state
                continue
            _, fin = yield ctx.wait(CMD)
            if fin is not END:
                state = "error"
                continue
            yield Send(CMD, END)
            cmd_dirty = False
            state = "error" if overflow else "space"

        elif state == "error":
            if cmd_dirty:
                yield Send(CMD, END)
                cmd_dirty = False
            for w in text_to_words("fault\n"):
                yield Send(OUT, w)
            yield Send(OUT, END)
            while stack:
                w = stack.pop()
                yield Connect(CMD, w)
                yield Send(CMD, END)
            state = "prompt"

        else:  # stop
            for w in text_to_words("stop\n"):
                yield Send(OUT, w)
            yield Send(OUT, END)
            return


TOOLS = {
    "ulsh": shell,
    "upper": tool_upper,
    "parafill": tool_parafill,
    "concat": tool_concat,
    "dup": tool_dup,
    "buf": tool_buf,
    "merge": tool_merge,
    "nil": tool_nil,
    "absorb": tool_absorb,
    "hello": tool_hello,
    "fread": tool_fread,
    "fwrite": tool_fwrite,
    "qdisp": tool_qdisp,
    "qsched": tool_qsched,
}
