"""Host-facing entry point: configuration, program files, run modes.

Config files are line oriented::

    processors 4
    link 0 0 1 2          # instanceA linkA instanceB linkB
    files ./files
    bootrom ./boot.rom
    capacity 8
    maxticks 2000000
    socket 0 1 listen 127.0.0.1:7001
    socket 0 2 connect 127.0.0.1:7002

Program manifests (".nop" files) are five lines: magic "NOP1", then
"name <text>", "code <hex words>", "data <hex words>", "perdim <hex words>".

Exit statuses: 0 ok, 2 bad configuration, 3 missing boot ROM, 4 init did not
start, 5 tick budget exhausted.
"""

from __future__ import annotations

import argparse
import os
import socket
import struct
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import bootsys, userland
from .fabric import DEFAULT_CAPACITY, Engine
from .runtime import ConfigError, ProgramManifest, ProgramRegistry
from .words import END, text_to_words, words_to_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ROM = 3
EXIT_INIT = 4
EXIT_TICKS = 5

DEFAULT_MAX_TICKS = 2_000_000

# Memory sizing for the stock programs.  The shell and qsched sizes pin the
# scheduler-query transcript; the rest are nominal.
DEFAULT_MANIFESTS = {
    "ulsh": ProgramManifest("ulsh", 0xF0, 0x1D7, 0),
    "upper": ProgramManifest("upper", 0xF0, 0x40, 0),
    "parafill": ProgramManifest("parafill", 0xC8, 0x60, 1),
    "concat": ProgramManifest("concat", 0x60, 0x20, 0),
    "dup": ProgramManifest("dup", 0x58, 0x20, 0),
    "buf": ProgramManifest("buf", 0x48, 0x10, 1),
    "merge": ProgramManifest("merge", 0x68, 0x20, 0),
    "nil": ProgramManifest("nil", 0x18, 0x08, 0),
    "absorb": ProgramManifest("absorb", 0x20, 0x08, 0),
    "hello": ProgramManifest("hello", 0x30, 0x20, 0),
    "fread": ProgramManifest("fread", 0xA0, 0x80, 0),
    "fwrite": ProgramManifest("fwrite", 0xB0, 0x90, 0),
    "qdisp": ProgramManifest("qdisp", 0x88, 0x100, 0),
    "qsched": ProgramManifest("qsched", 0x90, 0x123, 0),
}


@dataclass
class SocketSpec:
    instance: int
    link: int
    role: str  # "listen" | "connect"
    host: str
    port: int


@dataclass
class TopologyConfig:
    processors: int = 4
    links: list = field(default_factory=list)
    files_dir: str | None = None
    boot_rom: str | None = None
    capacity: int = DEFAULT_CAPACITY
    max_ticks: int = DEFAULT_MAX_TICKS
    trace: bool = False
    sockets: list = field(default_factory=list)

    def validate(self):
        used = set()
        for (a, la, b, lb) in self.links:
            for inst, idx in ((a, la), (b, lb)):
                if not 0 <= inst < self.processors:
                    raise ConfigError(f"link endpoint {inst} out of range")
                if not 0 <= idx < 4:
                    raise ConfigError(f"link index {idx} out of range")
                if (inst, idx) in used:
                    raise ConfigError(f"link endpoint {inst}.{idx} reused")
                used.add((inst, idx))
            if a == b and la == lb:
                raise ConfigError("link connects an endpoint to itself")
        for s in self.sockets:
            if (s.instance, s.link) in used:
                raise ConfigError(
                    f"link endpoint {s.instance}.{s.link} reused by socket")
            used.add((s.instance, s.link))


def torus_links(width, height):
    """East/west are links 0/1, south/north 2/3, with wraparound."""
    links = []
    idx = lambda r, c: r * width + c
    for r in range(height):
        for c in range(width):
            links.append((idx(r, c), 0, idx(r, (c + 1) % width), 1))
            links.append((idx(r, c), 2, idx((r + 1) % height, c), 3))
    return links


def default_config(files_dir, boot_rom, processors=4, **kw):
    """The stock 4-processor (2x2 torus) machine of the transcripts."""
    if processors == 4:
        links = torus_links(2, 2)
    elif processors == 16:
        links = torus_links(4, 4)
    elif processors == 1:
        links = []
    else:
        raise ConfigError("default topologies exist for 1, 4, 16 processors")
    return TopologyConfig(processors=processors, links=links,
                          files_dir=files_dir, boot_rom=boot_rom, **kw)


def parse_config(path):
    cfg = TopologyConfig()
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]
        try:
            if key == "processors":
                cfg.processors = int(args[0])
            elif key == "link":
                a, la, b, lb = (int(x) for x in args)
                cfg.links.append((a, la, b, lb))
            elif key == "files":
                cfg.files_dir = os.path.join(base, args[0])
            elif key == "bootrom":
                cfg.boot_rom = os.path.join(base, args[0])
            elif key == "capacity":
                cfg.capacity = int(args[0])
            elif key == "maxticks":
                cfg.max_ticks = int(args[0])
            elif key == "trace":
                cfg.trace = args[0] == "on"
            elif key == "socket":
                host, port = args[3].rsplit(":", 1)
                cfg.sockets.append(SocketSpec(int(args[0]), int(args[1]),
                                              args[2], host, int(port)))
            else:
                raise ConfigError(f"unknown config key at line {lineno}: {key}")
        except (ValueError, IndexError):
            raise ConfigError(f"malformed config line {lineno}: {raw!r}") \
                from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Manifest files.

def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"NOP1\nname {manifest.name}\ncode {manifest.code_words:x}\n"
                 f"data {manifest.static_data_words:x}\n"
                 f"perdim {manifest.words_per_dimension:x}\n")


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read manifest: {e}") from None
    from .kernel import parse_manifest
    m = parse_manifest(text)
    if m is None:
        raise ConfigError(f"malformed manifest: {path}")
    return m


def install_default_files(files_dir):
    """Writes the stock .nop set (plus init.nop -> the shell)."""
    os.makedirs(files_dir, exist_ok=True)
    for name, manifest in DEFAULT_MANIFESTS.items():
        write_manifest(os.path.join(files_dir, f"{name}.nop"), manifest)
    write_manifest(os.path.join(files_dir, "init.nop"), DEFAULT_MANIFESTS["ulsh"])


def write_boot_rom(path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("multinode boot image\n")


def default_registry():
    reg = ProgramRegistry()
    for name, behavior in userland.TOOLS.items():
        reg.register(name, DEFAULT_MANIFESTS[name], behavior)
    return reg


# ---------------------------------------------------------------------------
# Socket-backed links: 5 bytes per token (kind, 4 payload bytes MSB first).

_TOKEN = struct.Struct(">BI")


class SocketAdapter:
    """One socket-backed link endpoint; serializes END-delimited bursts."""

    def __init__(self, sock):
        self.sock = sock
        self.alive = True
        self.backlog = deque()
        self._rx = deque()
        self._cur = []
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._reader, daemon=True)
        self._thread.start()

    def _reader(self):
        buf = b""
        try:
            while True:
                data = self.sock.recv(4096)
                if not data:
                    break
                buf += data
                while len(buf) >= 5:
                    kind, payload = _TOKEN.unpack(buf[:5])
                    buf = buf[5:]
                    if kind == 0:
                        self._cur.append(payload)
                    else:
                        with self._lock:
                            self._rx.append(tuple(self._cur))
                        self._cur = []
        except OSError:
            pass
        self.alive = False  # peer gone: the link reverts to unconnected

    def drain(self):
        with self._lock:
            items, self._rx = list(self._rx), deque()
        return items

    def has_input(self):
        with self._lock:
            return bool(self._rx)

    def _emit(self, words):
        out = b"".join(_TOKEN.pack(0, w & 0xFFFFFFFF) for w in words)
        out += _TOKEN.pack(1, 0)
        try:
            self.sock.sendall(out)
        except OSError:
            self.alive = False

    def send_frame(self, frame):
        if self.alive:
            self._emit(frame)

    def send_burst(self, words):
        if self.alive:
            self._emit(words)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def open_socket_links(cfg):
    """Establishes every socket link in the config; listen before connect."""
    adapters = []
    servers = []
    for spec in cfg.sockets:
        if spec.role == "listen":
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((spec.host, spec.port))
            srv.listen(1)
            servers.append((spec, srv))
        elif spec.role != "connect":
            raise ConfigError(f"socket role {spec.role!r}")
    for spec, srv in servers:
        conn, _ = srv.accept()
        srv.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        adapters.append((spec, SocketAdapter(conn)))
    for spec in cfg.sockets:
        if spec.role != "connect":
            continue
        last = None
        for _ in range(100):
            try:
                sk = socket.create_connection((spec.host, spec.port), timeout=5)
                break
            except OSError as e:
                last = e
                time.sleep(0.05)
        else:
            raise ConfigError(f"cannot connect {spec.host}:{spec.port}: {last}")
        sk.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        adapters.append((spec, SocketAdapter(sk)))
    return adapters


# ---------------------------------------------------------------------------
# Machine assembly and run control.

def build_machine(cfg, registry=None, adapters=None):
    cfg.validate()
    eng = Engine(cfg.processors, capacity=cfg.capacity, trace=cfg.trace,
                 registry=registry or default_registry(),
                 files_dir=cfg.files_dir)
    for (a, la, b, lb) in cfg.links:
        eng.wire_link(a, la, b, lb)
    for spec, adapter in (adapters or []):
        eng.attach_external(spec.instance, spec.link, adapter)
    bootsys.install(eng)
    return eng


def load_rom(path):
    if path is None or not os.path.isfile(path):
        raise ConfigError(f"boot ROM not found: {path}")
    with open(path, encoding="utf-8", errors="replace") as fh:
        words = text_to_words(fh.read())
    if not words:
        raise ConfigError(f"boot ROM empty: {path}")
    return words


def run_machine(cfg, script=None, registry=None, adapters=None,
                first_instance=True, echo=None, interactive=False,
                stop_event=None):
    """Builds the machine, boots it, runs to completion.

    Returns (exit_status, engine).  `script` is a list of input lines for
    the console; None with interactive=True reads host standard input.
    """
    eng = build_machine(cfg, registry=registry, adapters=adapters)
    if echo is not None:
        eng.console_write = echo
    pending = []
    eof_sent = [False]
    if first_instance:
        rom = load_rom(cfg.boot_rom)
        if script is not None:
            words = []
            for line in script:
                words.extend(text_to_words(line.rstrip("\n") + "\n"))
            pending.append(words)
        bootsys.start_first(eng, rom)

    def socket_idle():
        if stop_event is not None and stop_event.is_set():
            return False
        live = [l.adapter for l in eng.links if l.adapter is not None
                and l.adapter.alive]
        if not live:
            return False
        deadline = time.monotonic() + 0.5
        while time.monotonic() < deadline:
            if any(a.has_input() for a in live):
                return True
            if stop_event is not None and stop_event.is_set():
                return False
            time.sleep(0.001)
        return True

    def feed(words, end):
        if eng.console_feed is None:
            return False
        eng.feed_console(words, end=end)
        return True

    def on_idle():
        if first_instance and pending:
            if feed(pending[0], end=script is not None):
                pending.pop(0)
                return True
        elif first_instance and interactive and not eof_sent[0]:
            try:
                line = input()
            except EOFError:
                eof_sent[0] = True
                return feed([], end=True)
            return feed(text_to_words(line + "\n"), end=False)
        if adapters:
            return socket_idle()
        return False

    finished = eng.run(cfg.max_ticks, on_idle=on_idle)
    for link in eng.links:
        if link.adapter is not None:
            link.adapter.close()
    if not finished:
        return EXIT_TICKS, eng
    if eng.init_failed:
        return EXIT_INIT, eng
    return EXIT_OK, eng


def console_text(eng):
    return words_to_text(eng.console_out)


# ---------------------------------------------------------------------------
# Command line.

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="chanos",
        description="Deterministic multinode channel machine simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)
    runp = sub.add_parser("run", help="boot a machine and run it")
    runp.add_argument("config", help="topology config file")
    runp.add_argument("--script", help="file of console input lines")
    runp.add_argument("--trace", action="store_true",
                      help="emit the deterministic event trace")
    runp.add_argument("--max-ticks", type=int, default=None)
    runp.add_argument("--listen", action="append", default=[],
                      metavar="LINK:HOST:PORT",
                      help="socket-back a link of instance 0, listening")
    runp.add_argument("--connect", action="append", default=[],
                      metavar="LINK:HOST:PORT",
                      help="socket-back a link of instance 0, connecting")
    runp.add_argument("--secondary", action="store_true",
                      help="this instance is not the first processor")
    initp = sub.add_parser("init-files",
                           help="write the stock program manifests")
    initp.add_argument("dir")
    args = parser.parse_args(argv)

    if args.cmd == "init-files":
        install_default_files(args.dir)
        write_boot_rom(os.path.join(args.dir, os.pardir, "boot.rom")
                       if os.path.basename(args.dir) else "boot.rom")
        return EXIT_OK

    try:
        cfg = parse_config(args.config)
        if args.max_ticks is not None:
            cfg.max_ticks = args.max_ticks
        if args.trace:
            cfg.trace = True
        for flag, role in ((args.listen, "listen"), (args.connect, "connect")):
            for item in flag:
                link, host, port = item.split(":")
                cfg.sockets.append(SocketSpec(0, int(link), role, host,
                                              int(port)))
        cfg.validate()
        adapters = open_socket_links(cfg) if cfg.sockets else None
        script = None
        if args.script:
            with open(args.script, encoding="utf-8") as fh:
                script = fh.read().splitlines()
    except ConfigError as e:
        print(f"chanos: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"chanos: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        status, eng = run_machine(
            cfg, script=script, adapters=adapters,
            first_instance=not args.secondary,
            echo=lambda w: (sys.stdout.write(words_to_text([w])),
                            sys.stdout.flush()),
            interactive=script is None and not args.secondary)
    except ConfigError as e:
        print(f"chanos: {e}", file=sys.stderr)
        return EXIT_ROM if "ROM" in str(e) else EXIT_CONFIG
    if args.trace:
        for ev in eng.trace_events:
            print(ev, file=sys.stderr)
        print(f"trace hash: {eng.trace_hash()}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
