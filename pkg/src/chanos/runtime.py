"""Process model plumbing: program manifests, per-node memory ledger, records.

A node's user allocation area is the word range [0x0101, 0x4000).  The ledger
keeps a sorted, coalesced free list over it; processes get two first-fit
regions (code before data).  Memory demand is fully determined by a program's
manifest and the start-time dimension: data = static + per_dimension * dim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

USER_BASE = 0x0101
USER_END = 0x4000
USER_WORDS = USER_END - USER_BASE  # 0x3EFF

CORES_PER_NODE = 8
# Core 0 of every scheduled node belongs to the scheduler; user processes
# run on cores 1..7.
USER_CORES = tuple(range(1, CORES_PER_NODE))


class LedgerError(Exception):
    """Internal allocator invariant violated (double free, foreign region)."""


class ConfigError(Exception):
    """Bad machine or program configuration."""


@dataclass(frozen=True)
class ProgramManifest:
    """Executable-file content: name and memory sizing in words."""

    name: str
    code_words: int
    static_data_words: int
    words_per_dimension: int

    def __post_init__(self):
        if not self.name:
            raise ConfigError("manifest name must be non-empty")
        if self.code_words < 1:
            raise ConfigError("code_words must be >= 1")
        if self.static_data_words < 0 or self.words_per_dimension < 0:
            raise ConfigError("data sizes must be non-negative")

    def data_words(self, dimension: int) -> int:
        return self.static_data_words + self.words_per_dimension * dimension


@dataclass
class Region:
    start: int
    length: int

    @property
    def end(self) -> int:
        """Inclusive upper bound, as printed by the scheduler query."""
        return self.start + self.length - 1


class MemoryLedger:
    """Free list of disjoint, sorted, coalesced regions in the user area."""

    def __init__(self, base: int = USER_BASE, limit: int = USER_END):
        self.base = base
        self.limit = limit
        self.free: list[Region] = [Region(base, limit - base)]

    def total_free(self) -> int:
        return sum(r.length for r in self.free)

    def allocate(self, words: int) -> Region | None:
        """First fit at the lowest address; None when nothing fits."""
        if words < 1:
            raise LedgerError(f"allocation of {words} words")
        for i, r in enumerate(self.free):
            if r.length >= words:
                got = Region(r.start, words)
                if r.length == words:
                    del self.free[i]
                else:
                    r.start += words
                    r.length -= words
                return got
        return None

    def allocate_pair(self, code_words: int, data_words: int):
        """Code then data, both first fit; a failure leaves the ledger unchanged."""
        code = self.allocate(code_words)
        if code is None:
            return None
        data = self.allocate(data_words) if data_words else Region(code.start, 0)
        if data_words and data is None:
            self.release(code)
            return None
        return code, data

    def release(self, region: Region) -> None:
        if region.length == 0:
            return
        if region.start < self.base or region.start + region.length > self.limit:
            raise LedgerError(f"foreign region {region}")
        lo, hi = region.start, region.start + region.length
        at = 0
        for i, r in enumerate(self.free):
            if r.start >= hi:
                at = i
                break
            if r.start + r.length > lo:
                raise LedgerError(f"double free at {region}")
            at = i + 1
        self.free.insert(at, Region(lo, hi - lo))
        self._coalesce(at)

    def _coalesce(self, at: int) -> None:
        if at + 1 < len(self.free):
            cur, nxt = self.free[at], self.free[at + 1]
            if cur.start + cur.length == nxt.start:
                cur.length += nxt.length
                del self.free[at + 1]
        if at > 0:
            prev, cur = self.free[at - 1], self.free[at]
            if prev.start + prev.length == cur.start:
                prev.length += cur.length
                del self.free[at]

    def two_largest(self) -> tuple[int, int]:
        """Lengths of the two largest free regions; missing regions report 0."""
        best = second = 0
        for r in self.free:
            if r.length > best:
                best, second = r.length, best
            elif r.length > second:
                second = r.length
        return best, second


@dataclass
class ProcessRecord:
    """One running user process: placement, memory, and identity."""

    processor: int
    node: int
    core: int
    name: str
    dimension: int
    code: Region
    data: Region
    ctrl_word: int
    system: bool = False


@dataclass
class ProgramRegistry:
    """Name -> behavior factory; manifests govern the ledger accounting."""

    behaviors: dict = field(default_factory=dict)
    manifests: dict = field(default_factory=dict)

    def register(self, name: str, manifest: ProgramManifest, behavior) -> None:
        if name in self.behaviors:
            raise ConfigError(f"duplicate program name: {name}")
        self.behaviors[name] = behavior
        self.manifests[name] = manifest

    def behavior(self, name: str):
        return self.behaviors.get(name)
