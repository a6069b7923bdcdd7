import random

import pytest

from chanos.runtime import (USER_BASE, USER_WORDS, LedgerError, MemoryLedger,
                            ProgramManifest, ConfigError)


def test_initial_state():
    led = MemoryLedger()
    assert led.total_free() == 0x3EFF
    assert led.two_largest() == (0x3EFF, 0)


def test_first_fit_matches_scheduler_transcript():
    # Inclusive word ranges as printed by the scheduler query.
    led = MemoryLedger()
    code = led.allocate(0xF0)
    data = led.allocate(0x1D7)
    assert (code.start, code.end) == (0x0101, 0x01F0)
    assert (data.start, data.end) == (0x01F1, 0x03C7)
    code2 = led.allocate(0x90)
    data2 = led.allocate(0x123)
    assert (code2.start, code2.end) == (0x03C8, 0x0457)
    assert (data2.start, data2.end) == (0x0458, 0x057A)


def test_fail_leaves_ledger_unchanged():
    led = MemoryLedger()
    big = led.allocate(0x3EFF)
    assert big is not None
    snapshot = [(r.start, r.length) for r in led.free]
    assert led.allocate(1) is None
    assert led.allocate_pair(1, 1) is None
    assert [(r.start, r.length) for r in led.free] == snapshot


def test_pair_rolls_back_code_when_data_fails():
    led = MemoryLedger()
    assert led.allocate_pair(0x100, 0x4000) is None
    assert led.total_free() == 0x3EFF
    assert len(led.free) == 1


def test_free_restores_single_region():
    led = MemoryLedger()
    code, data = led.allocate_pair(0xF0, 0x1D7)
    led.release(data)
    led.release(code)
    assert len(led.free) == 1
    assert led.free[0].start == USER_BASE
    assert led.total_free() == 0x3EFF


def test_free_middle_fragments_then_two_largest():
    led = MemoryLedger()
    a = led.allocate(0x100)
    b = led.allocate(0x80)
    c = led.allocate(0x200)
    led.release(b)
    lengths = sorted((r.length for r in led.free), reverse=True)
    assert led.two_largest() == (lengths[0], lengths[1])
    led.release(a)
    lengths = sorted((r.length for r in led.free), reverse=True)
    assert led.two_largest() == (lengths[0], lengths[1])
    # a and b coalesced into one 0x180 region
    assert 0x180 in lengths
    led.release(c)
    assert led.two_largest() == (0x3EFF, 0)


def test_two_largest_explicit_sets():
    # Exhaust the area, then free regions of exactly 0x100, 0x80, 0x200.
    led = MemoryLedger()
    regions = [led.allocate(n) for n in (0x100, 0x10, 0x80, 0x10, 0x200)]
    led.allocate(led.total_free())
    led.release(regions[0])
    led.release(regions[2])
    led.release(regions[4])
    assert led.two_largest() == (0x200, 0x100)
    led2 = MemoryLedger()
    led2.allocate(led2.total_free())
    assert led2.two_largest() == (0, 0)


def test_double_free_detected():
    led = MemoryLedger()
    r = led.allocate(0x10)
    led.release(r)
    with pytest.raises(LedgerError):
        led.release(r)


def test_fuzz_conservation_and_disjointness():
    rng = random.Random(42)
    led = MemoryLedger()
    held = []
    allocated = 0
    for _ in range(1000):
        if held and (rng.random() < 0.45 or led.total_free() < 0x40):
            r = held.pop(rng.randrange(len(held)))
            led.release(r)
            allocated -= r.length
        else:
            r = led.allocate(rng.randrange(1, 0x200))
            if r is not None:
                held.append(r)
                allocated += r.length
        assert led.total_free() + allocated == USER_WORDS
        # free list stays sorted, coalesced, disjoint
        prev_end = 0
        for reg in led.free:
            assert reg.start > prev_end or prev_end == 0
            assert reg.start >= prev_end + 1 or prev_end == 0
            prev_end = reg.start + reg.length
        for i in range(len(led.free) - 1):
            a, b = led.free[i], led.free[i + 1]
            assert a.start + a.length < b.start  # coalesced => gap between
        best, second = led.two_largest()
        lens = sorted((r.length for r in led.free), reverse=True) + [0, 0]
        assert (best, second) == (lens[0], lens[1])


def test_manifest_data_formula():
    m = ProgramManifest("buf", 0x40, 0x10, 1)
    assert m.data_words(0) == 0x10
    assert m.data_words(20) == 0x10 + 20
    prev = -1
    for d in range(30):
        cur = m.data_words(d)
        assert cur > prev  # monotone in dimension
        prev = cur


def test_manifest_validation():
    with pytest.raises(ConfigError):
        ProgramManifest("", 1, 0, 0)
    with pytest.raises(ConfigError):
        ProgramManifest("x", 0, 0, 0)
    with pytest.raises(ConfigError):
        ProgramManifest("x", 1, -1, 0)
