"""AFL-style mutation stages.

Bit order: bit ``i`` of the input is ``data[i >> 3] & (0x80 >> (i & 7))``, so
``bitflip1`` at bit 0 turns ``0x00`` into ``0x80`` (AFL's ``FLIP_BIT``).

Deterministic stages are generators over every candidate for an input;
:func:`mutate` produces one candidate for any stage from an rng.
"""
from __future__ import annotations

import random

import numba
import numpy as np
from typing import Iterator, Optional, Tuple

ARITH_MAX = 35
INTERESTING_8 = (-128, -1, 0, 1, 16, 32, 64, 100, 127)
INTERESTING_16 = (-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767)
HAVOC_STACK_POW2 = 7
HAVOC_BLK_SMALL = 32
DEFAULT_MAX_LEN = 4096

STAGES = ("bitflip1", "bitflip2", "bitflip4", "byteflip", "arith", "interesting", "havoc", "splice")
DETERMINISTIC = STAGES[:6]


def flip_bit(buf: bytearray, bit: int) -> None:
    buf[bit >> 3] ^= 0x80 >> (bit & 7)


def bitflip(data: bytes, width: int) -> Iterator[Tuple[int, bytes]]:
    """Flip ``width`` consecutive bits at every bit offset."""
    nbits = len(data) * 8
    for pos in range(nbits - width + 1):
        buf = bytearray(data)
        for k in range(width):
            flip_bit(buf, pos + k)
        yield pos, bytes(buf)


def byteflip(data: bytes) -> Iterator[Tuple[int, bytes]]:
    for pos in range(len(data)):
        buf = bytearray(data)
        buf[pos] ^= 0xFF
        yield pos, bytes(buf)


def arith(data: bytes) -> Iterator[Tuple[int, bytes]]:
    """Add and subtract 1..35 at every byte, wrapping modulo 256."""
    for pos in range(len(data)):
        orig = data[pos]
        for j in range(1, ARITH_MAX + 1):
            for v in ((orig + j) & 0xFF, (orig - j) & 0xFF):
                buf = bytearray(data)
                buf[pos] = v
                yield pos, bytes(buf)


def interesting(data: bytes) -> Iterator[Tuple[int, bytes]]:
    for pos in range(len(data)):
        for v in INTERESTING_8:
            if data[pos] == v & 0xFF:
                continue
            buf = bytearray(data)
            buf[pos] = v & 0xFF
            yield pos, bytes(buf)


def deterministic(stage: str, data: bytes) -> Iterator[Tuple[int, bytes]]:
    if stage == "bitflip1":
        return bitflip(data, 1)
    if stage == "bitflip2":
        return bitflip(data, 2)
    if stage == "bitflip4":
        return bitflip(data, 4)
    if stage == "byteflip":
        return byteflip(data)
    if stage == "arith":
        return arith(data)
    if stage == "interesting":
        return interesting(data)
    raise ValueError(f"not a deterministic stage: {stage}")


_INTERESTING_32 = (-2147483648, -100663046, -32769, 32768, 65535, 65536, 100663045, 2147483647)
_I8 = np.array([v & 0xFF for v in INTERESTING_8], dtype=np.int64)
_I16 = np.array([v & 0xFFFF for v in INTERESTING_8 + INTERESTING_16], dtype=np.int64)
_I32 = np.array([v & 0xFFFFFFFF for v in INTERESTING_8 + INTERESTING_16 + _INTERESTING_32], dtype=np.int64)


@numba.njit(cache=True)
def _below(state, n):
    # xorshift64*, high bits reduced modulo n
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return int(((x * np.uint64(0x2545F4914F6CDD1D)) >> np.uint64(32)) % np.uint64(n))


@numba.njit(cache=True)
def _blk(state, limit):
    return 1 + _below(state, min(HAVOC_BLK_SMALL, limit))


@numba.njit(cache=True)
def _load(buf, pos, width, big):
    v = 0
    for k in range(width):
        b = buf[pos + k] if big == 0 else buf[pos + width - 1 - k]
        v |= int(b) << (8 * k)
    return v


@numba.njit(cache=True)
def _store(buf, pos, width, big, v):
    for k in range(width):
        b = (v >> (8 * k)) & 0xFF
        if big == 0:
            buf[pos + k] = b
        else:
            buf[pos + width - 1 - k] = b


@numba.njit(cache=True)
def _havoc(buf, n, cap, state, i8, i16, i32):
    """Mutate ``buf[:n]`` in place (capacity ``cap``); returns the new length."""
    tmp = np.empty(HAVOC_BLK_SMALL, dtype=np.uint8)
    for _ in range(1 << (1 + _below(state, HAVOC_STACK_POW2))):
        if n == 0:
            buf[0] = _below(state, 256)
            n = 1
            continue
        op = _below(state, 15)
        if op == 0:
            bit = _below(state, n * 8)
            buf[bit >> 3] ^= 0x80 >> (bit & 7)
        elif op == 1:
            buf[_below(state, n)] = i8[_below(state, i8.shape[0])]
        elif op == 2 or op == 3:
            width = 2 if op == 2 else 4
            if n >= width:
                vals = i16 if width == 2 else i32
                v = vals[_below(state, vals.shape[0])]
                pos = _below(state, n - width + 1)
                _store(buf, pos, width, _below(state, 2), v)
        elif op == 4 or op == 5:
            pos = _below(state, n)
            d = 1 + _below(state, ARITH_MAX)
            if op == 4:
                buf[pos] = (int(buf[pos]) - d) & 0xFF
            else:
                buf[pos] = (int(buf[pos]) + d) & 0xFF
        elif op <= 9:
            width = 2 if op < 8 else 4
            if n >= width:
                d = 1 + _below(state, ARITH_MAX)
                pos = _below(state, n - width + 1)
                big = _below(state, 2)
                v = _load(buf, pos, width, big)
                v = v - d if (op == 6 or op == 8) else v + d
                _store(buf, pos, width, big, v & ((1 << (8 * width)) - 1))
        elif op == 10:
            buf[_below(state, n)] ^= 1 + _below(state, 255)
        elif op <= 12:
            # delete a block; twice as likely as cloning so inputs do not only grow
            if n >= 2:
                dl = _blk(state, n - 1)
                pos = _below(state, n - dl + 1)
                for k in range(pos, n - dl):
                    buf[k] = buf[k + dl]
                n -= dl
        elif op == 13:
            if n < cap:
                # clone a block (75%) or insert a constant run (25%)
                if _below(state, 4) != 0:
                    cl = _blk(state, n)
                    src = _below(state, n - cl + 1)
                    for k in range(cl):
                        tmp[k] = buf[src + k]
                else:
                    cl = _blk(state, HAVOC_BLK_SMALL)
                    fill = _below(state, 256) if _below(state, 2) else buf[_below(state, n)]
                    for k in range(cl):
                        tmp[k] = fill
                cl = min(cl, cap - n)
                to = _below(state, n + 1)
                for k in range(n - 1, to - 1, -1):
                    buf[k + cl] = buf[k]
                for k in range(cl):
                    buf[to + k] = tmp[k]
                n += cl
        elif n >= 2:
            # overwrite a block with another block (75%) or a constant run
            cl = _blk(state, n - 1)
            src = _below(state, n - cl + 1)
            dst = _below(state, n - cl + 1)
            if _below(state, 4) != 0:
                for k in range(cl):
                    tmp[k] = buf[src + k]
                for k in range(cl):
                    buf[dst + k] = tmp[k]
            else:
                fill = _below(state, 256) if _below(state, 2) else buf[_below(state, n)]
                for k in range(cl):
                    buf[dst + k] = fill
    return n


def havoc(data: bytes, rng: random.Random, max_len: int = DEFAULT_MAX_LEN) -> bytes:
    """Apply a stack of 2..128 random edits drawn from AFL's havoc menu.

    The edit sequence is driven by a xorshift generator seeded from ``rng``, so
    the result is a pure function of ``(data, rng state)``.
    """
    n = min(len(data), max_len)
    buf = np.empty(max(max_len, n, 1), dtype=np.uint8)
    buf[:n] = np.frombuffer(data, dtype=np.uint8, count=n)
    state = np.array([rng.getrandbits(64) | 1], dtype=np.uint64)
    n = _havoc(buf, n, max_len, state, _I8, _I16, _I32)
    return buf[:n].tobytes()


def splice(data: bytes, other: bytes, rng: random.Random) -> Optional[bytes]:
    """Head of ``data`` + tail of ``other``, split inside the range where they differ."""
    n = min(len(data), len(other))
    first = next((i for i in range(n) if data[i] != other[i]), None)
    if first is None:
        return None
    last = max(i for i in range(n) if data[i] != other[i])
    if last - first < 2:
        return None
    split = first + rng.randrange(last - first)
    return data[:split] + other[split:]


def mutate(data: bytes, stage: str, rng: random.Random, other: Optional[bytes] = None,
           max_len: int = DEFAULT_MAX_LEN) -> bytes:
    """One candidate from ``stage``; deterministic stages pick a random position."""
    if stage == "havoc":
        return havoc(data, rng, max_len)
    if stage == "splice":
        if other is None:
            raise ValueError("splice needs a second input")
        spliced = splice(data, other, rng)
        return havoc(spliced if spliced is not None else data, rng, max_len)
    if stage not in DETERMINISTIC:
        raise ValueError(f"unknown stage {stage!r}")
    if not data:
        return data
    buf = bytearray(data)
    if stage.startswith("bitflip"):
        width = int(stage[-1])
        pos = rng.randrange(max(1, len(data) * 8 - width + 1))
        for k in range(min(width, len(data) * 8 - pos)):
            flip_bit(buf, pos + k)
    elif stage == "byteflip":
        buf[rng.randrange(len(buf))] ^= 0xFF
    elif stage == "arith":
        pos = rng.randrange(len(buf))
        d = 1 + rng.randrange(ARITH_MAX)
        buf[pos] = (buf[pos] + (d if rng.randrange(2) else -d)) & 0xFF
    else:
        buf[rng.randrange(len(buf))] = rng.choice(INTERESTING_8) & 0xFF
    return bytes(buf)
