"""Coverage feedback: slice hashing over packet streams plus two edge baselines.

* path-slice: TIP/TNT packets are folded into an SDBM hash; every ``max_tip``
  TIPs close a slice whose hash is encoded to one bit of a bit-granular map.
* direct-edge: AFL's ``cur ^ (prev >> 1)`` edge slots with hit-count buckets,
  fed by the VM's own instrumentation.
* edge-pt: edges reconstructed by walking the CFG along the packet stream,
  then scored exactly like direct-edge.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numba
import numpy as np

from .codec import MalformedStream, Packet, PacketKind, encode_packet
from .vm.program import (
    Call, CondBranch, Exit, IndirectJump, Jump, Return, TargetProgram, Trap,
)

U64 = (1 << 64) - 1
SDBM_MULT = 65599  # (h << 6) + (h << 16) - h
SDBM_MULT8 = pow(SDBM_MULT, 8, 1 << 64)
DEFAULT_MAP_BYTES = 1 << 16
DEFAULT_MAX_TIP = 8


def sdbm_update(h: int, b: int) -> int:
    return (b + (h << 6) + (h << 16) - h) & U64


def sdbm_bytes(data: bytes, h: int = 0) -> int:
    for b in data:
        h = (b + (h << 6) + (h << 16) - h) & U64
    return h


def encode_index(bit_hash: int, bit_size: int, literal: bool = False) -> int:
    """Fold a 64-bit hash into ``[0, bit_size)`` by XOR-ing ``log2(bit_size)``-bit pieces.

    ``literal=True`` reproduces the printed pseudocode, which shifts by
    ``bit_size`` itself and so keeps only the low ``log2(bit_size)`` bits for any
    realistic map.
    """
    if bit_size < 2 or bit_size & (bit_size - 1):
        raise ValueError(f"bit_size must be a power of two >= 2, got {bit_size}")
    width = bit_size.bit_length() - 1
    mask = bit_size - 1
    if literal:
        rnd = 64 // bit_size
        h = bit_hash & U64
        index = h & mask
        for _ in range(rnd + 1):
            h = h >> bit_size if bit_size < 64 else 0
            index ^= h & mask
        return index & mask
    rnd = 64 // width
    index = 0
    for k in range(rnd + 1):
        index ^= (bit_hash >> (k * width)) & mask
    return index


class MapMode(enum.Enum):
    BIT = "bit"            # one bit per slot
    HITCOUNT = "hitcount"  # one byte per slot, AFL buckets


class Novelty(enum.Enum):
    NOTHING = 0
    NEW_COVERAGE = 1


def _bucket_table() -> np.ndarray:
    t = np.zeros(256, dtype=np.uint8)
    for n in range(1, 256):
        if n <= 2:
            t[n] = n
        elif n == 3:
            t[n] = 4
        elif n <= 7:
            t[n] = 8
        elif n <= 15:
            t[n] = 16
        elif n <= 31:
            t[n] = 32
        elif n <= 127:
            t[n] = 64
        else:
            t[n] = 128
    return t


COUNT_CLASS = _bucket_table()


def bucket(count: int) -> int:
    """AFL hit-count bucket of a raw count (saturating at 255)."""
    return int(COUNT_CLASS[min(count, 255)])


class Bitmap:
    """Fixed-size coverage map.

    In HITCOUNT mode a *local* map holds raw saturating counts and is bucketed
    when compared; a *global* map holds the union of buckets seen per slot.
    ``touched`` lists byte offsets made nonzero since the last clear, so
    comparisons and resets never scan the whole map.
    """

    def __init__(self, size: int = DEFAULT_MAP_BYTES, mode: MapMode = MapMode.BIT):
        if size < 1 or size & (size - 1):
            raise ValueError("bitmap size must be a power of two")
        self.size = size
        self.mode = mode
        self.data = np.zeros(size, dtype=np.uint8)
        self.touched: List[int] | np.ndarray = []

    @property
    def slots(self) -> int:
        return self.size * 8 if self.mode is MapMode.BIT else self.size

    @property
    def bits_per_slot(self) -> int:
        return 1 if self.mode is MapMode.BIT else 8

    def set_bit(self, index: int) -> None:
        byte = index >> 3
        v = self.data[byte]
        if not v:
            self.touched.append(byte)
        self.data[byte] = v | (1 << (index & 7))

    def test_bit(self, index: int) -> bool:
        return bool(self.data[index >> 3] >> (index & 7) & 1)

    def hit(self, slot: int) -> None:
        v = self.data[slot]
        if not v:
            self.touched.append(slot)
        if v < 255:
            self.data[slot] = v + 1

    def touched_array(self) -> np.ndarray:
        return np.asarray(self.touched, dtype=np.int64)

    def clear(self) -> None:
        self.data[self.touched_array()] = 0
        self.touched = []

    def occupancy(self) -> int:
        """Number of occupied slots (set bits, or nonzero bytes)."""
        if self.mode is MapMode.BIT:
            return int(np.unpackbits(self.data).sum())
        return int(np.count_nonzero(self.data))

    def set_indices(self) -> List[int]:
        if self.mode is MapMode.BIT:
            return np.flatnonzero(np.unpackbits(self.data, bitorder="little")).tolist()
        return np.flatnonzero(self.data).tolist()

    def classified(self) -> np.ndarray:
        return COUNT_CLASS[self.data] if self.mode is MapMode.HITCOUNT else self.data.copy()

    def copy(self) -> "Bitmap":
        b = Bitmap(self.size, self.mode)
        b.data[:] = self.data
        b.touched = list(self.touched)
        return b

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def dump(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.tobytes())

    def __eq__(self, other):
        return (isinstance(other, Bitmap) and self.mode is other.mode
                and self.size == other.size and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Bitmap({self.size}, {self.mode.value}, occupancy={self.occupancy()})"


@numba.njit(cache=True)
def _absorb(local, glob, touched, table, use_table):
    new = 0
    for k in range(touched.shape[0]):
        i = touched[k]
        v = local[i]
        if use_table:
            v = table[v]
        if v & ~glob[i]:
            new = 1
            glob[i] |= v
    return new


def has_new_bits(local: Bitmap, glob: Bitmap) -> Novelty:
    """Compare a per-run map against the global map; the global map absorbs it."""
    if local.mode is not glob.mode or local.size != glob.size:
        raise ValueError("bitmap mode/size mismatch")
    new = _absorb(local.data, glob.data, local.touched_array(), COUNT_CLASS,
                  local.mode is MapMode.HITCOUNT)
    return Novelty.NEW_COVERAGE if new else Novelty.NOTHING


def would_be_new(local: Bitmap, glob: Bitmap) -> bool:
    """Like :func:`has_new_bits` without mutating the global map."""
    return has_new_bits(local, glob.copy()) is Novelty.NEW_COVERAGE


# ---------------------------------------------------------------- slices

class SliceHasher:
    """Streaming slice hash over TIP/TNT packets.

    On each TIP the 8 address bytes enter the hash and the TNT counter resets;
    after ``max_tip`` TIPs the hash is encoded to a bit and a new slice starts
    from this TIP alone. A TNT byte (stop bit included, so groups of different
    length never collide) enters the hash only if all of its branch bits fall
    within the first ``max_tnt`` branches since the last TIP. PGE/PGD packets
    are skipped.
    """

    def __init__(self, max_tip: int = DEFAULT_MAX_TIP, max_tnt: int = 1 << 30,
                 bit_size: int = DEFAULT_MAP_BYTES * 8, literal_encoding: bool = False):
        if max_tip < 1 or max_tnt < 1:
            raise ValueError("max_tip and max_tnt must be >= 1")
        self.max_tip = max_tip
        self.max_tnt = max_tnt
        self.bit_size = bit_size
        self.literal_encoding = literal_encoding
        self.bit_hash = 0
        self.tip_cnt = 0
        self.tnt_cnt = 0
        self.slices = 0
        # when a set, every completed slice's raw 64-bit hash is added to it
        self.record: Optional[set] = None
        self._tip_hash: Dict[bytes, int] = {}
        encode_index(0, bit_size)  # validates bit_size
        width = bit_size.bit_length() - 1
        self._shifts = tuple(range(0, 64, width))
        self._mask = bit_size - 1

    def reset(self) -> None:
        self.bit_hash = 0
        self.tip_cnt = 0
        self.tnt_cnt = 0
        self.slices = 0

    def _index(self, h: int) -> int:
        if self.literal_encoding:
            return encode_index(h, self.bit_size, True)
        index = 0
        for s in self._shifts:
            index ^= h >> s
        return index & self._mask

    def _close_slice(self, bitmap: Bitmap) -> None:
        bitmap.set_bit(self._index(self.bit_hash))
        self.slices += 1
        if self.record is not None:
            self.record.add(self.bit_hash)

    def update(self, packet: Packet, bitmap: Bitmap) -> None:
        """Reference per-packet update."""
        if packet.kind is PacketKind.TIP:
            addr = packet.address.to_bytes(8, "little")
            for b in addr:
                self.bit_hash = sdbm_update(self.bit_hash, b)
            self.tip_cnt += 1
            self.tnt_cnt = 0
            if self.tip_cnt >= self.max_tip:
                self._close_slice(bitmap)
                self.tip_cnt = 0
                self.bit_hash = sdbm_bytes(addr)
        elif packet.kind is PacketKind.TNT:
            k = len(packet.tnt_bits)
            if self.tnt_cnt + k <= self.max_tnt:
                self.bit_hash = sdbm_update(self.bit_hash, encode_packet(packet)[0])
            self.tnt_cnt += k

    def feed(self, data: bytes, bitmap: Bitmap) -> int:
        """Decode-and-hash ``data`` directly; returns bytes consumed.

        Equivalent to decoding with :func:`codec.decode_stream` and calling
        :meth:`update` per packet, without materialising packets. A trailing
        partial packet is left unconsumed.
        """
        h = self.bit_hash
        tip_cnt = self.tip_cnt
        tnt_cnt = self.tnt_cnt
        max_tip = self.max_tip
        max_tnt = self.max_tnt
        cache = self._tip_hash
        record = self.record
        index_of = self._index
        bits = bitmap.data
        touched = bitmap.touched
        pos = 0
        n = len(data)
        while pos < n:
            b = data[pos]
            if not b & 1:
                if b < 4:
                    raise MalformedStream(pos, b)
                tnt_cnt += b.bit_length() - 2
                if tnt_cnt <= max_tnt:
                    h = (h * SDBM_MULT + b) & U64
                pos += 1
                continue
            if pos + 9 > n:
                break
            if b == 0x03:
                key = data[pos + 1:pos + 9]
                c = cache.get(key)
                if c is None:
                    c = cache[key] = sdbm_bytes(key)
                h = (h * SDBM_MULT8 + c) & U64
                tip_cnt += 1
                tnt_cnt = 0
                if tip_cnt >= max_tip:
                    idx = index_of(h)
                    byte = idx >> 3
                    v = bits[byte]
                    if not v:
                        touched.append(byte)
                    bits[byte] = v | (1 << (idx & 7))
                    self.slices += 1
                    if record is not None:
                        record.add(h)
                    tip_cnt = 0
                    h = c
            elif b != 0x05 and b != 0x07:
                raise MalformedStream(pos, b)
            pos += 9
        self.bit_hash = h
        self.tip_cnt = tip_cnt
        self.tnt_cnt = tnt_cnt
        return pos


def slice_update(hasher: SliceHasher, packet: Packet, bitmap: Bitmap) -> Tuple[SliceHasher, Bitmap]:
    hasher.update(packet, bitmap)
    return hasher, bitmap


@dataclass
class FeedbackConfig:
    max_tip: int = DEFAULT_MAX_TIP
    max_tnt: Optional[int] = None  # None: the target's block count
    bitmap_size: int = DEFAULT_MAP_BYTES
    literal_encoding: bool = False

    def __post_init__(self):
        if self.max_tip < 1:
            raise ValueError("max_tip must be >= 1")
        if self.max_tnt is not None and self.max_tnt < 1:
            raise ValueError("max_tnt must be >= 1")
        if self.bitmap_size < 1 or self.bitmap_size & (self.bitmap_size - 1):
            raise ValueError("bitmap_size must be a power of two")

    def tnt_cap(self, program: TargetProgram) -> int:
        return self.max_tnt if self.max_tnt is not None else program.block_count

    def hasher(self, program: TargetProgram) -> SliceHasher:
        return SliceHasher(self.max_tip, self.tnt_cap(program), self.bitmap_size * 8,
                           self.literal_encoding)


# ---------------------------------------------------------------- edges

def afl_edge_update(prev_carry: int, cur_id: int, bitmap: Bitmap, labels: Sequence[int]) -> int:
    """Count one block transition; returns the new ``prev_carry``."""
    lab = int(labels[cur_id])
    bitmap.hit((lab ^ prev_carry) & (bitmap.size - 1))
    return lab >> 1


class ReconstructionError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"packet {position}: {message}")
        self.position = position


class EdgeWalker:
    """Incremental CFG walk driven by packets.

    Feed packets with :meth:`feed` as they are decoded; each call returns the
    edges it completed. :meth:`finish` checks that the trace ended at the PGD.
    """

    def __init__(self, program: TargetProgram, step_budget: int = 100_000):
        self.program = program
        self.step_budget = step_budget
        self.position = 0
        self.done = False
        self._edges: List[Tuple[int, int]] = []
        self._co = self._walk()
        next(self._co)

    def feed(self, packets: Iterable[Packet]) -> List[Tuple[int, int]]:
        for p in packets:
            if self.done:
                raise ReconstructionError(f"trailing packet {p} after PGD", self.position)
            try:
                self._co.send(p)
            except StopIteration:
                self.done = True
            self.position += 1
        out = self._edges[:]
        self._edges.clear()
        return out

    def finish(self) -> None:
        if not self.done:
            raise ReconstructionError("trace ended before PGD", self.position)

    def _walk(self):
        program = self.program
        blocks = program.blocks
        edges = self._edges
        p = yield
        if p.kind is not PacketKind.PGE:
            raise ReconstructionError("trace must start with PGE", self.position)
        cur = program.block_at(p.address)
        if cur is None:
            raise ReconstructionError(f"PGE address {p.address:#x} is not a block", self.position)
        bits: Tuple[bool, ...] = ()
        bi = 0
        stack: List[int] = []
        steps = 0

        while True:
            steps += 1
            t = blocks[cur].terminator
            if isinstance(t, CondBranch):
                if bi >= len(bits):
                    p = yield
                    if p.kind is not PacketKind.TNT:
                        raise ReconstructionError(f"block {cur} needs a TNT bit, got {p}", self.position)
                    bits = p.tnt_bits
                    bi = 0
                nxt = t.true_target if bits[bi] else t.false_target
                bi += 1
            elif isinstance(t, Jump):
                nxt = t.target
            else:
                if bi < len(bits):
                    raise ReconstructionError(f"{len(bits) - bi} unconsumed TNT bits at block {cur}", self.position)
                p = yield
                if p.kind is PacketKind.PGD:
                    # a call that never happened (stack exhaustion) also ends here
                    if program.block_at(p.address) != cur or not (
                            isinstance(t, (Exit, Trap, Call)) or (isinstance(t, Return) and not stack)):
                        raise ReconstructionError(f"unexpected {p} at block {cur}", self.position)
                    return
                if p.kind is not PacketKind.TIP or isinstance(t, (Exit, Trap)) or (
                        isinstance(t, Return) and not stack):
                    raise ReconstructionError(f"block {cur} expected PGD, got {p}", self.position)
                nxt = program.block_at(p.address)
                if nxt is None:
                    raise ReconstructionError(f"TIP address {p.address:#x} is not a block", self.position)
                if isinstance(t, IndirectJump):
                    if nxt not in t.table:
                        raise ReconstructionError(f"TIP to block {nxt} not in jump table of block {cur}",
                                                  self.position)
                elif isinstance(t, Call):
                    if nxt != t.target:
                        raise ReconstructionError(f"call from block {cur} lands at {nxt}, expected {t.target}",
                                                  self.position)
                    stack.append(t.return_to)
                else:
                    expect = stack.pop()
                    if nxt != expect:
                        raise ReconstructionError(f"return lands at {nxt}, expected {expect}", self.position)
            edges.append((cur, nxt))
            cur = nxt
            if steps >= self.step_budget:
                if bi < len(bits):
                    raise ReconstructionError("unconsumed TNT bits at step budget", self.position)
                p = yield
                if p.kind is not PacketKind.PGD or program.block_at(p.address) != cur:
                    raise ReconstructionError(f"expected PGD at step budget, got {p}", self.position)
                return


def reconstruct_edges(program: TargetProgram, packets: Sequence[Packet],
                      step_budget: int = 100_000) -> List[Tuple[int, int]]:
    """Walk the CFG along ``packets`` and return the executed (prev, cur) edges."""
    w = EdgeWalker(program, step_budget)
    edges = w.feed(packets)
    w.finish()
    return edges


def edge_bitmap(program: TargetProgram, edges: Iterable[Tuple[int, int]], labels: Sequence[int],
                bitmap: Bitmap) -> Bitmap:
    """Score a reconstructed run exactly like the VM's inline instrumentation."""
    prev = afl_edge_update(0, program.entry, bitmap, labels)
    for _, cur in edges:
        prev = afl_edge_update(prev, cur, bitmap, labels)
    return bitmap


@numba.njit(cache=True)
def _score_path(afl_map, touched, nt, labels, path, prev):
    amask = afl_map.shape[0] - 1
    for k in range(path.shape[0]):
        lab = labels[path[k]]
        slot = (lab ^ prev) & amask
        c = afl_map[slot]
        if c == 0:
            touched[nt] = slot
            nt += 1
        if c < 255:
            afl_map[slot] = c + 1
        prev = lab >> 1
    return nt, prev


class EdgeScorer:
    """Streams block ids into a hit-count bitmap (the edge-pt consumer)."""

    def __init__(self, labels: np.ndarray, bitmap: Bitmap):
        self.labels = labels
        self.bitmap = bitmap
        self._touched = np.zeros(bitmap.size, dtype=np.int64)
        self._nt = 0
        self._prev = 0

    def visit(self, block_ids: Sequence[int]) -> None:
        if len(block_ids):
            self._nt, self._prev = _score_path(self.bitmap.data, self._touched, self._nt, self.labels,
                                               np.asarray(block_ids, dtype=np.int64), self._prev)

    def close(self) -> Bitmap:
        self.bitmap.touched = self._touched[:self._nt]
        return self.bitmap
