"""PTX1 control-flow packet format and the trace ring shared by producer and consumer.

Wire format
-----------
TNT   one byte ``B`` with ``B & 1 == 0``.  Branch bits sit in bits 1..k (bit 1 is
      the earliest branch, 1 = taken), bit k+1 is a stop bit, higher bits are 0.
      A byte holds 1 to 6 branches.
TIP   ``0x03`` followed by the 64-bit target address, little-endian.
PGE   ``0x05`` + address (tracing enabled at this address).
PGD   ``0x07`` + address (tracing disabled at this address).

Trace dump files are raw PTX1 bytes with no framing.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

MAX_TNT_BITS = 6
ADDRESS_PACKET_LEN = 9
ADDR_MASK = (1 << 64) - 1


class PacketKind(enum.Enum):
    TNT = "tnt"
    TIP = "tip"
    PGE = "pge"
    PGD = "pgd"


HEADER_BY_KIND = {PacketKind.TIP: 0x03, PacketKind.PGE: 0x05, PacketKind.PGD: 0x07}
KIND_BY_HEADER = {v: k for k, v in HEADER_BY_KIND.items()}


class PacketError(ValueError):
    pass


class MalformedStream(ValueError):
    """Raised when a byte matches no PTX1 header pattern."""

    def __init__(self, offset: int, byte: int):
        super().__init__(f"malformed PTX1 stream at offset {offset}: byte 0x{byte:02x}")
        self.offset = offset
        self.byte = byte


@dataclass(frozen=True)
class Packet:
    kind: PacketKind
    tnt_bits: Tuple[bool, ...] = ()
    address: int = 0

    def __post_init__(self):
        if self.kind is PacketKind.TNT:
            if not 1 <= len(self.tnt_bits) <= MAX_TNT_BITS:
                raise PacketError(f"TNT packet needs 1..6 bits, got {len(self.tnt_bits)}")
            if self.address:
                raise PacketError("TNT packet carries no address")
        else:
            if self.tnt_bits:
                raise PacketError(f"{self.kind.name} packet cannot carry TNT bits")
            if not 0 <= self.address <= ADDR_MASK:
                raise PacketError(f"address out of 64-bit range: {self.address:#x}")

    @classmethod
    def tnt(cls, *bits) -> "Packet":
        return cls(PacketKind.TNT, tuple(bool(b) for b in bits))

    @classmethod
    def tip(cls, address: int) -> "Packet":
        return cls(PacketKind.TIP, address=address)

    @classmethod
    def pge(cls, address: int) -> "Packet":
        return cls(PacketKind.PGE, address=address)

    @classmethod
    def pgd(cls, address: int) -> "Packet":
        return cls(PacketKind.PGD, address=address)

    def __repr__(self):
        if self.kind is PacketKind.TNT:
            return "TNT(" + "".join("1" if b else "0" for b in self.tnt_bits) + ")"
        return f"{self.kind.name}({self.address:#x})"


def tnt_byte(bits: Sequence[bool]) -> int:
    n = len(bits)
    if not 1 <= n <= MAX_TNT_BITS:
        raise PacketError(f"TNT packet needs 1..6 bits, got {n}")
    b = 1 << (n + 1)
    for i, taken in enumerate(bits):
        if taken:
            b |= 1 << (i + 1)
    return b


def tnt_bits_of(byte: int) -> Tuple[bool, ...]:
    """Unpack a TNT byte; the stop bit is the highest set bit."""
    stop = byte.bit_length() - 1
    return tuple(bool(byte >> (i + 1) & 1) for i in range(stop - 1))


def encode_packet(p: Packet) -> bytes:
    if p.kind is PacketKind.TNT:
        return bytes((tnt_byte(p.tnt_bits),))
    return bytes((HEADER_BY_KIND[p.kind],)) + p.address.to_bytes(8, "little")


def encode_stream(packets: Iterable[Packet]) -> bytes:
    return b"".join(encode_packet(p) for p in packets)


def _valid_tnt(byte: int) -> bool:
    # tag bit clear and a stop bit at position 2..7
    return byte & 1 == 0 and byte >= 0x04


def decode_stream(data: bytes, base_offset: int = 0) -> Tuple[List[Packet], int]:
    """Decode every complete packet in ``data``.

    Returns ``(packets, consumed)``. A trailing partial address packet is left
    unconsumed so the caller can retry once more bytes arrive.
    """
    packets: List[Packet] = []
    pos = 0
    n = len(data)
    while pos < n:
        b = data[pos]
        if b & 1 == 0:
            if b < 0x04:
                raise MalformedStream(base_offset + pos, b)
            packets.append(Packet(PacketKind.TNT, tnt_bits_of(b)))
            pos += 1
            continue
        kind = KIND_BY_HEADER.get(b)
        if kind is None:
            raise MalformedStream(base_offset + pos, b)
        if pos + ADDRESS_PACKET_LEN > n:
            break
        addr = int.from_bytes(data[pos + 1:pos + ADDRESS_PACKET_LEN], "little")
        packets.append(Packet(kind, address=addr))
        pos += ADDRESS_PACKET_LEN
    return packets, pos


def complete_prefix(data: bytes, start: int = 0) -> int:
    """Length of the longest prefix of ``data[start:]`` made of whole packets."""
    pos = start
    n = len(data)
    while pos < n:
        b = data[pos]
        if b & 1 == 0:
            if b < 0x04:
                raise MalformedStream(pos, b)
            pos += 1
        elif b in KIND_BY_HEADER:
            if pos + ADDRESS_PACKET_LEN > n:
                break
            pos += ADDRESS_PACKET_LEN
        else:
            raise MalformedStream(pos, b)
    return pos - start


@dataclass
class TraceRing:
    """Growable trace buffer with a published offset and a consumed offset.

    One producer calls :meth:`publish`, one consumer calls :meth:`consume` (or
    :meth:`peek` / :meth:`advance`). Publication happens under a condition
    variable, which gives the consumer a happens-before edge on published bytes.
    """

    storage: bytearray = field(default_factory=bytearray)
    pt_off: int = 0
    last_off: int = 0
    closed: bool = False

    def __post_init__(self):
        self._cond = threading.Condition()

    def publish(self, data: bytes) -> "TraceRing":
        if not data:
            return self
        with self._cond:
            self.storage += data
            self.pt_off = len(self.storage)
            self._cond.notify()
        return self

    def close(self) -> None:
        """Producer side: no more bytes will be published (the exit callback)."""
        with self._cond:
            self.closed = True
            self._cond.notify()

    def backlog(self) -> int:
        return self.pt_off - self.last_off

    def peek(self) -> bytes:
        """Published but unconsumed bytes, ``[last_off, pt_off)``."""
        with self._cond:
            return bytes(self.storage[self.last_off:self.pt_off])

    def advance(self, n: int) -> None:
        if n < 0 or self.last_off + n > self.pt_off:
            raise ValueError("cannot consume past the published offset")
        self.last_off += n

    def wait(self, seen: int, timeout: float | None = None) -> bool:
        """Block until bytes beyond offset ``seen`` are published or the ring closes.

        Returns True if ``pt_off > seen``; False means closed with nothing new.
        """
        with self._cond:
            while self.pt_off <= seen and not self.closed:
                self._cond.wait(timeout)
            return self.pt_off > seen

    def consume(self) -> List[Packet]:
        data = self.peek()
        packets, used = decode_stream(data, self.last_off)
        self.advance(used)
        return packets


def ring_publish(ring: TraceRing, data: bytes) -> TraceRing:
    return ring.publish(data)


def ring_consume(ring: TraceRing) -> List[Packet]:
    return ring.consume()
