import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from slicefuzz.codec import (
    MalformedStream, Packet, PacketError, PacketKind, TraceRing, complete_prefix,
    decode_stream, encode_packet, encode_stream, ring_consume, ring_publish, tnt_bits_of,
)

# the four-packet trace of a traced call: entry, one taken branch, call, return
CALL_TRACE = [Packet.tip(0x400629), Packet.tnt(True), Packet.tip(0x4005E4), Packet.tip(0x4006B8)]

packets = st.one_of(
    st.lists(st.booleans(), min_size=1, max_size=6).map(lambda b: Packet.tnt(*b)),
    st.builds(Packet.tip, st.integers(0, 2**64 - 1)),
    st.builds(Packet.pge, st.integers(0, 2**64 - 1)),
    st.builds(Packet.pgd, st.integers(0, 2**64 - 1)),
)


def test_tnt_bytes():
    assert encode_packet(Packet.tnt(True)) == b"\x06"
    assert encode_packet(Packet.tnt(True, False)) == b"\x0a"
    assert encode_packet(Packet.tnt(False)) == b"\x04"
    assert encode_packet(Packet.tnt(*[True] * 6)) == b"\xfe"


def test_tip_bytes():
    assert encode_packet(Packet.tip(0x400629)) == bytes.fromhex("032906400000000000")
    assert encode_packet(Packet.pge(1))[0] == 0x05
    assert encode_packet(Packet.pgd(1))[0] == 0x07


def test_packet_invariants():
    with pytest.raises(PacketError):
        Packet(PacketKind.TNT, ())
    with pytest.raises(PacketError):
        Packet.tnt(*[True] * 7)
    with pytest.raises(PacketError):
        Packet(PacketKind.TIP, (True,), 5)
    with pytest.raises(PacketError):
        Packet.tip(1 << 64)


def test_decode_examples():
    data = bytes.fromhex("032906400000000000") + b"\x06"
    assert decode_stream(data) == ([Packet.tip(0x400629), Packet.tnt(True)], 10)
    assert decode_stream(b"") == ([], 0)
    assert decode_stream(bytes.fromhex("032906")) == ([], 0)


def test_decode_rejects_bad_header():
    with pytest.raises(MalformedStream) as e:
        decode_stream(b"\x06\x09")
    assert e.value.offset == 1
    # a TNT byte needs a stop bit at position 2 or above
    with pytest.raises(MalformedStream):
        decode_stream(b"\x02")
    with pytest.raises(MalformedStream) as e:
        decode_stream(b"\x00", base_offset=40)
    assert e.value.offset == 40


def test_tnt_bits_unpack():
    assert tnt_bits_of(0x0A) == (True, False)
    assert tnt_bits_of(0x04) == (False,)


def test_ring_publish():
    r = TraceRing()
    ring_publish(r, bytes(11))
    assert r.pt_off == 11
    r = TraceRing()
    ring_publish(r, b"abcd")
    ring_publish(r, b"efghijk")
    assert r.pt_off == 11 and bytes(r.storage) == b"abcdefghijk"
    ring_publish(r, b"")
    assert r.pt_off == 11


def test_ring_consume():
    r = TraceRing()
    assert ring_consume(r) == [] and r.last_off == 0
    ring_publish(r, encode_stream(CALL_TRACE))
    assert ring_consume(r) == CALL_TRACE
    assert r.last_off == r.pt_off
    assert ring_consume(r) == []


def test_ring_split_reassembly():
    # every split point of a two-packet stream
    two = [Packet.tip(0x400629), Packet.tnt(True, False, True)]
    data = encode_stream(two)
    for cut in range(len(data) + 1):
        r = TraceRing()
        ring_publish(r, data[:cut])
        first = ring_consume(r)
        assert first == two[:len(first)]
        assert r.last_off == len(encode_stream(first))
        ring_publish(r, data[cut:])
        assert first + ring_consume(r) == two
        assert r.last_off == r.pt_off == len(data)


def test_ring_advance_bounds():
    r = TraceRing()
    ring_publish(r, b"\x06")
    with pytest.raises(ValueError):
        r.advance(2)


@settings(max_examples=300)
@given(st.lists(packets, max_size=40))
def test_roundtrip(ps):
    data = encode_stream(ps)
    assert decode_stream(data) == (ps, len(data))


@settings(max_examples=100)
@given(st.lists(packets, max_size=12), st.data())
def test_prefix_monotone(ps, data):
    stream = encode_stream(ps)
    a = data.draw(st.integers(0, len(stream)))
    b = data.draw(st.integers(a, len(stream)))
    pa, ua = decode_stream(stream[:a])
    pb, ub = decode_stream(stream[:b])
    assert pb[:len(pa)] == pa and ua <= ub
    assert complete_prefix(stream[:a]) == ua


@settings(max_examples=100)
@given(st.lists(packets, max_size=20), st.lists(st.integers(0, 30), max_size=8))
def test_consumption_totality(ps, cuts):
    stream = encode_stream(ps)
    r = TraceRing()
    got = []
    pos = 0
    for c in cuts:
        ring_publish(r, stream[pos:pos + c])
        pos += c
        got += ring_consume(r)
        assert 0 <= r.last_off <= r.pt_off <= len(r.storage)
    ring_publish(r, stream[pos:])
    got += ring_consume(r)
    assert got == ps and r.last_off == r.pt_off


def test_ring_threaded():
    rng = random.Random(3)
    ps = [Packet.tip(rng.getrandbits(64)) if rng.random() < 0.3 else Packet.tnt(True)
          for _ in range(2000)]
    stream = encode_stream(ps)
    r = TraceRing()

    def produce():
        pos = 0
        while pos < len(stream):
            n = rng.randrange(1, 40)
            r.publish(stream[pos:pos + n])
            pos += n
        r.close()

    t = threading.Thread(target=produce)
    t.start()
    got = []
    seen = 0
    while r.wait(seen):
        seen = r.pt_off
        got += r.consume()
    got += r.consume()
    t.join()
    assert got == ps
