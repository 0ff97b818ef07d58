import random

import pytest
from hypothesis import given, settings, strategies as st

from slicefuzz.codec import PacketKind, decode_stream
from slicefuzz.vm.benchmarks import BENCHMARKS, build_benchmark, seed_corpus
from slicefuzz.vm.engine import Engine, Status, execute
from slicefuzz.vm.program import (
    Block, Call, CondBranch, Exit, Jump, LoadInput, PredOp, Predicate, ProgramError,
    Return, TargetProgram,
)
from slicefuzz.vm.randprog import random_input, random_program
from slicefuzz.vm.text import load_program, serialize_program


def run(program, data, **kw):
    packets, edges = [], []
    out = execute(program, data, packets, edges, **kw)
    return out, decode_stream(bytes(packets))[0], edges


def reached(program, edges, label):
    bid = program.block_id(label)
    return any(cur == bid for _, cur in edges)


def call_shaped():
    # entry branches on the first byte, then calls a function that returns
    return TargetProgram([
        Block(0, [LoadInput(0)], CondBranch(Predicate(PredOp.EQ, 0, 0x41), 1, 3)),
        Block(1, [], Call(2, 3)),
        Block(2, [], Return()),
        Block(3, [], Exit(0)),
    ]).validate()


def test_straight_line():
    p = TargetProgram([Block(0, [], Jump(1)), Block(1, [], Exit(0))]).validate()
    out, packets, edges = run(p, b"anything")
    assert [q.kind for q in packets] == [PacketKind.PGE, PacketKind.PGD]
    assert out.status is Status.EXIT and out.code == 0
    assert edges == [(0, 1)]


def test_call_shaped_trace():
    p = call_shaped()
    out, packets, _ = run(p, b"A")
    kinds = [q.kind for q in packets]
    assert kinds == [PacketKind.PGE, PacketKind.TNT, PacketKind.TIP, PacketKind.TIP, PacketKind.PGD]
    assert packets[0].address == p.address_of(0)
    assert packets[1].tnt_bits == (True,)
    assert packets[2].address == p.address_of(2)
    assert packets[3].address == p.address_of(3)
    assert out.tnt_total == 1
    assert p.address_of(2) == 0x400000 + 32


def test_call_chain_sample_at_leaf():
    out, _, _ = run(call_shaped(), b"A")
    assert out.call_chains == [1]
    # a run that never calls is one chain of depth 0
    out, _, _ = run(call_shaped(), b"B")
    assert out.call_chains == [0]


def test_recursion_exhausts_stack():
    p = build_benchmark("deep-recursion")
    out, _, _ = run(p, b"(" * 300, depth_limit=256)
    assert out.status is Status.CRASH and out.trap == "stack-exhaustion"


def test_recursion_boundary():
    # main -> parse_group is one frame; each '(' adds one; next_char adds one
    p = build_benchmark("deep-recursion")
    assert run(p, b"(" * 254)[0].status is Status.EXIT
    assert run(p, b"(" * 255)[0].trap == "stack-exhaustion"


def test_recursion_call_chains():
    out, _, _ = run(build_benchmark("deep-recursion"), b"(" * 10)
    assert out.status is Status.EXIT
    assert max(out.call_chains) >= 10


def test_chunk_name_valid_type_reaches_handler():
    p = build_benchmark("chunk-name")
    out, _, edges = run(p, b"IDAT")
    assert out.status is Status.EXIT and out.code == 0
    assert reached(p, edges, "handlerX")


def test_chunk_name_early_exit():
    p = build_benchmark("chunk-name")
    out, _, edges = run(p, b"\x00IDAT")
    assert out.code == 1
    assert reached(p, edges, "chunk_error") and not reached(p, edges, "handlerX")
    # the loop never reaches its second byte
    assert sum(1 for _, c in edges if c == p.block_id("loop")) == 1


def test_chunk_name_seeds_miss_handler():
    p = build_benchmark("chunk-name")
    for s in seed_corpus("chunk-name"):
        out, _, edges = run(p, s)
        assert out.code == 0 and not reached(p, edges, "handlerX")


def test_chunk_name_gap_characters_rejected():
    p = build_benchmark("chunk-name")
    for bad in (b"I[AT", b"ID`T", b"IDA@", b"IDA{"):
        assert run(p, bad)[0].code == 1


def test_maze_seeds_exit():
    p = build_benchmark("maze")
    for s in seed_corpus("maze"):
        assert run(p, s)[0].status is Status.EXIT


def test_unknown_benchmark():
    with pytest.raises(ValueError):
        build_benchmark("nope")


def test_hang_at_step_budget():
    p = TargetProgram([Block(0, [], Jump(0))]).validate()
    out = execute(p, b"", step_budget=500)
    assert out.status is Status.HANG and out.steps == 500


def test_eof_reads_zero():
    p = TargetProgram([
        Block(0, [LoadInput(0), LoadInput(1)], CondBranch(Predicate(PredOp.EOF), 1, 2)),
        Block(1, [], CondBranch(Predicate(PredOp.EQ, 1, 0), 2, 3)),
        Block(2, [], Exit(0)),
        Block(3, [], Exit(1)),
    ]).validate()
    out, _, edges = run(p, b"\x05")
    assert edges == [(0, 1), (1, 2)] and out.code == 0


def test_validation_rejects_dangling_target():
    with pytest.raises(ProgramError):
        TargetProgram([Block(0, [], Jump(99))]).validate()
    with pytest.raises(ProgramError):
        TargetProgram([]).validate()


def test_engine_rejects_bad_limits():
    p = TargetProgram([Block(0, [], Exit(0))]).validate()
    with pytest.raises(ValueError):
        Engine(p, step_budget=0)
    with pytest.raises(ValueError):
        Engine(p, map_size=1000)


@pytest.mark.parametrize("name", BENCHMARKS)
def test_text_roundtrip_benchmarks(name):
    p = build_benchmark(name)
    text = serialize_program(p)
    q = load_program(text)
    assert serialize_program(q) == text
    for s in seed_corpus(name):
        assert run(p, s)[1] == run(q, s)[1]


def test_text_missing_block():
    with pytest.raises(ProgramError, match="99"):
        load_program("entry 0\nblock 0:\n  jmp 99\n")


def test_text_empty():
    with pytest.raises(ProgramError):
        load_program("")


def test_text_syntax_error_has_line():
    with pytest.raises(ProgramError) as e:
        load_program("entry 0\nblock 0:\n  frobnicate r1\n  exit 0\n")
    assert e.value.line == 3


def test_text_duplicate_entry():
    with pytest.raises(ProgramError):
        load_program("entry 0\nentry 0\nblock 0:\n  exit 0\n")


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32))
def test_determinism_and_tnt_conservation(pseed, iseed):
    p = random_program(random.Random(pseed))
    data = random_input(random.Random(iseed))
    a = run(p, data, step_budget=2000)
    b = run(p, data, step_budget=2000)
    assert a == b
    out, packets, edges = a
    branches = sum(1 for prev, _ in edges if isinstance(p.blocks[prev].terminator, CondBranch))
    # a branch at the last block before the budget runs out counts without an edge
    tnt_bits = sum(len(q.tnt_bits) for q in packets if q.kind is PacketKind.TNT)
    assert out.tnt_total == tnt_bits
    assert branches <= out.tnt_total <= branches + 1
    assert (out.status is Status.HANG) == (out.steps == 2000)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32), st.lists(st.integers(1, 50), min_size=1, max_size=6))
def test_chunked_stepping_is_schedule_independent(pseed, iseed, chunks):
    p = random_program(random.Random(pseed))
    data = random_input(random.Random(iseed))
    eng = Engine(p, step_budget=3000)
    whole = eng.run(data)[1]
    ex = eng.start(data)
    parts = []
    i = 0
    while not ex.finished:
        parts.append(ex.step(chunks[i % len(chunks)]))
        i += 1
    assert b"".join(parts) == whole
