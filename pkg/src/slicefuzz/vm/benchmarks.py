"""Built-in benchmark targets and their seed corpora.

chunk-name
    A 4-iteration loop validates each byte of a 4-byte chunk type with range
    predicates (``'A' <= c <= 'z'`` and not ``'Z' < c < 'a'``) and exits early
    on the first violation. Each byte is then compared against the expected
    type ``IDAT`` and the per-byte results are summed without branching; after
    the loop the 4-byte match guards the ``handlerX`` block.

    All zero tests (the two validation verdicts, the byte comparison and the
    loop counter) share one ``is_zero`` block, entered by a direct jump and
    left through a branch dispatch on a call-site register, so the loop emits
    one TIP per iteration and fits in a single slice. For a valid input with
    ``k`` matching bytes the shared block's outcome edges run ``9 + k`` and
    ``7 - k`` times, inside the 8-15 and 4-7 hit-count buckets for every
    ``k < 4``: which bytes matched shows up in the order of branch outcomes,
    never in the edge counts.

deep-recursion
    A recursive-descent group parser that reads each character through a
    ``next_char`` call: every ``(`` recurses into ``parse_group`` and ``)``
    returns from it. Entering a group emits the new nesting depth as 8 bits,
    most significant first, through a single loop, so each level leaves a
    different branch pattern. Nesting deeper than the call-depth limit ends in
    a stack-exhaustion crash.

maze
    A walk over a 4x4 grid with walls. Every step reads one byte through a
    call, dispatches indirectly on the current cell, and decodes the move from
    the byte's quarter with nested conditions (``< 64`` right, ``< 128`` down,
    ``< 192`` left, else up); a wall or end of input ends the walk, and so does
    a 48-step timeout. The far corner dispatches on one more byte.
    Each step emits three TIPs, so a slice covers a short window of the walk.
"""
from __future__ import annotations

from typing import Dict, List, Tuple

from .program import (
    Add, Block, Call, CondBranch, Exit, IndirectJump, Jump, LoadInput, PredOp,
    Predicate, Return, SetConst, Sub, TargetProgram, Trap,
)

BENCHMARKS = ("chunk-name", "deep-recursion", "maze")
CHUNK_TYPE = b"IDAT"
NEG = (1 << 63) - 1  # unsigned "> NEG" means the difference went negative


class _Asm:
    """Tiny assembler: blocks are named, targets are resolved by name."""

    def __init__(self):
        self.order: List[str] = []
        self.body: Dict[str, Tuple[list, tuple]] = {}

    def block(self, label: str, ops: list, term: tuple) -> None:
        if label in self.body:
            raise ValueError(f"duplicate label {label}")
        self.order.append(label)
        self.body[label] = (ops, term)

    def build(self, name: str, entry: str) -> TargetProgram:
        ids = {lab: i for i, lab in enumerate(self.order)}
        blocks = []
        for lab in self.order:
            ops, term = self.body[lab]
            kind, *args = term
            if kind == "br":
                pred, t, f = args
                t = CondBranch(pred, ids[t], ids[f])
            elif kind == "jmp":
                t = Jump(ids[args[0]])
            elif kind == "ijmp":
                t = IndirectJump(args[0], tuple(ids[x] for x in args[1]))
            elif kind == "call":
                t = Call(ids[args[0]], ids[args[1]])
            elif kind == "ret":
                t = Return()
            elif kind == "exit":
                t = Exit(args[0])
            else:
                t = Trap(args[0])
            blocks.append(Block(ids[lab], list(ops), t, lab))
        return TargetProgram(blocks, ids[entry], name=name).validate()


def _p(op: str, reg: int = 0, value: int = 0, values=()) -> Predicate:
    return Predicate(PredOp(op), reg, value, frozenset(values))


def _leaf_chain(asm: _Asm, name: str, depth: int) -> None:
    """Function ``name`` making nested calls ``depth`` deep (2 TIPs per level)."""
    labels = [name] + [f"{name}_{i}" for i in range(1, depth)]
    for i, lab in enumerate(labels):
        if i + 1 < depth:
            asm.block(lab, [], ("call", labels[i + 1], f"{lab}_ret"))
            asm.block(f"{lab}_ret", [], ("ret",))
        else:
            asm.block(lab, [], ("ret",))


def chunk_name() -> TargetProgram:
    # r0 byte, r1 expected byte, r2 zero-test call site, r3 zero-test argument,
    # r4 zero-test result, r5 bytes left, r6 constant 1, r7 matched bytes
    a = _Asm()
    a.block("main", [SetConst(6, 1), SetConst(5, 4), SetConst(7, 0)], ("call", "read_header", "loop"))
    # alpha check: 'A' <= c <= 'z'
    a.block("loop", [LoadInput(0), SetConst(2, 0)], ("br", _p("lt", 0, 65), "alpha_bad", "alpha_hi"))
    a.block("alpha_hi", [], ("br", _p("gt", 0, 122), "alpha_bad", "alpha_ok"))
    a.block("alpha_ok", [SetConst(3, 0)], ("jmp", "is_zero"))
    a.block("alpha_bad", [SetConst(3, 1)], ("jmp", "is_zero"))
    a.block("after_alpha", [], ("br", _p("eq", 4, 1), "gap_lo", "chunk_error"))
    # gap check: not 'Z' < c < 'a'
    a.block("gap_lo", [SetConst(2, 1)], ("br", _p("gt", 0, 90), "gap_hi", "gap_ok"))
    a.block("gap_hi", [], ("br", _p("lt", 0, 97), "gap_bad", "gap_ok"))
    a.block("gap_ok", [SetConst(3, 0)], ("jmp", "is_zero"))
    a.block("gap_bad", [SetConst(3, 1)], ("jmp", "is_zero"))
    a.block("after_gap", [], ("br", _p("eq", 4, 1), "pick_expected", "chunk_error"))
    # expected byte for this position, selected by the bytes-left counter
    a.block("pick_expected", [], ("ijmp", 5, ["expect_3", "expect_3", "expect_2", "expect_1", "expect_0"]))
    for i, ch in enumerate(CHUNK_TYPE):
        a.block(f"expect_{i}", [SetConst(1, ch)], ("jmp", "compare"))
    a.block("compare", [Sub(3, 0, 1), SetConst(2, 2)], ("jmp", "is_zero"))
    a.block("tally", [Add(7, 7, 4), Sub(5, 5, 6), SetConst(3, 0), Add(3, 3, 5), SetConst(2, 3)], ("jmp", "is_zero"))
    a.block("after_count", [], ("br", _p("eq", 4, 1), "dispatch", "loop"))
    a.block("dispatch", [], ("br", _p("eq", 7, 4), "handlerX", "handle_unknown"))
    a.block("handlerX", [], ("call", "process_chunk", "done"))
    a.block("handle_unknown", [], ("call", "skip_chunk", "done"))
    a.block("done", [], ("exit", 0))
    a.block("chunk_error", [], ("call", "png_error", "error_exit"))
    a.block("error_exit", [], ("exit", 1))
    # is_zero(r3) -> r4, entered by jump and left through a dispatch on r2
    a.block("is_zero", [], ("br", _p("eq", 3, 0), "zero_yes", "zero_no"))
    a.block("zero_yes", [SetConst(4, 1)], ("jmp", "zero_ret"))
    a.block("zero_no", [SetConst(4, 0)], ("jmp", "zero_ret"))
    a.block("zero_ret", [], ("br", _p("eq", 2, 0), "after_alpha", "zero_ret_1"))
    a.block("zero_ret_1", [], ("br", _p("eq", 2, 1), "after_gap", "zero_ret_2"))
    a.block("zero_ret_2", [], ("br", _p("eq", 2, 2), "tally", "after_count"))
    # library-style call chains around the interesting code
    _leaf_chain(a, "read_header", 4)
    _leaf_chain(a, "png_error", 4)
    _leaf_chain(a, "skip_chunk", 4)
    _leaf_chain(a, "process_chunk", 4)
    return a.build("chunk-name", "main")


def deep_recursion() -> TargetProgram:
    # r0 byte, r1 nesting depth, r2 bit scratch, r3 bits left, r5 constant 128,
    # r6 constant 1
    a = _Asm()
    a.block("main", [SetConst(6, 1), SetConst(5, 128), SetConst(1, 0)], ("call", "parse_group", "finish"))
    a.block("finish", [], ("exit", 0))
    a.block("parse_group", [], ("call", "next_char", "classify_eof"))
    a.block("classify_eof", [], ("br", _p("eof"), "group_end", "classify"))
    a.block("classify", [], ("br", _p("eq", 0, ord("(")), "open_group", "not_open"))
    a.block("not_open", [], ("br", _p("eq", 0, ord(")")), "group_end", "atom"))
    a.block("atom", [], ("br", _p("in", 0, values=b"*+?"), "quantifier", "parse_group"))
    a.block("quantifier", [], ("call", "emit_node", "parse_group"))
    a.block("open_group", [Add(1, 1, 6), Add(2, 1, 0), Sub(2, 2, 0), SetConst(3, 8)], ("jmp", "emit_bit"))
    # nesting depth, MSB first: test bit 7, then double (r2 stays below 256)
    a.block("emit_bit", [], ("br", _p("gt", 2, 127), "bit_one", "bit_next"))
    a.block("bit_one", [Sub(2, 2, 5)], ("jmp", "bit_next"))
    a.block("bit_next", [Add(2, 2, 2), Sub(3, 3, 6)], ("br", _p("eq", 3, 0), "recurse", "emit_bit"))
    a.block("recurse", [], ("call", "parse_group", "close_group"))
    a.block("close_group", [Sub(1, 1, 6)], ("jmp", "parse_group"))
    a.block("group_end", [], ("ret",))
    a.block("next_char", [LoadInput(0)], ("ret",))
    _leaf_chain(a, "emit_node", 2)
    return a.build("deep-recursion", "main")


def maze() -> TargetProgram:
    # r0 move byte, r1 current cell, r5 step counter, r6 constant 1
    a = _Asm()
    size = 4
    cells = [f"cell_{x}_{y}" for y in range(size) for x in range(size)]
    a.block("main", [SetConst(6, 1), SetConst(5, 0), SetConst(1, 0)], ("jmp", "walk"))
    a.block("walk", [Add(5, 5, 6)], ("br", _p("gt", 5, 48), "timeout", "read"))
    a.block("read", [], ("call", "read_move", "check_eof"))
    a.block("check_eof", [], ("br", _p("eof"), "give_up", "locate"))
    a.block("locate", [], ("ijmp", 1, cells))
    for y in range(size):
        for x in range(size):
            here = f"cell_{x}_{y}"
            moves = []
            for d, (dx, dy) in enumerate(((1, 0), (0, 1), (-1, 0), (0, -1))):
                nx, ny = x + dx, y + dy
                wall = not (0 <= nx < size and 0 <= ny < size) or (x * 7 + y * 3 + d) % 5 == 0
                moves.append("bump" if wall else f"to_{nx}_{ny}")
            if (x, y) == (size - 1, size - 1):
                # the goal cell dispatches on one more byte
                a.block(here, [], ("call", "read_move", "goal"))
                continue
            # the byte's quarter picks the direction: right, down, left, up
            a.block(here, [], ("br", _p("lt", 0, 128), f"{here}_lo", f"{here}_hi"))
            a.block(f"{here}_lo", [], ("br", _p("lt", 0, 64), moves[0], moves[1]))
            a.block(f"{here}_hi", [], ("br", _p("lt", 0, 192), moves[2], moves[3]))
    for i, c in enumerate(cells):
        a.block("to" + c[4:], [SetConst(1, i)], ("jmp", "walk"))
    a.block("goal", [], ("ijmp", 0, ["goal_a", "goal_b", "goal_c", "give_up"]))
    for g in "abc":
        a.block(f"goal_{g}", [], ("call", "complain", "give_up"))
    a.block("read_move", [LoadInput(0)], ("ret",))
    a.block("bump", [], ("call", "complain", "give_up"))
    a.block("timeout", [], ("exit", 2))
    a.block("give_up", [], ("exit", 1))
    _leaf_chain(a, "complain", 2)
    return a.build("maze", "main")


_BUILDERS = {"chunk-name": chunk_name, "deep-recursion": deep_recursion, "maze": maze}

SEED_CORPORA: Dict[str, List[bytes]] = {
    "chunk-name": [b"IHDR", b"PLTE", b"IEND", b"gAMA"],
    "deep-recursion": [b"(a)", b"((a+)b)", b"a*b"],
    "maze": [b"\x40", b"\x40\x00", b"\x50\x10"],
}


def build_benchmark(name: str) -> TargetProgram:
    if name not in _BUILDERS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return _BUILDERS[name]()


def seed_corpus(name: str) -> List[bytes]:
    if name not in SEED_CORPORA:
        raise ValueError(f"unknown benchmark {name!r}")
    return list(SEED_CORPORA[name])
