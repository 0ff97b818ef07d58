"""Random well-formed programs for property tests and oracle checks."""
from __future__ import annotations

import random

from .program import (
    Add, Block, Call, CondBranch, Exit, IndirectJump, Jump, LoadInput, PredOp,
    Predicate, Return, SetConst, Sub, TargetProgram, Trap,
)


def _predicate(rng: random.Random) -> Predicate:
    op = rng.choice(list(PredOp))
    reg = rng.randrange(4)
    if op is PredOp.EOF:
        return Predicate(op)
    if op is PredOp.IN:
        return Predicate(op, reg, values=frozenset(rng.sample(range(256), rng.randint(1, 4))))
    return Predicate(op, reg, value=rng.randrange(256))


def random_program(rng: random.Random, n_blocks: int | None = None) -> TargetProgram:
    """A random valid program over ``n_blocks`` blocks (2..24 if not given).

    Terminators are weighted towards conditional branches and calls so traces
    mix TNT and TIP packets; loops and hangs are possible.
    """
    n = n_blocks or rng.randint(2, 24)
    blocks = []
    kinds = ["br"] * 6 + ["jmp"] * 2 + ["ijmp", "call", "call", "ret", "ret", "exit", "trap"]
    for i in range(n):
        ops = []
        for _ in range(rng.randint(0, 3)):
            c = rng.randrange(4)
            if c == 0:
                ops.append(LoadInput(rng.randrange(4)))
            elif c == 1:
                ops.append(SetConst(rng.randrange(4), rng.randrange(256)))
            elif c == 2:
                ops.append(Add(rng.randrange(4), rng.randrange(4), rng.randrange(4)))
            else:
                ops.append(Sub(rng.randrange(4), rng.randrange(4), rng.randrange(4)))
        kind = rng.choice(kinds)
        tgt = lambda: rng.randrange(n)  # noqa: E731
        if kind == "br":
            term = CondBranch(_predicate(rng), tgt(), tgt())
        elif kind == "jmp":
            term = Jump(tgt())
        elif kind == "ijmp":
            term = IndirectJump(rng.randrange(4), tuple(tgt() for _ in range(rng.randint(1, 4))))
        elif kind == "call":
            term = Call(tgt(), tgt())
        elif kind == "ret":
            term = Return()
        elif kind == "exit":
            term = Exit(rng.randrange(3))
        else:
            term = Trap(rng.choice(["abort", "segv"]))
        blocks.append(Block(i, ops, term))
    return TargetProgram(blocks, entry=rng.randrange(n), name="random").validate()


def random_input(rng: random.Random, max_len: int = 32) -> bytes:
    return bytes(rng.randrange(256) for _ in range(rng.randint(0, max_len)))
