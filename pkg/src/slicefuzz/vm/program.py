"""Target program model: blocks of micro-ops ending in one terminator."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Tuple, Union

NUM_REGS = 8
U64 = (1 << 64) - 1
DEFAULT_ADDRESS_BASE = 0x400000
BLOCK_STRIDE = 16


class ProgramError(ValueError):
    """Syntax or semantic problem in a target program."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# micro-ops

@dataclass(frozen=True)
class LoadInput:
    reg: int


@dataclass(frozen=True)
class SetConst:
    reg: int
    value: int


@dataclass(frozen=True)
class Add:
    dst: int
    a: int
    b: int


@dataclass(frozen=True)
class Sub:
    dst: int
    a: int
    b: int


MicroOp = Union[LoadInput, SetConst, Add, Sub]


class PredOp(enum.Enum):
    EQ = "eq"
    NE = "ne"
    LT = "lt"
    GT = "gt"
    IN = "in"
    EOF = "eof"


@dataclass(frozen=True)
class Predicate:
    op: PredOp
    reg: int = 0
    value: int = 0
    values: FrozenSet[int] = frozenset()

    def evaluate(self, regs: List[int], eof: bool) -> bool:
        if self.op is PredOp.EOF:
            return eof
        x = regs[self.reg]
        if self.op is PredOp.EQ:
            return x == self.value
        if self.op is PredOp.NE:
            return x != self.value
        if self.op is PredOp.LT:
            return x < self.value
        if self.op is PredOp.GT:
            return x > self.value
        return x in self.values


# terminators

@dataclass(frozen=True)
class CondBranch:
    pred: Predicate
    true_target: int
    false_target: int


@dataclass(frozen=True)
class Jump:
    target: int


@dataclass(frozen=True)
class IndirectJump:
    """Jump through ``table[reg]``; selectors past the end take the last entry."""
    selector: int
    table: Tuple[int, ...]


@dataclass(frozen=True)
class Call:
    target: int
    return_to: int


@dataclass(frozen=True)
class Return:
    pass


@dataclass(frozen=True)
class Exit:
    code: int = 0


@dataclass(frozen=True)
class Trap:
    kind: str


Terminator = Union[CondBranch, Jump, IndirectJump, Call, Return, Exit, Trap]


@dataclass
class Block:
    id: int
    micro_ops: List[MicroOp] = field(default_factory=list)
    terminator: Terminator = field(default_factory=Exit)
    label: str = ""

    def successors(self) -> Tuple[int, ...]:
        t = self.terminator
        if isinstance(t, CondBranch):
            return (t.true_target, t.false_target)
        if isinstance(t, Jump):
            return (t.target,)
        if isinstance(t, IndirectJump):
            return tuple(t.table)
        if isinstance(t, Call):
            return (t.target, t.return_to)
        return ()


@dataclass
class TargetProgram:
    blocks: List[Block]
    entry: int = 0
    address_base: int = DEFAULT_ADDRESS_BASE
    name: str = ""

    def __post_init__(self):
        self._by_addr: Dict[int, int] | None = None

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def address_of(self, block_id: int) -> int:
        return (self.address_base + BLOCK_STRIDE * block_id) & U64

    def block_at(self, address: int) -> int | None:
        off = address - self.address_base
        if off < 0 or off % BLOCK_STRIDE:
            return None
        bid = off // BLOCK_STRIDE
        return bid if bid < len(self.blocks) else None

    def block_id(self, label: str) -> int:
        for b in self.blocks:
            if b.label == label:
                return b.id
        raise KeyError(label)

    def validate(self) -> "TargetProgram":
        n = len(self.blocks)
        if n == 0:
            raise ProgramError("program has no blocks")
        for i, b in enumerate(self.blocks):
            if b.id != i:
                raise ProgramError(f"block ids must be dense and ordered; found block {b.id} at position {i}")
            for op in b.micro_ops:
                regs = (op.reg,) if isinstance(op, (LoadInput, SetConst)) else (op.dst, op.a, op.b)
                for r in regs:
                    if not 0 <= r < NUM_REGS:
                        raise ProgramError(f"block {b.id}: register r{r} out of range")
                if isinstance(op, SetConst) and not 0 <= op.value <= U64:
                    raise ProgramError(f"block {b.id}: constant out of 64-bit range")
            t = b.terminator
            if isinstance(t, CondBranch) and t.pred.op is not PredOp.EOF:
                if not 0 <= t.pred.reg < NUM_REGS:
                    raise ProgramError(f"block {b.id}: register r{t.pred.reg} out of range")
            if isinstance(t, IndirectJump):
                if not t.table:
                    raise ProgramError(f"block {b.id}: empty jump table")
                if not 0 <= t.selector < NUM_REGS:
                    raise ProgramError(f"block {b.id}: register r{t.selector} out of range")
            for s in b.successors():
                if not 0 <= s < n:
                    raise ProgramError(f"block {b.id}: reference to missing block {s}")
        if not 0 <= self.entry < n:
            raise ProgramError(f"entry references missing block {self.entry}")
        return self
