from .program import (
    Add, Block, Call, CondBranch, Exit, IndirectJump, Jump, LoadInput, PredOp,
    Predicate, ProgramError, Return, SetConst, Sub, TargetProgram, Trap,
)
from .text import load_program, serialize_program
from .engine import Engine, ExecOutcome, Status, execute, STACK_EXHAUSTION

__all__ = [
    "Add", "Block", "Call", "CondBranch", "Exit", "IndirectJump", "Jump", "LoadInput",
    "PredOp", "Predicate", "ProgramError", "Return", "SetConst", "Sub", "TargetProgram",
    "Trap", "load_program", "serialize_program", "Engine", "ExecOutcome", "Status",
    "execute", "STACK_EXHAUSTION",
]
