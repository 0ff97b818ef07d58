"""Line-oriented text format for target programs.

Grammar (one statement per line, ``#`` starts a comment)::

    program    := header* block+
    header     := "entry" INT | "base" INT | "name" WORD
    block      := "block" INT ":" [LABEL] NEWLINE op* terminator
    op         := "load" REG
                | "set" REG INT
                | "add" REG REG REG          # dst a b
                | "sub" REG REG REG          # dst a b
    terminator := "br" PRED TARGET TARGET    # true target, false target
                | "jmp" TARGET
                | "ijmp" REG "[" TARGET ("," TARGET)* "]"
                | "call" TARGET TARGET       # callee, return site
                | "ret"
                | "exit" INT
                | "trap" WORD
    PRED       := ("eq"|"ne"|"lt"|"gt") REG INT
                | "in" REG "{" INT ("," INT)* "}"
                | "eof"
    REG        := "r0" .. "r7"

Integers accept Python literal syntax (``65``, ``0x41``). Blocks must be numbered
0..n-1 in order; exactly one ``entry`` directive is required.
"""
from __future__ import annotations

import re
from typing import List, Optional

from .program import (
    Add, Block, Call, CondBranch, DEFAULT_ADDRESS_BASE, Exit, IndirectJump, Jump,
    LoadInput, PredOp, Predicate, ProgramError, Return, SetConst, Sub, TargetProgram,
    Trap,
)

_BLOCK_RE = re.compile(r"^block\s+(\S+)\s*:\s*(\S*)\s*$")
_LIST_RE = re.compile(r"[\[{]([^\]}]*)[\]}]")


def _int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ProgramError(f"expected integer, got {tok!r}", line) from None


def _reg(tok: str, line: int) -> int:
    if not re.fullmatch(r"r[0-7]", tok):
        raise ProgramError(f"expected register r0..r7, got {tok!r}", line)
    return int(tok[1])


def _int_list(text: str, line: int) -> List[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ProgramError("empty list", line)
    return [_int(p, line) for p in parts]


def _tokens(text: str) -> List[str]:
    # keep bracketed lists as single tokens
    out: List[str] = []
    pos = 0
    for m in _LIST_RE.finditer(text):
        out.extend(text[pos:m.start()].split())
        out.append(m.group(0).replace(" ", ""))
        pos = m.end()
    out.extend(text[pos:].split())
    return out


def _parse_pred(toks: List[str], line: int):
    if not toks:
        raise ProgramError("missing predicate", line)
    name = toks[0]
    if name == "eof":
        return Predicate(PredOp.EOF), toks[1:]
    try:
        op = PredOp(name)
    except ValueError:
        raise ProgramError(f"unknown predicate {name!r}", line) from None
    if len(toks) < 3:
        raise ProgramError(f"predicate {name} needs a register and an operand", line)
    reg = _reg(toks[1], line)
    if op is PredOp.IN:
        if not toks[2].startswith("{"):
            raise ProgramError("'in' predicate expects a {set}", line)
        return Predicate(op, reg, values=frozenset(_int_list(toks[2][1:-1], line))), toks[3:]
    return Predicate(op, reg, value=_int(toks[2], line)), toks[3:]


def _expect(toks: List[str], n: int, what: str, line: int) -> None:
    if len(toks) != n:
        raise ProgramError(f"{what} expects {n - 1} operand(s)", line)


def load_program(text: str) -> TargetProgram:
    entry: Optional[int] = None
    base = DEFAULT_ADDRESS_BASE
    name = ""
    blocks: List[Block] = []
    current: Optional[Block] = None
    closed = True

    for lineno, raw in enumerate(text.splitlines(), 1):
        stmt = raw.split("#", 1)[0].strip()
        if not stmt:
            continue
        m = _BLOCK_RE.match(stmt)
        if m:
            if not closed:
                raise ProgramError(f"block {current.id} has no terminator", lineno)
            bid = _int(m.group(1), lineno)
            if bid != len(blocks):
                raise ProgramError(f"expected block {len(blocks)}, found block {bid}", lineno)
            current = Block(bid, label=m.group(2))
            blocks.append(current)
            closed = False
            continue
        toks = _tokens(stmt)
        kw = toks[0]
        if kw == "entry":
            _expect(toks, 2, "entry", lineno)
            if entry is not None:
                raise ProgramError("duplicate entry directive", lineno)
            entry = _int(toks[1], lineno)
            continue
        if kw == "base":
            _expect(toks, 2, "base", lineno)
            base = _int(toks[1], lineno)
            continue
        if kw == "name":
            _expect(toks, 2, "name", lineno)
            name = toks[1]
            continue
        if current is None or closed:
            raise ProgramError(f"statement {kw!r} outside of an open block", lineno)
        if kw == "load":
            _expect(toks, 2, "load", lineno)
            current.micro_ops.append(LoadInput(_reg(toks[1], lineno)))
        elif kw == "set":
            _expect(toks, 3, "set", lineno)
            current.micro_ops.append(SetConst(_reg(toks[1], lineno), _int(toks[2], lineno)))
        elif kw in ("add", "sub"):
            _expect(toks, 4, kw, lineno)
            cls = Add if kw == "add" else Sub
            current.micro_ops.append(cls(*(_reg(t, lineno) for t in toks[1:4])))
        elif kw == "br":
            pred, rest = _parse_pred(toks[1:], lineno)
            if len(rest) != 2:
                raise ProgramError("br expects a predicate and two targets", lineno)
            current.terminator = CondBranch(pred, _int(rest[0], lineno), _int(rest[1], lineno))
            closed = True
        elif kw == "jmp":
            _expect(toks, 2, "jmp", lineno)
            current.terminator = Jump(_int(toks[1], lineno))
            closed = True
        elif kw == "ijmp":
            _expect(toks, 3, "ijmp", lineno)
            if not toks[2].startswith("["):
                raise ProgramError("ijmp expects a [table]", lineno)
            table = tuple(_int_list(toks[2][1:-1], lineno))
            current.terminator = IndirectJump(_reg(toks[1], lineno), table)
            closed = True
        elif kw == "call":
            _expect(toks, 3, "call", lineno)
            current.terminator = Call(_int(toks[1], lineno), _int(toks[2], lineno))
            closed = True
        elif kw == "ret":
            _expect(toks, 1, "ret", lineno)
            current.terminator = Return()
            closed = True
        elif kw == "exit":
            _expect(toks, 2, "exit", lineno)
            current.terminator = Exit(_int(toks[1], lineno))
            closed = True
        elif kw == "trap":
            _expect(toks, 2, "trap", lineno)
            current.terminator = Trap(toks[1])
            closed = True
        else:
            raise ProgramError(f"unknown statement {kw!r}", lineno)

    if not blocks:
        raise ProgramError("empty program: no blocks defined", 1)
    if not closed:
        raise ProgramError(f"block {current.id} has no terminator")
    if entry is None:
        raise ProgramError("missing entry directive")
    return TargetProgram(blocks, entry, base, name).validate()


def _fmt_pred(p: Predicate) -> str:
    if p.op is PredOp.EOF:
        return "eof"
    if p.op is PredOp.IN:
        return f"in r{p.reg} {{{','.join(str(v) for v in sorted(p.values))}}}"
    return f"{p.op.value} r{p.reg} {p.value}"


def _fmt_term(t) -> str:
    if isinstance(t, CondBranch):
        return f"br {_fmt_pred(t.pred)} {t.true_target} {t.false_target}"
    if isinstance(t, Jump):
        return f"jmp {t.target}"
    if isinstance(t, IndirectJump):
        return f"ijmp r{t.selector} [{','.join(str(x) for x in t.table)}]"
    if isinstance(t, Call):
        return f"call {t.target} {t.return_to}"
    if isinstance(t, Return):
        return "ret"
    if isinstance(t, Exit):
        return f"exit {t.code}"
    if isinstance(t, Trap):
        return f"trap {t.kind}"
    raise TypeError(t)


def _fmt_op(op) -> str:
    if isinstance(op, LoadInput):
        return f"load r{op.reg}"
    if isinstance(op, SetConst):
        return f"set r{op.reg} {op.value}"
    if isinstance(op, Add):
        return f"add r{op.dst} r{op.a} r{op.b}"
    if isinstance(op, Sub):
        return f"sub r{op.dst} r{op.a} r{op.b}"
    raise TypeError(op)


def serialize_program(program: TargetProgram) -> str:
    lines = []
    if program.name:
        lines.append(f"name {program.name}")
    lines.append(f"base {program.address_base:#x}")
    lines.append(f"entry {program.entry}")
    for b in program.blocks:
        lines.append(f"block {b.id}: {b.label}".rstrip())
        lines.extend("  " + _fmt_op(op) for op in b.micro_ops)
        lines.append("  " + _fmt_term(b.terminator))
    return "\n".join(lines) + "\n"
