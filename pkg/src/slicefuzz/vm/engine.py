"""Deterministic VM that executes a TargetProgram and emits PTX1 packets.

The interpreter loop is compiled with numba and plays the part of natively
executing, hardware-traced code: it writes packet bytes into an output buffer,
records ground-truth edges, and can carry AFL-style edge instrumentation.
Execution is resumable so a producer thread can stop at flush points, publish
the bytes written so far, and continue.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numba
import numpy as np

from .program import (
    Add, CondBranch, Exit, IndirectJump, Jump, LoadInput, PredOp, Call, Return,
    SetConst, Sub, TargetProgram, Trap, U64,
)

DEFAULT_STEP_BUDGET = 100_000
DEFAULT_DEPTH_LIMIT = 256
DEFAULT_MAP_SIZE = 1 << 16
STACK_EXHAUSTION = "stack-exhaustion"

# terminator kinds
_BR, _JMP, _IJMP, _CALL, _RET, _EXIT, _TRAP = range(7)
_PRED_CODE = {PredOp.EQ: 0, PredOp.NE: 1, PredOp.LT: 2, PredOp.GT: 3, PredOp.IN: 4, PredOp.EOF: 5}

# state slots
(S_CUR, S_STEPS, S_CURSOR, S_EOF, S_SP, S_OUT, S_TNT_ACC, S_TNT_N, S_TNT_TOTAL,
 S_EDGES, S_SAMPLES, S_LEAF, S_STATUS, S_ARG, S_STARTED, S_AFL_PREV, S_TOUCHED,
 S_NEW_EDGES, S_MAX_DEPTH, S_LAST_BLOCK) = range(20)
N_STATE = 20

RUNNING, EXITED, CRASHED, HUNG = 0, 1, 2, 3
SIGN = np.int64(-(1 << 63))


def _i64(v: int) -> int:
    v &= U64
    return v - (1 << 64) if v >> 63 else v


@numba.njit(nogil=True, cache=True)
def _emit_addr(out, ol, header, addr):
    out[ol] = header
    for k in range(8):
        out[ol + 1 + k] = (addr >> (8 * k)) & 0xFF
    return ol + 9


@numba.njit(nogil=True, cache=True)
def _afl_hit(afl_map, touched, nt, lab, prev, amask):
    # AFL-style edge instrumentation at block entry
    slot = (lab ^ prev) & amask
    c = afl_map[slot]
    if c == 0:
        touched[nt] = slot
        nt += 1
    if c < 255:
        afl_map[slot] = c + 1
    return nt, lab >> 1


@numba.njit(nogil=True, cache=True)
def _run(ops, op_start, term, tables, sets, base, inp, st, regs, stack, out, edges,
         samples, afl_map, touched, labels, edge_cov, n_blocks, stop_at, budget,
         depth_limit, record_edges):
    cur = st[S_CUR]
    steps = st[S_STEPS]
    cursor = st[S_CURSOR]
    eof = st[S_EOF]
    sp = st[S_SP]
    ol = st[S_OUT]
    tacc = st[S_TNT_ACC]
    tn = st[S_TNT_N]
    ttotal = st[S_TNT_TOTAL]
    ne = st[S_EDGES]
    ns = st[S_SAMPLES]
    leaf = st[S_LEAF]
    afl_prev = st[S_AFL_PREV]
    nt = st[S_TOUCHED]
    new_edges = st[S_NEW_EDGES]
    max_depth = st[S_MAX_DEPTH]
    n_inp = inp.shape[0]
    use_afl = afl_map.shape[0] > 0
    amask = afl_map.shape[0] - 1
    use_cov = edge_cov.shape[0] > 0
    edge_cap = edges.shape[0] // 2
    status = RUNNING
    arg = 0

    if st[S_STARTED] == 0:
        st[S_STARTED] = 1
        leaf = 1
        ol = _emit_addr(out, ol, 0x05, base + 16 * cur)
        if use_afl:
            nt, afl_prev = _afl_hit(afl_map, touched, nt, labels[cur], afl_prev, amask)

    while True:
        if steps >= stop_at:
            break
        steps += 1
        for k in range(op_start[cur], op_start[cur + 1]):
            code = ops[k, 0]
            if code == 0:
                r = ops[k, 1]
                if cursor < n_inp:
                    regs[r] = inp[cursor]
                    cursor += 1
                else:
                    regs[r] = 0
                    eof = 1
            elif code == 1:
                regs[ops[k, 1]] = ops[k, 3]
            elif code == 2:
                regs[ops[k, 1]] = regs[ops[k, 2]] + regs[ops[k, 3]]
            else:
                regs[ops[k, 1]] = regs[ops[k, 2]] - regs[ops[k, 3]]

        kind = term[cur, 0]
        nxt = -1
        tip = False
        if kind == 0:
            pop = term[cur, 1]
            if pop == 5:
                taken = eof != 0
            else:
                x = regs[term[cur, 2]]
                v = term[cur, 3]
                if pop == 0:
                    taken = x == v
                elif pop == 1:
                    taken = x != v
                elif pop == 2:
                    taken = (x ^ SIGN) < (v ^ SIGN)
                elif pop == 3:
                    taken = (x ^ SIGN) > (v ^ SIGN)
                else:
                    taken = False
                    for j in range(term[cur, 6]):
                        if sets[v + j] == x:
                            taken = True
                            break
            ttotal += 1
            if taken:
                tacc |= 1 << (tn + 1)
                nxt = term[cur, 4]
            else:
                nxt = term[cur, 5]
            tn += 1
            if tn == 6:
                out[ol] = tacc | 0x80
                ol += 1
                tacc = 0
                tn = 0
        elif kind == 1:
            nxt = term[cur, 4]
        elif kind == 2:
            sel = regs[term[cur, 2]]
            size = term[cur, 5]
            if sel < 0 or sel >= size:
                sel = size - 1
            nxt = tables[term[cur, 4] + sel]
            tip = True
        elif kind == 3:
            if sp >= depth_limit:
                status = CRASHED
                arg = -1
            else:
                stack[sp] = term[cur, 5]
                sp += 1
                if sp > max_depth:
                    max_depth = sp
                leaf = 1
                nxt = term[cur, 4]
                tip = True
        elif kind == 4:
            if sp == 0:
                if leaf:
                    samples[ns] = 0
                    ns += 1
                status = EXITED
                arg = 0
            else:
                if leaf:
                    samples[ns] = sp
                    ns += 1
                sp -= 1
                nxt = stack[sp]
                leaf = 0
                tip = True
        elif kind == 5:
            if leaf:
                samples[ns] = sp
                ns += 1
            status = EXITED
            arg = term[cur, 3]
        else:
            status = CRASHED
            arg = term[cur, 3]

        if status != RUNNING:
            if tn:
                out[ol] = tacc | (1 << (tn + 1))
                ol += 1
                tacc = 0
                tn = 0
            ol = _emit_addr(out, ol, 0x07, base + 16 * cur)
            break

        if tip:
            if tn:
                out[ol] = tacc | (1 << (tn + 1))
                ol += 1
                tacc = 0
                tn = 0
            ol = _emit_addr(out, ol, 0x03, base + 16 * nxt)
        if record_edges and ne < edge_cap:
            edges[2 * ne] = cur
            edges[2 * ne + 1] = nxt
            ne += 1
        if use_cov:
            idx = cur * n_blocks + nxt
            if edge_cov[idx] == 0:
                edge_cov[idx] = 1
                new_edges += 1
        if use_afl:
            nt, afl_prev = _afl_hit(afl_map, touched, nt, labels[nxt], afl_prev, amask)
        cur = nxt
        if steps >= budget:
            status = HUNG
            if tn:
                out[ol] = tacc | (1 << (tn + 1))
                ol += 1
                tacc = 0
                tn = 0
            ol = _emit_addr(out, ol, 0x07, base + 16 * cur)
            break

    st[S_CUR] = cur
    st[S_STEPS] = steps
    st[S_CURSOR] = cursor
    st[S_EOF] = eof
    st[S_SP] = sp
    st[S_OUT] = ol
    st[S_TNT_ACC] = tacc
    st[S_TNT_N] = tn
    st[S_TNT_TOTAL] = ttotal
    st[S_EDGES] = ne
    st[S_SAMPLES] = ns
    st[S_LEAF] = leaf
    st[S_STATUS] = status
    st[S_ARG] = arg
    st[S_AFL_PREV] = afl_prev
    st[S_TOUCHED] = nt
    st[S_NEW_EDGES] = new_edges
    st[S_MAX_DEPTH] = max_depth
    st[S_LAST_BLOCK] = cur
    return status


@numba.njit(nogil=True, cache=True)
def _clear_slots(afl_map, touched, n):
    for i in range(n):
        afl_map[touched[i]] = 0


class Status(enum.Enum):
    EXIT = "exit"
    CRASH = "crash"
    HANG = "hang"


@dataclass
class ExecOutcome:
    status: Status
    code: int = 0
    trap: str = ""
    steps: int = 0
    tnt_total: int = 0
    call_chains: List[int] = field(default_factory=list)
    block: int = 0  # block where execution stopped
    max_depth: int = 0

    @property
    def crashed(self) -> bool:
        return self.status is Status.CRASH

    def signature(self) -> Tuple[str, int]:
        """Deduplication key: (trap kind, stopping block)."""
        return (self.trap if self.status is Status.CRASH else self.status.value, self.block)

    def __str__(self):
        if self.status is Status.EXIT:
            return f"Exit({self.code})"
        if self.status is Status.CRASH:
            return f"Crash({self.trap})"
        return "Hang"


def afl_labels(n_blocks: int, map_size: int, seed: int = 0x5EED) -> np.ndarray:
    """Fixed pseudorandom block labels in [0, map_size), distinct where possible."""
    rng = random.Random(seed)
    if n_blocks <= map_size:
        vals = rng.sample(range(map_size), n_blocks)
    else:
        vals = [rng.randrange(map_size) for _ in range(n_blocks)]
    return np.array(vals, dtype=np.int64)


class CompiledProgram:
    """Array encoding of a validated TargetProgram."""

    def __init__(self, program: TargetProgram):
        program.validate()
        self.program = program
        n = program.block_count
        self.n_blocks = n
        ops, starts = [], [0]
        term = np.zeros((n, 7), dtype=np.int64)
        tables: List[int] = []
        sets: List[int] = []
        self.trap_kinds: List[str] = []
        for b in program.blocks:
            for op in b.micro_ops:
                if isinstance(op, LoadInput):
                    ops.append((0, op.reg, 0, 0))
                elif isinstance(op, SetConst):
                    ops.append((1, op.reg, 0, _i64(op.value)))
                elif isinstance(op, Add):
                    ops.append((2, op.dst, op.a, op.b))
                elif isinstance(op, Sub):
                    ops.append((3, op.dst, op.a, op.b))
            starts.append(len(ops))
            t = b.terminator
            row = term[b.id]
            if isinstance(t, CondBranch):
                row[0] = _BR
                row[1] = _PRED_CODE[t.pred.op]
                row[2] = t.pred.reg
                if t.pred.op is PredOp.IN:
                    row[3] = len(sets)
                    vals = sorted(t.pred.values)
                    row[6] = len(vals)
                    sets.extend(_i64(v) for v in vals)
                else:
                    row[3] = _i64(t.pred.value)
                row[4], row[5] = t.true_target, t.false_target
            elif isinstance(t, Jump):
                row[0], row[4] = _JMP, t.target
            elif isinstance(t, IndirectJump):
                row[0], row[2] = _IJMP, t.selector
                row[4], row[5] = len(tables), len(t.table)
                tables.extend(t.table)
            elif isinstance(t, Call):
                row[0], row[4], row[5] = _CALL, t.target, t.return_to
            elif isinstance(t, Return):
                row[0] = _RET
            elif isinstance(t, Exit):
                row[0], row[3] = _EXIT, t.code
            elif isinstance(t, Trap):
                if t.kind not in self.trap_kinds:
                    self.trap_kinds.append(t.kind)
                row[0], row[3] = _TRAP, self.trap_kinds.index(t.kind)
        self.ops = np.array(ops, dtype=np.int64).reshape(-1, 4)
        self.op_start = np.array(starts, dtype=np.int64)
        self.term = term
        self.tables = np.array(tables or [0], dtype=np.int64)
        self.sets = np.array(sets or [0], dtype=np.int64)
        self.base = program.address_base

    def trap_name(self, arg: int) -> str:
        return STACK_EXHAUSTION if arg < 0 else self.trap_kinds[arg]


_EMPTY_U8 = np.zeros(0, dtype=np.uint8)
_EMPTY_I32 = np.zeros(0, dtype=np.int32)
_EMPTY_I64 = np.zeros(0, dtype=np.int64)


class Execution:
    """One resumable run of a program over an input.

    Large scratch arrays are borrowed from the engine, so an engine drives one
    execution at a time; results must be read before the next ``start``.
    """

    def __init__(self, engine: "Engine", data: bytes, afl_map: Optional[np.ndarray] = None,
                 edge_cov: Optional[np.ndarray] = None, record_edges: bool = True):
        self.engine = engine
        self.inp = np.frombuffer(bytes(data), dtype=np.uint8)
        self.st = np.zeros(N_STATE, dtype=np.int64)
        self.st[S_CUR] = engine.compiled.program.entry
        self.regs = np.zeros(8, dtype=np.int64)
        self.stack = engine._stack
        self.edges = engine._edges if record_edges else _EMPTY_I32
        self.samples = engine._samples
        self.afl_map = afl_map if afl_map is not None else _EMPTY_U8
        if afl_map is not None:
            if engine._touched.shape[0] < afl_map.shape[0]:
                engine._touched = np.zeros(afl_map.shape[0], dtype=np.int32)
            self.touched = engine._touched
        else:
            self.touched = _EMPTY_I32
        self.edge_cov = edge_cov if edge_cov is not None else _EMPTY_U8
        self.record_edges = record_edges
        self._out = engine._out

    @property
    def finished(self) -> bool:
        return self.st[S_STATUS] != RUNNING

    def step(self, max_steps: int) -> bytes:
        """Run up to ``max_steps`` more blocks; return the packet bytes emitted."""
        e = self.engine
        c = e.compiled
        need = 10 * min(max_steps, e.step_budget) + 32
        if self._out.shape[0] < need:
            self._out = e._out = np.zeros(need, dtype=np.uint8)
        self.st[S_OUT] = 0
        stop_at = min(int(self.st[S_STEPS]) + max_steps, e.step_budget)
        _run(c.ops, c.op_start, c.term, c.tables, c.sets, c.base, self.inp, self.st,
             self.regs, self.stack, self._out, self.edges, self.samples, self.afl_map,
             self.touched, e.labels, self.edge_cov, c.n_blocks, stop_at, e.step_budget,
             e.depth_limit, self.record_edges)
        return self._out[:self.st[S_OUT]].tobytes()

    def outcome(self) -> ExecOutcome:
        st = self.st
        status = int(st[S_STATUS])
        samples = self.samples[:st[S_SAMPLES]].tolist()
        common = dict(steps=int(st[S_STEPS]), tnt_total=int(st[S_TNT_TOTAL]), call_chains=samples,
                      block=int(st[S_LAST_BLOCK]), max_depth=int(st[S_MAX_DEPTH]))
        if status == EXITED:
            return ExecOutcome(Status.EXIT, code=int(st[S_ARG]), **common)
        if status == CRASHED:
            return ExecOutcome(Status.CRASH, trap=self.engine.compiled.trap_name(int(st[S_ARG])), **common)
        if status == HUNG:
            return ExecOutcome(Status.HANG, **common)
        raise RuntimeError("execution still running")

    def edge_list(self) -> List[Tuple[int, int]]:
        n = int(self.st[S_EDGES])
        e = self.edges[:2 * n]
        return list(zip(e[0::2].tolist(), e[1::2].tolist()))

    def touched_slots(self) -> np.ndarray:
        return self.touched[:self.st[S_TOUCHED]]

    @property
    def new_edges(self) -> int:
        return int(self.st[S_NEW_EDGES])


class Engine:
    """Reusable executor for one program under fixed limits."""

    def __init__(self, program: TargetProgram, step_budget: int = DEFAULT_STEP_BUDGET,
                 depth_limit: int = DEFAULT_DEPTH_LIMIT, map_size: int = DEFAULT_MAP_SIZE):
        if step_budget <= 0 or depth_limit <= 0:
            raise ValueError("step budget and depth limit must be positive")
        if map_size & (map_size - 1):
            raise ValueError("map size must be a power of two")
        self.compiled = CompiledProgram(program)
        self.program = program
        self.step_budget = step_budget
        self.depth_limit = depth_limit
        self.map_size = map_size
        self.labels = afl_labels(program.block_count, map_size)
        self._stack = np.zeros(depth_limit + 1, dtype=np.int64)
        self._edges = np.zeros(2 * step_budget, dtype=np.int32)
        self._samples = np.zeros(step_budget + 1, dtype=np.int32)
        self._touched = np.zeros(map_size, dtype=np.int32)
        self._out = np.zeros(0, dtype=np.uint8)

    def start(self, data: bytes, **kw) -> Execution:
        return Execution(self, data, **kw)

    def run(self, data: bytes, **kw) -> Tuple[ExecOutcome, bytes, Execution]:
        ex = Execution(self, data, **kw)
        trace = ex.step(self.step_budget)
        return ex.outcome(), trace, ex


def execute(program: TargetProgram, data: bytes, packet_sink=None, edge_sink=None,
            step_budget: int = DEFAULT_STEP_BUDGET, depth_limit: int = DEFAULT_DEPTH_LIMIT) -> ExecOutcome:
    """Run ``program`` on ``data`` once.

    ``packet_sink`` receives the PTX1 byte stream; ``edge_sink`` receives each
    ground-truth ``(prev, cur)`` block pair. Either may be a list (appended to)
    or a callable.
    """
    eng = Engine(program, step_budget, depth_limit)
    ex = eng.start(data)
    trace = ex.step(step_budget)
    if packet_sink is not None:
        if callable(packet_sink):
            packet_sink(trace)
        else:
            packet_sink.extend(trace)
    if edge_sink is not None:
        edges = ex.edge_list()
        if callable(edge_sink):
            for e in edges:
                edge_sink(e)
        else:
            edge_sink.extend(edges)
    return ex.outcome()
