"""Concurrent execution and trace decoding with an elastic flush interval.

The producer runs the VM in chunks of ``flush_interval`` steps and publishes
each chunk's packet bytes to a :class:`TraceRing`; the consumer decodes what is
published and feeds it to the coverage feedback. The outcome of a run becomes
visible only after the consumer has drained everything the producer published.
"""
from __future__ import annotations

import enum
import itertools
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .codec import TraceRing, decode_stream
from .feedback import (
    Bitmap, EdgeScorer, EdgeWalker, FeedbackConfig, MapMode, SliceHasher,
)
from .vm.engine import DEFAULT_DEPTH_LIMIT, DEFAULT_STEP_BUDGET, Engine, ExecOutcome, Execution
from .vm.program import TargetProgram


class FeedbackMode(enum.Enum):
    PATH_SLICE = "path-slice"
    EDGE_PT = "edge-pt"
    DIRECT_EDGE = "direct-edge"


class PipelineMode(enum.Enum):
    PARALLEL = "parallel"
    SEQUENTIAL = "sequential"


class PipelineError(RuntimeError):
    pass


@dataclass
class ElasticController:
    """Additive-increase / halve-on-congestion flush interval, counted in VM steps."""

    flush_interval: int = 64
    backlog_threshold: int = 64 * 1024
    min_interval: int = 64
    max_interval: int = 65_536
    increment: int = 64

    def __post_init__(self):
        if not 1 <= self.min_interval <= self.max_interval:
            raise ValueError("need 1 <= min_interval <= max_interval")
        if self.increment < 0 or self.backlog_threshold < 0:
            raise ValueError("increment and backlog_threshold must be non-negative")
        self.flush_interval = min(max(self.flush_interval, self.min_interval), self.max_interval)

    def adjust(self, backlog: int) -> "ElasticController":
        if backlog > self.backlog_threshold:
            self.flush_interval = max(self.min_interval, self.flush_interval // 2)
        else:
            self.flush_interval = min(self.max_interval, self.flush_interval + self.increment)
        return self


def elastic_adjust(ctrl: ElasticController, backlog: int) -> ElasticController:
    return ctrl.adjust(backlog)


@dataclass
class PipelineConfig:
    feedback: FeedbackMode = FeedbackMode.PATH_SLICE
    mode: PipelineMode = PipelineMode.PARALLEL
    slices: FeedbackConfig = field(default_factory=FeedbackConfig)
    step_budget: int = DEFAULT_STEP_BUDGET
    depth_limit: int = DEFAULT_DEPTH_LIMIT
    flush_interval: int = 64
    min_interval: int = 64
    max_interval: int = 65_536
    increment: int = 64
    backlog_threshold: int = 64 * 1024
    # fixed per-flush step counts, cycled; overrides the elastic controller
    flush_schedule: Optional[Sequence[int]] = None

    def __post_init__(self):
        self.feedback = FeedbackMode(self.feedback)
        self.mode = PipelineMode(self.mode)
        if self.step_budget <= 0 or self.depth_limit <= 0:
            raise ValueError("step_budget and depth_limit must be positive")
        if self.flush_schedule is not None and (not self.flush_schedule or min(self.flush_schedule) < 1):
            raise ValueError("flush_schedule entries must be positive")

    def controller(self) -> ElasticController:
        return ElasticController(self.flush_interval, self.backlog_threshold, self.min_interval,
                                 self.max_interval, self.increment)

    @property
    def map_mode(self) -> MapMode:
        return MapMode.BIT if self.feedback is FeedbackMode.PATH_SLICE else MapMode.HITCOUNT


@dataclass
class RunResult:
    outcome: ExecOutcome
    bitmap: Bitmap
    tnt_total: int
    trace_bytes: int = 0
    flushes: int = 0
    max_backlog: int = 0
    vm_s: float = 0.0
    decode_s: float = 0.0
    feedback_s: float = 0.0
    new_edges: int = 0  # ground-truth edges first seen by this run (if tracked)


class _Consumer:
    """Decoder plus feedback state for one run."""

    def __init__(self, tracer: "Tracer", bitmap: Bitmap):
        self.bitmap = bitmap
        self.decode_s = 0.0
        self.feedback_s = 0.0
        fb = tracer.config.feedback
        self.kind = fb
        if fb is FeedbackMode.PATH_SLICE:
            self.hasher: SliceHasher = tracer.hasher
            self.hasher.reset()
        elif fb is FeedbackMode.EDGE_PT:
            self.walker = EdgeWalker(tracer.program, tracer.config.step_budget)
            self.scorer = EdgeScorer(tracer.engine.labels, bitmap)
            self._started = False

    def consume(self, data: bytes, base: int) -> int:
        """Process whole packets at the front of ``data``; return bytes used."""
        if self.kind is FeedbackMode.PATH_SLICE:
            t0 = time.perf_counter()
            used = self.hasher.feed(data, self.bitmap)
            self.feedback_s += time.perf_counter() - t0
            return used
        if self.kind is FeedbackMode.EDGE_PT:
            t0 = time.perf_counter()
            packets, used = decode_stream(data, base)
            t1 = time.perf_counter()
            edges = self.walker.feed(packets)
            if not self._started and self.walker.position:
                self._started = True
                self.scorer.visit([self.walker.program.entry])
            self.scorer.visit([cur for _, cur in edges])
            self.feedback_s += time.perf_counter() - t1
            self.decode_s += t1 - t0
            return used
        return len(data)  # direct-edge: the VM scored the run itself

    def finish(self) -> Bitmap:
        if self.kind is FeedbackMode.EDGE_PT:
            self.walker.finish()
            return self.scorer.close()
        return self.bitmap


class _ProducerThread:
    """Long-lived producer thread, reused across runs like a fork server."""

    def __init__(self):
        self._jobs: "queue.SimpleQueue" = queue.SimpleQueue()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="vm-producer")
        self._thread.start()

    def _loop(self):
        while True:
            job = self._jobs.get()
            if job is None:
                return
            job()

    def submit(self, job) -> None:
        self._jobs.put(job)

    def stop(self) -> None:
        self._jobs.put(None)


class Tracer:
    """Runs one program under one pipeline configuration, reusing buffers."""

    def __init__(self, program: TargetProgram, config: Optional[PipelineConfig] = None):
        self.program = program
        self.config = config or PipelineConfig()
        c = self.config
        self.engine = Engine(program, c.step_budget, c.depth_limit, c.slices.bitmap_size)
        self.hasher = c.slices.hasher(program)
        self.edge_cov = np.zeros(program.block_count * program.block_count, dtype=np.uint8)
        self._producer: Optional[_ProducerThread] = None
        self._afl_map = np.zeros(c.slices.bitmap_size, dtype=np.uint8)

    def close(self) -> None:
        if self._producer is not None:
            self._producer.stop()
            self._producer = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def reset_edge_coverage(self) -> None:
        self.edge_cov[:] = 0

    def covered_edges(self) -> int:
        return int(np.count_nonzero(self.edge_cov))

    def edge_set(self) -> set:
        n = self.program.block_count
        return {(int(i) // n, int(i) % n) for i in np.flatnonzero(self.edge_cov)}

    def _start(self, data: bytes, track_edges: bool, record_edges: bool) -> Execution:
        direct = self.config.feedback is FeedbackMode.DIRECT_EDGE
        return self.engine.start(data, afl_map=self._afl_map if direct else None,
                                 edge_cov=self.edge_cov if track_edges else None,
                                 record_edges=record_edges)

    def _schedule(self):
        sched = self.config.flush_schedule
        return itertools.cycle(sched) if sched is not None else None

    def new_bitmap(self) -> Bitmap:
        return Bitmap(self.config.slices.bitmap_size, self.config.map_mode)

    def run(self, data: bytes, mode: Optional[PipelineMode] = None, track_edges: bool = False,
            record_edges: bool = False, bitmap: Optional[Bitmap] = None) -> RunResult:
        """Execute ``data`` and compute its local coverage map.

        With ``track_edges`` the ground-truth edges of this run are merged into
        :attr:`edge_cov`. ``bitmap``, if given, must be empty and is filled in
        place; otherwise a fresh one is allocated.
        """
        mode = PipelineMode(mode) if mode is not None else self.config.mode
        if bitmap is None:
            bitmap = self.new_bitmap()
        ex = self._start(data, track_edges, record_edges)
        if mode is PipelineMode.SEQUENTIAL:
            res = self._run_sequential(ex, bitmap)
        else:
            res = self._run_parallel(ex, bitmap)
        if self.config.feedback is FeedbackMode.DIRECT_EDGE:
            touched = ex.touched_slots()
            bitmap.data[touched] = self._afl_map[touched]
            bitmap.touched = touched.copy()
            self._afl_map[touched] = 0
        res.new_edges = ex.new_edges
        self.last_execution = ex
        return res

    def _run_sequential(self, ex: Execution, bitmap: Bitmap) -> RunResult:
        t0 = time.perf_counter()
        trace = ex.step(self.config.step_budget)
        vm_s = time.perf_counter() - t0
        cons = _Consumer(self, bitmap)
        used = cons.consume(trace, 0)
        if used != len(trace):
            raise PipelineError(f"{len(trace) - used} undecoded bytes at end of trace")
        cons.finish()
        out = ex.outcome()
        return RunResult(out, bitmap, out.tnt_total, len(trace), 1, len(trace), vm_s,
                         cons.decode_s, cons.feedback_s)

    def _run_parallel(self, ex: Execution, bitmap: Bitmap) -> RunResult:
        ring = TraceRing()
        ctrl = self.config.controller()
        sched = self._schedule()
        stats = {"flushes": 0, "max_backlog": 0, "vm_s": 0.0, "error": None}

        def produce():
            try:
                while not ex.finished:
                    n = next(sched) if sched is not None else ctrl.flush_interval
                    t0 = time.perf_counter()
                    chunk = ex.step(n)
                    stats["vm_s"] += time.perf_counter() - t0
                    ring.publish(chunk)  # timer-alarm / exit-callback flush point
                    stats["flushes"] += 1
                    backlog = ring.backlog()
                    if backlog > stats["max_backlog"]:
                        stats["max_backlog"] = backlog
                    ctrl.adjust(backlog)
            except BaseException as e:  # surfaced on the consumer side
                stats["error"] = e
            finally:
                ring.close()

        if self._producer is None:
            self._producer = _ProducerThread()
        self._producer.submit(produce)

        cons = _Consumer(self, bitmap)
        seen = 0
        try:
            while ring.wait(seen):
                data = ring.peek()
                seen = ring.last_off + len(data)
                ring.advance(cons.consume(data, ring.last_off))
        finally:
            # exit barrier: wait for the producer even if decoding failed
            while not ring.closed:
                ring.wait(ring.pt_off)
        if stats["error"] is not None:
            raise PipelineError("producer failed") from stats["error"]
        if ring.backlog():
            raise PipelineError(f"{ring.backlog()} undecoded bytes at end of trace")
        cons.finish()
        out = ex.outcome()
        return RunResult(out, bitmap, out.tnt_total, ring.pt_off, stats["flushes"],
                         stats["max_backlog"], stats["vm_s"], cons.decode_s, cons.feedback_s)


def run_traced(program: TargetProgram, data: bytes, config: Optional[PipelineConfig] = None,
               mode: Optional[PipelineMode] = None):
    """One traced execution; returns ``(outcome, local bitmap, tnt_total)``."""
    with Tracer(program, config) as tracer:
        r = tracer.run(data, mode)
    return r.outcome, r.bitmap, r.tnt_total
