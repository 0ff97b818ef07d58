"""The fuzzing loop: queue, favored-seed culling, stage schedule, triage."""
from __future__ import annotations

import csv
import io
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..feedback import Bitmap, MapMode, Novelty, has_new_bits
from ..pipeline import FeedbackMode, PipelineConfig, RunResult, Tracer
from ..vm.engine import ExecOutcome, Status
from ..vm.program import TargetProgram
from . import mutate as mut

STATS_SCHEMA = "coverage-v1"
STATS_COLUMNS = ("exec_index", "wall_ms", "ground_truth_edges_covered", "bitmap_occupancy",
                 "queue_len", "crashes", "hangs")

HAVOC_CYCLES_INIT = 1024
HAVOC_CYCLES = 256
SPLICE_CYCLES = 15
SPLICE_HAVOC = 32
HAVOC_MAX_MULT = 16

# virtual clock used for the wall_ms column unless real time is requested
VIRTUAL_US_PER_EXEC = 20.0
VIRTUAL_US_PER_STEP = 0.05


class CampaignError(RuntimeError):
    pass


@dataclass
class Seed:
    data: bytes
    id: int
    exec_time: int          # VM steps, a deterministic stand-in for run time
    tnt_total: int
    discovery: int          # exec index at which it was admitted
    slots: np.ndarray       # bitmap slots its run touched
    src: Optional[int] = None
    op: str = "seed"
    depth: int = 0
    favored: bool = False
    fuzzed: int = 0
    det_done: bool = False

    @property
    def was_fuzzed(self) -> bool:
        return self.fuzzed > 0

    def filename(self) -> str:
        src = "none" if self.src is None else f"{self.src:06d}"
        return f"id:{self.id:06d},src:{src},op:{self.op}"


@dataclass
class FuzzConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    exec_budget: int = 100_000
    wall_time: Optional[float] = None  # seconds; None = exec budget only
    rng_seed: int = 0
    max_len: int = mut.DEFAULT_MAX_LEN
    deterministic: bool = False
    stats_every: int = 1000
    real_clock: bool = False
    stop_on_block: Optional[int] = None   # stop once any edge into this block runs
    stop_on_crash: Optional[str] = None   # stop on the first crash of this trap kind

    def __post_init__(self):
        if self.exec_budget <= 0:
            raise ValueError("exec budget must be positive")
        if self.wall_time is not None and self.wall_time <= 0:
            raise ValueError("wall time budget must be positive")
        if self.stats_every <= 0:
            raise ValueError("stats_every must be positive")
        if self.max_len <= 0:
            raise ValueError("max_len must be positive")


@dataclass
class CampaignState:
    queue: List[Seed]
    global_map: Bitmap
    rng: random.Random
    crashes: Dict[Tuple[str, int], bytes] = field(default_factory=dict)
    hangs: Dict[Tuple[str, int], bytes] = field(default_factory=dict)
    execs: int = 0
    total_steps: int = 0
    cycles: int = 0
    cursor: int = 0
    pending_favored: int = 0
    score_changed: bool = False
    top_rated: Dict[int, Seed] = field(default_factory=dict)
    found_this_cycle: int = 0
    saturated_at: Optional[int] = None
    target_reached_at: Optional[int] = None
    crash_found_at: Optional[int] = None
    stop: bool = False

    @property
    def unique_crashes(self) -> int:
        return len(self.crashes)

    @property
    def unique_hangs(self) -> int:
        return len(self.hangs)

    @property
    def occupancy(self) -> int:
        return self.global_map.occupancy()


@dataclass
class CampaignResult:
    state: CampaignState
    edges_covered: int
    edge_set: set
    rows: List[dict]
    elapsed_s: float

    @property
    def execs(self) -> int:
        return self.state.execs


def _slots_of(bitmap: Bitmap) -> np.ndarray:
    touched = np.sort(bitmap.touched_array())
    if bitmap.mode is MapMode.HITCOUNT:
        return touched
    bits = np.unpackbits(bitmap.data[touched][:, None], axis=1, bitorder="little")
    rows, cols = np.nonzero(bits)
    return touched[rows] * 8 + cols


class Campaign:
    """One fuzzing campaign over one program."""

    def __init__(self, program: TargetProgram, seeds: Iterable[bytes], config: Optional[FuzzConfig] = None,
                 out_dir: Optional[os.PathLike] = None, on_stats: Optional[Callable[[dict], None]] = None):
        self.program = program
        self.config = config or FuzzConfig()
        self.seeds = [bytes(s) for s in seeds]
        if not self.seeds:
            raise CampaignError("seed corpus is empty")
        self.tracer = Tracer(program, self.config.pipeline)
        self.path_slice = self.config.pipeline.feedback is FeedbackMode.PATH_SLICE
        self.state = CampaignState([], self.tracer.new_bitmap(), random.Random(self.config.rng_seed))
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.on_stats = on_stats
        self.rows: List[dict] = []
        self._local = self.tracer.new_bitmap()
        self._t0 = 0.0
        self._stats_file: Optional[io.TextIOBase] = None
        self._csv = None

    # ------------------------------------------------------------ output

    def _open_output(self) -> None:
        if self.out_dir is None:
            return
        for sub in ("queue", "crashes", "hangs"):
            (self.out_dir / sub).mkdir(parents=True, exist_ok=True)
        self._stats_file = open(self.out_dir / "stats.csv", "w", newline="")
        self._stats_file.write(f"# schema: {STATS_SCHEMA}\n")
        self._csv = csv.DictWriter(self._stats_file, fieldnames=STATS_COLUMNS, lineterminator="\n")
        self._csv.writeheader()

    def _persist(self, sub: str, name: str, data: bytes) -> None:
        if self.out_dir is not None:
            (self.out_dir / sub / name).write_bytes(data)

    def wall_ms(self) -> float:
        if self.config.real_clock:
            return (time.perf_counter() - self._t0) * 1000.0
        s = self.state
        return (s.execs * VIRTUAL_US_PER_EXEC + s.total_steps * VIRTUAL_US_PER_STEP) / 1000.0

    def _stats_row(self) -> None:
        s = self.state
        row = {"exec_index": s.execs, "wall_ms": f"{self.wall_ms():.3f}",
               "ground_truth_edges_covered": self.tracer.covered_edges(),
               "bitmap_occupancy": s.occupancy, "queue_len": len(s.queue),
               "crashes": s.unique_crashes, "hangs": s.unique_hangs}
        self.rows.append(row)
        if self._csv is not None:
            self._csv.writerow(row)
            self._stats_file.flush()
        if self.on_stats is not None:
            self.on_stats(row)

    # ------------------------------------------------------------ execution

    def _out_of_budget(self) -> bool:
        s = self.state
        if s.stop or s.execs >= self.config.exec_budget:
            return True
        wt = self.config.wall_time
        return wt is not None and time.perf_counter() - self._t0 >= wt

    def run_one(self, data: bytes) -> RunResult:
        """Execute one input, updating counters and ground-truth coverage."""
        local = self._local
        res = self.tracer.run(data, track_edges=True, bitmap=local)
        s = self.state
        s.execs += 1
        s.total_steps += res.outcome.steps
        if res.new_edges and self.config.stop_on_block is not None and s.target_reached_at is None:
            if self.tracer.edge_cov.reshape(self.program.block_count, -1)[:, self.config.stop_on_block].any():
                s.target_reached_at = s.execs
                s.stop = True
        return res

    def common_fuzz(self, data: bytes, src: Optional[Seed], op: str) -> bool:
        """Run a candidate and triage it; returns True if it was queued."""
        if len(data) > self.config.max_len:
            data = data[:self.config.max_len]
        res = self.run_one(data)
        s = self.state
        queued = False
        out = res.outcome
        if out.status is Status.EXIT:
            if has_new_bits(self._local, s.global_map) is Novelty.NEW_COVERAGE:
                self._add_seed(data, res, src, op)
                queued = True
        else:
            self._triage(out, data, src, op)
        self._local.clear()
        if s.execs % self.config.stats_every == 0:
            self._stats_row()
        return queued

    def _triage(self, out: ExecOutcome, data: bytes, src: Optional[Seed], op: str) -> None:
        s = self.state
        key = out.signature()
        store, sub = (s.crashes, "crashes") if out.status is Status.CRASH else (s.hangs, "hangs")
        if key in store:
            return
        store[key] = data
        srcs = "none" if src is None else f"{src.id:06d}"
        self._persist(sub, f"id:{len(store) - 1:06d},sig:{key[0]}@{key[1]},src:{srcs},op:{op}", data)
        if out.status is Status.CRASH:
            if s.crash_found_at is None:
                s.crash_found_at = s.execs
            if self.config.stop_on_crash is not None and out.trap == self.config.stop_on_crash:
                s.stop = True

    def _add_seed(self, data: bytes, res: RunResult, src: Optional[Seed], op: str) -> Seed:
        s = self.state
        seed = Seed(data, len(s.queue), res.outcome.steps, res.tnt_total, s.execs, _slots_of(self._local),
                    None if src is None else src.id, op, 0 if src is None else src.depth + 1)
        s.queue.append(seed)
        s.found_this_cycle += 1
        self._update_score(seed)
        self._persist("queue", seed.filename(), data)
        return seed

    # ------------------------------------------------------------ favored seeds

    def _better(self, a: Seed, b: Seed) -> bool:
        if self.path_slice:
            return (a.tnt_total, a.exec_time, a.discovery) < (b.tnt_total, b.exec_time, b.discovery)
        return (a.exec_time * len(a.data), a.discovery) < (b.exec_time * len(b.data), b.discovery)

    def _update_score(self, seed: Seed) -> None:
        top = self.state.top_rated
        for slot in seed.slots.tolist():
            cur = top.get(slot)
            if cur is None or self._better(seed, cur):
                top[slot] = seed
                self.state.score_changed = True

    def cull_queue(self) -> None:
        """Mark a minimal set of top-rated seeds covering every slot as favored."""
        s = self.state
        if not s.score_changed:
            return
        s.score_changed = False
        covered = set()
        for q in s.queue:
            q.favored = False
        s.pending_favored = 0
        for slot in sorted(s.top_rated):
            if slot in covered:
                continue
            seed = s.top_rated[slot]
            covered.update(seed.slots.tolist())
            if not seed.favored:
                seed.favored = True
                if not seed.was_fuzzed:
                    s.pending_favored += 1

    def schedule_next(self) -> Seed:
        """Next seed in round-robin order, skipping non-favored ones AFL-style."""
        s = self.state
        if not s.queue:
            raise CampaignError("queue is empty")
        rng = s.rng
        while True:
            if s.cursor >= len(s.queue):
                s.cursor = 0
                s.cycles += 1
                if s.found_this_cycle == 0 and s.saturated_at is None and s.cycles > 1:
                    s.saturated_at = s.execs
                s.found_this_cycle = 0
            self.cull_queue()
            seed = s.queue[s.cursor]
            s.cursor += 1
            if len(s.queue) == 1:
                return seed
            if s.pending_favored:
                if (seed.was_fuzzed or not seed.favored) and rng.randrange(100) < 99:
                    continue
            elif not seed.favored and len(s.queue) > 10:
                if s.cycles > 1 and not seed.was_fuzzed:
                    if rng.randrange(100) < 75:
                        continue
                elif rng.randrange(100) < 95:
                    continue
            return seed

    # ------------------------------------------------------------ stages

    def _perf_score(self, seed: Seed) -> float:
        s = self.state
        avg = max(1.0, sum(q.exec_time for q in s.queue) / len(s.queue))
        t = seed.exec_time
        score = 100.0
        if t * 0.1 > avg:
            score = 10
        elif t * 0.25 > avg:
            score = 25
        elif t * 0.5 > avg:
            score = 50
        elif t * 0.75 > avg:
            score = 75
        elif t * 4 < avg:
            score = 300
        elif t * 3 < avg:
            score = 200
        elif t * 2 < avg:
            score = 150
        d = seed.depth
        if 4 <= d <= 7:
            score *= 2
        elif 8 <= d <= 13:
            score *= 3
        elif 14 <= d <= 25:
            score *= 4
        elif d > 25:
            score *= 5
        return min(score, 1600.0)

    def fuzz_one(self, seed: Seed) -> None:
        s = self.state
        cfg = self.config
        rng = s.rng
        doing_det = cfg.deterministic and not seed.det_done
        if doing_det:
            for stage in mut.DETERMINISTIC:
                for _, cand in mut.deterministic(stage, seed.data):
                    if self._out_of_budget():
                        return
                    self.common_fuzz(cand, seed, stage)
            seed.det_done = True

        perf = self._perf_score(seed)
        stage_max = max(16, int((HAVOC_CYCLES_INIT if doing_det else HAVOC_CYCLES) * perf / 100))
        i = 0
        while i < stage_max:
            if self._out_of_budget():
                return
            before = len(s.queue)
            self.common_fuzz(mut.havoc(seed.data, rng, cfg.max_len), seed, "havoc")
            if len(s.queue) != before and perf <= HAVOC_MAX_MULT * 100:
                stage_max *= 2
                perf *= 2
            i += 1

        if len(s.queue) > 1:
            for _ in range(SPLICE_CYCLES):
                other = s.queue[rng.randrange(len(s.queue))]
                if other is seed:
                    continue
                spliced = mut.splice(seed.data, other.data, rng)
                if spliced is None:
                    continue
                for _ in range(max(1, int(SPLICE_HAVOC * perf / 100))):
                    if self._out_of_budget():
                        return
                    self.common_fuzz(mut.havoc(spliced, rng, cfg.max_len), seed, "splice")

        seed.fuzzed += 1
        if seed.favored and seed.fuzzed == 1:
            s.pending_favored = max(0, s.pending_favored - 1)

    # ------------------------------------------------------------ driver

    def _dry_run(self) -> None:
        s = self.state
        for i, data in enumerate(self.seeds):
            if self._out_of_budget():
                break
            res = self.run_one(data)
            if res.outcome.status is Status.EXIT:
                new = has_new_bits(self._local, s.global_map) is Novelty.NEW_COVERAGE
                # the first usable seed is kept even with an empty map so the queue can start
                if new or not s.queue:
                    self._add_seed(data, res, None, f"seed{i}")
            else:
                self._triage(res.outcome, data, None, f"seed{i}")
            self._local.clear()
            if s.execs % self.config.stats_every == 0:
                self._stats_row()
        if not s.queue and not self._out_of_budget():
            raise CampaignError("no seed executed without crashing or hanging")

    def run(self) -> CampaignResult:
        self._t0 = time.perf_counter()
        self._open_output()
        try:
            self._dry_run()
            while not self._out_of_budget():
                self.fuzz_one(self.schedule_next())
            if not self.rows or self.rows[-1]["exec_index"] != self.state.execs:
                self._stats_row()
        finally:
            if self._stats_file is not None:
                self._stats_file.close()
            self.tracer.close()
        return CampaignResult(self.state, self.tracer.covered_edges(), self.tracer.edge_set(), self.rows,
                              time.perf_counter() - self._t0)


def fuzz_one(campaign: Campaign, seed: Seed) -> CampaignState:
    campaign.fuzz_one(seed)
    return campaign.state


def schedule_next(campaign: Campaign) -> Seed:
    return campaign.schedule_next()
