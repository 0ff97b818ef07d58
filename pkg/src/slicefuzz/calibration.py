"""Choosing MAX_TIP for a target.

Each candidate runs a short path-slice campaign from the seed corpus. A
candidate qualifies when bitmap occupancy grows by less than 30% of its
half-way value over the second half of the budget, and when replaying the
final queue shows fewer than 1% of distinct slice hashes sharing a bit. The
largest qualifying candidate wins.

A candidate whose campaign never completes a slice gives the fuzzer no
feedback at all; it only qualifies if no candidate sets any bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence

from .feedback import FeedbackConfig, encode_index
from .fuzzer.campaign import Campaign, FuzzConfig
from .pipeline import FeedbackMode, PipelineConfig, PipelineMode, Tracer
from .vm.program import TargetProgram

CANDIDATES = (2, 4, 8, 16, 32, 64)
MAX_GROWTH = 0.30
MAX_COLLISION = 0.01


class CalibrationError(ValueError):
    pass


@dataclass
class Measurement:
    max_tip: int
    half_occupancy: int
    final_occupancy: int
    distinct_slices: int
    slice_bits: int

    @property
    def growth(self) -> float:
        """Second-half growth as a fraction of half-way occupancy."""
        grown = self.final_occupancy - self.half_occupancy
        if self.half_occupancy == 0:
            return 0.0 if grown == 0 else float("inf")
        return grown / self.half_occupancy

    @property
    def collision_rate(self) -> float:
        if self.distinct_slices == 0:
            return 0.0
        return 1.0 - self.slice_bits / self.distinct_slices

    @property
    def passed(self) -> bool:
        return self.growth < MAX_GROWTH and self.collision_rate < MAX_COLLISION

    def describe(self) -> str:
        verdict = "ok" if self.passed else "rejected"
        return (f"max_tip={self.max_tip}: occupancy {self.half_occupancy} -> {self.final_occupancy} "
                f"(growth {self.growth:.1%}), {self.distinct_slices} slices on {self.slice_bits} bits "
                f"(collisions {self.collision_rate:.2%}) {verdict}")


@dataclass
class Calibration:
    chosen: int
    measurements: List[Measurement] = field(default_factory=list)

    def report(self) -> str:
        lines = [m.describe() for m in self.measurements]
        lines.append(f"chosen max_tip={self.chosen}")
        return "\n".join(lines)


def measure(program: TargetProgram, seeds: Sequence[bytes], max_tip: int, exec_budget: int,
            rng_seed: int = 0, base: Optional[FeedbackConfig] = None) -> Measurement:
    """Run one candidate's campaign and replay its queue."""
    if exec_budget < 2:
        raise CalibrationError("calibration budget must be at least 2 executions")
    slices = replace(base or FeedbackConfig(), max_tip=max_tip)
    pipe = PipelineConfig(feedback=FeedbackMode.PATH_SLICE, mode=PipelineMode.SEQUENTIAL, slices=slices)
    half = exec_budget // 2
    occ = {}

    def on_stats(row):
        occ[row["exec_index"]] = row["bitmap_occupancy"]

    cfg = FuzzConfig(pipeline=pipe, exec_budget=exec_budget, rng_seed=rng_seed, stats_every=half)
    result = Campaign(program, seeds, cfg, on_stats=on_stats).run()
    final = result.state.occupancy
    # a campaign that stops early has nothing left to grow
    half_occ = occ.get(half, final)

    with Tracer(program, pipe) as tracer:
        hashes: set = set()
        tracer.hasher.record = hashes
        for seed in result.state.queue:
            tracer.run(seed.data)
        bits = {encode_index(h, tracer.hasher.bit_size, slices.literal_encoding) for h in hashes}
    return Measurement(max_tip, half_occ, final, len(hashes), len(bits))


def calibrate_max_tip(program: TargetProgram, seeds: Iterable[bytes], exec_budget: int,
                      rng_seed: int = 0, candidates: Sequence[int] = CANDIDATES,
                      base: Optional[FeedbackConfig] = None) -> Calibration:
    """Largest candidate MAX_TIP meeting the growth and collision criteria."""
    seeds = [bytes(s) for s in seeds]
    if not seeds:
        raise CalibrationError("seed corpus is empty")
    if not candidates or min(candidates) < 1:
        raise CalibrationError("candidates must be positive")
    ms = [measure(program, seeds, c, exec_budget, rng_seed, base) for c in sorted(candidates)]
    passing = [m for m in ms if m.passed]
    informative = [m for m in passing if m.final_occupancy > 0]
    pick = informative or passing
    if not pick:
        raise CalibrationError("no MAX_TIP candidate qualifies:\n" + "\n".join(m.describe() for m in ms))
    return Calibration(max(m.max_tip for m in pick), ms)
