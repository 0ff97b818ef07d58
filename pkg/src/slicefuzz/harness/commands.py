"""Experiment commands: campaigns, dry runs, coverage comparison, call chains, calibration."""
from __future__ import annotations

import csv
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

from ..calibration import Calibration, calibrate_max_tip
from ..fuzzer.campaign import STATS_COLUMNS, Campaign, CampaignResult
from ..pipeline import FeedbackMode, PipelineConfig, PipelineMode, Tracer
from ..vm.engine import Status
from ..vm.program import TargetProgram
from .config import CampaignConfig, ConfigError, read_corpus

TRIALS_SCHEMA = "trials-v1"
DRYRUN_SCHEMA = "dryrun-v1"
COVDIFF_SCHEMA = "covdiff-v1"
CALLCHAINS_SCHEMA = "callchains-v1"
TRIAL_METRICS = STATS_COLUMNS[1:]

Edge = Tuple[int, int]


class CommandError(RuntimeError):
    pass


def _open_csv(path: Path, schema: str, columns: Sequence[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    fh.write(f"# schema: {schema}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(columns)
    return fh, writer


def edge_label(program: TargetProgram, edge: Edge) -> str:
    src, dst = edge
    return f"{program.blocks[src].label}->{program.blocks[dst].label}"


# ---------------------------------------------------------------- fuzz

@dataclass
class FuzzReport:
    max_tip: int
    results: List[CampaignResult]
    calibration: Optional[Calibration] = None

    def summary_rows(self) -> List[Dict[str, float]]:
        """Final stats row of each trial."""
        rows = []
        for k, r in enumerate(self.results):
            final = dict(r.rows[-1])
            final["trial"] = k
            rows.append(final)
        return rows


def resolve_max_tip(config: CampaignConfig, program: TargetProgram,
                    seeds: List[bytes]) -> Tuple[int, Optional[Calibration]]:
    if config.max_tip != "auto":
        return int(config.max_tip), None
    cal = calibrate_max_tip(program, seeds, config.calibration_execs, rng_seed=config.rng_seed)
    return cal.chosen, cal


def aggregate_trials(results: Sequence[CampaignResult]) -> List[Dict[str, float]]:
    """Mean and sample stddev of every stats column at exec indices all trials reached."""
    per_trial = [{int(row["exec_index"]): row for row in r.rows} for r in results]
    common = sorted(set.intersection(*(set(t) for t in per_trial)))
    out = []
    for idx in common:
        row: Dict[str, float] = {"exec_index": idx}
        for m in TRIAL_METRICS:
            vals = [float(t[idx][m]) for t in per_trial]
            row[f"{m}_mean"] = statistics.fmean(vals)
            row[f"{m}_stddev"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def cmd_fuzz(config: CampaignConfig) -> FuzzReport:
    """Run ``config.trials`` campaigns with consecutive rng seeds."""
    program = config.load_target()
    seeds = config.load_seeds()
    out = Path(config.out_dir) if config.out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write-test"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as e:
            raise CommandError(f"output directory {out} is not writable: {e}") from None
    max_tip, cal = resolve_max_tip(config, program, seeds)
    if cal is not None and out is not None:
        (out / "calibration.txt").write_text(cal.report() + "\n")
    results = []
    for k in range(config.trials):
        trial_dir = None
        if out is not None:
            trial_dir = out if config.trials == 1 else out / f"trial-{k}"
        fuzz = config.fuzz_config(program, config.rng_seed + k, max_tip)
        results.append(Campaign(program, seeds, fuzz, out_dir=trial_dir).run())
    if out is not None and config.trials > 1:
        cols = ["exec_index"] + [f"{m}_{s}" for m in TRIAL_METRICS for s in ("mean", "stddev")]
        fh, w = _open_csv(out / "trials.csv", TRIALS_SCHEMA, cols)
        with fh:
            for row in aggregate_trials(results):
                w.writerow([row["exec_index"]] + [f"{row[c]:.3f}" for c in cols[1:]])
    return FuzzReport(max_tip, results, cal)


# ---------------------------------------------------------------- dry run

@dataclass
class DryRunReport:
    feedback: FeedbackMode
    execs: int
    seconds: float
    vm_s: float
    decode_s: float
    feedback_s: float
    edges: Set[Edge]
    outcomes: Counter = field(default_factory=Counter)
    crashes: List[Tuple[int, str]] = field(default_factory=list)  # (input index, outcome)

    @property
    def execs_per_sec(self) -> float:
        return self.execs / self.seconds if self.seconds > 0 else float("inf")

    def describe(self) -> str:
        return (f"{self.feedback.value}: {self.execs} execs in {self.seconds:.3f}s "
                f"({self.execs_per_sec:.0f}/s); vm {self.vm_s:.3f}s, decode {self.decode_s:.3f}s, "
                f"feedback {self.feedback_s:.3f}s; {len(self.edges)} edges; "
                + ", ".join(f"{k} {v}" for k, v in sorted(self.outcomes.items())))


def dry_run(program: TargetProgram, inputs: Sequence[bytes], pipeline: PipelineConfig) -> DryRunReport:
    """Replay ``inputs`` once each through the full pipeline, without mutation."""
    if not inputs:
        raise CommandError("corpus is empty")
    rep = DryRunReport(pipeline.feedback, 0, 0.0, 0.0, 0.0, 0.0, set())
    # untimed run on a throwaway tracer so JIT loading is not billed to the corpus
    with Tracer(program, pipeline) as warm:
        warm.run(inputs[0], track_edges=True, bitmap=warm.new_bitmap())
    with Tracer(program, pipeline) as tracer:
        local = tracer.new_bitmap()
        t0 = time.perf_counter()
        for i, data in enumerate(inputs):
            res = tracer.run(data, track_edges=True, bitmap=local)
            local.clear()
            rep.vm_s += res.vm_s
            rep.decode_s += res.decode_s
            rep.feedback_s += res.feedback_s
            rep.outcomes[res.outcome.status.value] += 1
            if res.outcome.status is not Status.EXIT:
                rep.crashes.append((i, str(res.outcome)))
        rep.seconds = time.perf_counter() - t0
        rep.execs = len(inputs)
        rep.edges = tracer.edge_set()
    return rep


def cmd_dryrun(config: CampaignConfig, corpus_dir) -> DryRunReport:
    program = config.load_target()
    inputs = read_corpus(corpus_dir)
    if not inputs:
        raise CommandError(f"corpus {corpus_dir} is empty")
    max_tip, _ = resolve_max_tip(config, program, inputs)
    rep = dry_run(program, inputs, config.pipeline_config(max_tip))
    if config.out_dir is not None:
        fh, w = _open_csv(Path(config.out_dir) / "dryrun.csv", DRYRUN_SCHEMA,
                          ["feedback", "execs", "seconds", "execs_per_sec", "vm_s", "decode_s",
                           "feedback_s", "edges"])
        with fh:
            w.writerow([rep.feedback.value, rep.execs, f"{rep.seconds:.6f}", f"{rep.execs_per_sec:.1f}",
                        f"{rep.vm_s:.6f}", f"{rep.decode_s:.6f}", f"{rep.feedback_s:.6f}", len(rep.edges)])
    return rep


# ---------------------------------------------------------------- coverage diff

def _replay_config(config: Optional[CampaignConfig]) -> PipelineConfig:
    # ground-truth edges do not depend on the feedback mode; replay the cheapest way
    step = config.step_budget if config else PipelineConfig().step_budget
    depth = config.depth_limit if config else PipelineConfig().depth_limit
    return PipelineConfig(feedback=FeedbackMode.DIRECT_EDGE, mode=PipelineMode.SEQUENTIAL,
                          step_budget=step, depth_limit=depth)


def replay_edges(program: TargetProgram, inputs: Sequence[bytes],
                 config: Optional[CampaignConfig] = None) -> Set[Edge]:
    with Tracer(program, _replay_config(config)) as tracer:
        local = tracer.new_bitmap()
        for data in inputs:
            tracer.run(data, track_edges=True, bitmap=local)
            local.clear()
        return tracer.edge_set()


@dataclass
class CoverageDiff:
    a: Set[Edge]
    b: Set[Edge]

    @property
    def union(self) -> Set[Edge]:
        return self.a | self.b

    def _pct(self, part: Set[Edge]) -> float:
        u = len(self.union)
        return 100.0 * len(part) / u if u else 0.0

    @property
    def overlap_pct(self) -> float:
        return self._pct(self.a & self.b)

    @property
    def a_only(self) -> Set[Edge]:
        return self.a - self.b

    @property
    def b_only(self) -> Set[Edge]:
        return self.b - self.a

    @property
    def a_only_pct(self) -> float:
        return self._pct(self.a_only)

    @property
    def b_only_pct(self) -> float:
        return self._pct(self.b_only)

    def describe(self, program: Optional[TargetProgram] = None) -> str:
        lines = [f"union {len(self.union)} edges: overlap {self.overlap_pct:.1f}%, "
                 f"A-only {self.a_only_pct:.1f}%, B-only {self.b_only_pct:.1f}%"]
        if program is not None:
            for name, part in (("A-only", self.a_only), ("B-only", self.b_only)):
                if part:
                    lines.append(f"{name}: " + ", ".join(edge_label(program, e) for e in sorted(part)))
        return "\n".join(lines)


def cmd_coverage_diff(a_dir, b_dir, program: TargetProgram,
                      config: Optional[CampaignConfig] = None) -> CoverageDiff:
    for d in (a_dir, b_dir):
        if not Path(d).is_dir():
            raise CommandError(f"corpus directory {d} does not exist")
    diff = CoverageDiff(replay_edges(program, read_corpus(a_dir), config),
                        replay_edges(program, read_corpus(b_dir), config))
    if config is not None and config.out_dir is not None:
        fh, w = _open_csv(Path(config.out_dir) / "covdiff.csv", COVDIFF_SCHEMA,
                          ["union_edges", "overlap_pct", "a_only_pct", "b_only_pct"])
        with fh:
            w.writerow([len(diff.union), f"{diff.overlap_pct:.3f}", f"{diff.a_only_pct:.3f}",
                        f"{diff.b_only_pct:.3f}"])
    return diff


# ---------------------------------------------------------------- call chains

def call_chain_cdf(samples: Sequence[int]) -> List[Tuple[int, float]]:
    """(length, fraction of samples with length <= it) for each distinct length."""
    if not samples:
        return []
    counts = Counter(samples)
    total = len(samples)
    out, acc = [], 0
    for length in sorted(counts):
        acc += counts[length]
        out.append((length, acc / total))
    return out


def cmd_callchains(corpus_dir, program: TargetProgram, config: Optional[CampaignConfig] = None,
                   out_csv=None) -> List[Tuple[int, float]]:
    """Replay a corpus and return the CDF of call-chain lengths.

    A sample is the call-stack depth at the moment a frame returns (or the
    program stops) without having made a call, so a call-free program yields
    one sample of 0 per run.
    """
    if not Path(corpus_dir).is_dir():
        raise CommandError(f"corpus directory {corpus_dir} does not exist")
    inputs = read_corpus(corpus_dir)
    if not inputs:
        raise CommandError(f"corpus {corpus_dir} is empty")
    samples: List[int] = []
    with Tracer(program, _replay_config(config)) as tracer:
        local = tracer.new_bitmap()
        for data in inputs:
            res = tracer.run(data, bitmap=local)
            local.clear()
            samples.extend(res.outcome.call_chains)
    cdf = call_chain_cdf(samples)
    if out_csv is not None:
        fh, w = _open_csv(Path(out_csv), CALLCHAINS_SCHEMA, ["length", "cumulative_fraction"])
        with fh:
            for length, frac in cdf:
                w.writerow([length, f"{frac:.6f}"])
    return cdf


# ---------------------------------------------------------------- calibration

def cmd_calibrate(config: CampaignConfig) -> Calibration:
    program = config.load_target()
    seeds = config.load_seeds()
    cal = calibrate_max_tip(program, seeds, config.calibration_execs, rng_seed=config.rng_seed)
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "calibration.txt").write_text(cal.report() + "\n")
    return cal


__all__ = ["CommandError", "CoverageDiff", "DryRunReport", "FuzzReport", "aggregate_trials",
           "call_chain_cdf", "cmd_calibrate", "cmd_callchains", "cmd_coverage_diff", "cmd_dryrun",
           "cmd_fuzz", "dry_run", "edge_label", "replay_edges", "resolve_max_tip", "ConfigError"]
