import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from slicefuzz.codec import TraceRing, encode_stream
from slicefuzz.feedback import FeedbackConfig
from slicefuzz.pipeline import (
    ElasticController, FeedbackMode, PipelineConfig, PipelineMode, Tracer, elastic_adjust, run_traced,
)
from slicefuzz.vm.benchmarks import build_benchmark
from slicefuzz.vm.engine import Engine, Status
from slicefuzz.vm.program import Block, CondBranch, PredOp, Predicate, TargetProgram
from slicefuzz.vm.randprog import random_input, random_program


def config(feedback=FeedbackMode.PATH_SLICE, **kw):
    return PipelineConfig(feedback=feedback, slices=FeedbackConfig(max_tip=kw.pop("max_tip", 2), bitmap_size=1 << 12),
                          step_budget=kw.pop("step_budget", 4000), **kw)


def test_elastic_increase():
    c = ElasticController(flush_interval=1024, increment=64)
    assert elastic_adjust(c, 0).flush_interval == 1088


def test_elastic_clamp_at_min():
    c = ElasticController(flush_interval=64, backlog_threshold=100, min_interval=64)
    assert elastic_adjust(c, 101).flush_interval == 64


def test_elastic_clamp_at_max():
    c = ElasticController(flush_interval=65_536, max_interval=65_536)
    assert elastic_adjust(c, 0).flush_interval == 65_536


def test_elastic_descends_in_log_steps():
    c = ElasticController(flush_interval=65_536, backlog_threshold=10, min_interval=64, max_interval=65_536)
    n = 0
    while c.flush_interval > c.min_interval:
        elastic_adjust(c, 11)
        n += 1
    assert n == math.ceil(math.log2(65_536 / 64))


@given(st.lists(st.integers(0, 200_000), max_size=60), st.integers(1, 100), st.integers(1, 5000))
def test_elastic_bounds(backlogs, lo, span):
    c = ElasticController(flush_interval=lo, min_interval=lo, max_interval=lo + span, increment=37)
    for b in backlogs:
        elastic_adjust(c, b)
        assert c.min_interval <= c.flush_interval <= c.max_interval


def test_elastic_rejects_bad_bounds():
    with pytest.raises(ValueError):
        ElasticController(min_interval=10, max_interval=5)


def test_flush_interval_extremes():
    p = build_benchmark("maze")
    data = bytes([0x40, 0x80, 0x40, 0x80, 0x10, 0x10])
    small = config(flush_schedule=[1])
    big = config(flush_interval=65_536, min_interval=65_536)
    with Tracer(p, small) as t:
        a = t.run(data)
    with Tracer(p, big) as t:
        b = t.run(data)
    assert a.bitmap == b.bitmap and a.outcome == b.outcome
    assert a.flushes > b.flushes == 1


def test_crash_still_drains():
    p = build_benchmark("deep-recursion")
    data = b"(" * 300
    cfg = config(step_budget=100_000)
    par = run_traced(p, data, cfg, PipelineMode.PARALLEL)
    seq = run_traced(p, data, cfg, PipelineMode.SEQUENTIAL)
    assert par[0].status is Status.CRASH
    assert par[0] == seq[0] and par[1] == seq[1] and par[2] == seq[2]
    assert par[1].occupancy() > 0


def test_hang_still_drains():
    # a branch that loops on itself forever
    p = TargetProgram([Block(0, [], CondBranch(Predicate(PredOp.EOF), 0, 0))]).validate()
    cfg = config(step_budget=500, max_tip=1)
    par = run_traced(p, b"", cfg, PipelineMode.PARALLEL)
    seq = run_traced(p, b"", cfg, PipelineMode.SEQUENTIAL)
    assert par[0].status is Status.HANG and par[0] == seq[0]
    assert par[1] == seq[1] and par[2] == seq[2] == 500


def test_parallel_run_reports_after_barrier():
    p = build_benchmark("maze")
    with Tracer(p, config(flush_schedule=[3])) as t:
        r = t.run(bytes([0x40, 0x80, 0x40]))
    # every published byte was consumed before the outcome became visible
    assert r.trace_bytes > 0 and r.outcome.status is Status.EXIT


def test_tracer_reuse_matches_fresh_runs():
    p = build_benchmark("chunk-name")
    inputs = [b"IDAT", b"IHDR", b"\x00", b"IDxT"]
    with Tracer(p, config()) as t:
        reused = [t.run(d).bitmap for d in inputs]
    fresh = [run_traced(p, d, config())[1] for d in inputs]
    assert reused == fresh


modes = st.sampled_from(list(FeedbackMode))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32), modes,
       st.lists(st.integers(1, 300), min_size=1, max_size=5), st.integers(1, 8))
def test_schedule_independence(pseed, iseed, fb, sched, max_tip):
    p = random_program(random.Random(pseed))
    data = random_input(random.Random(iseed))
    seq = run_traced(p, data, config(fb, max_tip=max_tip), PipelineMode.SEQUENTIAL)
    par = run_traced(p, data, config(fb, max_tip=max_tip, flush_schedule=sched), PipelineMode.PARALLEL)
    elastic = run_traced(p, data, config(fb, max_tip=max_tip, backlog_threshold=8, min_interval=1,
                                         flush_interval=1, increment=3), PipelineMode.PARALLEL)
    assert seq[0] == par[0] == elastic[0]
    assert seq[1] == par[1] == elastic[1]
    assert seq[1].tobytes() == par[1].tobytes()
    assert seq[2] == par[2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32), st.integers(0, 3))
def test_backlog_bounded_with_keeping_up_consumer(pseed, iseed, lag):
    # the consumer drains the ring every ``lag + 1`` flushes, interleaved deterministically
    p = random_program(random.Random(pseed))
    data = random_input(random.Random(iseed))
    ctrl = ElasticController(flush_interval=1, backlog_threshold=64, min_interval=1, max_interval=32, increment=8)
    ring = TraceRing()
    ex = Engine(p, step_budget=4000).start(data)
    got = []
    k = 0
    while not ex.finished:
        ring.publish(ex.step(ctrl.flush_interval))
        backlog = ring.backlog()
        assert backlog <= ctrl.backlog_threshold + (lag + 1) * 10 * ctrl.max_interval + 32
        elastic_adjust(ctrl, backlog)
        k += 1
        if k % (lag + 1) == 0:
            got += ring.consume()
    got += ring.consume()
    assert ring.last_off == ring.pt_off
    assert encode_stream(got) == Engine(p, step_budget=4000).run(data)[1]
