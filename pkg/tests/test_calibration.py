import math

import pytest

from slicefuzz.calibration import (
    CANDIDATES, CalibrationError, Measurement, calibrate_max_tip, measure,
)
from slicefuzz.vm.benchmarks import build_benchmark, seed_corpus
from slicefuzz.vm.program import Block, CondBranch, Exit, LoadInput, PredOp, Predicate, TargetProgram


def two_blocks():
    return TargetProgram([
        Block(0, [LoadInput(0)], CondBranch(Predicate(PredOp.EQ, 0, 1), 1, 1)),
        Block(1, [], Exit(0)),
    ]).validate()


def test_trivial_program_takes_largest():
    cal = calibrate_max_tip(two_blocks(), [b"\x00"], exec_budget=200)
    assert cal.chosen == 64 == max(CANDIDATES)
    assert [m.max_tip for m in cal.measurements] == list(CANDIDATES)
    assert all(m.passed and m.final_occupancy == 0 for m in cal.measurements)
    assert "chosen max_tip=64" in cal.report()


def test_empty_corpus():
    with pytest.raises(CalibrationError):
        calibrate_max_tip(two_blocks(), [], exec_budget=100)


def test_bad_candidates():
    with pytest.raises(CalibrationError):
        calibrate_max_tip(two_blocks(), [b""], exec_budget=100, candidates=[0, 2])


def test_growth_and_collision_arithmetic():
    m = Measurement(8, 100, 129, 200, 199)
    assert m.growth == pytest.approx(0.29)
    assert m.collision_rate == pytest.approx(0.005)
    assert m.passed
    assert not Measurement(8, 100, 130, 10, 10).passed
    assert not Measurement(8, 100, 100, 100, 98).passed
    assert Measurement(8, 0, 0, 0, 0).growth == 0.0
    assert math.isinf(Measurement(8, 0, 3, 3, 3).growth)


def test_informative_candidate_preferred():
    # on chunk-name the loop fits one slice only at small MAX_TIP; larger ones set no bit
    cal = calibrate_max_tip(build_benchmark("chunk-name"), seed_corpus("chunk-name"), exec_budget=4000)
    chosen = next(m for m in cal.measurements if m.max_tip == cal.chosen)
    assert chosen.passed and chosen.final_occupancy > 0


def test_measure_is_deterministic():
    p = build_benchmark("maze")
    a = measure(p, seed_corpus("maze"), 4, 2000, rng_seed=3)
    b = measure(p, seed_corpus("maze"), 4, 2000, rng_seed=3)
    assert a == b
    assert a.slice_bits <= a.distinct_slices


def test_no_candidate_error_lists_measurements():
    p = build_benchmark("maze")
    # a short budget leaves both campaigns still growing fast
    with pytest.raises(CalibrationError) as e:
        calibrate_max_tip(p, seed_corpus("maze"), exec_budget=1000, candidates=[16, 32])
    assert "max_tip=16" in str(e.value) and "max_tip=32" in str(e.value)


def test_maze_regression_pin():
    cal = calibrate_max_tip(build_benchmark("maze"), seed_corpus("maze"), exec_budget=100_000)
    chosen = next(m for m in cal.measurements if m.max_tip == cal.chosen)
    assert cal.chosen == 8
    assert chosen.growth < 0.30 and chosen.collision_rate < 0.01
