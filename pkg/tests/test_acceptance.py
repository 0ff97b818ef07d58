"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line through ``criterion_report``; the lines are
collected into an "acceptance criteria" section at the end of the pytest run.
Campaign criteria use the sequential pipeline: the parallel one produces
byte-identical bitmaps (criterion 4) and this host has a single core.
"""
import random
import statistics
import time

import numpy as np

from slicefuzz.calibration import calibrate_max_tip
from slicefuzz.codec import Packet, decode_stream, encode_stream
from slicefuzz.feedback import (
    Bitmap, FeedbackConfig, MapMode, encode_index, reconstruct_edges,
)
from slicefuzz.fuzzer import mutate as mut
from slicefuzz.fuzzer.campaign import Campaign, FuzzConfig
from slicefuzz.harness.commands import dry_run
from slicefuzz.pipeline import FeedbackMode, PipelineConfig, PipelineMode, run_traced
from slicefuzz.vm.benchmarks import build_benchmark, seed_corpus
from slicefuzz.vm.engine import execute
from slicefuzz.vm.randprog import random_input, random_program

TRIALS = 10
BUDGET = 500_000


def sequential(feedback, **kw):
    return PipelineConfig(feedback=feedback, mode=PipelineMode.SEQUENTIAL, **kw)


def campaign_trials(bench, feedback, **stop):
    """Exec index at which each of ``TRIALS`` rng seeds hit the stop condition (None = never)."""
    prog = build_benchmark(bench)
    if "stop_on_block" in stop:
        stop["stop_on_block"] = prog.block_id(stop["stop_on_block"])
    found = []
    for seed in range(TRIALS):
        cfg = FuzzConfig(sequential(feedback), exec_budget=BUDGET, rng_seed=seed, stats_every=BUDGET, **stop)
        st = Campaign(prog, seed_corpus(bench), cfg).run().state
        found.append(st.target_reached_at if "stop_on_block" in stop else st.crash_found_at)
    return found


def summarize(found):
    hits = [f for f in found if f is not None]
    return len(hits), (f"median {int(statistics.median(hits))} execs" if hits else "none")


def test_c01_order_sensitivity(criterion_report):
    t0 = time.perf_counter()
    ps = campaign_trials("chunk-name", FeedbackMode.PATH_SLICE, stop_on_block="handlerX")
    de = campaign_trials("chunk-name", FeedbackMode.DIRECT_EDGE, stop_on_block="handlerX")
    minutes = (time.perf_counter() - t0) / 60
    (n_ps, m_ps), (n_de, m_de) = summarize(ps), summarize(de)
    ok = n_ps >= 9 and n_de <= 1
    criterion_report(1, ok, f"chunk-name handlerX reached: path-slice {n_ps}/10 ({m_ps}), "
                            f"direct-edge {n_de}/10 ({m_de}); {minutes:.1f} min (target < 10)")
    assert ok, (ps, de)


def test_c02_deep_bug(criterion_report):
    ps = campaign_trials("deep-recursion", FeedbackMode.PATH_SLICE, stop_on_crash="stack-exhaustion")
    de = campaign_trials("deep-recursion", FeedbackMode.DIRECT_EDGE, stop_on_crash="stack-exhaustion")
    (n_ps, m_ps), (n_de, m_de) = summarize(ps), summarize(de)
    ok = n_ps >= 9 and n_de <= 1
    criterion_report(2, ok, f"deep-recursion stack exhaustion: path-slice {n_ps}/10 ({m_ps}), "
                            f"direct-edge {n_de}/10 ({m_de})")
    assert ok, (ps, de)


def dry_corpus(bench, size=1000):
    """Queue of a short campaign, topped up with havoc mutants of it."""
    prog = build_benchmark(bench)
    cfg = FuzzConfig(sequential(FeedbackMode.PATH_SLICE), exec_budget=20_000, rng_seed=1)
    queue = [s.data for s in Campaign(prog, seed_corpus(bench), cfg).run().state.queue][:size]
    rng = random.Random(0)
    return prog, queue + [mut.havoc(queue[i % len(queue)], rng) for i in range(size - len(queue))]


def test_c03_feedback_speedup(criterion_report):
    ratios = {}
    for bench in ("chunk-name", "deep-recursion", "maze"):
        prog, corpus = dry_corpus(bench)
        best = {}
        for _ in range(3):  # interleaved repeats, best of three per mode
            for fb in (FeedbackMode.PATH_SLICE, FeedbackMode.EDGE_PT):
                rate = dry_run(prog, corpus, sequential(fb)).execs_per_sec
                best[fb] = max(best.get(fb, 0.0), rate)
        ratios[bench] = best[FeedbackMode.PATH_SLICE] / best[FeedbackMode.EDGE_PT]
    ok = min(ratios.values()) >= 5.0
    detail = ", ".join(f"{b} {r:.2f}x" for b, r in ratios.items())
    criterion_report(3, ok, f"dry-run path-slice / edge-pt execs/sec over 1,000 inputs: {detail} (need >= 5x each)")
    assert ok, ratios


def test_c04_pipeline_determinism(criterion_report):
    rng = random.Random(4)
    mismatches = runs = 0
    for _ in range(200):
        prog = random_program(random.Random(rng.getrandbits(32)))
        data = random_input(random.Random(rng.getrandbits(32)))
        for fb in FeedbackMode:
            base = PipelineConfig(feedback=fb, slices=FeedbackConfig(max_tip=rng.randint(1, 8)), step_budget=5000)
            seq = run_traced(prog, data, base, PipelineMode.SEQUENTIAL)[1].tobytes()
            for _ in range(5):
                sched = [rng.randint(1, 512) for _ in range(rng.randint(1, 6))]
                cfg = PipelineConfig(feedback=fb, slices=base.slices, step_budget=5000, flush_schedule=sched)
                runs += 1
                mismatches += run_traced(prog, data, cfg, PipelineMode.PARALLEL)[1].tobytes() != seq
    ok = mismatches == 0
    criterion_report(4, ok, f"{runs} parallel runs (200 pairs x 5 schedules x 3 modes): {mismatches} bitmap mismatches")
    assert ok


def test_c05_reconstruction_oracle(criterion_report):
    rng = random.Random(5)
    wrong = 0
    for _ in range(1000):
        prog = random_program(random.Random(rng.getrandbits(32)))
        data = random_input(random.Random(rng.getrandbits(32)))
        sink, truth = [], []
        execute(prog, data, sink, truth, step_budget=5000)
        wrong += reconstruct_edges(prog, decode_stream(bytes(sink))[0], step_budget=5000) != truth
    ok = wrong == 0
    criterion_report(5, ok, f"1000 random (program, input) pairs: {wrong} reconstructions differ from ground truth")
    assert ok


def random_packets(rng):
    out = []
    for _ in range(rng.randint(0, 40)):
        kind = rng.randrange(4)
        if kind == 0:
            out.append(Packet.tnt(*(rng.random() < 0.5 for _ in range(rng.randint(1, 6)))))
        else:
            addr = rng.getrandbits(64) if rng.random() < 0.5 else 0x400000 + 16 * rng.randrange(64)
            out.append((Packet.tip, Packet.pge, Packet.pgd)[kind - 1](addr))
    return out


def test_c06_codec_roundtrip(criterion_report):
    rng = random.Random(6)
    failures = prefixes = 0
    for i in range(10_000):
        pkts = random_packets(rng)
        data = encode_stream(pkts)
        failures += decode_stream(data) != (pkts, len(data))
        if i < 100:
            bounds = np.cumsum([0] + [len(encode_stream([p])) for p in pkts])
            for cut in range(len(data) + 1):
                whole = int(np.searchsorted(bounds, cut, side="right")) - 1
                prefixes += 1
                failures += decode_stream(data[:cut]) != (pkts[:whole], int(bounds[whole]))
    ok = failures == 0
    criterion_report(6, ok, f"10000 packet lists plus {prefixes} split-point prefixes: {failures} failures")
    assert ok


def test_c07_encoding_distribution(criterion_report):
    rng = np.random.default_rng(7)
    hashes = rng.integers(0, 2**64, size=1_000_000, dtype=np.uint64, endpoint=False)
    slots = np.fromiter((encode_index(int(h), 1 << 19) for h in hashes), dtype=np.int64, count=len(hashes))
    counts = np.bincount(slots >> 11, minlength=256)
    ratio = counts.max() / counts.mean()
    ok = len(counts) == 256 and ratio <= 1.2
    criterion_report(7, ok, f"10^6 hashes into 2^19 slots, 256 buckets: max/mean = {ratio:.4f} (need <= 1.2)")
    assert ok


def test_c08_calibrated_growth(criterion_report):
    prog = build_benchmark("maze")
    cal = calibrate_max_tip(prog, seed_corpus("maze"), exec_budget=100_000)
    cfg = FuzzConfig(sequential(FeedbackMode.PATH_SLICE, slices=FeedbackConfig(max_tip=cal.chosen)),
                     exec_budget=1_000_000, stats_every=500_000, rng_seed=0)
    rows = Campaign(prog, seed_corpus("maze"), cfg).run().rows
    half, end = rows[0]["bitmap_occupancy"], rows[-1]["bitmap_occupancy"]
    growth = (end - half) / half
    ok = growth < 0.30
    criterion_report(8, ok, f"maze, calibrated max_tip={cal.chosen}: occupancy {half} at 500k, {end} at 1M, "
                            f"second-half growth {growth:.1%} (need < 30%)")
    assert ok


def test_c09_bit_granularity(criterion_report):
    size = 1 << 16
    bit, hit = Bitmap(size, MapMode.BIT), Bitmap(size, MapMode.HITCOUNT)
    # bytes needed per recorded slot, at an equal byte budget
    ratio = (bit.bits_per_slot / 8) / (hit.bits_per_slot / 8)
    ok = bit.bits_per_slot == 1 and hit.bits_per_slot == 8 and bit.slots == 8 * hit.slots and ratio <= 1 / 8
    prog = build_benchmark("chunk-name")
    for fb, mode in ((FeedbackMode.PATH_SLICE, MapMode.BIT), (FeedbackMode.DIRECT_EDGE, MapMode.HITCOUNT)):
        local = run_traced(prog, b"IDAT", sequential(fb))[1]
        ok = ok and local.mode is mode and local.data.nbytes == size
    criterion_report(9, ok, f"{bit.bits_per_slot} bit vs {hit.bits_per_slot} bits per slot in {size} bytes: "
                            f"{bit.slots} vs {hit.slots} slots, byte ratio {ratio}")
    assert ok


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_reproducibility(criterion_report, tmp_path):
    prog = build_benchmark("chunk-name")
    snaps = []
    for name in ("a", "b"):
        cfg = FuzzConfig(sequential(FeedbackMode.PATH_SLICE), exec_budget=30_000, stats_every=1000, rng_seed=10)
        Campaign(prog, seed_corpus("chunk-name"), cfg, out_dir=tmp_path / name).run()
        snaps.append(snapshot(tmp_path / name))
    ok = snaps[0] == snaps[1] and "stats.csv" in snaps[0] and any(k.startswith("queue/") for k in snaps[0])
    criterion_report(10, ok, f"two identical campaigns: {len(snaps[0])} files, byte-identical = {snaps[0] == snaps[1]}")
    assert ok
