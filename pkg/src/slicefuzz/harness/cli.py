"""Command-line entry point: ``slicefuzz {fuzz,dryrun,covdiff,callchains,calibrate}``."""
from __future__ import annotations

import argparse
import statistics
import sys
from typing import List, Optional

from ..pipeline import FeedbackMode, PipelineMode
from .commands import (
    CommandError, cmd_calibrate, cmd_callchains, cmd_coverage_diff, cmd_dryrun, cmd_fuzz,
)
from .config import ENV_OUT_DIR, ENV_SEED, CampaignConfig, ConfigError, build_config, load_config_file


def _max_tip(text: str):
    if text.lower() == "auto":
        return "auto"
    return int(text)


def _common(p: argparse.ArgumentParser, campaign: bool = True) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--target", help="benchmark name or program file")
    p.add_argument("--seeds", help="seed directory (benchmarks have built-in seeds)")
    p.add_argument("--feedback", choices=[m.value for m in FeedbackMode])
    p.add_argument("--pipeline", choices=[m.value for m in PipelineMode])
    p.add_argument("--max-tip", type=_max_tip, help="slice length in TIPs, or 'auto' to calibrate")
    p.add_argument("--bitmap-size", type=int, help="bitmap bytes (power of two)")
    p.add_argument("--step-budget", type=int)
    p.add_argument("--depth-limit", type=int)
    p.add_argument("--seed", dest="rng_seed", type=int, help=f"rng seed (env {ENV_SEED})")
    p.add_argument("--out", dest="out_dir", help=f"output directory (env {ENV_OUT_DIR})")
    if campaign:
        p.add_argument("--execs", type=int, help="execution budget per campaign")
        p.add_argument("--wall-time", type=float, help="wall-clock budget in seconds")
        p.add_argument("--trials", type=int, help="campaigns with consecutive seeds; adds mean/stddev CSV")
        p.add_argument("--stats-every", type=int)
        p.add_argument("--calibration-execs", type=int)
        p.add_argument("--deterministic", action="store_const", const=True,
                       help="run the deterministic stages on each new seed")
        p.add_argument("--real-clock", action="store_const", const=True,
                       help="wall_ms from the real clock instead of the virtual one")
        p.add_argument("--stop-on-block", help="stop once an edge into this block label runs")
        p.add_argument("--stop-on-crash", help="stop at the first crash of this trap kind")


_CONFIG_KEYS = ("target", "seeds", "feedback", "pipeline", "max_tip", "bitmap_size", "step_budget",
                "depth_limit", "rng_seed", "out_dir", "execs", "wall_time", "trials", "stats_every",
                "calibration_execs", "deterministic", "real_clock", "stop_on_block", "stop_on_crash")


def _config(args: argparse.Namespace) -> CampaignConfig:
    file_values = load_config_file(args.config) if args.config else {}
    cli = {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}
    return build_config(file_values, cli)


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slicefuzz", description="Path-slice feedback fuzzing on a toy VM.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuzz", help="run a fuzzing campaign")
    _common(p)

    p = sub.add_parser("dryrun", help="replay a corpus once and report throughput")
    _common(p, campaign=False)
    p.add_argument("--calibration-execs", type=int)
    p.add_argument("corpus", help="corpus directory (a campaign directory uses its queue/)")

    p = sub.add_parser("covdiff", help="compare the edge coverage of two corpora")
    _common(p, campaign=False)
    p.add_argument("a", help="corpus A")
    p.add_argument("b", help="corpus B")

    p = sub.add_parser("callchains", help="CDF of call-chain lengths over a corpus")
    _common(p, campaign=False)
    p.add_argument("corpus")
    p.add_argument("--csv", help="write the CDF here (default: <out>/callchains.csv or stdout)")

    p = sub.add_parser("calibrate", help="choose MAX_TIP for a target")
    _common(p, campaign=False)
    p.add_argument("--calibration-execs", type=int)
    return ap


def _fmt_mean(vals: List[float]) -> str:
    if len(vals) == 1:
        return f"{vals[0]:g}"
    return f"{statistics.fmean(vals):.2f} +- {statistics.stdev(vals):.2f}"


def main(argv: Optional[List[str]] = None) -> int:
    args = parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "fuzz":
            rep = cmd_fuzz(cfg)
            if rep.calibration is not None:
                print(rep.calibration.report())
            print(f"max_tip {rep.max_tip}, feedback {cfg.feedback.value}, {cfg.trials} trial(s)")
            rows = rep.summary_rows()
            for r in rows:
                print(f"trial {r['trial']}: execs {r['exec_index']}, edges {r['ground_truth_edges_covered']}, "
                      f"occupancy {r['bitmap_occupancy']}, queue {r['queue_len']}, "
                      f"crashes {r['crashes']}, hangs {r['hangs']}")
            if len(rows) > 1:
                for key in ("ground_truth_edges_covered", "bitmap_occupancy", "queue_len", "crashes", "hangs"):
                    print(f"{key}: {_fmt_mean([float(r[key]) for r in rows])}")
        elif args.command == "dryrun":
            rep = cmd_dryrun(cfg, args.corpus)
            print(rep.describe())
            for idx, outcome in rep.crashes:
                print(f"input {idx}: {outcome}")
        elif args.command == "covdiff":
            program = cfg.load_target()
            diff = cmd_coverage_diff(args.a, args.b, program, cfg)
            print(diff.describe(program))
        elif args.command == "callchains":
            program = cfg.load_target()
            out_csv = args.csv
            if out_csv is None and cfg.out_dir is not None:
                out_csv = f"{cfg.out_dir}/callchains.csv"
            cdf = cmd_callchains(args.corpus, program, cfg, out_csv)
            if out_csv is None:
                print("length,cumulative_fraction")
                for length, frac in cdf:
                    print(f"{length},{frac:.6f}")
        elif args.command == "calibrate":
            print(cmd_calibrate(cfg).report())
    except (ConfigError, CommandError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
