"""Campaign configuration: defaults, key-value files and environment overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

from ..feedback import DEFAULT_MAP_BYTES, DEFAULT_MAX_TIP, FeedbackConfig
from ..fuzzer.campaign import FuzzConfig
from ..pipeline import FeedbackMode, PipelineConfig, PipelineMode
from ..vm.benchmarks import BENCHMARKS, build_benchmark, seed_corpus
from ..vm.engine import DEFAULT_DEPTH_LIMIT, DEFAULT_STEP_BUDGET
from ..vm.program import TargetProgram
from ..vm.text import load_program

ENV_OUT_DIR = "SLICEFUZZ_OUT_DIR"
ENV_SEED = "SLICEFUZZ_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class CampaignConfig:
    target: str = "chunk-name"          # benchmark name or path to a program file
    feedback: FeedbackMode = FeedbackMode.PATH_SLICE
    pipeline: PipelineMode = PipelineMode.PARALLEL
    max_tip: Union[int, str] = DEFAULT_MAX_TIP   # or "auto"
    bitmap_size: int = DEFAULT_MAP_BYTES
    execs: int = 100_000
    wall_time: Optional[float] = None
    rng_seed: int = 0
    out_dir: Optional[str] = None
    seeds: Optional[str] = None         # seed directory; benchmarks have built-in seeds
    trials: int = 1
    calibration_execs: int = 100_000
    stats_every: int = 1000
    step_budget: int = DEFAULT_STEP_BUDGET
    depth_limit: int = DEFAULT_DEPTH_LIMIT
    deterministic: bool = False
    real_clock: bool = False
    stop_on_block: Optional[str] = None  # block label
    stop_on_crash: Optional[str] = None  # trap kind

    def __post_init__(self):
        try:
            self.feedback = FeedbackMode(self.feedback)
        except ValueError:
            raise ConfigError(f"unknown feedback mode {self.feedback!r}; choose from "
                              + ", ".join(m.value for m in FeedbackMode)) from None
        try:
            self.pipeline = PipelineMode(self.pipeline)
        except ValueError:
            raise ConfigError(f"unknown pipeline mode {self.pipeline!r}") from None
        if self.max_tip != "auto":
            if not isinstance(self.max_tip, int) or self.max_tip < 1:
                raise ConfigError("max_tip must be a positive integer or 'auto'")
        for name in ("execs", "trials", "calibration_execs", "stats_every", "step_budget", "depth_limit"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name.replace('_', '-')} must be positive")
        if self.wall_time is not None and self.wall_time <= 0:
            raise ConfigError("wall-time must be positive")
        if self.bitmap_size < 1 or self.bitmap_size & (self.bitmap_size - 1):
            raise ConfigError("bitmap-size must be a power of two")

    # ------------------------------------------------------------ target

    def load_target(self) -> TargetProgram:
        if self.target in BENCHMARKS:
            return build_benchmark(self.target)
        path = Path(self.target)
        if not path.is_file():
            raise ConfigError(f"{self.target!r} is neither a benchmark ({', '.join(BENCHMARKS)}) nor a file")
        return load_program(path.read_text())

    def load_seeds(self) -> List[bytes]:
        if self.seeds is not None:
            seeds = read_corpus(self.seeds)
        elif self.target in BENCHMARKS:
            seeds = seed_corpus(self.target)
        else:
            raise ConfigError("a program file needs a seed directory (--seeds)")
        if not seeds:
            raise ConfigError("seed corpus is empty")
        return seeds

    # ------------------------------------------------------------ derived configs

    def pipeline_config(self, max_tip: Optional[int] = None) -> PipelineConfig:
        tip = max_tip if max_tip is not None else self.max_tip
        if tip == "auto":
            raise ConfigError("max_tip is 'auto'; calibrate before building the pipeline")
        return PipelineConfig(feedback=self.feedback, mode=self.pipeline,
                              slices=FeedbackConfig(max_tip=tip, bitmap_size=self.bitmap_size),
                              step_budget=self.step_budget, depth_limit=self.depth_limit)

    def fuzz_config(self, program: TargetProgram, rng_seed: int, max_tip: Optional[int] = None) -> FuzzConfig:
        block = None
        if self.stop_on_block is not None:
            try:
                block = program.block_id(self.stop_on_block)
            except KeyError:
                raise ConfigError(f"no block labelled {self.stop_on_block!r}") from None
        return FuzzConfig(pipeline=self.pipeline_config(max_tip), exec_budget=self.execs,
                          wall_time=self.wall_time, rng_seed=rng_seed, stats_every=self.stats_every,
                          deterministic=self.deterministic, real_clock=self.real_clock,
                          stop_on_block=block, stop_on_crash=self.stop_on_crash)


_FIELDS = {f.name: f for f in fields(CampaignConfig)}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    if name in ("execs", "trials", "calibration_execs", "stats_every", "step_budget", "depth_limit",
                "bitmap_size", "rng_seed"):
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"{name} expects an integer, got {raw!r}") from None
    if name == "max_tip":
        if raw.strip().lower() == "auto":
            return "auto"
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"max_tip expects an integer or 'auto', got {raw!r}") from None
    if name == "wall_time":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"wall_time expects seconds, got {raw!r}") from None
    if name in ("deterministic", "real_clock"):
        try:
            return _BOOL[raw.strip().lower()]
        except KeyError:
            raise ConfigError(f"{name} expects a boolean, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys are allowed."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path: Union[str, os.PathLike]) -> Dict[str, object]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    return parse_config_text(text)


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, object]:
    env = os.environ if environ is None else environ
    out: Dict[str, object] = {}
    if env.get(ENV_OUT_DIR):
        out["out_dir"] = env[ENV_OUT_DIR]
    if env.get(ENV_SEED):
        out["rng_seed"] = _coerce("rng_seed", env[ENV_SEED])
    return out


def build_config(file_values: Optional[Mapping[str, object]] = None,
                 cli_values: Optional[Mapping[str, object]] = None,
                 environ: Optional[Mapping[str, str]] = None) -> CampaignConfig:
    """Defaults, then the config file, then the environment, then explicit flags."""
    merged: Dict[str, object] = {}
    merged.update(file_values or {})
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    unknown = set(merged) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return CampaignConfig(**merged)


def read_corpus(path: Union[str, os.PathLike]) -> List[bytes]:
    """Inputs of a corpus directory, ordered by file name.

    A campaign output directory is read through its ``queue`` subdirectory.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"corpus directory {root} does not exist")
    if (root / "queue").is_dir():
        root = root / "queue"
    return [p.read_bytes() for p in sorted(root.iterdir()) if p.is_file() and not p.name.startswith(".")]

