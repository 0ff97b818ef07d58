"""Experiment commands and the command-line interface."""
from .commands import (
    CommandError, CoverageDiff, DryRunReport, FuzzReport, call_chain_cdf, cmd_calibrate,
    cmd_callchains, cmd_coverage_diff, cmd_dryrun, cmd_fuzz, dry_run, replay_edges,
)
from .config import CampaignConfig, ConfigError, build_config, load_config_file, parse_config_text, read_corpus

__all__ = ["CampaignConfig", "CommandError", "ConfigError", "CoverageDiff", "DryRunReport", "FuzzReport",
           "build_config", "call_chain_cdf", "cmd_calibrate", "cmd_callchains", "cmd_coverage_diff",
           "cmd_dryrun", "cmd_fuzz", "dry_run", "load_config_file", "parse_config_text", "read_corpus",
           "replay_edges"]
