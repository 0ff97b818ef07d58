"""AFL-style fuzzing loop over traced executions."""
from .campaign import (
    Campaign, CampaignError, CampaignResult, CampaignState, FuzzConfig, Seed, STATS_COLUMNS,
    STATS_SCHEMA, fuzz_one, schedule_next,
)
from . import mutate

__all__ = ["Campaign", "CampaignError", "CampaignResult", "CampaignState", "FuzzConfig", "Seed",
           "STATS_COLUMNS", "STATS_SCHEMA", "fuzz_one", "mutate", "schedule_next"]
