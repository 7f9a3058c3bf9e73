"""Enrichment-aware recommendation: behavioral model, greedy policy, estimation and simulation."""

__version__ = "0.1.0"

from .core import (OUTSIDE, AffineClampRating, IdentityRating, InteractionLog, InteractionRecord,
                   OptionKind, OptionProfile, UserProfile, World, choice_score, conditional_enrichment,
                   enrichment, feedback_score, select_consumption, step_round, temptation)
from .estimation import Dataset, EstimatedModel, TrainConfig, fit
from .policies import OutsideBelief, PolicyKind, baseline_recommend, greedy_recommend
from .simharness import (ExperimentConfig, InfoLevel, MetricsReport, brute_force_optimal,
                         greedy_trajectory_value, replicate)
from .synthgen import Scenario, ScenarioConfig, make_world
