"""Palletization planning with density and rigidity aware stability, an online-learned action mask and PPO."""
from .baselines import HeuristicMask, HeuristicMaskRule, PlannerKind, heuristic_mask
from .env import (
    DESK_INVENTORY,
    FULL_INVENTORY,
    Action,
    BoxType,
    BufferState,
    EndReason,
    EpisodeConfig,
    OracleMask,
    PalletEnv,
    PassThroughMask,
    StepOutcome,
    desk_episode_config,
    paper_episode_config,
    reset,
    snap,
    step,
)
from .geometry import BoxSpec, GridConfig, PalletState, Placement, place, support_contact
from .harness import ExperimentConfig, MetricsReport, desk_preset, paper_preset, replay, run_experiment
from .masklearn import FeasibilityMaskClassifier, FeasibleDataset, LearnedMask, MaskSample, iou
from .oracle import (
    Cause,
    FeasibilityMap,
    OracleConfig,
    StabilityVerdict,
    annotate_feasibility,
    check_pallet_stable,
    check_placement,
)
from .planner import PalletPlanner
from .policy import ActorCritic, PpoConfig
from .training import MaskLearningConfig, evaluate, training_loop

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
