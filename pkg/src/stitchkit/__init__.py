"""Stitch small and large frozen anchors into a palette of models and adapt them all at once."""
from .anchors import Anchor, AnchorConfig, build_family, evaluate_anchor, pretrain_anchor
from .config import ExperimentConfig
from .controller import (AdaptConfig, ConfigError, ImportanceTracker, make_state, prepare,
                         run_adapt_then_stitch, run_adaptation, sample_stitch, snip_score, train_step)
from .data import Batch, MarkovTask, source_and_target
from .deploy import EvalRow, Deployment, evaluate_palette, pareto_frontier, select_deployment
from .estimator import StitchableAdapter
from .pst import PSTOverlay, init_pst, pairwise_gradient_angles, trainable_set
from .stitching import (Palette, RankDeficiencyWarning, StitchDefinition, build_palette, cost_of,
                        enumerate_stitches, ls_init, stitch_forward)

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "Anchor", "AnchorConfig", "Batch", "ConfigError", "Deployment", "EvalRow",
    "ExperimentConfig", "ImportanceTracker", "MarkovTask", "PSTOverlay", "Palette", "RankDeficiencyWarning",
    "StitchDefinition", "StitchableAdapter", "build_family", "build_palette", "cost_of", "enumerate_stitches",
    "evaluate_anchor", "evaluate_palette", "init_pst", "ls_init", "make_state", "pairwise_gradient_angles",
    "pareto_frontier", "prepare", "pretrain_anchor", "run_adapt_then_stitch", "run_adaptation",
    "sample_stitch", "select_deployment", "snip_score", "source_and_target", "stitch_forward",
    "train_step", "trainable_set",
]
