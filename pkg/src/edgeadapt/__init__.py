"""Discrete-event simulator of hierarchical mobile/cloud model adaptation."""
from .config import VARIANTS, ScenarioConfig, load_config, policy_for
from .harness import check_scheduler, compute_metrics, run_matrix, run_scenario
from .taxonomy import SemanticSchema, TaxonomyTree, path_distance, rank_candidates
from .world import World, default_world_config

__all__ = [
    "VARIANTS", "ScenarioConfig", "load_config", "policy_for",
    "check_scheduler", "compute_metrics", "run_matrix", "run_scenario",
    "SemanticSchema", "TaxonomyTree", "path_distance", "rank_candidates",
    "World", "default_world_config",
]
__version__ = "0.1.0"
