"""Dependency-aware structured pruning for a toy decoder-only transformer.

Discovers coupled weight groups, scores them from calibration gradients,
excises the least important ones, and recovers quality with merged low-rank
adapters.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .depgraph import DependencyGroup, build_graph, discover_groups, group_param_delta
from .evaluation import perplexity, rank_agreement
from .importance import accumulate_gradients, make_calibration, rank_and_select, score_groups
from .model import ModelConfig, TransformerModel, forward, init_model, next_token_loss, tokenize, train_base
from .pruner import apply_plan, count_stats, validate_consistency
from .recovery import attach_lora, merge_lora, train_lora

__version__ = "0.1.0"
