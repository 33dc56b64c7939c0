"""regiontok: point-prompted region tokenization for patch feature maps."""

from .aggregation import AggregationResult, aggregate, masks_from_groups, token_count_curve
from .dataplane import PatchFeatureMap, PointPrompt, RegionMask, TokenSet
from .extension import PoolingHead, extend, masked_attention_pool, patch_membership
from .losses import LossWeights, feature_similarity_loss, info_nce_loss, target_tokens
from .model import RenConfig, RenParams, align, forward, init_params, sinusoidal_embed
from .prompting import SuperpixelMap, grid_prompts, slic_prompts, slic_segment
from .synth import SceneConfig, SyntheticScene, assign_region_ids, generate_scene, render_scene
from .training import DataConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AggregationResult", "aggregate", "masks_from_groups", "token_count_curve",
    "PatchFeatureMap", "PointPrompt", "RegionMask", "TokenSet",
    "PoolingHead", "extend", "masked_attention_pool", "patch_membership",
    "LossWeights", "feature_similarity_loss", "info_nce_loss", "target_tokens",
    "RenConfig", "RenParams", "align", "forward", "init_params", "sinusoidal_embed",
    "SuperpixelMap", "grid_prompts", "slic_prompts", "slic_segment",
    "SceneConfig", "SyntheticScene", "assign_region_ids", "generate_scene",
    "render_scene", "DataConfig", "TrainConfig", "train",
    "__version__",
]
