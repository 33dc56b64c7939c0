"""Region tokens in a target encoder's space via masked attention pooling.

A pooling head is a single attention layer with a dedicated query vector (the
target encoder's CLS/aggregation state). Restricting its attention to the
patches of a region mask yields a region token in the target feature space,
without retraining anything: the query is duplicated once per region and
non-member patches receive -inf logits. The query attends to patches only
(no self-attention term).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import AggregationResult, masks_from_groups
from .dataplane import PatchFeatureMap, RegionMask, TokenSet
from .errors import EmptyRegionError, ValidationError
from .prompting import SuperpixelMap


@dataclass
class PoolingHead:
    query: np.ndarray   # (D,) pre-attention query state
    w_q: np.ndarray     # (D, D)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    n_heads: int = 8

    def __post_init__(self):
        d = self.query.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            mat = getattr(self, name)
            if mat.shape != (d, d):
                raise ValidationError(f"{name} must be ({d}, {d}), got {mat.shape}")
        if self.n_heads < 1 or d % self.n_heads != 0:
            raise ValidationError(
                f"head dim {d} not divisible by n_heads {self.n_heads}")
        arrays = (self.query, self.w_q, self.w_k, self.w_v, self.w_o)
        if not all(np.isfinite(a).all() for a in arrays):
            raise ValidationError("pooling head contains non-finite values")

    @property
    def dim(self) -> int:
        return self.query.shape[0]


def random_pooling_head(seed: int, dim: int, n_heads: int = 8) -> PoolingHead:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    mats = [rng.normal(0.0, scale, size=(dim, dim)).astype(np.float32)
            for _ in range(4)]
    return PoolingHead(query=rng.normal(0.0, 1.0, size=dim).astype(np.float32),
                       w_q=mats[0], w_k=mats[1], w_v=mats[2], w_o=mats[3],
                       n_heads=n_heads)


def patch_membership(mask: RegionMask, grid_h: int, grid_w: int) -> np.ndarray:
    """Flat boolean membership over a (grid_h, grid_w) patch grid.

    A patch is a member when at least one mask pixel falls in its cell.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValidationError("patch grid must be >= 1 in both dims")
    grid = mask.to_bool()
    ys, xs = np.nonzero(grid)
    if ys.size == 0:
        raise EmptyRegionError("mask covers no pixels")
    pr = (ys * grid_h) // mask.height
    pc = (xs * grid_w) // mask.width
    members = np.zeros(grid_h * grid_w, dtype=bool)
    members[pr * grid_w + pc] = True
    return members


def masked_attention_pool_batch(features: np.ndarray, head: PoolingHead,
                                members: np.ndarray) -> np.ndarray:
    """Pool features into one token per member row.

    features: (m, D); members: (R, m) boolean. The duplicated query attends
    only to member patches; a full-member row is bit-identical to unmasked
    pooling. Returns (R, D).
    """
    members = np.atleast_2d(np.asarray(members, dtype=bool))
    m, d = features.shape
    if members.shape[1] != m:
        raise ValidationError(f"membership width {members.shape[1]} != patches {m}")
    if not members.any(axis=1).all():
        raise EmptyRegionError("a region has no member patches")
    n_heads = head.n_heads
    d_head = d // n_heads
    q = (head.w_q @ head.query).reshape(n_heads, d_head)
    k = (features @ head.w_k.T).reshape(m, n_heads, d_head)
    v = (features @ head.w_v.T).reshape(m, n_heads, d_head)
    scale = 1.0 / np.sqrt(d_head)
    logits = np.einsum("hd,mhd->hm", q, k) * scale          # (H, m)
    out = np.empty((members.shape[0], d), dtype=features.dtype)
    for r in range(members.shape[0]):
        row = np.where(members[r][None, :], logits, -np.inf)
        row = row - row.max(axis=1, keepdims=True)
        e = np.exp(row)
        attn = e / e.sum(axis=1, keepdims=True)             # (H, m)
        ctx = np.einsum("hm,mhd->hd", attn, v).reshape(d)
        out[r] = head.w_o @ ctx
    return out


def masked_attention_pool(features: np.ndarray, head: PoolingHead,
                          members: np.ndarray) -> np.ndarray:
    """Single-region pooling; members is a flat (m,) boolean array."""
    return masked_attention_pool_batch(features, head, members[None, :])[0]


def extend(target_map: PatchFeatureMap, head: PoolingHead,
           superpixels: SuperpixelMap, aggregation: AggregationResult,
           prompt_to_superpixel: np.ndarray | None = None) -> tuple[TokenSet, list[RegionMask]]:
    """One target-space token per aggregated group.

    Group masks come from the union of member superpixels; membership is
    rasterized onto the target patch grid and all groups are pooled in one
    batched masked-attention evaluation.
    """
    if head.dim != target_map.dim:
        raise ValidationError(
            f"pooling head dim {head.dim} != target feature dim {target_map.dim}")
    masks = masks_from_groups(superpixels, aggregation.groups, prompt_to_superpixel)
    members = np.stack([
        patch_membership(mask, target_map.h_patches, target_map.w_patches)
        for mask in masks
    ])
    feats = target_map.features2d()
    tokens = masked_attention_pool_batch(feats, head, members).astype(np.float32)
    token_set = TokenSet(prompts=aggregation.representatives, ren=tokens,
                         aligned=tokens.copy(), source_id="extend")
    return token_set, masks
