"""Training objectives and their analytic input gradients.

Each loss returns (scalar value, gradient w.r.t. its token input) so the
backward pass can chain them through the encoder stack. Everything runs in
the dtype of its inputs (float32 in training, float64 under the gradient
checker).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateBatchError, EmptyMaskError, NumericsError,
                     ValidationError)
from .synth import NO_REGION

_BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_cont: float = 1.0
    lambda_feat: float = 1.0
    lambda_attn: float = 0.0
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"tau must be > 0, got {self.tau}")
        if min(self.lambda_cont, self.lambda_feat, self.lambda_attn) < 0:
            raise ValidationError("loss weights must be >= 0")


def _unit_rows(x: np.ndarray, eps: float = 1e-30):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.maximum(norms, eps)
    return x / norms, norms


def info_nce_loss(tokens: np.ndarray, ids: np.ndarray, tau: float = 0.1):
    """Multi-positive InfoNCE over cosine similarities.

    For every anchor with at least one positive (same non-NO_REGION id), the
    per-anchor term is -log(sum of positive exp-sims / sum of all non-self
    exp-sims), averaged over those anchors. Anchors without positives (or
    with NO_REGION ids) do not contribute terms but still act as negatives.

    Returns (loss, d_loss/d_tokens).
    """
    tokens = np.asarray(tokens)
    ids = np.asarray(ids)
    n = tokens.shape[0]
    if n < 2:
        raise ValidationError("InfoNCE needs at least two tokens")
    if ids.shape[0] != n:
        raise ValidationError("ids length differs from token count")

    unit, norms = _unit_rows(tokens)
    sims = unit @ unit.T

    valid = ids != NO_REGION
    same = (ids[:, None] == ids[None, :]) & valid[:, None] & valid[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    positives = same & off_diag
    anchors = positives.any(axis=1)
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        raise DegenerateBatchError("no anchor has a positive")

    scaled = sims / tau
    # stabilize rows before exponentiation; constant shifts cancel in the ratio
    shift = np.where(off_diag, scaled, -np.inf).max(axis=1, keepdims=True)
    e = np.exp(scaled - shift)
    e[~off_diag] = 0.0
    den = e.sum(axis=1)
    num = (e * positives).sum(axis=1)

    terms = np.log(den[anchors]) - np.log(num[anchors])
    loss = terms.sum() / n_anchors

    # d loss / d sims for ordered anchor->other pairs
    grad_s = np.zeros_like(sims)
    rows = np.flatnonzero(anchors)
    grad_s[rows] = (e[rows] / den[rows, None]
                    - (e[rows] * positives[rows]) / num[rows, None])
    grad_s /= tau * n_anchors

    # chain through cosine: sims = unit @ unit.T
    g_sym = grad_s + grad_s.T
    d_unit = g_sym @ unit
    d_tokens = (d_unit - unit * (d_unit * unit).sum(axis=1, keepdims=True)) / norms
    return float(loss), d_tokens.astype(tokens.dtype)


def feature_similarity_loss(aligned: np.ndarray, targets: np.ndarray):
    """Mean cosine-embedding distance: mean_i (1 - cos(target_i, aligned_i))."""
    aligned = np.asarray(aligned)
    targets = np.asarray(targets)
    if aligned.shape != targets.shape:
        raise ValidationError(
            f"aligned {aligned.shape} and targets {targets.shape} differ")
    n = aligned.shape[0]
    if n == 0:
        raise ValidationError("empty feature-similarity batch")
    a_norm = np.linalg.norm(aligned, axis=1)
    t_norm = np.linalg.norm(targets, axis=1)
    if (a_norm == 0).any() or (t_norm == 0).any():
        raise NumericsError("zero-norm row in feature similarity inputs")
    cos = (aligned * targets).sum(axis=1) / (a_norm * t_norm)
    loss = float(np.mean(1.0 - cos))
    d_aligned = -(targets / (t_norm * a_norm)[:, None]
                  - aligned * (cos / a_norm ** 2)[:, None]) / n
    return loss, d_aligned.astype(aligned.dtype)


def target_tokens(feature_map, masks, prompt_ids: np.ndarray) -> np.ndarray:
    """Mask-averaged encoder features per prompt.

    The target for a prompt is the mean of the patch features whose patch
    cell's center pixel lies inside the prompt's region mask.
    """
    prompt_ids = np.asarray(prompt_ids)
    if (prompt_ids == NO_REGION).any():
        raise ValidationError("every prompt needs a region id for targets")
    feats = feature_map.features2d()
    means: dict[int, np.ndarray] = {}
    for mid in np.unique(prompt_ids):
        mask = masks[int(mid)]
        members = _patch_centers_in_mask(mask, feature_map.h_patches,
                                         feature_map.w_patches)
        if not members.any():
            raise EmptyMaskError(f"mask {int(mid)} covers no patch centers")
        means[int(mid)] = feats[members].mean(axis=0)
    return np.stack([means[int(mid)] for mid in prompt_ids])


def _patch_centers_in_mask(mask, grid_h: int, grid_w: int) -> np.ndarray:
    grid = mask.to_bool()
    h, w = grid.shape
    ys = (np.arange(grid_h + 1) * h) // grid_h
    xs = (np.arange(grid_w + 1) * w) // grid_w
    cy = (ys[:-1] + ys[1:]) // 2
    cx = (xs[:-1] + xs[1:]) // 2
    return grid[cy[:, None], cx[None, :]].reshape(-1)


def rasterize_attention_targets(masks, prompt_ids: np.ndarray,
                                grid_h: int, grid_w: int) -> np.ndarray:
    """Per-prompt patch-grid distributions: the prompt's mask at patch-center
    resolution, renormalized to sum 1 so it is comparable with attention rows."""
    prompt_ids = np.asarray(prompt_ids)
    rows = np.empty((prompt_ids.shape[0], grid_h * grid_w))
    cache: dict[int, np.ndarray] = {}
    for i, mid in enumerate(prompt_ids):
        mid = int(mid)
        if mid == NO_REGION:
            raise ValidationError("attention supervision needs region ids")
        if mid not in cache:
            members = _patch_centers_in_mask(masks[mid], grid_h, grid_w)
            if not members.any():
                raise EmptyMaskError(f"mask {mid} covers no patch centers")
            cache[mid] = members.astype(np.float64) / members.sum()
        rows[i] = cache[mid]
    return rows


def attention_supervision_loss(attention: np.ndarray, targets: np.ndarray):
    """BCE + soft-Dice between head-averaged attention rows and target rows.

    Both inputs are (n, m) with rows summing to 1: the targets are masks
    renormalized to distributions (see rasterize_attention_targets). Dice uses
    the squared-denominator form, so it is exactly 0 when a row equals its
    target. Returns (loss, d_loss/d_attention).
    """
    attention = np.asarray(attention)
    targets = np.asarray(targets)
    if attention.shape != targets.shape:
        raise ValidationError("attention and target shapes differ")
    if (targets.sum(axis=1) == 0).any():
        raise EmptyMaskError("all-zero attention target row")
    n, m = attention.shape

    a = np.clip(attention, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    bce = -(targets * np.log(a) + (1.0 - targets) * np.log1p(-a)).mean()
    d_bce = -(targets / a - (1.0 - targets) / (1.0 - a)) / (n * m)
    inside = (attention > _BCE_CLAMP) & (attention < 1.0 - _BCE_CLAMP)
    d_bce = np.where(inside, d_bce, 0.0)

    s = (attention * targets).sum(axis=1)
    q = (attention ** 2).sum(axis=1)
    t = (targets ** 2).sum(axis=1)
    dice = float(np.mean(1.0 - 2.0 * s / (q + t)))
    d_dice = (-2.0 * targets / (q + t)[:, None]
              + (4.0 * s / (q + t) ** 2)[:, None] * attention) / n

    loss = float(bce) + dice
    return loss, (d_bce + d_dice).astype(attention.dtype)


def total_loss(parts: dict[str, float], weights: LossWeights) -> float:
    """Weighted combination of the reported loss parts."""
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NumericsError(f"non-finite loss part {name!r}: {value}")
    total = (weights.lambda_cont * parts.get("l_cont", 0.0)
             + weights.lambda_feat * parts.get("l_feat", 0.0))
    if weights.lambda_attn > 0:
        total += weights.lambda_attn * parts.get("l_attn", 0.0)
    return float(total)
