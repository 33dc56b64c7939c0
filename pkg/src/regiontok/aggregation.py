"""Token aggregation: merge per-prompt tokens into per-object region tokens.

Tokens are linked when the cosine similarity of their raw region tokens
exceeds the threshold mu; groups are the connected components of that graph,
found by breadth-first search. Each group is mean-pooled (summation in
ascending member order) and represented by the member prompt whose token is
closest to the pooled mean. With dense prompting (over 1000 prompts) tiny
groups are boundary noise and are discarded under the "auto" policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataplane import RegionMask, TokenSet
from .errors import UnsupportedPromptError, ValidationError
from .prompting import SuperpixelMap

DENSE_PROMPT_THRESHOLD = 1000
AUTO_MIN_GROUP = 3


@dataclass
class AggregationResult:
    groups: list[list[int]]
    pooled_ren: np.ndarray          # (n_groups, d_model) float32
    pooled_aligned: np.ndarray      # (n_groups, D) float32
    representatives: np.ndarray     # (n_groups, 2) float32 prompts
    representative_indices: np.ndarray
    discarded: list[int] = field(default_factory=list)
    mu: float = 0.975
    min_group: int = 1

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return x / norms


def cosine_matrix(tokens: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, clipped into [-1, 1]."""
    unit = _unit_rows(tokens.astype(np.float64))
    return np.clip(unit @ unit.T, -1.0, 1.0)


def connected_components(adjacency: np.ndarray) -> list[list[int]]:
    """BFS components of a boolean adjacency matrix, ordered and sorted by
    smallest member index."""
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    groups: list[list[int]] = []
    for start in range(n):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        members = []
        head = 0
        while head < len(queue):
            node = queue[head]
            head += 1
            members.append(node)
            neighbors = np.flatnonzero(adjacency[node] & ~seen)
            seen[neighbors] = True
            queue.extend(int(v) for v in neighbors)
        groups.append(sorted(members))
    return groups


def _ascending_mean(rows: np.ndarray) -> np.ndarray:
    # accumulate guarantees left-to-right (ascending index) summation order
    total = np.add.accumulate(rows.astype(np.float64), axis=0)[-1]
    return total / rows.shape[0]


def aggregate(tokens: TokenSet, mu: float = 0.975,
              min_group: int | str = "auto") -> AggregationResult:
    """Group tokens via the mu-thresholded cosine graph.

    min_group "auto" discards groups smaller than 3 only when the prompt set
    is dense (> 1000 prompts); an integer forces that threshold everywhere.
    """
    n = len(tokens)
    if n < 1:
        raise ValidationError("cannot aggregate an empty token set")
    if min_group == "auto":
        effective = AUTO_MIN_GROUP if n > DENSE_PROMPT_THRESHOLD else 1
    else:
        effective = int(min_group)
        if effective < 1:
            raise ValidationError("min_group must be >= 1")

    sims = cosine_matrix(tokens.ren)
    adjacency = sims > mu
    np.fill_diagonal(adjacency, False)
    components = connected_components(adjacency)

    groups = [g for g in components if len(g) >= effective]
    discarded = sorted(i for g in components if len(g) < effective for i in g)

    pooled_ren = np.zeros((len(groups), tokens.d_model), dtype=np.float32)
    pooled_aligned = np.zeros((len(groups), tokens.encoder_dim), dtype=np.float32)
    rep_idx = np.zeros(len(groups), dtype=np.int64)
    for gi, members in enumerate(groups):
        idx = np.array(members)
        pooled_ren[gi] = _ascending_mean(tokens.ren[idx])
        pooled_aligned[gi] = _ascending_mean(tokens.aligned[idx])
        member_unit = _unit_rows(tokens.ren[idx].astype(np.float64))
        pooled_unit = _unit_rows(pooled_ren[gi][None].astype(np.float64))[0]
        rep_idx[gi] = idx[int(np.argmax(member_unit @ pooled_unit))]
    reps = tokens.prompts[rep_idx] if len(groups) else np.zeros((0, 2), np.float32)
    return AggregationResult(groups=groups, pooled_ren=pooled_ren,
                             pooled_aligned=pooled_aligned,
                             representatives=reps,
                             representative_indices=rep_idx,
                             discarded=discarded, mu=mu, min_group=effective)


def token_count_curve(tokens: TokenSet, mu_grid) -> list[tuple[float, int]]:
    """Raw component count per threshold (no small-group discard), so the
    curve is non-decreasing in mu."""
    mu_grid = list(mu_grid)
    if not mu_grid:
        raise ValidationError("empty mu grid")
    sims = cosine_matrix(tokens.ren)
    out = []
    for mu in mu_grid:
        adjacency = sims > mu
        np.fill_diagonal(adjacency, False)
        out.append((float(mu), len(connected_components(adjacency))))
    return out


def masks_from_groups(superpixels: SuperpixelMap, groups: list[list[int]],
                      prompt_to_superpixel: np.ndarray | None = None
                      ) -> list[RegionMask]:
    """Union the superpixels behind each group's prompts into a region mask.

    Only defined for SLIC-derived prompts (prompt i <-> superpixel i unless an
    explicit mapping is given); grid prompts have no superpixels to union.
    """
    if superpixels is None:
        raise UnsupportedPromptError(
            "region masks require SLIC-derived prompts with their superpixel map")
    if prompt_to_superpixel is None:
        mapping = np.arange(superpixels.count, dtype=np.int64)
    else:
        mapping = np.asarray(prompt_to_superpixel, dtype=np.int64)
    masks = []
    for members in groups:
        sp_ids = mapping[np.array(members, dtype=np.int64)]
        if (sp_ids < 0).any() or (sp_ids >= superpixels.count).any():
            raise UnsupportedPromptError(
                "prompt without a superpixel: masks need the SLIC prompt path")
        covered = np.isin(superpixels.labels, sp_ids)
        masks.append(RegionMask.from_bool(covered))
    return masks


def write_aggregation_report(path, result: AggregationResult,
                             n_prompts: int,
                             mask_refs: list[str] | None = None) -> None:
    doc = {
        "mu": result.mu,
        "n_prompts": n_prompts,
        "n_groups": result.n_groups,
        "n_discarded": len(result.discarded),
        "groups": [
            {
                "members": list(map(int, members)),
                "representative": {"x": float(result.representatives[gi, 0]),
                                   "y": float(result.representatives[gi, 1])},
                "mask_ref": mask_refs[gi] if mask_refs else None,
            }
            for gi, members in enumerate(result.groups)
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_group_members(path) -> list[list[int]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [[int(i) for i in entry["members"]] for entry in doc["groups"]]
