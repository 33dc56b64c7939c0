"""Core data types: patch feature maps, point prompts, RLE masks, token sets.

Prompts travel through the engine as float32 arrays of shape (n, 2) with
columns (x, y) in normalized [0, 1) image coordinates; the PointPrompt
dataclass is the scalar view used at API edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PointPrompt:
    """A 2D query location in normalized [0, 1) coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x < 1.0 and 0.0 <= self.y < 1.0):
            raise ValidationError(f"prompt ({self.x}, {self.y}) outside [0, 1)^2")


def validate_prompts(prompts: np.ndarray) -> np.ndarray:
    """Check an (n, 2) prompt array and return it as float32."""
    arr = np.asarray(prompts, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"prompt array must be (n, 2), got {arr.shape}")
    if arr.size and (not np.isfinite(arr).all() or (arr < 0).any() or (arr >= 1).any()):
        raise ValidationError("prompt coordinates must be finite and in [0, 1)")
    return arr


def prompts_to_array(prompts) -> np.ndarray:
    """Accept a list of PointPrompt or an (n, 2) array; return float32 array."""
    if isinstance(prompts, np.ndarray):
        return validate_prompts(prompts)
    if len(prompts) and isinstance(prompts[0], PointPrompt):
        return validate_prompts(np.array([[p.x, p.y] for p in prompts], dtype=np.float32))
    return validate_prompts(np.asarray(prompts, dtype=np.float32).reshape(-1, 2))


@dataclass
class PatchFeatureMap:
    """A grid of per-patch features from a frozen encoder plus image geometry.

    data has shape (h_patches, w_patches, dim) in float32; flattened row-major
    it is the payload of the RFT binary format.
    """

    h_patches: int
    w_patches: int
    dim: int
    image_h: int
    image_w: int
    patch_size: int
    data: np.ndarray

    def __post_init__(self):
        dims = (self.h_patches, self.w_patches, self.dim, self.image_h,
                self.image_w, self.patch_size)
        if any(int(d) < 1 for d in dims):
            raise ValidationError(f"all geometry fields must be >= 1, got {dims}")
        if self.image_h < self.h_patches or self.image_w < self.w_patches:
            raise ValidationError("image extent smaller than patch grid")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        want = (self.h_patches, self.w_patches, self.dim)
        if self.data.size != self.h_patches * self.w_patches * self.dim:
            raise ValidationError(
                f"data length {self.data.size} != {self.h_patches}*{self.w_patches}*{self.dim}")
        self.data = self.data.reshape(want)
        if not np.isfinite(self.data).all():
            raise ValidationError("feature map contains non-finite values")

    @property
    def n_patches(self) -> int:
        return self.h_patches * self.w_patches

    def features2d(self) -> np.ndarray:
        """Row-major (n_patches, dim) view of the feature grid."""
        return self.data.reshape(self.n_patches, self.dim)


@dataclass
class RegionMask:
    """Boolean pixel coverage stored as run-length counts.

    runs alternate uncovered/covered pixel counts in row-major scan order,
    starting with the uncovered count (which may be zero).
    """

    width: int
    height: int
    runs: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("mask extent must be >= 1")
        runs = [int(r) for r in self.runs]
        if any(r < 0 for r in runs) or any(r == 0 for r in runs[1:]):
            raise ValidationError("runs must be positive after the leading zero-run")
        if sum(runs) != self.width * self.height:
            raise ValidationError(
                f"runs sum {sum(runs)} != {self.width}*{self.height}")
        self.runs = runs

    @classmethod
    def from_bool(cls, grid: np.ndarray) -> "RegionMask":
        grid = np.asarray(grid, dtype=bool)
        if grid.ndim != 2:
            raise ValidationError("mask grid must be 2D")
        flat = grid.reshape(-1)
        # run boundaries: indices where the value changes
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat.size and flat[0]:
            runs = [0] + runs
        return cls(width=grid.shape[1], height=grid.shape[0], runs=runs)

    def to_bool(self) -> np.ndarray:
        flat = np.zeros(self.width * self.height, dtype=bool)
        pos = 0
        covered = False
        for run in self.runs:
            if covered:
                flat[pos:pos + run] = True
            pos += run
            covered = not covered
        return flat.reshape(self.height, self.width)

    @property
    def area(self) -> int:
        return sum(self.runs[1::2])


@dataclass
class TokenSet:
    """Per-prompt region tokens: raw tokens plus their linear alignment.

    prompts: (n, 2) float32; ren: (n, d_model) float32; aligned: (n, D) float32.
    """

    prompts: np.ndarray
    ren: np.ndarray
    aligned: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.prompts = validate_prompts(self.prompts)
        self.ren = np.ascontiguousarray(self.ren, dtype=np.float32)
        self.aligned = np.ascontiguousarray(self.aligned, dtype=np.float32)
        n = self.prompts.shape[0]
        if self.ren.ndim != 2 or self.aligned.ndim != 2:
            raise ValidationError("token arrays must be 2D")
        if self.ren.shape[0] != n or self.aligned.shape[0] != n:
            raise ValidationError("prompts/ren/aligned leading lengths differ")
        if n and not (np.isfinite(self.ren).all() and np.isfinite(self.aligned).all()):
            raise ValidationError("token set contains non-finite values")

    def __len__(self) -> int:
        return self.prompts.shape[0]

    @property
    def d_model(self) -> int:
        return self.ren.shape[1]

    @property
    def encoder_dim(self) -> int:
        return self.aligned.shape[1]
