"""Point prompt generation: regular grids and SLIC superpixel centers.

SLIC is implemented here directly: CIELAB + position k-means with windowed
assignment, seeded on a gradient-perturbed grid, followed by a connectivity
pass that merges orphan fragments into the largest adjacent superpixel. The
distance between a pixel p and a cluster c is

    d(p, c) = ||lab_p - lab_c||_2 + (compactness / grid_interval) * ||xy_p - xy_c||_2

and ties are broken toward the lowest cluster index, which makes the whole
segmentation deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataplane import RegionMask
from .errors import ConfigError, FormatError, ValidationError


def grid_prompts(g: int) -> np.ndarray:
    """A g x g grid of prompts at cell centers, row-major (x varies fastest)."""
    if g < 1:
        raise ValidationError(f"grid size must be >= 1, got {g}")
    centers = (np.arange(g, dtype=np.float32) + 0.5) / np.float32(g)
    gx, gy = np.meshgrid(centers, centers)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


# ---------------------------------------------------------------------------
# color space

def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] to CIELAB (D65 white point)."""
    srgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    lin = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    m = np.array([[0.4124564, 0.3575761, 0.1804375],
                  [0.2126729, 0.7151522, 0.0721750],
                  [0.0193339, 0.1191920, 0.9503041]])
    xyz = lin @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


# ---------------------------------------------------------------------------
# superpixels

@dataclass
class SuperpixelMap:
    width: int
    height: int
    labels: np.ndarray      # (H, W) int32 in [0, count)
    centers: np.ndarray     # (count, 2) normalized (x, y) centroids
    count: int


def _seed_grid(height: int, width: int, s: int) -> np.ndarray:
    interval = np.sqrt(height * width / s)
    nx = max(1, round(width / interval))
    ny = max(1, round(height / interval))
    xs = (np.arange(nx) + 0.5) * width / nx
    ys = (np.arange(ny) + 0.5) * height / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _perturb_seeds(seeds: np.ndarray, lab: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient pixel in its 3x3 neighborhood."""
    h, w = lab.shape[:2]
    pad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = pad[1:-1, 2:] - pad[1:-1, :-2]
    gy = pad[2:, 1:-1] - pad[:-2, 1:-1]
    grad = (gx ** 2).sum(axis=2) + (gy ** 2).sum(axis=2)
    out = np.empty((seeds.shape[0], 2), dtype=np.int64)
    for i, (sx, sy) in enumerate(seeds):
        px = min(w - 1, max(0, int(sx)))
        py = min(h - 1, max(0, int(sy)))
        best = (np.inf, py, px)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                x, y = px + dx, py + dy
                if 0 <= x < w and 0 <= y < h and grad[y, x] < best[0]:
                    best = (grad[y, x], y, x)
        out[i] = (best[2], best[1])
    return out


def _components(labels: np.ndarray):
    """4-connected components of a label image.

    Returns (comp_id image, list of pixel-index arrays, component labels).
    Components are numbered by first pixel in row-major order.
    """
    h, w = labels.shape
    flat = labels.reshape(-1)
    comp = np.full(h * w, -1, dtype=np.int64)
    pixel_lists: list[np.ndarray] = []
    comp_labels: list[int] = []
    for start in range(h * w):
        if comp[start] != -1:
            continue
        cid = len(pixel_lists)
        lbl = flat[start]
        stack = [start]
        comp[start] = cid
        members = [start]
        while stack:
            p = stack.pop()
            py, px = divmod(p, w)
            for q in (p - w if py > 0 else -1,
                      p + w if py < h - 1 else -1,
                      p - 1 if px > 0 else -1,
                      p + 1 if px < w - 1 else -1):
                if q >= 0 and comp[q] == -1 and flat[q] == lbl:
                    comp[q] = cid
                    stack.append(q)
                    members.append(q)
        pixel_lists.append(np.array(members, dtype=np.int64))
        comp_labels.append(int(lbl))
    return comp.reshape(h, w), pixel_lists, np.array(comp_labels, dtype=np.int64)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest fragment; merge the rest into the largest
    adjacent superpixel. Returns a dense relabeling ordered by first pixel."""
    h, w = labels.shape
    comp_img, pixels, comp_labels = _components(labels)
    comp_flat = comp_img.reshape(-1)
    n_comp = len(pixels)
    sizes = np.array([p.size for p in pixels], dtype=np.int64)

    kept = np.zeros(n_comp, dtype=bool)
    for lbl in np.unique(comp_labels):
        cands = np.flatnonzero(comp_labels == lbl)
        best = cands[np.lexsort((cands, -sizes[cands]))[0]]
        kept[best] = True

    parent = np.arange(n_comp, dtype=np.int64)
    area = sizes.copy()

    def find(c: int) -> int:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    orphans = [c for c in range(n_comp) if not kept[c]]
    for c in orphans:                      # already ordered by first pixel
        root_c = find(c)
        candidates: dict[int, tuple] = {}
        for p in pixels[c]:
            py, px = divmod(int(p), w)
            for q in (p - w if py > 0 else -1,
                      p + w if py < h - 1 else -1,
                      p - 1 if px > 0 else -1,
                      p + 1 if px < w - 1 else -1):
                if q < 0:
                    continue
                r = find(int(comp_flat[q]))
                if r != root_c:
                    candidates[r] = (-area[r], comp_labels[r], r)
        if not candidates:
            continue                       # single-label image: nothing to do
        target = min(candidates, key=candidates.get)
        parent[root_c] = target
        area[target] += area[root_c]

    roots = np.array([find(c) for c in range(n_comp)], dtype=np.int64)
    # dense new labels in order of first appearance
    new_of_root: dict[int, int] = {}
    order = []
    for c in range(n_comp):
        r = int(roots[c])
        if r not in new_of_root:
            new_of_root[r] = len(order)
            order.append(r)
    return np.array([new_of_root[int(r)] for r in roots],
                    dtype=np.int32)[comp_flat].reshape(h, w)


def slic_segment(rgb: np.ndarray, s: int, compactness: float = 256.0,
                 iters: int = 10) -> SuperpixelMap:
    """Segment an RGB image (floats in [0, 1]) into about s superpixels."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] < 1 or rgb.shape[1] < 1:
        raise ValidationError(f"rgb image must be (H, W, 3), got {rgb.shape}")
    h, w = rgb.shape[:2]
    if s < 1:
        raise ConfigError("superpixel count must be >= 1")
    if s > h * w:
        raise ConfigError(f"requested {s} superpixels for {h * w} pixels")

    lab = rgb_to_lab(rgb)
    interval = np.sqrt(h * w / s)
    spatial_w = compactness / interval
    seeds = _perturb_seeds(_seed_grid(h, w, s), lab)
    k = seeds.shape[0]

    centers = np.empty((k, 5))
    centers[:, :3] = lab[seeds[:, 1], seeds[:, 0]]
    centers[:, 3:] = seeds.astype(np.float64)

    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    reach = max(1, int(np.ceil(2 * interval)))

    labels = np.zeros((h, w), dtype=np.int32)
    for _ in range(iters):
        best = np.full((h, w), np.inf)
        labels.fill(0)
        for c in range(k):
            cx, cy = centers[c, 3], centers[c, 4]
            x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
            y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            sub = lab[y0:y1, x0:x1]
            d_lab = np.sqrt(((sub - centers[c, :3]) ** 2).sum(axis=2))
            d_xy = np.sqrt((xs[x0:x1][None, :] - cx) ** 2 +
                           (ys[y0:y1][:, None] - cy) ** 2)
            d = d_lab + spatial_w * d_xy
            win_best = best[y0:y1, x0:x1]
            improve = d < win_best          # strict: ties keep the lower index
            win_best[improve] = d[improve]
            labels[y0:y1, x0:x1][improve] = c
        # recenter on cluster means; empty clusters keep their position
        flat = labels.reshape(-1)
        count = np.bincount(flat, minlength=k).astype(np.float64)
        gx, gy = np.meshgrid(xs, ys)
        for j, field in enumerate((lab[..., 0], lab[..., 1], lab[..., 2], gx, gy)):
            total = np.bincount(flat, weights=field.reshape(-1), minlength=k)
            nonzero = count > 0
            centers[nonzero, j] = total[nonzero] / count[nonzero]

    final = _enforce_connectivity(labels)
    count = int(final.max()) + 1
    centers_out = np.empty((count, 2))
    gx, gy = np.meshgrid(xs, ys)
    flat = final.reshape(-1)
    sizes = np.bincount(flat, minlength=count).astype(np.float64)
    sum_x = np.bincount(flat, weights=gx.reshape(-1), minlength=count)
    sum_y = np.bincount(flat, weights=gy.reshape(-1), minlength=count)
    centers_out[:, 0] = (sum_x / sizes + 0.5) / w
    centers_out[:, 1] = (sum_y / sizes + 0.5) / h
    return SuperpixelMap(width=w, height=h, labels=final,
                         centers=centers_out, count=count)


def slic_prompts(superpixels: SuperpixelMap) -> np.ndarray:
    """One prompt per superpixel at its centroid, snapped inside if needed.

    For non-convex superpixels whose centroid lands outside, the prompt snaps
    to the member pixel nearest the centroid, so every prompt's pixel carries
    its own superpixel label.
    """
    sp = superpixels
    prompts = np.empty((sp.count, 2), dtype=np.float32)
    for c in range(sp.count):
        cx = sp.centers[c, 0] * sp.width    # continuous pixel coords
        cy = sp.centers[c, 1] * sp.height
        px = min(sp.width - 1, int(cx))
        py = min(sp.height - 1, int(cy))
        if sp.labels[py, px] != c:
            member_y, member_x = np.nonzero(sp.labels == c)
            d2 = (member_x + 0.5 - cx) ** 2 + (member_y + 0.5 - cy) ** 2
            j = int(np.argmin(d2))          # argmin takes the first = lowest index
            px, py = int(member_x[j]), int(member_y[j])
            prompts[c] = ((px + 0.5) / sp.width, (py + 0.5) / sp.height)
        else:
            prompts[c] = (cx / sp.width, cy / sp.height)
    return prompts


def superpixel_masks(superpixels: SuperpixelMap) -> list[RegionMask]:
    return [RegionMask.from_bool(superpixels.labels == c)
            for c in range(superpixels.count)]


def write_superpixels(path, superpixels: SuperpixelMap) -> None:
    doc = {
        "width": superpixels.width,
        "height": superpixels.height,
        "count": superpixels.count,
        "superpixels": [
            {"runs": RegionMask.from_bool(superpixels.labels == c).runs,
             "center": [float(superpixels.centers[c, 0]),
                        float(superpixels.centers[c, 1])]}
            for c in range(superpixels.count)
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_superpixels(path) -> SuperpixelMap:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        width, height = int(doc["width"]), int(doc["height"])
        entries = doc["superpixels"]
        labels = np.full((height, width), -1, dtype=np.int32)
        centers = np.empty((len(entries), 2))
        for c, entry in enumerate(entries):
            mask = RegionMask(width=width, height=height,
                              runs=[int(r) for r in entry["runs"]]).to_bool()
            labels[mask] = c
            centers[c] = entry["center"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad superpixel document: {exc}") from exc
    if (labels < 0).any():
        raise FormatError(f"{path}: superpixels do not cover the image")
    return SuperpixelMap(width=width, height=height, labels=labels,
                         centers=centers, count=len(entries))
