"""Desk-scale evaluations: linear-probe segmentation, object retrieval,
partition recovery, and throughput/memory benchmarks.

These mirror the full-scale protocols in spirit (trend comparisons against a
patch-feature baseline), not in absolute numbers; all datasets are synthetic
scenes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .aggregation import aggregate
from .dataplane import TokenSet
from .errors import DegenerateDataError, ValidationError
from .model import RenConfig, RenParams, forward
from .prompting import grid_prompts, slic_prompts, slic_segment
from .synth import SyntheticScene, render_scene
from .training import DataConfig


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeModel:
    w: np.ndarray              # (classes, token_dim)
    b: np.ndarray              # (classes,)
    classes: np.ndarray        # original class labels, sorted

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        logits = tokens @ self.w.T + self.b
        return self.classes[np.argmax(logits, axis=1)]


def probe_loss_and_grad(w: np.ndarray, b: np.ndarray, tokens: np.ndarray,
                        label_idx: np.ndarray):
    """Softmax cross-entropy and its gradients for the linear probe."""
    n = tokens.shape[0]
    logits = tokens @ w.T + b
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    loss = float(-np.log(probs[np.arange(n), label_idx] + 1e-300).mean())
    d_logits = probs.copy()
    d_logits[np.arange(n), label_idx] -= 1.0
    d_logits /= n
    return loss, d_logits.T @ tokens, d_logits.sum(axis=0)


def train_probe(tokens: np.ndarray, labels: np.ndarray, epochs: int = 300,
                lr: float = 0.5, seed: int = 0) -> ProbeModel:
    """Multinomial logistic regression by full-batch gradient descent."""
    tokens = np.asarray(tokens, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegenerateDataError("probe training needs at least two classes")
    label_idx = np.searchsorted(classes, labels)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(classes.size, tokens.shape[1]))
    b = np.zeros(classes.size)
    for _ in range(epochs):
        _, dw, db = probe_loss_and_grad(w, b, tokens, label_idx)
        w -= lr * dw
        b -= lr * db
    return ProbeModel(w=w, b=b, classes=classes)


def paint_predictions(pred_labels: np.ndarray, *, superpixels=None,
                      patch_grid: tuple[int, int] | None = None,
                      image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Rasterize per-prompt labels into a label image.

    SLIC mode paints each prompt's superpixel (prompt i <-> superpixel i);
    grid mode paints each prompt's patch cell (row-major prompt order).
    """
    pred_labels = np.asarray(pred_labels)
    if superpixels is not None:
        if pred_labels.shape[0] != superpixels.count:
            raise ValidationError("one label per superpixel required")
        return pred_labels[superpixels.labels]
    if patch_grid is None or image_size is None:
        raise ValidationError("need superpixels or patch_grid + image_size")
    gh, gw = patch_grid
    h, w = image_size
    if pred_labels.shape[0] != gh * gw:
        raise ValidationError("one label per patch cell required")
    ys = (np.arange(gh + 1) * h) // gh
    xs = (np.arange(gw + 1) * w) // gw
    out = np.empty((h, w), dtype=pred_labels.dtype)
    for r in range(gh):
        for c in range(gw):
            out[ys[r]:ys[r + 1], xs[c]:xs[c + 1]] = pred_labels[r * gw + c]
    return out


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU over classes present in either image."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError("prediction/ground-truth shapes differ")
    ious = []
    for cls in np.union1d(np.unique(pred), np.unique(gt)):
        p = pred == cls
        g = gt == cls
        union = (p | g).sum()
        if union == 0:
            continue
        ious.append((p & g).sum() / union)
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# retrieval

def retrieve(query: np.ndarray, database: list[TokenSet],
             use_aligned: bool = True) -> list[tuple[int, float]]:
    """Rank database images by their best-matching region token.

    Image score = max cosine over the image's tokens; ties break toward the
    lower image id.
    """
    if not database:
        raise ValidationError("empty retrieval database")
    q = np.asarray(query, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-30)
    scores = []
    for tokens in database:
        mat = (tokens.aligned if use_aligned else tokens.ren).astype(np.float64)
        norms = np.maximum(np.linalg.norm(mat, axis=1), 1e-30)
        scores.append(float((mat @ q / norms).max()))
    order = sorted(range(len(database)), key=lambda i: (-scores[i], i))
    return [(i, scores[i]) for i in order]


def average_precision(ranked_ids: list[int], relevant: set[int]) -> float:
    if not relevant:
        raise ValidationError("no relevant items for this query")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(ranked_ids, start=1):
        if idx in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def retrieval_precision_at(ranked_ids: list[int], relevant: set[int],
                           k: int) -> float:
    top = ranked_ids[:k]
    hits = sum(1 for idx in top if idx in relevant)
    return hits / min(k, len(relevant))


def map_mrp(rankings: list[list[int]], relevance: list[set[int]],
            k: int = 50) -> tuple[float, float]:
    aps = [average_precision(r, rel) for r, rel in zip(rankings, relevance)]
    rps = [retrieval_precision_at(r, rel, k) for r, rel in zip(rankings, relevance)]
    return float(np.mean(aps)), float(np.mean(rps))


# ---------------------------------------------------------------------------
# adjusted Rand index

def _comb2(x: np.ndarray) -> float:
    x = x.astype(np.float64)
    return float((x * (x - 1.0) / 2.0).sum())


def ari(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """Adjusted Rand index via the pair-counting closed form."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValidationError("partitions cover different universes")
    n = pred_labels.size
    _, pi = np.unique(pred_labels, return_inverse=True)
    _, gi = np.unique(gt_labels, return_inverse=True)
    table = np.zeros((pi.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)
    index = _comb2(table.reshape(-1))
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0:
        return 1.0 if index == expected else 0.0
    return float((index - expected) / denom)


def groups_to_labels(groups: list[list[int]], n: int,
                     discarded: list[int] | None = None) -> np.ndarray:
    """Token-index partition as a label array; discarded tokens become
    singletons with unique labels."""
    labels = np.full(n, -1, dtype=np.int64)
    for gi, members in enumerate(groups):
        labels[np.array(members, dtype=np.int64)] = gi
    next_label = len(groups)
    for i in range(n):
        if labels[i] == -1:
            labels[i] = next_label
            next_label += 1
    return labels


# ---------------------------------------------------------------------------
# trained-model evaluation helpers

def token_margin(params: RenParams, scenes: list[SyntheticScene],
                 data: DataConfig, n_prompts: int = 64,
                 seed: int = 0) -> tuple[float, float]:
    """Mean within-region vs. cross-region token cosine over scenes."""
    rng = np.random.default_rng(seed)
    within, cross = [], []
    for scene in scenes:
        rendered = render_scene(scene, data.h_patches, data.w_patches,
                                noise_sigma=data.noise_sigma,
                                pos_strength=data.pos_strength)
        prompts = rng.uniform(0.0, 1.0, size=(n_prompts, 2)).astype(np.float32)
        px = (prompts[:, 0] * scene.canvas).astype(np.int64)
        py = (prompts[:, 1] * scene.canvas).astype(np.int64)
        ids = rendered.ownership[py, px]
        tokens = forward(rendered.feature_map, prompts, params)
        unit = tokens.ren / np.maximum(
            np.linalg.norm(tokens.ren, axis=1, keepdims=True), 1e-30)
        sims = unit @ unit.T
        same = ids[:, None] == ids[None, :]
        off = ~np.eye(n_prompts, dtype=bool)
        within.extend(sims[same & off].tolist())
        cross.extend(sims[~same].tolist())
    return float(np.mean(within)), float(np.mean(cross))


def aggregation_recovery(params: RenParams, scenes: list[SyntheticScene],
                         data: DataConfig, mu: float = 0.975,
                         compactness: float = 256.0) -> dict:
    """SLIC-prompted aggregation vs. ground-truth regions on held-out scenes."""
    aris, reductions = [], []
    for scene in scenes:
        rendered = render_scene(scene, data.h_patches, data.w_patches,
                                noise_sigma=data.noise_sigma,
                                pos_strength=data.pos_strength)
        superpixels = slic_segment(rendered.rgb, data.h_patches * data.w_patches,
                                   compactness=compactness)
        prompts = slic_prompts(superpixels)
        tokens = forward(rendered.feature_map, prompts, params)
        result = aggregate(tokens, mu=mu)
        px = (prompts[:, 0] * scene.canvas).astype(np.int64)
        py = (prompts[:, 1] * scene.canvas).astype(np.int64)
        gt = rendered.ownership[py, px]
        pred = groups_to_labels(result.groups, len(tokens), result.discarded)
        aris.append(ari(pred, gt))
        reductions.append(len(tokens) / max(1, result.n_groups))
    return {"ari_mean": float(np.mean(aris)),
            "reduction_mean": float(np.mean(reductions)),
            "ari_per_scene": aris, "reduction_per_scene": reductions}


def probe_benchmark(params: RenParams, train_scenes: list[SyntheticScene],
                    test_scenes: list[SyntheticScene], data: DataConfig,
                    epochs: int = 300, seed: int = 0) -> dict:
    """Linear-probe segmentation: region tokens vs. nearest-patch baseline.

    Prompts sit on the patch grid, so the baseline feature for a prompt is
    exactly the patch feature under it; both feature sets are probed with the
    same protocol and scored as pixel-level mIoU against the class image.
    """
    if data.h_patches != data.w_patches:
        raise ValidationError("probe benchmark expects a square patch grid")
    g = data.h_patches
    prompts = grid_prompts(g)

    def collect(scenes):
        per_scene = []
        for scene in scenes:
            rendered = render_scene(scene, g, g, noise_sigma=data.noise_sigma,
                                    pos_strength=data.pos_strength)
            tokens = forward(rendered.feature_map, prompts, params)
            px = (prompts[:, 0] * scene.canvas).astype(np.int64)
            py = (prompts[:, 1] * scene.canvas).astype(np.int64)
            labels = rendered.class_image[py, px]
            per_scene.append((tokens.ren, rendered.feature_map.features2d(),
                              labels, rendered.class_image))
        return per_scene

    train_set = collect(train_scenes)
    test_set = collect(test_scenes)
    ren_train = np.concatenate([s[0] for s in train_set])
    base_train = np.concatenate([s[1] for s in train_set])
    labels_train = np.concatenate([s[2] for s in train_set])

    ren_probe = train_probe(ren_train, labels_train, epochs=epochs, seed=seed)
    base_probe = train_probe(base_train, labels_train, epochs=epochs, seed=seed)

    ren_scores, base_scores = [], []
    size = test_scenes[0].canvas
    for ren_tokens, base_feats, _, class_image in test_set:
        ren_pred = paint_predictions(ren_probe.predict(ren_tokens),
                                     patch_grid=(g, g), image_size=(size, size))
        base_pred = paint_predictions(base_probe.predict(base_feats),
                                      patch_grid=(g, g), image_size=(size, size))
        ren_scores.append(miou(ren_pred, class_image))
        base_scores.append(miou(base_pred, class_image))
    return {"ren_miou": float(np.mean(ren_scores)),
            "baseline_miou": float(np.mean(base_scores))}


def retrieval_benchmark(params: RenParams, db_scenes: list[SyntheticScene],
                        query_scenes: list[SyntheticScene], data: DataConfig,
                        n_queries: int = 20, mu: float = 0.975,
                        prompts_per_query: int = 128, k: int = 50,
                        seed: int = 0) -> dict:
    """Object retrieval over a scene database, REN tokens vs. a mean-patch
    baseline. A query is a region in a held-out scene; a database image is
    relevant when it contains a region of the query's class."""
    rng = np.random.default_rng(seed)
    db_tokens: list[TokenSet] = []
    db_means = []
    db_classes = []
    for scene in db_scenes:
        rendered = render_scene(scene, data.h_patches, data.w_patches,
                                noise_sigma=data.noise_sigma,
                                pos_strength=data.pos_strength)
        superpixels = slic_segment(rendered.rgb, data.h_patches * data.w_patches)
        prompts = slic_prompts(superpixels)
        tokens = forward(rendered.feature_map, prompts, params)
        result = aggregate(tokens, mu=mu)
        db_tokens.append(TokenSet(prompts=result.representatives,
                                  ren=result.pooled_ren,
                                  aligned=result.pooled_aligned,
                                  source_id="db"))
        db_means.append(rendered.feature_map.features2d().mean(axis=0))
        db_classes.append({r.class_id for r in scene.regions})

    queries = []
    for scene in query_scenes:
        if len(queries) >= n_queries:
            break
        rendered = render_scene(scene, data.h_patches, data.w_patches,
                                noise_sigma=data.noise_sigma,
                                pos_strength=data.pos_strength)
        region_idx = int(rng.integers(0, scene.n_regions))
        cls = scene.regions[region_idx].class_id
        relevant = {i for i, classes in enumerate(db_classes) if cls in classes}
        if not relevant:
            continue
        ys, xs = np.nonzero(rendered.ownership == region_idx)
        pick = rng.integers(0, ys.size, size=prompts_per_query)
        prompts = np.stack([(xs[pick] + 0.5) / scene.canvas,
                            (ys[pick] + 0.5) / scene.canvas],
                           axis=1).astype(np.float32)
        tokens = forward(rendered.feature_map, prompts, params)
        query_vec = tokens.aligned.mean(axis=0)
        feats = rendered.feature_map.features2d()
        cell = _patch_index_of_pixels(xs, ys, scene.canvas,
                                      data.h_patches, data.w_patches)
        base_query = feats[np.unique(cell)].mean(axis=0)
        queries.append((query_vec, base_query, relevant))

    if not queries:
        raise DegenerateDataError("no query with a relevant database image")

    ren_rankings, base_rankings, relevance = [], [], []
    mean_mat = np.stack(db_means)
    for query_vec, base_query, relevant in queries:
        ren_rankings.append([i for i, _ in retrieve(query_vec, db_tokens)])
        q = base_query / max(np.linalg.norm(base_query), 1e-30)
        m = mean_mat / np.maximum(
            np.linalg.norm(mean_mat, axis=1, keepdims=True), 1e-30)
        scores = m @ q
        base_rankings.append(sorted(range(len(db_scenes)),
                                    key=lambda i: (-scores[i], i)))
        relevance.append(relevant)

    ren_map, ren_mrp = map_mrp(ren_rankings, relevance, k=k)
    base_map, base_mrp = map_mrp(base_rankings, relevance, k=k)
    return {"ren_map": ren_map, "ren_mrp": ren_mrp,
            "baseline_map": base_map, "baseline_mrp": base_mrp,
            "n_queries": len(queries)}


def _patch_index_of_pixels(xs, ys, canvas, h_patches, w_patches):
    pr = (ys * h_patches) // canvas
    pc = (xs * w_patches) // canvas
    return pr * w_patches + pc


# ---------------------------------------------------------------------------
# benchmarking

@dataclass
class BenchReport:
    prompts: int
    mean_s: float
    std_s: float
    tokens_per_s: float
    agg_mean_s: float | None = None
    agg_std_s: float | None = None
    peak_bytes_analytic: int = 0
    rss_delta_bytes: int | None = None


def analytic_peak_bytes(n_prompts: int, n_patches: int, config: RenConfig,
                        chunk: int = 2048) -> int:
    c = min(chunk, n_prompts)
    h = config.n_heads
    d = config.d_model
    live = (2 * n_patches * d              # shared K/V
            + 2 * h * c * n_patches       # logits + attention probabilities
            + 6 * c * d                   # block intermediates
            + n_prompts * (d + config.encoder_dim))
    return 4 * live


def bench_forward(params: RenParams, prompt_counts: list[int],
                  h_patches: int = 37, w_patches: int = 37,
                  runs: int = 20, warmup: int = 3, with_aggregation: bool = True,
                  seed: int = 0) -> list[BenchReport]:
    """Time token generation (and optionally aggregation) per prompt count."""
    from .dataplane import PatchFeatureMap

    cfg = params.config
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, 1.0, size=(h_patches, w_patches, cfg.encoder_dim))
    data /= np.linalg.norm(data, axis=2, keepdims=True)
    fmap = PatchFeatureMap(h_patches=h_patches, w_patches=w_patches,
                           dim=cfg.encoder_dim, image_h=h_patches * 14,
                           image_w=w_patches * 14, patch_size=14,
                           data=data.astype(np.float32))
    try:
        import psutil
        process = psutil.Process()
    except ImportError:
        process = None

    reports = []
    for count in prompt_counts:
        if count < 1:
            raise ValidationError("prompt counts must be >= 1")
        prompts = rng.uniform(0.0, 1.0, size=(count, 2)).astype(np.float32)
        rss_before = process.memory_info().rss if process else None
        for _ in range(warmup):
            forward(fmap, prompts, params)
        times = []
        agg_times = []
        tokens = None
        for _ in range(runs):
            start = time.perf_counter()
            tokens = forward(fmap, prompts, params)
            times.append(time.perf_counter() - start)
            if with_aggregation:
                start = time.perf_counter()
                aggregate(tokens, mu=0.975)
                agg_times.append(time.perf_counter() - start)
        rss_after = process.memory_info().rss if process else None
        mean_s = float(np.mean(times))
        reports.append(BenchReport(
            prompts=count, mean_s=mean_s, std_s=float(np.std(times, ddof=1)),
            tokens_per_s=count / mean_s,
            agg_mean_s=float(np.mean(agg_times)) if agg_times else None,
            agg_std_s=float(np.std(agg_times, ddof=1)) if agg_times else None,
            peak_bytes_analytic=analytic_peak_bytes(count, fmap.n_patches, cfg),
            rss_delta_bytes=(rss_after - rss_before) if process else None))
    return reports


def fit_r2(xs: list[float], ys: list[float]) -> float:
    """R-squared of the least-squares line through (xs, ys)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = ((y - pred) ** 2).sum()
    ss_tot = ((y - y.mean()) ** 2).sum()
    if ss_tot == 0:
        return 1.0
    return float(1.0 - ss_res / ss_tot)
