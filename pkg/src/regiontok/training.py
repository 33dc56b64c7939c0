"""Training: two-view batches, loss assembly, and the optimization loop.

Each step samples scenes, draws an augmented view pair per scene, samples
prompts per view, and runs both views through the encoder. The contrastive
loss acts on the concatenated token set of the pair (region ids are shared
across views by construction); the feature-similarity and optional attention
losses are averaged over the two views. Gradients accumulate over scenes in
ascending batch position, so a fixed seed reproduces the metrics log bit for
bit on one platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .backward import (backward_from_cache, check_finite,
                       finite_difference_grads, zero_grads)
from .errors import DegenerateBatchError, ValidationError
from .losses import (LossWeights, attention_supervision_loss,
                     feature_similarity_loss, info_nce_loss)
from .model import (RenConfig, RenParams, forward_tokens, init_params,
                    params_from_dict, sinusoidal_embed)
from .optim import AdamW
from .synth import SceneConfig, SyntheticScene, generate_scene, make_latent_library
from .train_data import ScenePair, TrainSample, build_scene_pair  # noqa: F401


@dataclass(frozen=True)
class TrainConfig:
    batch_scenes: int = 16
    max_prompts: int = 256
    lr: float = 0.001
    warmup_steps: int = 100
    total_steps: int = 800
    grad_clip_norm: float = 5.0
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self):
        for name in ("batch_scenes", "max_prompts", "lr", "warmup_steps",
                     "total_steps", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 64
    canvas: int = 96
    dim: int = 32
    h_patches: int = 12
    w_patches: int = 12
    n_regions_min: int = 3
    n_regions_max: int = 6
    n_classes: int = 8
    noise_sigma: float = 0.05
    pos_strength: float = 0.4
    prompts_per_view: int = 48
    dataset_seed: int = 1234
    library_seed: int = 7

    def __post_init__(self):
        if self.n_regions_min > self.n_regions_max:
            raise ValidationError("n_regions_min > n_regions_max")
        if self.n_classes < self.n_regions_max:
            raise ValidationError("need at least n_regions_max classes")


def make_dataset(data: DataConfig, seed: int | None = None) -> list[SyntheticScene]:
    """Deterministic scene list sharing one latent class library."""
    seed = data.dataset_seed if seed is None else seed
    library = make_latent_library(data.library_seed, data.n_classes, data.dim)
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(data.n_scenes):
        n_regions = int(rng.integers(data.n_regions_min, data.n_regions_max + 1))
        scene_seed = int(rng.integers(0, 2 ** 31 - 1))
        scenes.append(generate_scene(scene_seed, SceneConfig(
            n_regions=n_regions, canvas=data.canvas, dim=data.dim,
            latent_library=library)))
    return scenes


# ---------------------------------------------------------------------------
# loss assembly

def pair_loss_and_grads(pair: ScenePair, params: RenParams, weights: LossWeights,
                        grads: dict | None = None, scale: float = 1.0,
                        want_grads: bool = True) -> dict[str, float]:
    """Compute one scene pair's loss parts; accumulate scaled gradients.

    The pair total is lambda_cont * L_cont(concatenated tokens)
    + lambda_feat * mean-of-views L_feat + lambda_attn * mean-of-views L_attn.
    """
    dtype = params.w_prompt.dtype
    views = []
    for sample in (pair.a, pair.b):
        feats = sample.features.astype(dtype, copy=False)
        embed = sinusoidal_embed(sample.prompts, params.config.d_model, dtype=dtype)
        ren, aligned, cache = forward_tokens(feats, embed, params,
                                             want_cache=want_grads)
        views.append({"sample": sample, "ren": ren, "aligned": aligned,
                      "cache": cache})

    parts = {"l_cont": 0.0, "l_feat": 0.0, "l_attn": 0.0}
    n_a = views[0]["ren"].shape[0]
    d_ren = [np.zeros_like(views[0]["ren"]), np.zeros_like(views[1]["ren"])]
    d_attn = [None, None]

    if weights.lambda_cont > 0:
        concat = np.concatenate([views[0]["ren"], views[1]["ren"]], axis=0)
        ids = np.concatenate([pair.a.ids, pair.b.ids])
        l_cont, d_concat = info_nce_loss(concat, ids, weights.tau)
        parts["l_cont"] = l_cont
        if want_grads:
            factor = dtype.type(weights.lambda_cont * scale)
            d_ren[0] += factor * d_concat[:n_a]
            d_ren[1] += factor * d_concat[n_a:]

    if weights.lambda_feat > 0:
        for v, view in enumerate(views):
            targets = view["sample"].targets.astype(dtype, copy=False)
            l_feat, d_aligned = feature_similarity_loss(view["aligned"], targets)
            parts["l_feat"] += 0.5 * l_feat
            if want_grads:
                factor = dtype.type(weights.lambda_feat * 0.5 * scale)
                scaled = factor * d_aligned
                grads["w_align"] += scaled.T @ view["ren"]
                d_ren[v] += scaled @ params.w_align

    if weights.lambda_attn > 0:
        for v, view in enumerate(views):
            targets = view["sample"].attn_targets
            if targets is None:
                raise ValidationError("attention supervision needs attn_targets")
            attn_avg = view["cache"]["attn_final"].mean(axis=0) if want_grads else None
            if attn_avg is None:
                # forward-only path still needs the final attention map
                _, _, cache = forward_tokens(
                    view["sample"].features.astype(dtype, copy=False),
                    sinusoidal_embed(view["sample"].prompts,
                                     params.config.d_model, dtype=dtype),
                    params, want_cache=True)
                attn_avg = cache["attn_final"].mean(axis=0)
            l_attn, d_a = attention_supervision_loss(attn_avg,
                                                     targets.astype(dtype, copy=False))
            parts["l_attn"] += 0.5 * l_attn
            d_attn[v] = (dtype.type(weights.lambda_attn * 0.5 * scale) * d_a
                         if want_grads else None)

    if want_grads:
        for v, view in enumerate(views):
            if d_ren[v].any() or d_attn[v] is not None:
                backward_from_cache(params, view["cache"], d_ren[v],
                                    d_attn_avg=d_attn[v], grads=grads)
    return parts


def batch_loss_and_grads(pairs: list[ScenePair], params: RenParams,
                         weights: LossWeights):
    """Mean loss parts over scene pairs plus accumulated gradients."""
    grads = zero_grads(params)
    scale = 1.0 / len(pairs)
    totals = {"l_cont": 0.0, "l_feat": 0.0, "l_attn": 0.0}
    for pair in pairs:
        parts = pair_loss_and_grads(pair, params, weights, grads=grads, scale=scale)
        for key in totals:
            totals[key] += scale * parts[key]
    return totals, grads


def batch_loss(pairs: list[ScenePair], params: RenParams,
               weights: LossWeights) -> float:
    """Forward-only batch total; the finite-difference oracle calls this."""
    total = 0.0
    for pair in pairs:
        parts = pair_loss_and_grads(pair, params, weights, want_grads=False)
        total += (weights.lambda_cont * parts["l_cont"]
                  + weights.lambda_feat * parts["l_feat"]
                  + weights.lambda_attn * parts["l_attn"])
    return total / len(pairs)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: RenParams
    metrics: list[dict]
    scenes: list[SyntheticScene]
    skipped_steps: int = 0


def train(config: TrainConfig, data: DataConfig,
          weights: LossWeights = LossWeights(),
          model: RenConfig | None = None,
          augment: AugmentConfig = AugmentConfig(),
          scenes: list[SyntheticScene] | None = None,
          out_dir=None) -> TrainResult:
    """Run the optimization loop; optionally stream artifacts to out_dir.

    A batch whose contrastive loss is degenerate (no anchor with a positive)
    is skipped and logged without an optimizer step.
    """
    model = model or RenConfig(d_model=data.dim, encoder_dim=data.dim)
    if model.encoder_dim != data.dim:
        raise ValidationError("model encoder_dim must match data dim")
    scenes = scenes if scenes is not None else make_dataset(data)
    params = init_params(config.seed, model)
    opt = AdamW(lr=config.lr, warmup_steps=config.warmup_steps,
                total_steps=config.total_steps,
                grad_clip_norm=config.grad_clip_norm,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n_prompts = min(data.prompts_per_view, config.max_prompts)

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = (out_path / "metrics.jsonl").open("w", encoding="utf-8")

    metrics: list[dict] = []
    skipped = 0
    try:
        for step in range(1, config.total_steps + 1):
            idx = rng.integers(0, len(scenes), size=config.batch_scenes)
            pairs = [build_scene_pair(scenes[i], rng, data, augment, n_prompts,
                                      want_attn=weights.lambda_attn > 0)
                     for i in idx]
            try:
                parts, grads = batch_loss_and_grads(pairs, params, weights)
            except DegenerateBatchError:
                skipped += 1
                record = {"step": step, "l_cont": None, "l_feat": None,
                          "l_attn": None, "lr": None, "grad_norm": None,
                          "skipped": True}
                metrics.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                continue
            check_finite(grads)
            info = opt.step(params, grads)
            record = {"step": step, "l_cont": parts["l_cont"],
                      "l_feat": parts["l_feat"], "l_attn": parts["l_attn"],
                      "lr": info["lr"], "grad_norm": info["grad_norm"]}
            metrics.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            if out_path is not None and (step % config.checkpoint_every == 0
                                         or step == config.total_steps):
                from .formats import write_checkpoint
                write_checkpoint(out_path / f"ckpt_{step:06d}.renc", params)
    finally:
        if log_file:
            log_file.close()
    if out_path is not None:
        from .formats import write_checkpoint
        write_checkpoint(out_path / "model.renc", params)
    return TrainResult(params=params, metrics=metrics, scenes=scenes,
                       skipped_steps=skipped)


# ---------------------------------------------------------------------------
# gradient checking

GRADCHECK_CONFIG = RenConfig(d_model=8, n_blocks=4, n_heads=2, encoder_dim=8)


def _generic_params(seed: int, config: RenConfig) -> RenParams:
    """A non-degenerate parameter point: zero-initialized output projections
    would make several gradient paths vanish identically, so every tensor is
    perturbed before checking."""
    base = init_params(seed, config)
    rng = np.random.default_rng(seed + 1)
    tensors = {}
    for name, arr in base.named_tensors():
        noise = rng.normal(0.0, 0.2, size=arr.shape).astype(arr.dtype)
        tensors[name] = arr + noise
    return params_from_dict(config, tensors)


def gradcheck_batch(seed: int = 0, with_attention: bool = False,
                    config: RenConfig = GRADCHECK_CONFIG,
                    n_prompts: int = 2, n_patches: int = 4) -> list[ScenePair]:
    """A fixed tiny two-view batch with cross-view positives."""
    rng = np.random.default_rng(seed)
    dim = config.encoder_dim

    def sample() -> TrainSample:
        feats = rng.normal(0.0, 0.7, size=(n_patches, dim)).astype(np.float32)
        prompts = rng.uniform(0.05, 0.95, size=(n_prompts, 2)).astype(np.float32)
        ids = np.arange(n_prompts, dtype=np.int64) % 2
        targets = rng.normal(0.0, 1.0, size=(n_prompts, dim)).astype(np.float32)
        attn_targets = None
        if with_attention:
            raw = rng.uniform(0.0, 1.0, size=(n_prompts, n_patches)) > 0.5
            raw[:, 0] = True          # keep every target row nonempty
            attn_targets = raw.astype(np.float64)
            attn_targets /= attn_targets.sum(axis=1, keepdims=True)
        return TrainSample(features=feats, prompts=prompts, ids=ids,
                           targets=targets, attn_targets=attn_targets)

    return [ScenePair(a=sample(), b=sample())]


def gradcheck_report(eps: float = 1e-3, seed: int = 0,
                     with_attention: bool = False,
                     rel_floor: float = 1e-2) -> dict[str, dict[str, float]]:
    """Analytic vs. central-difference gradients on the tiny config.

    Both sides are evaluated on a float64 shadow of the parameters. The
    relative error denominator is max(|analytic|, |numeric|, rel_floor):
    elements below rel_floor in magnitude are effectively compared absolutely
    at rel_floor * tolerance, which at eps=1e-3 sits at the central-difference
    truncation floor (the FD error itself shrinks as eps^2, so a smaller eps
    tightens the comparison; tests exercise that too).
    """
    weights = LossWeights(lambda_attn=1.0 if with_attention else 0.0)
    pairs = gradcheck_batch(seed, with_attention=with_attention)
    params = _generic_params(seed, GRADCHECK_CONFIG).astype(np.float64)

    _, analytic = batch_loss_and_grads(pairs, params, weights)
    numeric = finite_difference_grads(
        lambda p: batch_loss(pairs, p, weights), params, eps=eps)

    report = {}
    for name in numeric:
        a = analytic[name]
        f = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), rel_floor)
        rel = np.abs(a - f) / denom
        report[name] = {"max_rel": float(rel.max()),
                        "max_abs": float(np.abs(a - f).max())}
    return report


def config_to_json(config: TrainConfig, data: DataConfig,
                   weights: LossWeights) -> str:
    return json.dumps({"train": asdict(config), "data": asdict(data),
                       "loss": asdict(weights)}, indent=2)


def config_from_json(text: str):
    """Parse {train, data, loss} sections; unknown keys are rejected."""
    doc = json.loads(text)
    unknown = set(doc) - {"train", "data", "loss"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")

    def build(cls, section):
        payload = doc.get(section, {})
        valid = {f.name for f in fields(cls)}
        bad = set(payload) - valid
        if bad:
            raise ValidationError(f"unknown keys in {section!r}: {sorted(bad)}")
        return cls(**payload)

    return build(TrainConfig, "train"), build(DataConfig, "data"), \
        build(LossWeights, "loss")
