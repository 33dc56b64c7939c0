"""Region encoder forward pass.

Point prompts are embedded with fixed 2D sinusoids, projected once, and then
refined by a stack of pre-norm cross-attention blocks whose keys/values are a
single shared projection of the patch features. For block b > 1 the attention
queries are the sum of the projected prompt and the previous block's output,
while the residual stream itself carries the block outputs (so with zeroed
output projections the whole stack is the identity on the prompt projection).
The final block's output is the region token; a bias-free linear map produces
the aligned token in encoder space.

All parameters are stored as (out_features, in_features) matrices and applied
as `x @ W.T`. Computations run in the dtype of the parameters (float32 for
training/inference, float64 for gradient checking).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .dataplane import PatchFeatureMap, TokenSet, prompts_to_array
from .errors import ConfigError, NumericsError, ValidationError

LN_EPS = 1e-5
_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@dataclass(frozen=True)
class RenConfig:
    d_model: int = 32
    n_blocks: int = 4
    n_heads: int = 8
    encoder_dim: int = 32
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("d_model", "n_blocks", "n_heads", "encoder_dim", "ffn_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model


@dataclass
class BlockParams:
    w_q: np.ndarray
    w_o: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn_w1: np.ndarray
    ffn_w2: np.ndarray


@dataclass
class RenParams:
    """All learnable weights of the region encoder."""

    config: RenConfig
    w_prompt: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_align: np.ndarray
    blocks: list[BlockParams] = field(default_factory=list)

    def named_tensors(self):
        """Deterministically ordered (name, array) pairs; order defines file layout."""
        yield "w_prompt", self.w_prompt
        yield "w_k", self.w_k
        yield "w_v", self.w_v
        yield "w_align", self.w_align
        for b, blk in enumerate(self.blocks):
            yield f"block{b}.w_q", blk.w_q
            yield f"block{b}.w_o", blk.w_o
            yield f"block{b}.ln1.gamma", blk.ln1_gamma
            yield f"block{b}.ln1.beta", blk.ln1_beta
            yield f"block{b}.ln2.gamma", blk.ln2_gamma
            yield f"block{b}.ln2.beta", blk.ln2_beta
            yield f"block{b}.ffn.w1", blk.ffn_w1
            yield f"block{b}.ffn.w2", blk.ffn_w2

    def tensor_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def astype(self, dtype) -> "RenParams":
        return params_from_dict(self.config,
                               {k: v.astype(dtype) for k, v in self.named_tensors()})

    def copy(self) -> "RenParams":
        return params_from_dict(self.config,
                               {k: v.copy() for k, v in self.named_tensors()})


def expected_shapes(config: RenConfig) -> dict[str, tuple]:
    d, dd, dF = config.d_model, config.encoder_dim, config.d_ffn
    shapes = {
        "w_prompt": (d, d),
        "w_k": (d, dd),
        "w_v": (d, dd),
        "w_align": (dd, d),
    }
    for b in range(config.n_blocks):
        shapes[f"block{b}.w_q"] = (d, d)
        shapes[f"block{b}.w_o"] = (d, d)
        shapes[f"block{b}.ln1.gamma"] = (d,)
        shapes[f"block{b}.ln1.beta"] = (d,)
        shapes[f"block{b}.ln2.gamma"] = (d,)
        shapes[f"block{b}.ln2.beta"] = (d,)
        shapes[f"block{b}.ffn.w1"] = (dF, d)
        shapes[f"block{b}.ffn.w2"] = (d, dF)
    return shapes


def params_from_dict(config: RenConfig, tensors: dict[str, np.ndarray]) -> RenParams:
    shapes = expected_shapes(config)
    unknown = set(tensors) - set(shapes)
    if unknown:
        raise ValidationError(f"unknown parameter names: {sorted(unknown)}")
    missing = set(shapes) - set(tensors)
    if missing:
        raise ValidationError(f"missing parameter names: {sorted(missing)}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != shapes[name]:
            raise ValidationError(
                f"{name} has shape {arr.shape}, expected {shapes[name]}")
        if not np.isfinite(arr).all():
            raise ValidationError(f"{name} contains non-finite values")
    blocks = []
    for b in range(config.n_blocks):
        blocks.append(BlockParams(
            w_q=tensors[f"block{b}.w_q"],
            w_o=tensors[f"block{b}.w_o"],
            ln1_gamma=tensors[f"block{b}.ln1.gamma"],
            ln1_beta=tensors[f"block{b}.ln1.beta"],
            ln2_gamma=tensors[f"block{b}.ln2.gamma"],
            ln2_beta=tensors[f"block{b}.ln2.beta"],
            ffn_w1=tensors[f"block{b}.ffn.w1"],
            ffn_w2=tensors[f"block{b}.ffn.w2"],
        ))
    return RenParams(config=config, w_prompt=tensors["w_prompt"], w_k=tensors["w_k"],
                     w_v=tensors["w_v"], w_align=tensors["w_align"], blocks=blocks)


def init_params(seed: int, config: RenConfig, dtype=np.float32) -> RenParams:
    """Seeded initialization: fan-in scaled uniform weights, zeroed output
    projections (each block starts as the identity on its residual stream),
    unit LayerNorm scales."""
    rng = np.random.default_rng(seed)

    def uniform(shape):
        fan_in = shape[-1]
        bound = np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    shapes = expected_shapes(config)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith((".w_o", ".ffn.w2")):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".beta"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = uniform(shape)
    return params_from_dict(config, tensors)


def sinusoidal_embed(prompts, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2D sinusoidal embedding of normalized prompt coordinates.

    The first d_model/2 entries encode x, the second half y. Within each half
    sin/cos pairs are interleaved at geometric frequencies
    w_k = 10000^(-4k/d_model) applied to 2*pi times the coordinate.
    """
    if d_model % 4 != 0:
        raise ConfigError(f"d_model={d_model} must be divisible by 4")
    scalar = np.dtype(dtype).type
    arr = prompts_to_array(prompts).astype(dtype)
    n = arr.shape[0]
    quarter = d_model // 4
    k = np.arange(quarter, dtype=dtype)
    omega = np.power(scalar(10000.0), -(scalar(4.0) * k) / scalar(d_model))
    out = np.empty((n, d_model), dtype=dtype)
    for c in range(2):  # 0: x, 1: y
        angles = (2.0 * np.pi * arr[:, c:c + 1]).astype(dtype) * omega[None, :]
        half = out[:, c * (d_model // 2):(c + 1) * (d_model // 2)]
        half[:, 0::2] = np.sin(angles)
        half[:, 1::2] = np.cos(angles)
    return out


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Row-wise LayerNorm; returns (y, xhat, inv_std) for reuse in backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(LN_EPS))
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * x.dtype.type(_SQRT1_2)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_SQRT1_2)))
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return cdf + x * pdf


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (rows, d_model) -> (n_heads, rows, d_head)
    rows, d = x.shape
    return x.reshape(rows, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, rows, dh = x.shape
    return x.transpose(1, 0, 2).reshape(rows, h * dh)


def block_forward(x: np.ndarray, q_in: np.ndarray, k_heads: np.ndarray,
                  v_heads: np.ndarray, blk: BlockParams, n_heads: int,
                  want_cache: bool = False):
    """One pre-norm cross-attention block.

    x: (n, d_model) residual stream entering the block; q_in: the attention
    query carrier (the residual stream plus the re-injected prompt projection
    in the stacked encoder; equal to x for a standalone block). k_heads and
    v_heads: (n_heads, m, d_head) shared projected features. Returns the
    block output and, when requested, the intermediates for backward.
    """
    dtype = x.dtype
    h1, xhat1, inv_std1 = layer_norm(q_in, blk.ln1_gamma, blk.ln1_beta)
    q = h1 @ blk.w_q.T
    q_heads = _split_heads(q, n_heads)                       # (H, n, dh)
    scale = dtype.type(1.0 / np.sqrt(q_heads.shape[-1]))
    logits = (q_heads @ k_heads.transpose(0, 2, 1)) * scale
    attn = softmax_rows(logits)                              # (H, n, m)
    ctx_heads = attn @ v_heads
    ctx = _merge_heads(ctx_heads)                            # (n, d_model)
    attn_out = ctx @ blk.w_o.T
    x1 = x + attn_out
    h2, xhat2, inv_std2 = layer_norm(x1, blk.ln2_gamma, blk.ln2_beta)
    f1 = h2 @ blk.ffn_w1.T
    g = gelu(f1)
    f2 = g @ blk.ffn_w2.T
    out = x1 + f2
    if not want_cache:
        return out, attn, None
    cache = {
        "h1": h1, "xhat1": xhat1, "inv_std1": inv_std1,
        "q_heads": q_heads, "attn": attn, "ctx": ctx,
        "x1": x1, "h2": h2, "xhat2": xhat2, "inv_std2": inv_std2,
        "f1": f1, "g": g, "scale": scale,
    }
    return out, attn, cache


def cross_attention_block(queries: np.ndarray, keys: np.ndarray, values: np.ndarray,
                          blk: BlockParams, n_heads: int) -> np.ndarray:
    """Standalone block application on already-projected keys/values."""
    queries = np.asarray(queries)
    keys = np.asarray(keys)
    values = np.asarray(values)
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise ValidationError("queries/keys/values must be 2D")
    if keys.shape != values.shape or queries.shape[1] != keys.shape[1]:
        raise ValidationError("inconsistent attention shapes")
    if queries.shape[0] < 1 or keys.shape[0] < 1:
        raise ValidationError("need at least one query and one key")
    for name, arr in (("queries", queries), ("keys", keys), ("values", values)):
        if not np.isfinite(arr).all():
            raise NumericsError(f"{name} contain non-finite values")
    k_heads = _split_heads(keys, n_heads)
    v_heads = _split_heads(values, n_heads)
    out, _, _ = block_forward(queries, queries, k_heads, v_heads, blk, n_heads)
    return out


def project_features(features2d: np.ndarray, params: RenParams):
    """Shared K/V projection, computed once per image and reused by all blocks."""
    k = features2d @ params.w_k.T
    v = features2d @ params.w_v.T
    return k, v


def forward_tokens(features2d: np.ndarray, prompt_embed: np.ndarray,
                   params: RenParams, want_cache: bool = False):
    """Core stack on raw arrays: returns (ren, aligned, cache).

    cache is None unless requested; it contains everything backward needs,
    including the per-block attention maps.
    """
    cfg = params.config
    k = features2d @ params.w_k.T
    v = features2d @ params.w_v.T
    k_heads = _split_heads(k, cfg.n_heads)
    v_heads = _split_heads(v, cfg.n_heads)
    q0 = prompt_embed @ params.w_prompt.T
    x = q0
    block_caches = []
    attn_final = None
    for b in range(cfg.n_blocks):
        blk = params.blocks[b]
        q_in = x if b == 0 else x + q0     # re-inject the projected prompt
        out, attn, cache = block_forward(x, q_in, k_heads, v_heads, blk,
                                         cfg.n_heads, want_cache=want_cache)
        attn_final = attn
        if want_cache:
            block_caches.append(cache)
        x = out
    ren = x
    aligned = ren @ params.w_align.T
    cache = None
    if want_cache:
        cache = {
            "features2d": features2d, "prompt_embed": prompt_embed,
            "q0": q0, "k_heads": k_heads, "v_heads": v_heads,
            "blocks": block_caches, "ren": ren, "attn_final": attn_final,
        }
    return ren, aligned, cache


def align(ren_tokens: np.ndarray, w_align: np.ndarray) -> np.ndarray:
    """Exact linear projection of region tokens into the encoder space."""
    ren_tokens = np.asarray(ren_tokens)
    if ren_tokens.ndim != 2 or ren_tokens.shape[1] != w_align.shape[1]:
        raise ValidationError(
            f"tokens {ren_tokens.shape} incompatible with alignment {w_align.shape}")
    return ren_tokens @ w_align.T


def forward(feature_map: PatchFeatureMap, prompts, params: RenParams,
            config: RenConfig | None = None, chunk: int = 2048,
            source_id: str = "") -> TokenSet:
    """Produce a TokenSet for arbitrary prompt counts.

    Prompts are processed in chunks so that dense grids (up to 64x64) stay
    within a bounded transient footprint; results are independent of the
    chunk size.
    """
    cfg = config or params.config
    if feature_map.dim != cfg.encoder_dim:
        raise ConfigError(
            f"feature dim {feature_map.dim} != encoder_dim {cfg.encoder_dim}")
    arr = prompts_to_array(prompts)
    if arr.shape[0] == 0:
        raise ValidationError("empty prompt list")
    feats = feature_map.features2d().astype(params.w_k.dtype, copy=False)
    k = feats @ params.w_k.T
    v = feats @ params.w_v.T
    k_heads = _split_heads(k, cfg.n_heads)
    v_heads = _split_heads(v, cfg.n_heads)
    ren_parts = []
    for start in range(0, arr.shape[0], chunk):
        sub = arr[start:start + chunk]
        embed = sinusoidal_embed(sub, cfg.d_model, dtype=params.w_prompt.dtype)
        q0 = embed @ params.w_prompt.T
        x = q0
        for b in range(cfg.n_blocks):
            q_in = x if b == 0 else x + q0
            x, _, _ = block_forward(x, q_in, k_heads, v_heads,
                                    params.blocks[b], cfg.n_heads)
        ren_parts.append(x)
    ren = np.concatenate(ren_parts, axis=0)
    aligned = align(ren, params.w_align)
    return TokenSet(prompts=arr, ren=ren.astype(np.float32),
                    aligned=aligned.astype(np.float32), source_id=source_id)
