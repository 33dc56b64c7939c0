"""Analytic gradients for every parameter tensor, plus a finite-difference
oracle used by the gradient checker.

The forward cache produced by model.forward_tokens holds every intermediate;
backward walks the blocks in reverse, accumulating into a {name: array}
gradient dictionary keyed like RenParams.named_tensors(). Gradients flow into
the shared key/value projections from every block and into the prompt
projection from every block's query injection.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericsError
from .model import (RenParams, _merge_heads, _split_heads, expected_shapes,
                    gelu_grad)


def zero_grads(params: RenParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_tensors()}


def _ln_backward(dy, xhat, inv_std, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _softmax_backward(d_probs, probs):
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def _block_backward(blk, cache, k_heads, v_heads, d_out, n_heads,
                    d_attn_avg=None):
    """Backward through one block.

    Returns (d_x, d_q_in, param grads, dK, dV) where d_x is the gradient on
    the residual stream entering the block and d_q_in the gradient on the
    attention query carrier (separate because the stacked encoder re-injects
    the prompt projection into the carrier only)."""
    # FFN branch: out = x1 + gelu(LN2(x1) @ W1^T) @ W2^T
    d_x1 = d_out.copy()
    d_g = d_out @ blk.ffn_w2
    d_w2 = d_out.T @ cache["g"]
    d_f1 = d_g * gelu_grad(cache["f1"])
    d_w1 = d_f1.T @ cache["h2"]
    d_h2 = d_f1 @ blk.ffn_w1
    dx, d_g2, d_b2 = _ln_backward(d_h2, cache["xhat2"], cache["inv_std2"],
                                  blk.ln2_gamma)
    d_x1 += dx

    # attention branch: x1 = x + (heads(LN1(q_in) @ W_Q^T) @ ...) @ W_O^T
    d_ctx = d_x1 @ blk.w_o
    d_w_o = d_x1.T @ cache["ctx"]
    d_ctx_heads = _split_heads(d_ctx, n_heads)                 # (H, n, dh)
    attn = cache["attn"]
    d_attn = d_ctx_heads @ v_heads.transpose(0, 2, 1)
    if d_attn_avg is not None:
        d_attn = d_attn + d_attn_avg[None, :, :] / n_heads
    d_v = attn.transpose(0, 2, 1) @ d_ctx_heads
    d_logits = _softmax_backward(d_attn, attn)
    scale = cache["scale"]
    d_q_heads = (d_logits @ k_heads) * scale
    d_k = d_logits.transpose(0, 2, 1) @ cache["q_heads"] * scale
    d_q = _merge_heads(d_q_heads)
    d_w_q = d_q.T @ cache["h1"]
    d_h1 = d_q @ blk.w_q
    d_q_in, d_g1, d_b1 = _ln_backward(d_h1, cache["xhat1"], cache["inv_std1"],
                                      blk.ln1_gamma)

    grads = {"w_q": d_w_q, "w_o": d_w_o, "ln1.gamma": d_g1, "ln1.beta": d_b1,
             "ln2.gamma": d_g2, "ln2.beta": d_b2, "ffn.w1": d_w1, "ffn.w2": d_w2}
    return d_x1, d_q_in, grads, _merge_heads(d_k), _merge_heads(d_v)


def backward_from_cache(params: RenParams, cache: dict, d_ren: np.ndarray,
                        d_attn_avg: np.ndarray | None = None,
                        grads: dict[str, np.ndarray] | None = None
                        ) -> dict[str, np.ndarray]:
    """Accumulate d(total loss)/d(params) given d(loss)/d(ren tokens) and an
    optional gradient on the head-averaged final-block attention."""
    cfg = params.config
    if grads is None:
        grads = zero_grads(params)
    k_heads, v_heads = cache["k_heads"], cache["v_heads"]
    d_q0 = np.zeros_like(cache["q0"])
    d_k_total = None
    d_v_total = None
    g = d_ren
    for b in reversed(range(cfg.n_blocks)):
        extra = d_attn_avg if b == cfg.n_blocks - 1 else None
        d_x, d_q_in, block_grads, d_k, d_v = _block_backward(
            params.blocks[b], cache["blocks"][b], k_heads, v_heads, g,
            cfg.n_heads, d_attn_avg=extra)
        for key, value in block_grads.items():
            grads[f"block{b}.{key}"] += value
        d_k_total = d_k if d_k_total is None else d_k_total + d_k
        d_v_total = d_v if d_v_total is None else d_v_total + d_v
        if b == 0:
            # x and q_in are both the prompt projection
            d_q0 += d_x + d_q_in
        else:
            # q_in = x_prev + q0; x = x_prev
            d_q0 += d_q_in
            g = d_x + d_q_in       # total gradient on the previous output
    feats = cache["features2d"]
    grads["w_prompt"] += d_q0.T @ cache["prompt_embed"]
    grads["w_k"] += d_k_total.T @ feats
    grads["w_v"] += d_v_total.T @ feats
    return grads


def check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, arr in grads.items():
        if not np.isfinite(arr).all():
            raise NumericsError(f"non-finite gradient in {name!r}")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for arr in grads.values():
        total += float((arr.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def finite_difference_grads(loss_fn, params: RenParams, eps: float = 1e-3
                            ) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn over every parameter element,
    evaluated on a float64 shadow copy of the parameters."""
    base = params.astype(np.float64)
    tensors = base.tensor_dict()
    out: dict[str, np.ndarray] = {}
    for name in expected_shapes(params.config):
        arr = tensors[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = loss_fn(base)
            flat[i] = original - eps
            down = loss_fn(base)
            flat[i] = original
            grad_flat[i] = (up - down) / (2.0 * eps)
        out[name] = grad
    return out
