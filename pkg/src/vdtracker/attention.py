"""Multi-head self-attention and the pre-norm residual transformer layer.

The layer follows the additive form used throughout the model,
``H_l = MSA(LN(H_{l-1})) + H_{l-1}``, with an optional position-wise
feed-forward sublayer behind a config flag. Attention weights of every call
are returned as plain numpy arrays for introspection and object selection.

Masks are additive n x n matrices holding 0 for visible keys and -1e9 for
hidden ones; masked weights are forced to exactly zero and rows renormalise
over the visible keys (see tensor.masked_softmax).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    scale,
    slice_cols,
    softmax,
    transpose,
)

MASK_SENTINEL = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    """Width and head count of one attention stack."""

    d: int = 216
    heads: int = 6

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"model width {self.d} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass(frozen=True)
class AttentionMask:
    """Additive attention mask: 0 = visible, -1e9 sentinel = hidden."""

    additive: np.ndarray

    @property
    def n(self) -> int:
        return self.additive.shape[0]

    @property
    def visible(self) -> np.ndarray:
        return self.additive > MASK_SENTINEL / 2


def causal_mask(prefix_len: int, answer_len: int) -> AttentionMask:
    """Visibility for a [prefix, answer] stream: prefix positions see the whole
    prefix, answer position t sees the prefix plus answer positions <= t."""
    if prefix_len < 0 or answer_len < 0:
        raise ValueError("mask lengths must be nonnegative")
    n = prefix_len + answer_len
    visible = np.zeros((n, n), dtype=bool)
    visible[:, :prefix_len] = True
    for t in range(answer_len):
        visible[prefix_len + t, prefix_len: prefix_len + t + 1] = True
    additive = np.where(visible, 0.0, MASK_SENTINEL)
    return AttentionMask(additive=additive)


# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def init_linear(params: dict, prefix: str, rng, d_in: int, d_out: int, dtype):
    # weights stored (in, out); forward is x @ W + b
    params[f"{prefix}.w"] = uniform_init(rng, (d_in, d_out), d_in, dtype)
    params[f"{prefix}.b"] = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)


def init_layer_norm(params: dict, prefix: str, d: int, dtype):
    params[f"{prefix}.gamma"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def init_attention(params: dict, prefix: str, rng, d: int, dtype):
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{name}", rng, d, d, dtype)


def init_transformer_layer(params: dict, prefix: str, rng, d: int, dtype, ffn: bool):
    init_layer_norm(params, f"{prefix}.ln", d, dtype)
    init_attention(params, f"{prefix}.attn", rng, d, dtype)
    if ffn:
        init_layer_norm(params, f"{prefix}.ffn.ln", d, dtype)
        init_linear(params, f"{prefix}.ffn.up", rng, d, 4 * d, dtype)
        init_linear(params, f"{prefix}.ffn.down", rng, 4 * d, d, dtype)


def init_cross_layer(params: dict, prefix: str, rng, d: int, dtype, ffn: bool):
    init_transformer_layer(params, prefix, rng, d, dtype, ffn=False)
    init_layer_norm(params, f"{prefix}.xln", d, dtype)
    init_attention(params, f"{prefix}.xattn", rng, d, dtype)
    if ffn:
        init_layer_norm(params, f"{prefix}.ffn.ln", d, dtype)
        init_linear(params, f"{prefix}.ffn.up", rng, d, 4 * d, dtype)
        init_linear(params, f"{prefix}.ffn.down", rng, 4 * d, d, dtype)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def apply_layer_norm(params: dict, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps=LN_EPS)


def _attend(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig,
            mask: AttentionMask | None):
    """Scaled dot-product attention per head over pre-projected q/k/v.

    Returns the concatenated head outputs plus weights (heads, n_q, n_k).
    """
    n_q = q.data.shape[0]
    n_k = k.data.shape[0]
    if mask is not None and mask.additive.shape != (n_q, n_k):
        raise ShapeError(
            f"mask shape {mask.additive.shape} does not match attention ({n_q}, {n_k})"
        )
    dh = cfg.head_dim
    outs = []
    weights = np.empty((cfg.heads, n_q, n_k), dtype=q.data.dtype)
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dh))
        if mask is None:
            w = softmax(scores, axis=1)
        else:
            w = masked_softmax(scores, mask.additive)
        weights[h] = w.data
        outs.append(matmul(w, vh))
    return concat(outs, axis=1), weights


def multi_head_self_attention(
    params: dict,
    prefix: str,
    x: Tensor,
    cfg: AttentionConfig,
    mask: AttentionMask | None = None,
):
    """Self-attention block: project q/k/v, attend per head, output-project.

    Returns (output, weights) with weights shaped (heads, n, n); each weight
    row sums to 1 over its visible keys.
    """
    q = linear(params, f"{prefix}.q", x)
    k = linear(params, f"{prefix}.k", x)
    v = linear(params, f"{prefix}.v", x)
    heads, weights = _attend(q, k, v, cfg, mask)
    return linear(params, f"{prefix}.o", heads), weights


def cross_attention(
    params: dict,
    prefix: str,
    x: Tensor,
    memory: Tensor,
    cfg: AttentionConfig,
):
    """Attention where queries come from ``x`` and keys/values from ``memory``."""
    q = linear(params, f"{prefix}.q", x)
    k = linear(params, f"{prefix}.k", memory)
    v = linear(params, f"{prefix}.v", memory)
    heads, weights = _attend(q, k, v, cfg, mask=None)
    return linear(params, f"{prefix}.o", heads), weights


def _ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = apply_layer_norm(params, f"{prefix}.ln", x)
    h = gelu(linear(params, f"{prefix}.up", h))
    return add(linear(params, f"{prefix}.down", h), x)


def transformer_layer(
    params: dict,
    prefix: str,
    x: Tensor,
    cfg: AttentionConfig,
    mask: AttentionMask | None = None,
    ffn: bool = False,
):
    """Pre-norm residual block: out = MSA(LN(x)) + x, optionally followed by a
    pre-norm feed-forward residual. Returns (out, attention weights)."""
    normed = apply_layer_norm(params, f"{prefix}.ln", x)
    attended, weights = multi_head_self_attention(params, f"{prefix}.attn", normed, cfg, mask)
    out = add(attended, x)
    if ffn:
        out = _ffn(params, f"{prefix}.ffn", out)
    return out, weights


def cross_layer(
    params: dict,
    prefix: str,
    x: Tensor,
    memory: Tensor,
    cfg: AttentionConfig,
    mask: AttentionMask | None = None,
    ffn: bool = False,
):
    """Decoder block: masked self-attention, then cross-attention into
    ``memory``, each as a pre-norm residual. Returns (out, cross weights)."""
    out, _ = transformer_layer(params, prefix, x, cfg, mask=mask, ffn=False)
    normed = apply_layer_norm(params, f"{prefix}.xln", out)
    crossed, xweights = cross_attention(params, f"{prefix}.xattn", normed, memory, cfg)
    out = add(crossed, out)
    if ffn:
        out = _ffn(params, f"{prefix}.ffn", out)
    return out, xweights


def attention_to(query_index: int, layer_weights: np.ndarray, key_range) -> np.ndarray:
    """Mean over heads of the attention paid by one query to a key range.

    ``layer_weights`` is (heads, n_q, n_k) as returned by the blocks above;
    ``key_range`` is any index expression over keys (range, slice, list).
    """
    heads, n_q, n_k = layer_weights.shape
    if not 0 <= query_index < n_q:
        raise IndexError(f"query index {query_index} out of range for {n_q} rows")
    keys = np.arange(n_k)[key_range]
    if keys.size and (keys.min() < 0 or keys.max() >= n_k):
        raise IndexError("key range out of bounds")
    return layer_weights[:, query_index, keys].mean(axis=0)
