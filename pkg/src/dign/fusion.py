"""Cross-modal attention block and phrase-region similarity scores.

One encoder-style block per direction: multi-head scaled dot-product
attention of one modality's embeddings over the other's, then residual +
layer norm, feed-forward, residual + layer norm. The two directions hold
separate parameters. Attention reductions over the key set are computed
order-free, so the block is exactly invariant to key/value permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, ShapeError
from .numerics import Tensor


@dataclass
class FusionBlockParams:
    heads: int
    wq: Tensor        # (H, d/H, d)
    wk: Tensor        # (H, d/H, d)
    wv: Tensor        # (H, d/H, d)
    wo: Tensor        # (d, d)
    ln1_gain: Tensor  # (d,)
    ln1_bias: Tensor
    ffn_w1: Tensor    # (d_ff, d)
    ffn_b1: Tensor    # (d_ff,)
    ffn_w2: Tensor    # (d, d_ff)
    ffn_b2: Tensor    # (d,)
    ln2_gain: Tensor
    ln2_bias: Tensor

    @property
    def dim(self) -> int:
        return self.wo.data.shape[0]

    def named_parameters(self, prefix: str = "fusion") -> list[tuple[str, Tensor]]:
        names = ("wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias",
                 "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_gain", "ln2_bias")
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


def init_fusion_block(dim: int, heads: int, d_ff: int, rng: np.random.Generator) -> FusionBlockParams:
    if dim % heads != 0:
        raise ConfigError(f"head count {heads} must divide embedding dim {dim}")
    dh = dim // heads

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return nm.param(rng.uniform(-bound, bound, size=shape))

    return FusionBlockParams(
        heads=heads,
        wq=uniform((heads, dh, dim), dim),
        wk=uniform((heads, dh, dim), dim),
        wv=uniform((heads, dh, dim), dim),
        wo=uniform((dim, dim), dim),
        ln1_gain=nm.param(np.ones(dim)),
        ln1_bias=nm.param(np.zeros(dim)),
        ffn_w1=uniform((d_ff, dim), dim),
        ffn_b1=nm.param(np.zeros(d_ff)),
        ffn_w2=uniform((dim, d_ff), d_ff),
        ffn_b2=nm.param(np.zeros(dim)),
        ln2_gain=nm.param(np.ones(dim)),
        ln2_bias=nm.param(np.zeros(dim)),
    )


def multihead_cross_attention(queries: Tensor, keys_values: Tensor, block: FusionBlockParams,
                              training: bool = False, rng: np.random.Generator | None = None,
                              dropout_rate: float = 0.1, eps: float = 1e-12,
                              return_weights: bool = False):
    """Encoder block: attention over keys_values, then FFN, post-norm."""
    if keys_values.data.shape[0] < 1:
        raise ContractError("attention requires at least one key/value row")
    if queries.data.shape[-1] != block.dim or keys_values.data.shape[-1] != block.dim:
        raise ShapeError(
            f"expected feature dim {block.dim}, got {queries.data.shape} and {keys_values.data.shape}")
    dh = block.dim // block.heads
    q = nm.einsum2("hod,ad->hao", block.wq, queries)
    k = nm.einsum2("hod,bd->hbo", block.wk, keys_values)
    v = nm.einsum2("hod,bd->hbo", block.wv, keys_values)
    scores = nm.einsum2("hao,hbo->hab", q, k) * (1.0 / np.sqrt(dh))
    attn = nm.softmax(scores, orderfree=True)
    ctx = nm.attn_combine(attn, v)                                   # (H, a, dh)
    merged = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (queries.data.shape[0], block.dim))
    proj = nm.einsum2("ad,od->ao", merged, block.wo)
    if training and dropout_rate > 0.0:
        proj = nm.dropout(proj, dropout_rate, rng)
    x1 = nm.layer_norm(queries + proj, block.ln1_gain, block.ln1_bias, eps)
    hidden = nm.relu(nm.einsum2("ad,fd->af", x1, block.ffn_w1) + block.ffn_b1)
    ff = nm.einsum2("af,of->ao", hidden, block.ffn_w2) + block.ffn_b2
    if training and dropout_rate > 0.0:
        ff = nm.dropout(ff, dropout_rate, rng)
    out = nm.layer_norm(x1 + ff, block.ln2_gain, block.ln2_bias, eps)
    if return_weights:
        return out, attn
    return out


@dataclass
class FusedFeatures:
    text: Tensor    # (n, d)
    visual: Tensor  # (r, d)


def fuse(h_text: Tensor, h_visual: Tensor, text_block: FusionBlockParams,
         visual_block: FusionBlockParams, training: bool = False,
         rng: np.random.Generator | None = None, dropout_rate: float = 0.1,
         eps: float = 1e-12) -> FusedFeatures:
    """Phrases attend over regions and regions over phrases, separately."""
    c_text = multihead_cross_attention(h_text, h_visual, text_block, training, rng,
                                       dropout_rate, eps)
    c_visual = multihead_cross_attention(h_visual, h_text, visual_block, training, rng,
                                         dropout_rate, eps)
    return FusedFeatures(c_text, c_visual)


def similarity_matrix(c_text: Tensor, c_visual: Tensor) -> Tensor:
    """S[i, j] = <text row i, visual row j>."""
    if c_text.data.shape[-1] != c_visual.data.shape[-1]:
        raise ShapeError(
            f"similarity needs matching dims, got {c_text.data.shape} and {c_visual.data.shape}")
    return nm.einsum2("id,jd->ij", c_text, c_visual)
