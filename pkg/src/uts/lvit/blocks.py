"""Attention, fusion and transformer blocks of L-ViT.

Every block accepts a single map/sequence or a batch with a leading axis.
"""

from __future__ import annotations

import math

from .. import numerics as nx
from ..numerics import Tensor, as_tensor
from .params import (AttentionParams, CbamParams, FeaturePyramid, SeBlockParams,
                     TransformerBlockParams)


def _broadcast_channels(v: Tensor) -> Tensor:
    """``(..., C) -> (..., 1, 1, C)`` so it scales every pixel."""
    return nx.reshape(v, v.shape[:-1] + (1, 1, v.shape[-1]))


def _pooled_pair(x: Tensor) -> Tensor:
    return nx.concat([nx.spatial_pool_over_channels(x, "avg"),
                      nx.spatial_pool_over_channels(x, "max")], axis=-1)


def dat_se_forward(x, p: SeBlockParams) -> Tensor:
    """Squeeze-excitation channel weights times a pooled spatial map, both sigmoid-gated."""
    x = as_tensor(x)
    if x.shape[-1] != p.channels:
        raise ValueError(f"DAT-SE expects {p.channels} channels, got input {x.shape}")
    z = nx.global_pool(x, "avg")
    s = nx.sigmoid(nx.dense(nx.relu(nx.dense(z, p.w1)), p.w2))
    m_spatial = nx.sigmoid(nx.conv2d(_pooled_pair(x), p.spatial_kernel))
    return nx.mul(nx.mul(x, _broadcast_channels(s)), m_spatial)


def d_cbam_forward(x, p: CbamParams) -> Tensor:
    """CBAM with shared-weight GAP/GMP channel attention and a dilated spatial branch."""
    x = as_tensor(x)
    if x.shape[-1] != p.channels:
        raise ValueError(f"D-CBAM expects {p.channels} channels, got input {x.shape}")
    hidden = nx.add(nx.relu(nx.dense(nx.global_pool(x, "avg"), p.w1)),
                    nx.relu(nx.dense(nx.global_pool(x, "max"), p.w1)))
    m_c = nx.sigmoid(nx.dense(hidden, p.w0))
    m_s = nx.sigmoid(nx.conv2d(_pooled_pair(x), p.dilated_kernel, dilation=p.dilation))
    return nx.mul(nx.mul(x, _broadcast_channels(m_c)), m_s)


def mlff_fuse(pyr: FeaturePyramid) -> Tensor:
    """ReLU of the unit-weight sum of projected levels, pooled onto the coarsest grid."""
    maps = (pyr.phi_l, pyr.phi_m, pyr.phi_h)
    projs = (pyr.proj_l, pyr.proj_m, pyr.proj_h)
    target = pyr.phi_h.shape[-3]
    fused = []
    for phi, proj in zip(maps, projs):
        y = phi if proj is None else nx.conv2d(phi, proj)
        size = y.shape[-3]
        if size % target:
            raise ValueError(f"level of size {size} cannot pool onto a {target} grid")
        fused.append(nx.avg_pool2d(y, size // target))
    shapes = {f.shape for f in fused}
    if len(shapes) != 1:
        raise ValueError(f"projected pyramid levels disagree in shape: {sorted(shapes)}")
    return nx.relu(nx.add_n(*fused))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    t = nx.reshape(t, tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    return nx.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dk = t.shape
    k = len(lead)
    t = nx.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return nx.reshape(t, tuple(lead) + (n, h * dk))


def _attend(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams) -> Tensor:
    qh, kh, vh = (_split_heads(t, p.heads) for t in (q, k, v))
    scores = nx.scale(nx.matmul(qh, nx.transpose(kh, _swap_last(kh.ndim))), 1.0 / math.sqrt(p.head_dim))
    heads = nx.matmul(nx.softmax(scores), vh)
    return nx.dense(_merge_heads(heads), p.wo)


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def mhsa_forward(tokens, p: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product self-attention, ``(..., n, D) -> (..., n, D)``."""
    tokens = as_tensor(tokens)
    if tokens.shape[-1] != p.dim:
        raise ValueError(f"tokens {tokens.shape} do not match embedding dim {p.dim}")
    return _attend(nx.dense(tokens, p.wq), nx.dense(tokens, p.wk), nx.dense(tokens, p.wv), p)


def linear_attention_forward(tokens, p: AttentionParams) -> Tensor:
    """Self-attention against keys/values compressed along the token axis to ``r_lin`` rows."""
    tokens = as_tensor(tokens)
    if p.proj_e is None:
        raise ValueError("linear attention needs proj_e / proj_f")
    n = tokens.shape[-2]
    if p.proj_e.shape[0] != n:
        raise ValueError(f"projection {p.proj_e.shape} does not match sequence length {n}")
    if tokens.shape[-1] != p.dim:
        raise ValueError(f"tokens {tokens.shape} do not match embedding dim {p.dim}")
    e_t = nx.transpose(p.proj_e, (1, 0))
    f_t = nx.transpose(p.proj_f, (1, 0))
    k_small = nx.matmul(e_t, nx.dense(tokens, p.wk))
    v_small = nx.matmul(f_t, nx.dense(tokens, p.wv))
    return _attend(nx.dense(tokens, p.wq), k_small, v_small, p)


def ffn_forward(tokens, blk: TransformerBlockParams) -> Tensor:
    return nx.dense(nx.relu(nx.dense(tokens, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2)


def transformer_block_forward(tokens, blk: TransformerBlockParams, linear: bool = False) -> Tensor:
    """``LayerNorm(X + attention(X) + FFN(X))``."""
    tokens = as_tensor(tokens)
    attend = linear_attention_forward if linear else mhsa_forward
    mixed = nx.add_n(tokens, attend(tokens, blk.attn), ffn_forward(tokens, blk))
    return nx.layer_norm(mixed, blk.ln_gamma, blk.ln_beta)
