"""Backbone and full L-ViT forward pass."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor, as_tensor
from .blocks import d_cbam_forward, dat_se_forward, mlff_fuse, transformer_block_forward
from .params import AblationConfig, FeaturePyramid, LVitParams

# Tiles arrive in [0, 1]; shifting to [-0.5, 0.5] before the first conv keeps
# plain SGD from zig-zagging on all-positive inputs.
INPUT_CENTER = 0.5


def backbone_forward(tile, p: LVitParams) -> FeaturePyramid:
    """Centre the tile, then three stride-2 stages; each stage's output is a pyramid tap."""
    tile = as_tensor(tile)
    size = p.arch.tile_size
    if tile.shape[-3:] != (size, size, 3) or tile.ndim not in (3, 4):
        raise ValueError(f"tiles must be {size}x{size}x3, got {tile.shape}")
    taps = []
    h = nx.add(tile, -INPUT_CENTER)
    for stage in p.backbone:
        h = nx.relu(nx.conv2d(h, stage.k1, stage.b1, stride=2))
        h = nx.relu(nx.conv2d(h, stage.k2, stage.b2))
        taps.append(h)
    phi_l, phi_m, phi_h = taps
    return FeaturePyramid(phi_l, phi_m, phi_h)


def check_config(p: LVitParams, config: AblationConfig) -> None:
    missing = []
    if config.use_dat_se and p.se is None:
        missing.append("DAT-SE")
    if config.use_d_cbam and p.cbam is None:
        missing.append("D-CBAM")
    if config.use_mlff and p.mlff is None:
        missing.append("MLFF")
    if config.use_vtm and (p.embed is None or not p.vtm):
        missing.append("VTM")
    if config.use_vtm and config.linear_attention and any(b.attn.proj_e is None for b in p.vtm):
        missing.append("linear-attention projections")
    if missing:
        raise ValueError(f"configuration enables {', '.join(missing)} but parameters are absent")


def features(tile, p: LVitParams, config: AblationConfig) -> Tensor:
    """Pooled feature vector fed to the classifier head, ``(..., D)``."""
    check_config(p, config)
    pyr = backbone_forward(tile, p)
    top = pyr.phi_h
    if config.use_dat_se:
        top = dat_se_forward(top, p.se)
    if config.use_d_cbam:
        top = d_cbam_forward(top, p.cbam)
    if config.use_mlff:
        fmap = mlff_fuse(FeaturePyramid(pyr.phi_l, pyr.phi_m, top,
                                        p.mlff.proj_l, p.mlff.proj_m, p.mlff.proj_h))
    else:
        fmap = top
    lead = fmap.shape[:-3]
    tokens = nx.reshape(fmap, lead + (fmap.shape[-3] * fmap.shape[-2], fmap.shape[-1]))
    if config.use_vtm:
        tokens = nx.add(nx.dense(tokens, p.embed.w, p.embed.b), p.embed.pos)
        for blk in p.vtm:
            tokens = transformer_block_forward(tokens, blk, linear=config.linear_attention)
    return nx.mean(tokens, axis=-2)


def lvit_forward(tile, p: LVitParams, config: AblationConfig | None = None) -> Tensor:
    """Class probabilities for one ``32x32x3`` tile, or ``(N, 3)`` for a batch."""
    config = config or AblationConfig()
    logits = nx.dense(features(tile, p, config), p.head.w, p.head.b)
    return nx.softmax(logits)


def predict_proba(tiles: np.ndarray, p: LVitParams, config: AblationConfig,
                  batch_size: int = 256) -> np.ndarray:
    """Inference over an ``(N, 32, 32, 3)`` array in fixed-size chunks."""
    tiles = np.asarray(tiles, dtype=np.float64)
    out = [lvit_forward(tiles[i:i + batch_size], p, config).data
           for i in range(0, len(tiles), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, p.arch.n_classes))
