"""Multi-level vision transformer for 32x32 tile classification."""

from .blocks import (d_cbam_forward, dat_se_forward, ffn_forward, linear_attention_forward,
                     mhsa_forward, mlff_fuse, transformer_block_forward)
from .checkpoint import load_checkpoint, save_checkpoint
from .model import backbone_forward, features, lvit_forward, predict_proba
from .params import (AblationConfig, AttentionParams, CbamParams, FeaturePyramid, LVitArch,
                     LVitParams, SeBlockParams, TransformerBlockParams, init_params)

__all__ = [
    "AblationConfig", "AttentionParams", "CbamParams", "FeaturePyramid", "LVitArch",
    "LVitParams", "SeBlockParams", "TransformerBlockParams", "backbone_forward",
    "d_cbam_forward", "dat_se_forward", "features", "ffn_forward", "init_params",
    "linear_attention_forward", "load_checkpoint", "lvit_forward", "mhsa_forward",
    "mlff_fuse", "predict_proba", "save_checkpoint", "transformer_block_forward",
]
