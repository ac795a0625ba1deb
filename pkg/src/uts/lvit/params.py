"""Parameter records for L-ViT and their seeded initialisation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Tensor


@dataclass(frozen=True)
class AblationConfig:
    """Which optional blocks run on top of the backbone."""

    use_vtm: bool = True
    use_dat_se: bool = True
    use_d_cbam: bool = True
    use_mlff: bool = True
    linear_attention: bool = False

    PRESETS = ("backbone", "vtm", "vtm_datse", "all")

    @classmethod
    def preset(cls, name: str, linear_attention: bool = False) -> "AblationConfig":
        """Named ablation rows: ``backbone``, ``vtm``, ``vtm_datse``, ``all``."""
        table = {
            "backbone": (False, False, False, False),
            "vtm": (True, False, False, False),
            "vtm_datse": (True, True, False, False),
            "all": (True, True, True, True),
        }
        if name not in table:
            raise ValueError(f"unknown configuration {name!r}; choose from {sorted(table)}")
        vtm, se, cbam, mlff = table[name]
        return cls(vtm, se, cbam, mlff, linear_attention)

    @property
    def label(self) -> str:
        for name in self.PRESETS:
            if AblationConfig.preset(name, self.linear_attention) == self:
                return name
        return "custom"


@dataclass(frozen=True)
class LVitArch:
    """Fixed architecture hyper-parameters."""

    tile_size: int = 32
    channels: tuple[int, int, int] = (16, 32, 64)
    se_reduction: int = 8
    se_kernel: int = 7
    cbam_reduction: int = 8
    cbam_kernel: int = 7
    cbam_dilation: int = 2
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    ffn_hidden: int = 128
    linear_rank: int = 8
    n_classes: int = 3

    @property
    def grid(self) -> int:
        return self.tile_size // 8

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class ConvStage:
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor


@dataclass
class SeBlockParams:
    w1: Tensor
    w2: Tensor
    spatial_kernel: Tensor
    reduction: int = 8

    def __post_init__(self):
        c = self.w1.shape[0]
        if c % self.reduction or self.w1.shape != (c, c // self.reduction):
            raise ValueError(f"w1 {self.w1.shape} inconsistent with reduction {self.reduction}")
        if self.w2.shape != (c // self.reduction, c):
            raise ValueError(f"w2 {self.w2.shape} does not invert w1 {self.w1.shape}")
        if self.spatial_kernel.ndim != 4 or self.spatial_kernel.shape[2:] != (2, 1):
            raise ValueError("spatial kernel must be k x k x 2 x 1")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]


@dataclass
class CbamParams:
    w0: Tensor
    w1: Tensor
    dilated_kernel: Tensor
    dilation: int = 2

    def __post_init__(self):
        c, hidden = self.w1.shape
        if self.w0.shape != (hidden, c):
            raise ValueError(f"w0 {self.w0.shape} does not invert w1 {self.w1.shape}")
        if self.dilated_kernel.ndim != 4 or self.dilated_kernel.shape[2:] != (2, 1):
            raise ValueError("dilated kernel must be k x k x 2 x 1")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    proj_e: Tensor | None = None
    proj_f: Tensor | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"embedding dim {d} is not divisible by {self.heads} heads")
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise ValueError(f"attention weight {w.shape} is not {d}x{d}")
        if (self.proj_e is None) != (self.proj_f is None):
            raise ValueError("proj_e and proj_f must be given together")
        if self.proj_e is not None:
            n, r = self.proj_e.shape
            if self.proj_f.shape != (n, r) or r > n:
                raise ValueError(f"projections {self.proj_e.shape}/{self.proj_f.shape} need r_lin <= n")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class TransformerBlockParams:
    attn: AttentionParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class MlffParams:
    """1x1 projections taking each pyramid level to the common width."""

    proj_l: Tensor
    proj_m: Tensor
    proj_h: Tensor


@dataclass
class FeaturePyramid:
    phi_l: Tensor
    phi_m: Tensor
    phi_h: Tensor
    proj_l: Tensor | None = None
    proj_m: Tensor | None = None
    proj_h: Tensor | None = None


@dataclass
class TokenEmbedding:
    w: Tensor
    b: Tensor
    pos: Tensor


@dataclass
class Head:
    w: Tensor
    b: Tensor


@dataclass
class LVitParams:
    backbone: list[ConvStage]
    head: Head
    arch: LVitArch = field(default_factory=LVitArch)
    se: SeBlockParams | None = None
    cbam: CbamParams | None = None
    mlff: MlffParams | None = None
    embed: TokenEmbedding | None = None
    vtm: list[TransformerBlockParams] = field(default_factory=list)

    def named_parameters(self) -> dict[str, Tensor]:
        return named_tensors(self)

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested parameter records into ``{"a.b.0.c": Tensor}`` in field order."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}.{i}" if prefix else str(i)))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, LVitArch):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                out.update(named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name))
    return out


class _Init:
    """Glorot-uniform weights, zero biases, drawn in a fixed order from one seed."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def weight(self, shape, fan_in: int, fan_out: int, name: str) -> Tensor:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(self.rng.uniform(-a, a, size=shape), name)

    def dense(self, n_in: int, n_out: int, name: str) -> Tensor:
        return self.weight((n_in, n_out), n_in, n_out, name)

    def conv(self, k: int, cin: int, cout: int, name: str) -> Tensor:
        return self.weight((k, k, cin, cout), k * k * cin, k * k * cout, name)

    @staticmethod
    def zeros(shape, name: str) -> Tensor:
        return Tensor(np.zeros(shape), name)


def init_params(config: AblationConfig | None = None, seed: int = 0,
                arch: LVitArch | None = None) -> LVitParams:
    """Build parameters for every block ``config`` enables."""
    config = config or AblationConfig()
    arch = arch or LVitArch()
    ini = _Init(seed)
    backbone = []
    cin = 3
    for s, c in enumerate(arch.channels):
        backbone.append(ConvStage(
            k1=ini.conv(3, cin, c, f"backbone.{s}.k1"), b1=ini.zeros(c, f"backbone.{s}.b1"),
            k2=ini.conv(3, c, c, f"backbone.{s}.k2"), b2=ini.zeros(c, f"backbone.{s}.b2"),
        ))
        cin = c
    top = arch.channels[-1]
    d = arch.embed_dim
    params = LVitParams(backbone=backbone, head=Head(ini.dense(d, arch.n_classes, "head.w"),
                                                     ini.zeros(arch.n_classes, "head.b")),
                        arch=arch)
    if config.use_dat_se:
        hidden = top // arch.se_reduction
        params.se = SeBlockParams(
            w1=ini.dense(top, hidden, "se.w1"), w2=ini.dense(hidden, top, "se.w2"),
            spatial_kernel=ini.conv(arch.se_kernel, 2, 1, "se.spatial_kernel"),
            reduction=arch.se_reduction)
    if config.use_d_cbam:
        hidden = top // arch.cbam_reduction
        params.cbam = CbamParams(
            w0=ini.dense(hidden, top, "cbam.w0"), w1=ini.dense(top, hidden, "cbam.w1"),
            dilated_kernel=ini.conv(arch.cbam_kernel, 2, 1, "cbam.dilated_kernel"),
            dilation=arch.cbam_dilation)
    if config.use_mlff:
        c_l, c_m, c_h = arch.channels
        params.mlff = MlffParams(proj_l=ini.conv(1, c_l, top, "mlff.proj_l"),
                                 proj_m=ini.conv(1, c_m, top, "mlff.proj_m"),
                                 proj_h=ini.conv(1, c_h, top, "mlff.proj_h"))
    if config.use_vtm:
        n = arch.n_tokens
        params.embed = TokenEmbedding(w=ini.dense(top, d, "embed.w"), b=ini.zeros(d, "embed.b"),
                                      pos=ini.weight((n, d), n, d, "embed.pos"))
        for i in range(arch.depth):
            p = f"vtm.{i}"
            attn = AttentionParams(
                wq=ini.dense(d, d, f"{p}.attn.wq"), wk=ini.dense(d, d, f"{p}.attn.wk"),
                wv=ini.dense(d, d, f"{p}.attn.wv"), wo=ini.dense(d, d, f"{p}.attn.wo"),
                heads=arch.heads)
            if config.linear_attention:
                attn.proj_e = ini.dense(n, arch.linear_rank, f"{p}.attn.proj_e")
                attn.proj_f = ini.dense(n, arch.linear_rank, f"{p}.attn.proj_f")
                attn.__post_init__()
            params.vtm.append(TransformerBlockParams(
                attn=attn,
                ffn_w1=ini.dense(d, arch.ffn_hidden, f"{p}.ffn_w1"),
                ffn_b1=ini.zeros(arch.ffn_hidden, f"{p}.ffn_b1"),
                ffn_w2=ini.dense(arch.ffn_hidden, d, f"{p}.ffn_w2"),
                ffn_b2=ini.zeros(d, f"{p}.ffn_b2"),
                ln_gamma=Tensor(np.ones(d), f"{p}.ln_gamma"),
                ln_beta=ini.zeros(d, f"{p}.ln_beta"),
            ))
    return params
