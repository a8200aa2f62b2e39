"""Spatial-prior adapter for dense prediction over a frozen backbone.

A stride-2 convolution stack (the spatial prior module) produces a
1/8-1/16-1/32 feature pyramid whose flattened tokens interact with the
transformer tokens through residual cross-attention: an injector writes
spatial detail into the ViT stream (scaled by a zero-initialized gamma, so
the adapter starts as an identity), and an extractor pulls the updated ViT
features back into the pyramid tokens, followed by an FFN residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..backbone import VisionTransformer
from ..errors import InvalidInputError
from .seg_heads import unetr_layer_taps

SPM_STRIDES = (8, 16, 32)
INTERACTION_BLOCKS = 4


def spm_token_count(dims: tuple[int, ...]) -> int:
    """Closed-form pyramid token count: sum over strides s of prod(dims/s)."""
    total = 0
    for s in SPM_STRIDES:
        n = 1
        for d in dims:
            if d % s != 0:
                raise InvalidInputError(f"dim {d} not divisible by stride {s}")
            n *= d // s
        total += n
    return total


@dataclass
class FeaturePyramid:
    f1: torch.Tensor  # (B, K, *dims/8)
    f2: torch.Tensor  # (B, K, *dims/16)
    f3: torch.Tensor  # (B, K, *dims/32)

    @property
    def tokens(self) -> torch.Tensor:
        """Levels flattened to spatial tokens and concatenated: (B, N, K)."""
        flat = [lvl.flatten(2).transpose(1, 2) for lvl in (self.f1, self.f2, self.f3)]
        return torch.cat(flat, dim=1)

    @property
    def level_counts(self) -> tuple[int, int, int]:
        return tuple(int(lvl.flatten(2).shape[-1]) for lvl in (self.f1, self.f2, self.f3))


def _spm_stage(conv_cls, cin: int, cout: int) -> nn.Sequential:
    conv = conv_cls(cin, cout, kernel_size=3, stride=2, padding=1)
    nn.init.zeros_(conv.bias)  # zero input stays a zero pyramid
    return nn.Sequential(conv, nn.GroupNorm(1, cout), nn.GELU())


class SpatialPriorModule(nn.Module):
    """Stride-2 3x3 convolution stack producing K-channel maps at 1/8, 1/16,
    and 1/32 of the input resolution (3x3x3 convolutions in the 3D variant)."""

    def __init__(self, embed_dim: int, ndim: int = 2, in_channels: int = 1):
        super().__init__()
        if ndim == 2:
            conv_cls = nn.Conv2d
        elif ndim == 3:
            conv_cls = nn.Conv3d
        else:
            raise InvalidInputError("ndim must be 2 or 3")
        self.ndim = ndim
        c4, c2 = max(1, embed_dim // 4), max(1, embed_dim // 2)
        self.stem = nn.Sequential(
            _spm_stage(conv_cls, in_channels, c4),  # 1/2
            _spm_stage(conv_cls, c4, c2),           # 1/4
        )
        self.level1 = _spm_stage(conv_cls, c2, embed_dim)         # 1/8
        self.level2 = _spm_stage(conv_cls, embed_dim, embed_dim)  # 1/16
        self.level3 = _spm_stage(conv_cls, embed_dim, embed_dim)  # 1/32

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        for ax, d in enumerate(x.shape[2:]):
            if d % SPM_STRIDES[-1] != 0:
                raise InvalidInputError(f"spatial axis {ax} has extent {d}, not divisible by {SPM_STRIDES[-1]}")
        f1 = self.level1(self.stem(x))
        f2 = self.level2(f1)
        f3 = self.level3(f2)
        return FeaturePyramid(f1=f1, f2=f2, f3=f3)


class CrossAttention(nn.Module):
    """Standard multi-head cross-attention (query from one stream, key/value
    from the other)."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise InvalidInputError("dim must be divisible by heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != kv.shape[-1]:
            raise InvalidInputError("query/kv feature dims disagree")
        b, nq, d = query.shape
        nk = kv.shape[1]
        q = self.q(query).reshape(b, nq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(kv).reshape(b, nk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(kv).reshape(b, nk, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)


class Injector(nn.Module):
    """F_vit + gamma * Attention(norm(F_vit), norm(F_sp)); gamma starts at 0,
    so the injector is exactly the identity at initialization."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.norm_query = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, f_vit: torch.Tensor, f_sp: torch.Tensor) -> torch.Tensor:
        return f_vit + self.gamma * self.attn(self.norm_query(f_vit), self.norm_kv(f_sp))


class Extractor(nn.Module):
    """Pyramid-token update: cross-attention residual (F_sp queries the ViT
    features) followed by an FFN residual."""

    def __init__(self, dim: int, heads: int = 4, ffn_ratio: float = 0.25):
        super().__init__()
        hidden = max(1, int(dim * ffn_ratio))
        self.norm_query = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, f_sp: torch.Tensor, f_vit: torch.Tensor) -> torch.Tensor:
        f_sp = f_sp + self.attn(self.norm_query(f_sp), self.norm_kv(f_vit))
        return f_sp + self.ffn(self.norm_ffn(f_sp))


class ViTAdapter(nn.Module):
    """Backbone with spatial-prior interactions at the four tap depths.

    Returns the four tap-level token sequences (through the backbone's
    output norm) and the updated feature pyramid. The wrapped backbone is
    frozen; only adapter parameters train.
    """

    def __init__(self, backbone: VisionTransformer, heads: int = 4, freeze_backbone: bool = True):
        super().__init__()
        self.backbone = backbone
        if freeze_backbone:
            for p in backbone.parameters():
                p.requires_grad_(False)
        dim = backbone.cfg.embed_dim
        self.taps = unetr_layer_taps(backbone.cfg.blocks)
        self.spm = SpatialPriorModule(dim, ndim=backbone.cfg.ndim, in_channels=backbone.cfg.in_channels)
        self.injectors = nn.ModuleList(Injector(dim, heads) for _ in range(INTERACTION_BLOCKS))
        self.extractors = nn.ModuleList(Extractor(dim, heads) for _ in range(INTERACTION_BLOCKS))

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], FeaturePyramid]:
        pyramid = self.spm(x)
        f_sp = pyramid.tokens
        tokens, grid = self.backbone.embed(x)
        features = []
        start = 0
        for i, tap in enumerate(self.taps):
            cls, patches = tokens[:, :1], tokens[:, 1:]
            patches = self.injectors[i](patches, f_sp)
            tokens = torch.cat([cls, patches], dim=1)
            for block in self.backbone.blocks[start:tap]:
                tokens, _ = block(tokens)
            f_sp = self.extractors[i](f_sp, tokens[:, 1:])
            features.append(self.backbone.norm(tokens))
            start = tap
        counts = pyramid.level_counts
        split = torch.split(f_sp, list(counts), dim=1)
        shaped = []
        for lvl, ref in zip(split, (pyramid.f1, pyramid.f2, pyramid.f3)):
            shaped.append(lvl.transpose(1, 2).reshape(ref.shape))
        return features, FeaturePyramid(f1=shaped[0], f2=shaped[1], f3=shaped[2])
