"""Plain vision transformer with interchangeable 2D/3D patch tokenizers.

Pre-norm blocks with SwiGLU FFNs and stochastic depth, a learnable [CLS]
token, learned positional embeddings interpolated to the input grid, an
optional mask-token substitution path, and per-layer feature taps.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, InvalidInputError, NumericError

# variant -> (embed_dim, heads, blocks)
VARIANTS = {
    "B": (768, 12, 12),
    "L": (1024, 16, 24),
    "G": (1536, 24, 40),
}

PATCH_SIZE_2D = 14
PATCH_SIZE_3D = 16
BASE_SIZE_2D = 224  # global-crop edge fixing the positional-embedding grid
BASE_SIZE_3D = 96


@dataclass(frozen=True)
class BackboneConfig:
    variant: str
    embed_dim: int
    heads: int
    blocks: int
    patch_size: int
    input_rank: str = "2d"  # "2d" | "3d"
    drop_path_rate: float = 0.0
    in_channels: int = 1
    base_size: int = BASE_SIZE_2D

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise InvalidInputError("embed_dim must be divisible by heads")
        if self.patch_size < 1:
            raise InvalidInputError("patch_size must be positive")
        if self.input_rank not in ("2d", "3d"):
            raise InvalidInputError(f"input_rank must be '2d' or '3d', got {self.input_rank!r}")
        if self.base_size % self.patch_size != 0:
            raise InvalidInputError("base_size must be a patch-size multiple")

    @property
    def ndim(self) -> int:
        return 2 if self.input_rank == "2d" else 3

    @property
    def base_grid(self) -> tuple[int, ...]:
        return (self.base_size // self.patch_size,) * self.ndim


def make_variant(name: str, input_rank: str = "2d", drop_path_rate: float = 0.0) -> BackboneConfig:
    """Config for a named variant: B=(768,12,12), L=(1024,16,24), G=(1536,24,40)."""
    if name not in VARIANTS:
        raise InvalidInputError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    dim, heads, blocks = VARIANTS[name]
    patch = PATCH_SIZE_2D if input_rank == "2d" else PATCH_SIZE_3D
    base = BASE_SIZE_2D if input_rank == "2d" else BASE_SIZE_3D
    return BackboneConfig(
        variant=name,
        embed_dim=dim,
        heads=heads,
        blocks=blocks,
        patch_size=patch,
        input_rank=input_rank,
        drop_path_rate=drop_path_rate,
        base_size=base,
    )


def swiglu_hidden(embed_dim: int, heads: int) -> int:
    """FFN hidden width: 4*dim*(2/3) rounded to a multiple of the head count."""
    return max(1, round(embed_dim * 8 / 3 / heads)) * heads


@dataclass
class TokenSequence:
    cls: torch.Tensor       # (B, K)
    patches: torch.Tensor   # (B, N, K)
    grid_dims: tuple[int, ...]

    def __post_init__(self):
        n = 1
        for g in self.grid_dims:
            n *= g
        if self.patches.shape[-2] != n:
            raise InvalidInputError(
                f"patch count {self.patches.shape[-2]} != prod(grid_dims) {n}"
            )


@dataclass
class LayerFeatures:
    """Per-block token sequences (through the shared output LayerNorm) plus
    the final block's per-head attention weights."""

    layers: list[TokenSequence]
    attention: torch.Tensor  # (B, heads, 1+N, 1+N)
    attentions: list[torch.Tensor] | None = None  # all layers, on request

    @property
    def final(self) -> TokenSequence:
        return self.layers[-1]


class DropPath(nn.Module):
    """Per-sample residual-branch drop (stochastic depth)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = torch.empty(shape, dtype=x.dtype, device=x.device).bernoulli_(keep)
        return x * mask / keep


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Linear(dim, hidden)
        self.w2 = nn.Linear(dim, hidden)
        self.w3 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.w3(F.silu(self.w1(x)) * self.w2(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, k = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, key, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ key.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, k)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, drop_path: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = SwiGLU(dim, swiglu_hidden(dim, heads))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        attn_out, attn = self.attn(self.norm1(x))
        x = x + self.drop_path(attn_out)
        x = x + self.drop_path(self.ffn(self.norm2(x)))
        return x, attn


def interpolate_pos_embed(
    table: torch.Tensor,
    base_grid: tuple[int, ...],
    target_grid: tuple[int, ...],
) -> torch.Tensor:
    """Resample a positional table (1, 1+N, K) from base_grid to target_grid.

    Patch positions are resampled bilinearly/trilinearly (align_corners, so
    linear ramps are preserved); the leading CLS slot is untouched.
    """
    if len(base_grid) != len(target_grid):
        raise InvalidInputError(f"grid rank mismatch: {base_grid} vs {target_grid}")
    if tuple(base_grid) == tuple(target_grid):
        return table
    k = table.shape[-1]
    cls_pos = table[:, :1]
    patch_pos = table[:, 1:].reshape(1, *base_grid, k)
    # channels-first for F.interpolate
    perm = (0, len(base_grid) + 1) + tuple(range(1, len(base_grid) + 1))
    patch_pos = patch_pos.permute(perm)
    mode = "bilinear" if len(base_grid) == 2 else "trilinear"
    resized = F.interpolate(patch_pos, size=tuple(target_grid), mode=mode, align_corners=True)
    inv = (0,) + tuple(range(2, len(base_grid) + 2)) + (1,)
    resized = resized.permute(inv).reshape(1, -1, k)
    return torch.cat([cls_pos, resized], dim=1)


def resize_to_patch_multiple(x: torch.Tensor, patch: int) -> torch.Tensor:
    """Resize (B, C, *spatial) so every spatial dim is a positive patch multiple."""
    spatial = x.shape[2:]
    target = tuple(max(patch, round(s / patch) * patch) for s in spatial)
    if tuple(spatial) == target:
        return x
    mode = "bilinear" if len(spatial) == 2 else "trilinear"
    return F.interpolate(x, size=target, mode=mode, align_corners=False)


class VisionTransformer(nn.Module):
    """ViT over 2D images or 3D volumes with per-layer feature taps."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        conv = nn.Conv2d if cfg.ndim == 2 else nn.Conv3d
        self.patch_embed = conv(cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        n_base = 1
        for g in cfg.base_grid:
            n_base *= g
        self.pos_embed = nn.Parameter(torch.zeros(1, n_base + 1, cfg.embed_dim))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.mask_token = nn.Parameter(torch.zeros(1, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.drop_path_rate) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def grid_of(self, x: torch.Tensor) -> tuple[int, ...]:
        patch = self.cfg.patch_size
        grid = []
        for ax, s in enumerate(x.shape[2:]):
            if s % patch != 0:
                raise InvalidInputError(f"spatial axis {ax} has extent {s}, not a multiple of patch {patch}")
            grid.append(s // patch)
        return tuple(grid)

    def embed(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, tuple[int, ...]]:
        """Patchify + mask-token substitution + positional embedding + CLS.

        `x` is (B, C, *spatial) with patch-multiple dims; `mask` is a (B, N)
        or (N,) boolean tensor selecting patch tokens to replace with the
        learned mask embedding before block 1.
        """
        grid = self.grid_of(x)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, N, K)
        if mask is not None:
            mask = mask.reshape(-1, tokens.shape[1]) if mask.ndim > 1 else mask.reshape(1, -1)
            tokens = torch.where(mask.unsqueeze(-1), self.mask_token.to(tokens.dtype), tokens)
        pos = interpolate_pos_embed(self.pos_embed, self.cfg.base_grid, grid)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + pos
        return tokens, grid

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        resize: bool = True,
        keep_all_attention: bool = False,
    ) -> LayerFeatures:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in backbone input")
        if resize:
            x = resize_to_patch_multiple(x, self.cfg.patch_size)
        tokens, grid = self.embed(x, mask=mask)
        layers = []
        attentions = [] if keep_all_attention else None
        attn = None
        for block in self.blocks:
            tokens, attn = block(tokens)
            normed = self.norm(tokens)
            layers.append(TokenSequence(cls=normed[:, 0], patches=normed[:, 1:], grid_dims=grid))
            if attentions is not None:
                attentions.append(attn)
        return LayerFeatures(layers=layers, attention=attn, attentions=attentions)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the canonical parameter table; detects any mutation."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


CHECKPOINT_FORMAT = "dentssl-ckpt-v1"


def save_checkpoint(path: str | Path, model: VisionTransformer, iteration: int = 0, extra: dict | None = None) -> None:
    """Serialize the parameter table keyed by canonical layer names plus metadata."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": {
            "config": asdict(model.cfg),
            "variant": model.cfg.variant,
            "patch_size": model.cfg.patch_size,
            "input_rank": model.cfg.input_rank,
            "iteration": int(iteration),
        },
        "params": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[VisionTransformer, dict]:
    """Rebuild a backbone from a checkpoint; round-trip is bit-exact."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} container")
    cfg = BackboneConfig(**payload["meta"]["config"])
    model = VisionTransformer(cfg)
    dtype = next(iter(payload["params"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["params"])
    return model, payload["meta"]
