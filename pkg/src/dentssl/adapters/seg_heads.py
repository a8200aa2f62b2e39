"""Dense-prediction heads over frozen backbone tokens: a linear 2D
segmentation head and a UNETR-style 3D decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidInputError

SEG_TAP_COUNT = 4


def unetr_layer_taps(blocks: int) -> tuple[int, ...]:
    """Tap depths {(1+j) * L/4 : j in 0..3} for an L-block backbone."""
    if blocks % 4 != 0:
        raise InvalidInputError(f"block count {blocks} is not divisible by 4")
    step = blocks // 4
    return tuple(step * (1 + j) for j in range(4))


def tokens_to_map(tokens: torch.Tensor, grid_dims: tuple[int, ...]) -> torch.Tensor:
    """(B, N, K) tokens -> (B, K, *grid_dims) feature map."""
    b, n, k = tokens.shape
    expected = 1
    for g in grid_dims:
        expected *= g
    if n != expected:
        raise InvalidInputError(f"token count {n} != prod(grid_dims) {expected}")
    return tokens.transpose(1, 2).reshape(b, k, *grid_dims)


class LinearSegHead2D(nn.Module):
    """Concatenate the last-four-layer patch tokens (interpolated to the
    output resolution), batch-normalize, and map 1x1 to class logits."""

    def __init__(self, embed_dim: int, classes: int, taps: int = SEG_TAP_COUNT):
        super().__init__()
        self.taps = taps
        self.bn = nn.BatchNorm2d(embed_dim * taps)
        self.out = nn.Conv2d(embed_dim * taps, classes, kernel_size=1)

    def forward(self, token_grids: list[torch.Tensor], grid_dims: tuple[int, int], out_size: tuple[int, int]) -> torch.Tensor:
        if len(token_grids) != self.taps:
            raise InvalidInputError(f"expected {self.taps} layer tap(s), got {len(token_grids)}")
        maps = [
            F.interpolate(tokens_to_map(t, grid_dims), size=out_size, mode="bilinear", align_corners=False)
            for t in token_grids
        ]
        return self.out(self.bn(torch.cat(maps, dim=1)))


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, padding=1),
        nn.InstanceNorm3d(cout),
        nn.LeakyReLU(inplace=True),
        nn.Conv3d(cout, cout, kernel_size=3, padding=1),
        nn.InstanceNorm3d(cout),
        nn.LeakyReLU(inplace=True),
    )


class _SkipProjection(nn.Module):
    """Project a token map to the target width through `ups` deconv stages."""

    def __init__(self, embed_dim: int, width: int, ups: int):
        super().__init__()
        layers: list[nn.Module] = []
        cin = embed_dim
        for _ in range(ups):
            layers.append(nn.ConvTranspose3d(cin, width, kernel_size=2, stride=2))
            layers.append(_conv_block(width, width))
            cin = width
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class UNETRHead3D(nn.Module):
    """UNETR-style decoder over four equally spaced transformer taps.

    Token grids sit at 1/P resolution; the decoder deconvolves stage by
    stage with skip pathways projected from the shallower taps, ending at
    the input resolution. Channel widths follow the halving schedule
    (full-resolution width `feature_size`, doubled per depth).
    """

    def __init__(self, embed_dim: int, classes: int, patch_size: int, feature_size: int = 16):
        super().__init__()
        stages = int(math.log2(patch_size))
        if 2**stages != patch_size:
            raise InvalidInputError(f"patch size {patch_size} must be a power of 2")
        self.patch_size = patch_size
        self.stages = stages
        widths = [feature_size * (2**j) for j in range(stages)]  # width at 1/2^j

        self.skips = nn.ModuleDict()
        self.decoders = nn.ModuleList()
        cur = embed_dim
        n_skips = min(3, stages)  # shallower taps z3, z2, z1, deepest first
        for step, j in enumerate(range(stages - 1, -1, -1)):
            self.decoders.append(nn.ConvTranspose3d(cur, widths[j], kernel_size=2, stride=2))
            if step < n_skips:
                self.skips[str(step)] = _SkipProjection(embed_dim, widths[j], ups=step + 1)
                self.decoders.append(_conv_block(2 * widths[j], widths[j]))
            else:
                self.decoders.append(_conv_block(widths[j], widths[j]))
            cur = widths[j]
        self.out = nn.Conv3d(widths[0], classes, kernel_size=1)

    def forward(self, token_grids: list[torch.Tensor], grid_dims: tuple[int, int, int], out_dims: tuple[int, int, int]) -> torch.Tensor:
        if len(token_grids) != SEG_TAP_COUNT:
            raise InvalidInputError(f"expected {SEG_TAP_COUNT} layer taps, got {len(token_grids)}")
        expect = tuple(g * self.patch_size for g in grid_dims)
        if expect != tuple(out_dims):
            raise InvalidInputError(f"output dims {out_dims} not reconstructible from grid {grid_dims} x patch {self.patch_size}")
        maps = [tokens_to_map(t, grid_dims) for t in token_grids]
        x = maps[3]
        for step in range(self.stages):
            x = self.decoders[2 * step](x)
            if str(step) in self.skips:
                x = torch.cat([x, self.skips[str(step)](maps[2 - step])], dim=1)
            x = self.decoders[2 * step + 1](x)
        return self.out(x)
