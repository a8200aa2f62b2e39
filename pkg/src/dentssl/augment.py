"""Multi-crop view generation, blockwise masking, and 3D photometric transforms.

All augmentations are deterministic functions of (input, seed): every
sampling decision flows through a caller-supplied numpy Generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .radprep import RadImage, VolumeGrid

MASK_RATIO_RANGE = (0.1, 0.5)
MIN_MASK_BLOCK = 4


@dataclass(frozen=True)
class ViewConfig2D:
    global_size: int = 224
    global_count: int = 2
    local_size: int = 98
    local_count: int = 8
    global_scale: tuple[float, float] = (0.32, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.32)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    value_max: float = 255.0


@dataclass(frozen=True)
class ViewConfig3D:
    global_size: int = 96
    global_count: int = 2
    local_size: int = 48
    local_count: int = 8
    global_scale: tuple[float, float] = (0.32, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.32)
    aspect_jitter: float = 0.3  # per-axis log-scale edge jitter
    flip_prob: float = 0.5      # independent per axis
    gamma_range: tuple[float, float] = (0.7, 1.4)
    window_jitter: float = 0.1


@dataclass
class MaskSpec:
    grid_dims: tuple[int, ...]
    masked: np.ndarray  # boolean grid
    blocks: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return float(self.masked.sum()) / self.masked.size

    def flat(self) -> np.ndarray:
        return self.masked.reshape(-1)


@dataclass
class ViewSet:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    source_id: str = ""
    masks: list[MaskSpec] | None = None  # one per masked student global view


def as_rng(rng: np.random.Generator | int) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _resize(arr: np.ndarray, size: tuple[int, ...]) -> np.ndarray:
    if arr.shape == size:
        return arr.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
    mode = "bilinear" if arr.ndim == 2 else "trilinear"
    out = F.interpolate(t, size=size, mode=mode, align_corners=False)
    return out[0, 0].numpy()


def _sample_crop_box_2d(shape, scale_range, aspect_range, rng):
    h, w = shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale_range)
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
        cw = max(1, round(math.sqrt(target * aspect)))
        ch = max(1, round(math.sqrt(target / aspect)))
        if cw <= w and ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def _jitter_2d(view: np.ndarray, cfg: ViewConfig2D, rng) -> np.ndarray:
    out = view
    if cfg.brightness > 0:
        out = out * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
    if cfg.contrast > 0:
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        m = out.mean()
        out = m + (out - m) * c
    if cfg.brightness > 0 or cfg.contrast > 0:
        out = np.clip(out, 0.0, cfg.value_max)
    return out.astype(np.float32, copy=False)


def _make_view_2d(px: np.ndarray, size: int, scale_range, cfg: ViewConfig2D, rng) -> np.ndarray:
    top, left, ch, cw = _sample_crop_box_2d(px.shape, scale_range, cfg.aspect_range, rng)
    crop = px[top : top + ch, left : left + cw]
    view = _resize(crop, (size, size))
    if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
        view = view[:, ::-1].copy()
    return _jitter_2d(view, cfg, rng)


def make_views_2d(img: RadImage, rng: np.random.Generator | int, cfg: ViewConfig2D = ViewConfig2D()) -> ViewSet:
    """Multi-crop for a 2D radiograph: global and local random-resized crops
    with horizontal flip and photometric jitter."""
    rng = as_rng(rng)
    px = img.pixels.astype(np.float32, copy=False)
    g = [_make_view_2d(px, cfg.global_size, cfg.global_scale, cfg, rng) for _ in range(cfg.global_count)]
    l = [_make_view_2d(px, cfg.local_size, cfg.local_scale, cfg, rng) for _ in range(cfg.local_count)]
    return ViewSet(global_views=g, local_views=l, source_id=img.source_id)


def apply_gamma_window(x: np.ndarray, gamma: float, window_lo: float, window_hi: float) -> np.ndarray:
    """Deterministic core of 3D contrast enhancement: power-law remap then
    re-windowing; input and output live in [0, 1]."""
    if not window_hi > window_lo:
        raise InvalidInputError("window_hi must exceed window_lo")
    out = np.clip(x, 0.0, 1.0) ** gamma
    out = (out - window_lo) / (window_hi - window_lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def contrast_enhance_3d(crop: np.ndarray, rng: np.random.Generator | int, cfg: ViewConfig3D = ViewConfig3D()) -> np.ndarray:
    """Random gamma in cfg.gamma_range plus a random intensity window."""
    rng = as_rng(rng)
    gamma = rng.uniform(*cfg.gamma_range)
    lo = rng.uniform(0.0, cfg.window_jitter)
    hi = rng.uniform(1.0 - cfg.window_jitter, 1.0)
    return apply_gamma_window(crop, gamma, lo, hi)


def _sample_crop_box_3d(shape, scale_range, jitter, rng):
    scale = rng.uniform(*scale_range)
    base = scale ** (1.0 / 3.0)
    logs = rng.uniform(-jitter, jitter, size=3)
    logs -= logs.mean()  # keep the sampled volume fraction
    sizes, corners = [], []
    for ax, extent in enumerate(shape):
        s = int(round(base * math.exp(logs[ax]) * extent))
        s = min(max(1, s), extent)
        sizes.append(s)
        corners.append(int(rng.integers(0, extent - s + 1)))
    return tuple(corners), tuple(sizes)


def _make_view_3d(vox: np.ndarray, size: int, scale_range, cfg: ViewConfig3D, rng) -> np.ndarray:
    corner, sizes = _sample_crop_box_3d(vox.shape, scale_range, cfg.aspect_jitter, rng)
    region = tuple(slice(c, c + s) for c, s in zip(corner, sizes))
    view = _resize(vox[region], (size, size, size))
    for ax in range(3):
        if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
            view = np.flip(view, axis=ax)
    return contrast_enhance_3d(np.ascontiguousarray(view), rng, cfg)


def make_views_3d(vol: VolumeGrid, rng: np.random.Generator | int, cfg: ViewConfig3D = ViewConfig3D()) -> ViewSet:
    """Multi-crop for a volume: 3D random-resized crops, per-axis flips,
    and medical-image contrast enhancement instead of color jitter."""
    rng = as_rng(rng)
    vox = vol.voxels.astype(np.float32, copy=False)
    g = [_make_view_3d(vox, cfg.global_size, cfg.global_scale, cfg, rng) for _ in range(cfg.global_count)]
    l = [_make_view_3d(vox, cfg.local_size, cfg.local_scale, cfg, rng) for _ in range(cfg.local_count)]
    return ViewSet(global_views=g, local_views=l, source_id=vol.source_id)


def _sample_block_sizes(grid_dims, area, rng, aspect=3.0):
    ndim = len(grid_dims)
    base = area ** (1.0 / ndim)
    logs = rng.uniform(-math.log(aspect), math.log(aspect), size=ndim)
    logs -= logs.mean()
    return tuple(min(max(1, round(base * math.exp(logs[i]))), grid_dims[i]) for i in range(ndim))


def blockwise_mask(
    grid_dims: tuple[int, ...],
    ratio_range: tuple[float, float] = MASK_RATIO_RANGE,
    rng: np.random.Generator | int = 0,
    min_block: int = MIN_MASK_BLOCK,
) -> MaskSpec:
    """Accumulate random axis-aligned blocks until a target token count.

    The target ratio is drawn uniformly in `ratio_range`; the achieved count
    is exact, so the final ratio stays inside the range whenever an integer
    count exists in it (always true for the default range and >= 2 tokens).
    """
    rng = as_rng(rng)
    n = int(np.prod(grid_dims))
    if n < 1:
        raise InvalidInputError("empty token grid")
    target = rng.uniform(*ratio_range)
    lo_c = math.ceil(ratio_range[0] * n)
    hi_c = math.floor(ratio_range[1] * n)
    if lo_c <= hi_c:
        count = min(max(round(target * n), lo_c), hi_c)
    else:
        count = min(max(1, round(target * n)), n)  # no integer count in range: best effort
    masked = np.zeros(grid_dims, dtype=bool)
    blocks: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    remaining = count
    while remaining > 0:
        placed = False
        for _ in range(16):
            area = int(rng.integers(min(min_block, remaining), remaining + 1))
            sizes = _sample_block_sizes(grid_dims, area, rng)
            corner = tuple(int(rng.integers(0, g - s + 1)) for g, s in zip(grid_dims, sizes))
            region = tuple(slice(c, c + s) for c, s in zip(corner, sizes))
            fresh = int((~masked[region]).sum())
            if fresh == 0 or fresh > remaining:
                continue
            masked[region] = True
            blocks.append((corner, sizes))
            remaining -= fresh
            placed = True
            break
        if not placed:
            free = np.flatnonzero(~masked.reshape(-1))
            pick = int(free[rng.integers(0, free.size)])
            idx = np.unravel_index(pick, grid_dims)
            masked[idx] = True
            blocks.append((tuple(int(i) for i in idx), (1,) * len(grid_dims)))
            remaining -= 1
    return MaskSpec(grid_dims=tuple(grid_dims), masked=masked, blocks=blocks)
