"""Standardization of heterogeneous 2D/3D radiographic inputs.

Implements the preprocessing pipeline: percentile windowing for volumes,
min-max rescaling for 2D images, foreground cropping, statistical quality
filtering, and random tri-plane slice extraction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

IMAGE_MAX = 255.0  # 2D images are normalized into [0, 255]
VOLUME_MAX = 1.0   # volumes are normalized into [0, 1]

HIST_BINS = 256

# Percentile window applied to volumetric intensities before rescaling.
VOLUME_PERCENTILE_LO = 0.5
VOLUME_PERCENTILE_HI = 99.5


class ImageModality(str, Enum):
    PAN = "PAN"
    LAT = "LAT"
    AP = "AP"
    INTRAORAL = "INTRAORAL"
    BITEWING = "BITEWING"
    SLICE = "SLICE"


class VolumeModality(str, Enum):
    CT = "CT"
    CBCT = "CBCT"
    MRI = "MRI"


@dataclass(frozen=True)
class RadImage:
    """A 2D radiograph: `pixels` is a (H, W) float array."""

    pixels: np.ndarray
    modality: ImageModality = ImageModality.PAN
    source_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise InvalidInputError(f"RadImage expects a 2D array, got rank {self.pixels.ndim}")
        if min(self.pixels.shape) < 1:
            raise InvalidInputError("RadImage dimensions must be >= 1")


@dataclass(frozen=True)
class VolumeGrid:
    """A 3D voxel grid: `voxels` is (W, H, D); axes are sagittal, coronal, axial."""

    voxels: np.ndarray
    modality: VolumeModality = VolumeModality.CBCT
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise InvalidInputError(f"VolumeGrid expects a 3D array, got rank {self.voxels.ndim}")
        if min(self.voxels.shape) < 1:
            raise InvalidInputError("VolumeGrid dimensions must be >= 1")


@dataclass(frozen=True)
class QualityReport:
    snr: float
    entropy: float  # bits
    histogram: np.ndarray
    passed: bool


@dataclass(frozen=True)
class QualityConfig:
    snr_min: float = 1.0
    entropy_min: float = 2.0  # bits
    foreground_quantile: float = 0.05


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the value at rank ceil(pct/100 * n) of the sorted array."""
    flat = values.reshape(-1)
    n = flat.size
    if n == 0:
        raise InvalidInputError("percentile of empty array")
    rank = max(1, int(np.ceil(pct / 100.0 * n)))
    return float(np.partition(flat, rank - 1)[rank - 1])


def normalize_volume(v: VolumeGrid) -> VolumeGrid:
    """Clip to the [0.5, 99.5] percentile window and rescale into [0, 1].

    A constant volume (lo == hi) maps to all zeros with a logged warning.
    """
    if v.voxels.size == 0:
        raise InvalidInputError("cannot normalize an empty volume")
    vox = v.voxels.astype(np.float64, copy=False)
    lo = nearest_rank_percentile(vox, VOLUME_PERCENTILE_LO)
    hi = nearest_rank_percentile(vox, VOLUME_PERCENTILE_HI)
    if hi == lo:
        logger.warning("constant volume %s normalized to zeros", v.source_id or "<unnamed>")
        out = np.zeros_like(vox, dtype=np.float32)
    else:
        out = ((np.clip(vox, lo, hi) - lo) / (hi - lo) * VOLUME_MAX).astype(np.float32)
    return replace(v, voxels=out)


def normalize_image(img: RadImage) -> RadImage:
    """Affine-map pixel intensities so min -> 0 and max -> 255."""
    if img.pixels.size == 0:
        raise InvalidInputError("cannot normalize an empty image")
    px = img.pixels.astype(np.float64, copy=False)
    lo, hi = float(px.min()), float(px.max())
    if hi == lo:
        logger.warning("constant image %s normalized to zeros", img.source_id or "<unnamed>")
        out = np.zeros_like(px, dtype=np.float32)
    else:
        out = ((px - lo) / (hi - lo) * IMAGE_MAX).astype(np.float32)
    return replace(img, pixels=out)


def _domain_max(x: RadImage | VolumeGrid) -> float:
    return IMAGE_MAX if isinstance(x, RadImage) else VOLUME_MAX


def _array_of(x: RadImage | VolumeGrid) -> np.ndarray:
    return x.pixels if isinstance(x, RadImage) else x.voxels


def _with_array(x: RadImage | VolumeGrid, arr: np.ndarray) -> RadImage | VolumeGrid:
    return replace(x, pixels=arr) if isinstance(x, RadImage) else replace(x, voxels=arr)


def crop_foreground(
    x: RadImage | VolumeGrid,
    threshold_quantile: float = 0.05,
    margin: int = 2,
) -> RadImage | VolumeGrid:
    """Crop to the bounding box of elements above a threshold.

    The threshold is `threshold_quantile` of the normalized intensity
    domain ([0, 255] for images, [0, 1] for volumes). The box is padded by
    `margin` elements per side and clamped to the input bounds. An input
    with no foreground is returned unchanged.
    """
    arr = _array_of(x)
    thr = threshold_quantile * _domain_max(x)
    fg = arr > thr
    if not fg.any():
        return x
    slices = []
    for ax in range(arr.ndim):
        other = tuple(i for i in range(arr.ndim) if i != ax)
        idx = np.nonzero(fg.any(axis=other))[0]
        lo = max(0, int(idx[0]) - margin)
        hi = min(arr.shape[ax], int(idx[-1]) + 1 + margin)
        slices.append(slice(lo, hi))
    return _with_array(x, arr[tuple(slices)])


def quality_filter(img: RadImage, cfg: QualityConfig = QualityConfig()) -> QualityReport:
    """Compute SNR / entropy / histogram statistics and the pass decision.

    SNR is mean/stddev over foreground pixels; entropy is the Shannon
    entropy (bits) of the 256-bin histogram over the [0, 255] domain.
    """
    px = img.pixels.astype(np.float64, copy=False)
    thr = cfg.foreground_quantile * IMAGE_MAX
    fg = px[px > thr]
    if fg.size == 0:
        snr = 0.0
    else:
        std = float(fg.std())
        snr = float("inf") if std == 0.0 else float(fg.mean()) / std
    counts, _ = np.histogram(px, bins=HIST_BINS, range=(0.0, IMAGE_MAX))
    probs = counts[counts > 0] / px.size
    entropy = float(-(probs * np.log2(probs)).sum())
    passed = snr >= cfg.snr_min and entropy >= cfg.entropy_min
    return QualityReport(snr=snr, entropy=entropy, histogram=counts, passed=passed)


# Plane index -> volume axis held fixed when slicing.
SLICE_PLANES = (("sagittal", 0), ("coronal", 1), ("axial", 2))


def extract_slices(v: VolumeGrid, n_per_plane: int, rng_seed: int) -> list[RadImage]:
    """Extract random 2D slices from the sagittal, coronal, and axial planes.

    Per plane, `n_per_plane` indices are drawn without replacement (capped
    at the plane's extent). Deterministic for a fixed seed.
    """
    if n_per_plane < 0:
        raise InvalidInputError("n_per_plane must be >= 0")
    rng = np.random.default_rng(rng_seed)
    out = []
    for plane_name, axis in SLICE_PLANES:
        extent = v.voxels.shape[axis]
        count = min(n_per_plane, extent)
        indices = np.sort(rng.choice(extent, size=count, replace=False))
        for idx in indices:
            sl = np.take(v.voxels, int(idx), axis=axis)
            out.append(
                RadImage(
                    pixels=np.ascontiguousarray(sl),
                    modality=ImageModality.SLICE,
                    source_id=f"{v.source_id}:{plane_name}{int(idx)}",
                )
            )
    return out
