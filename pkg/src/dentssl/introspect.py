"""Representation introspection: CLS attention maps, training-evolution
snapshots, pixel-level features, k-means cluster maps, and embedding export
for external 2D projection tools."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import VisionTransformer, load_checkpoint
from .errors import InvalidInputError

ATTENTION_HEADS_SHOWN = 4  # default: first four heads


@dataclass
class AttentionMapSet:
    per_head: np.ndarray  # (heads, *grid), each a distribution over patches
    merged: np.ndarray    # (*grid)
    layer: int
    grid_dims: tuple[int, ...]


def cls_attention(
    backbone: VisionTransformer,
    x: torch.Tensor,
    layer: int = -1,
    merge: str = "mean",
) -> AttentionMapSet:
    """Per-head CLS-query attention at `layer`, renormalized over patches and
    reshaped to the token grid; the merged map reduces over heads."""
    if merge not in ("mean", "max"):
        raise InvalidInputError(f"merge must be 'mean' or 'max', got {merge!r}")
    n_blocks = backbone.cfg.blocks
    if layer < 0:
        layer += n_blocks
    if not 0 <= layer < n_blocks:
        raise InvalidInputError(f"layer {layer} outside [0, {n_blocks})")
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            need_all = layer != n_blocks - 1
            feats = backbone(x, keep_all_attention=need_all)
            attn = feats.attentions[layer] if need_all else feats.attention
            grid = feats.final.grid_dims
    finally:
        backbone.train(was_training)
    if attn.shape[0] != 1:
        raise InvalidInputError("cls_attention expects a single-image batch")
    rows = attn[0, :, 0, 1:]  # CLS query row over patch keys, per head
    rows = rows / rows.sum(dim=-1, keepdim=True)
    per_head = rows.reshape(rows.shape[0], *grid).numpy()
    merged = per_head.mean(axis=0) if merge == "mean" else per_head.max(axis=0)
    merged = merged / merged.sum()
    return AttentionMapSet(per_head=per_head, merged=merged, layer=layer, grid_dims=grid)


def snapshot_series(checkpoint_paths, x: torch.Tensor, layer: int = -1) -> list[tuple[int, AttentionMapSet]]:
    """Attention maps from checkpoints of one variant, ordered by iteration."""
    loaded = []
    for p in checkpoint_paths:
        model, meta = load_checkpoint(p)
        loaded.append((int(meta.get("iteration", 0)), meta, model))
    variants = {(m["variant"], m["input_rank"]) for _, m, _ in loaded}
    if len(variants) > 1:
        raise InvalidInputError(f"checkpoints mix variants: {sorted(variants)}")
    loaded.sort(key=lambda item: item[0])
    return [(it, cls_attention(model, x, layer=layer)) for it, _, model in loaded]


def upsample_token_grid(tokens: torch.Tensor, grid_dims: tuple[int, ...], out_dims: tuple[int, ...]) -> torch.Tensor:
    """(B, N, K) token grid -> (B, K, *out_dims) via linear interpolation.

    Uses half-pixel-aligned sampling, so values at patch centers reproduce
    the source tokens and the operation commutes with axis flips.
    """
    b, n, k = tokens.shape
    expected = 1
    for g in grid_dims:
        expected *= g
    if n != expected:
        raise InvalidInputError(f"token count {n} != prod(grid_dims) {expected}")
    grid = tokens.transpose(1, 2).reshape(b, k, *grid_dims)
    mode = "bilinear" if len(grid_dims) == 2 else "trilinear"
    return F.interpolate(grid, size=tuple(out_dims), mode=mode, align_corners=False)


def pixel_features(backbone: VisionTransformer, x: torch.Tensor) -> torch.Tensor:
    """Final-layer patch tokens interpolated to the input resolution:
    (B, K, *input_dims)."""
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            feats = backbone(x)
    finally:
        backbone.train(was_training)
    return upsample_token_grid(feats.final.patches, feats.final.grid_dims, tuple(x.shape[2:]))


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    seed: int
    inertia: float
    inertia_history: tuple[float, ...]


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(0, x.shape[0])]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(0, x.shape[0])]
            continue
        centers[i] = x[rng.choice(x.shape[0], p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(features, k: int, seed: int = 0, iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding; deterministic per seed and
    non-increasing in inertia across iterations."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("expected (points, dims) features")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if k > x.shape[0]:
        raise InvalidInputError(f"k={k} exceeds point count {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    history = []
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max(1, iters)):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(x.shape[0]), labels].sum()))
        new_centers = centers.copy()
        for c in range(k):
            members = x[labels == c]
            if members.shape[0]:
                new_centers[c] = members.mean(axis=0)
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    return ClusterAssignment(labels=labels, k=k, seed=seed, inertia=history[-1], inertia_history=tuple(history))


def cluster_map(backbone: VisionTransformer, x: torch.Tensor, k: int, seed: int = 0) -> np.ndarray:
    """Pixel-level k-means labels at the input resolution, one map per image."""
    feats = pixel_features(backbone, x)  # (B, K, *dims)
    b, kdim = feats.shape[:2]
    spatial = feats.shape[2:]
    flat = feats.reshape(b, kdim, -1).permute(0, 2, 1).numpy()
    maps = [kmeans(flat[i], k, seed=seed).labels.reshape(spatial) for i in range(b)]
    return np.stack(maps)


def export_embeddings(backbone: VisionTransformer, dataset, out_path: str | Path) -> int:
    """Write one `id,label,v0,...,vK-1` line per (id, label, array) item.

    Arrays are (1, 1, *spatial) tensors or raw numpy grids; the embedding is
    the final-layer CLS vector. Fixed float formatting keeps re-exports
    byte-identical.
    """
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for sample_id, label, arr in dataset:
            if isinstance(arr, np.ndarray):
                t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
            else:
                t = arr
            was_training = backbone.training
            backbone.eval()
            try:
                with torch.no_grad():
                    vec = backbone(t).final.cls[0].numpy()
            finally:
                backbone.train(was_training)
            values = ",".join(f"{v:.8e}" for v in vec)
            fh.write(f"{sample_id},{label},{values}\n")
            count += 1
    return count


def render_attention_overlay(image: np.ndarray, attn_map: np.ndarray, out_path: str | Path, cmap: str = "viridis") -> None:
    """Bilinearly upsample an attention map onto the source image and save a
    raster overlay."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = torch.from_numpy(np.ascontiguousarray(attn_map, dtype=np.float32))[None, None]
    up = F.interpolate(t, size=image.shape, mode="bilinear", align_corners=False)[0, 0].numpy()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, cmap="gray")
    ax.imshow(up, cmap=cmap, alpha=0.5)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
