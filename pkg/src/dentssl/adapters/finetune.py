"""Downstream fine-tuning loops over a frozen backbone: the linear
classification adapter with its learning-rate/feature-layer grid search,
and segmentation-head training with the fixed fine-tuning recipe."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..backbone import VisionTransformer, parameter_hash
from ..errors import InvalidInputError
from ..harness import dice_iou
from .probe import image_embedding
from .seg_heads import LinearSegHead2D, UNETRHead3D, unetr_layer_taps

logger = logging.getLogger(__name__)

# Grid searched during linear-adapter fine-tuning.
ADAPTER_LR_GRID = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 0.1)
ADAPTER_LAYER_OPTIONS = (1, 4)
ADAPTER_ITERATIONS = 12500

SEG_LR = 1e-4
SEG_EPOCHS = 300
SEG_BATCH_SIZE = 32


def _to_tensor_batch(images: np.ndarray) -> torch.Tensor:
    # (N, *spatial) -> (N, 1, *spatial)
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(1)


@dataclass
class ClassifierFit:
    head: nn.Linear
    layers: int
    lr: float
    val_accuracy: float
    grid_scores: dict = field(default_factory=dict)
    backbone_hash: str = ""


def finetune_adapter_classifier(
    backbone: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    lr_grid=ADAPTER_LR_GRID,
    layer_options=ADAPTER_LAYER_OPTIONS,
    iterations: int = ADAPTER_ITERATIONS,
    batch_size: int = 32,
    val_split: float = 0.2,
    seed: int = 0,
) -> ClassifierFit:
    """Grid search (learning rate x feature-layer count) for a linear
    classifier on frozen CLS features, with horizontal-flip augmentation.

    Flip augmentation commutes with the frozen backbone, so embeddings of
    the original and flipped images are precomputed once per layer option.
    """
    labels_t = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))
    classes = int(labels_t.max()) + 1
    hash_before = parameter_hash(backbone)

    x = _to_tensor_batch(images)
    x_flipped = torch.flip(x, dims=[-1])
    emb: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    for layers in layer_options:
        emb[layers] = (image_embedding(backbone, x, layers), image_embedding(backbone, x_flipped, layers))

    n = x.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_split * n))), n - 1)
    val_idx = torch.from_numpy(perm[:n_val].copy())
    fit_idx = perm[n_val:]

    best: ClassifierFit | None = None
    grid_scores = {}
    for layers in layer_options:
        e_plain, e_flip = emb[layers]
        for lr in lr_grid:
            torch.manual_seed(seed)
            head = nn.Linear(e_plain.shape[1], classes)
            opt = torch.optim.Adam(head.parameters(), lr=lr)
            ce = nn.CrossEntropyLoss()
            cell_rng = np.random.default_rng((seed, layers, int(lr * 1e9)))
            for _ in range(iterations):
                idx = cell_rng.choice(fit_idx, size=min(batch_size, fit_idx.size), replace=False)
                flip = cell_rng.random(idx.size) < 0.5
                batch = torch.where(
                    torch.from_numpy(flip).unsqueeze(1), e_flip[torch.from_numpy(idx)], e_plain[torch.from_numpy(idx)]
                )
                loss = ce(head(batch), labels_t[torch.from_numpy(idx)])
                opt.zero_grad()
                loss.backward()
                opt.step()
            with torch.no_grad():
                preds = head(e_plain[val_idx]).argmax(dim=1)
                acc = float((preds == labels_t[val_idx]).float().mean())
            grid_scores[(layers, lr)] = acc
            if best is None or acc > best.val_accuracy:
                best = ClassifierFit(head=head, layers=layers, lr=lr, val_accuracy=acc)
            logger.info("adapter grid layers=%d lr=%.0e -> val acc %.4f", layers, lr, acc)

    if parameter_hash(backbone) != hash_before:
        raise InvalidInputError("frozen-backbone contract violated during classifier fine-tuning")
    best.grid_scores = grid_scores
    best.backbone_hash = hash_before
    return best


@dataclass
class SegmentationFit:
    head: nn.Module
    best_val_dice: float
    history: list = field(default_factory=list)
    backbone_hash: str = ""


def _tap_tokens(backbone: VisionTransformer, x: torch.Tensor, mode: str):
    """Frozen-backbone tap features: last four layers for the linear head,
    the L/4-spaced taps for the UNETR head."""
    with torch.no_grad():
        feats = backbone(x)
        if mode == "linear2d":
            picks = feats.layers[-4:]
        else:
            picks = [feats.layers[t - 1] for t in unetr_layer_taps(backbone.cfg.blocks)]
        return [p.patches for p in picks], feats.final.grid_dims


def make_seg_head(backbone: VisionTransformer, classes: int, mode: str, feature_size: int = 16) -> nn.Module:
    if mode == "linear2d":
        return LinearSegHead2D(backbone.cfg.embed_dim, classes)
    if mode == "unetr3d":
        return UNETRHead3D(backbone.cfg.embed_dim, classes, backbone.cfg.patch_size, feature_size=feature_size)
    raise InvalidInputError(f"unknown segmentation head mode {mode!r}")


def finetune_segmentation(
    backbone: VisionTransformer,
    images: np.ndarray,
    masks: np.ndarray,
    head: nn.Module,
    mode: str,
    classes: int,
    lr: float = SEG_LR,
    epochs: int = SEG_EPOCHS,
    batch_size: int = SEG_BATCH_SIZE,
    val_split: float = 0.2,
    seed: int = 0,
    adapter: nn.Module | None = None,
) -> SegmentationFit:
    """Train the segmentation head (plus adapter, when attached) over a
    frozen backbone with the fixed recipe (Adam, initial lr 1e-4, up to 300
    epochs, batch size 32); keeps the checkpoint with the best validation
    Dice."""
    if mode not in ("linear2d", "unetr3d"):
        raise InvalidInputError(f"unknown segmentation mode {mode!r}")
    hash_before = parameter_hash(backbone)
    backbone.eval()

    x = _to_tensor_batch(images)
    y = torch.from_numpy(np.ascontiguousarray(masks, dtype=np.int64))
    out_size = tuple(x.shape[2:])
    grid = backbone.grid_of(x)

    if adapter is None:
        taps, grid = _tap_tokens(backbone, x, mode)

        def forward_taps(idx: torch.Tensor) -> list[torch.Tensor]:
            return [t[idx] for t in taps]

        params = list(head.parameters())
    else:
        # tap features come from the adapter's four interaction stages
        def forward_taps(idx: torch.Tensor) -> list[torch.Tensor]:
            feats, _ = adapter(x[idx])
            return [f[:, 1:] for f in feats]

        params = list(head.parameters()) + [p for p in adapter.parameters() if p.requires_grad]

    n = x.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_split * n))), n - 1)
    val_idx, fit_idx = perm[:n_val], perm[n_val:]

    opt = torch.optim.Adam(params, lr=lr)
    ce = nn.CrossEntropyLoss()
    best_state, best_dice = None, -1.0
    history = []
    epoch_rng = np.random.default_rng((seed, 1))
    for epoch in range(epochs):
        head.train()
        order = epoch_rng.permutation(fit_idx)
        for lo in range(0, order.size, batch_size):
            idx = torch.from_numpy(order[lo : lo + batch_size].copy())
            logits = head(forward_taps(idx), grid, out_size)
            loss = ce(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        head.eval()
        with torch.no_grad():
            idx = torch.from_numpy(val_idx.copy())
            preds = head(forward_taps(idx), grid, out_size).argmax(dim=1)
        scores = dice_iou(preds.numpy(), y[idx].numpy(), classes=classes)
        history.append({"epoch": epoch, "val_mdice": scores.mdice})
        if scores.mdice > best_dice:
            best_dice = scores.mdice
            best_state = {k: v.detach().clone() for k, v in head.state_dict().items()}
    if best_state is not None:
        head.load_state_dict(best_state)
    if parameter_hash(backbone) != hash_before:
        raise InvalidInputError("frozen-backbone contract violated during segmentation fine-tuning")
    return SegmentationFit(head=head, best_val_dice=best_dice, history=history, backbone_hash=hash_before)
