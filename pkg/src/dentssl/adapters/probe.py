"""Linear probing of frozen backbone representations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from ..backbone import LayerFeatures, VisionTransformer
from ..errors import InvalidInputError

PROBE_C_COUNT = 45
PROBE_C_MIN = 1e-6
PROBE_C_MAX = 1e5
PROBE_MAX_ITER = 1000
PROBE_TOL = 1e-12


@dataclass(frozen=True)
class ProbeGrid:
    c_values: tuple[float, ...]
    max_iter: int = PROBE_MAX_ITER
    tol: float = PROBE_TOL

    @staticmethod
    def log_spaced(count: int = PROBE_C_COUNT, lo: float = PROBE_C_MIN, hi: float = PROBE_C_MAX) -> "ProbeGrid":
        values = np.logspace(np.log10(lo), np.log10(hi), count)
        return ProbeGrid(c_values=tuple(float(v) for v in values))


def image_embedding(backbone: VisionTransformer, x: torch.Tensor, layers: int = 1) -> torch.Tensor:
    """Image-level representation: last-layer CLS, or the mean of the last
    `layers` CLS vectors. The backbone is left untouched (eval, no grad)."""
    if layers not in (1, 4):
        raise InvalidInputError(f"layers must be 1 or 4, got {layers}")
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            feats: LayerFeatures = backbone(x)
            if layers == 1:
                return feats.final.cls
            cls_stack = torch.stack([layer.cls for layer in feats.layers[-layers:]])
            return cls_stack.mean(dim=0)
    finally:
        backbone.train(was_training)


@dataclass
class ProbeResult:
    classifier: LogisticRegression
    best_c: float
    val_accuracy: float
    train_accuracy: float
    test_accuracy: float | None = None
    per_c_val_accuracy: dict[float, float] = field(default_factory=dict)


def linear_probe(
    embeddings,
    labels,
    grid: ProbeGrid | None = None,
    val_split: float = 0.2,
    seed: int = 0,
    test_embeddings=None,
    test_labels=None,
) -> ProbeResult:
    """Fit a logistic regressor per C, select the best C on a held-out
    validation slice (ties toward smaller C), refit on the full training
    data, and report test accuracy when a test set is given."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise InvalidInputError("expected (N, K) embeddings and (N,) labels")
    if np.unique(y).size < 2:
        raise InvalidInputError("linear probe needs at least 2 classes")
    grid = grid or ProbeGrid.log_spaced()

    rng = np.random.default_rng(seed)
    perm = rng.permutation(x.shape[0])
    n_val = max(1, int(round(val_split * x.shape[0])))
    n_val = min(n_val, x.shape[0] - 2)
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    # degenerate tiny sets: fall back to fitting and validating on everything
    if np.unique(y[fit_idx]).size < 2:
        fit_idx = perm
        val_idx = perm

    best_c, best_acc = None, -1.0
    per_c = {}
    for c in grid.c_values:
        clf = LogisticRegression(C=c, max_iter=grid.max_iter, tol=grid.tol)
        clf.fit(x[fit_idx], y[fit_idx])
        acc = float(clf.score(x[val_idx], y[val_idx]))
        per_c[c] = acc
        if acc > best_acc:  # strict: ties keep the earlier (smaller) C
            best_acc, best_c = acc, c

    final = LogisticRegression(C=best_c, max_iter=grid.max_iter, tol=grid.tol)
    final.fit(x, y)
    result = ProbeResult(
        classifier=final,
        best_c=best_c,
        val_accuracy=best_acc,
        train_accuracy=float(final.score(x, y)),
        per_c_val_accuracy=per_c,
    )
    if test_embeddings is not None:
        result.test_accuracy = float(final.score(np.asarray(test_embeddings, dtype=np.float64), np.asarray(test_labels)))
    return result
