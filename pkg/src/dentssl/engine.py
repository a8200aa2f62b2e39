"""Self-distillation pre-training engine.

Student/teacher pairs share one architecture: a vision-transformer backbone
plus two projection heads (image-level on the CLS token, patch-level on
masked patch tokens). The student is trained with Adam against teacher
targets produced by softmax + Sinkhorn-Knopp centering; the teacher tracks
the student through an exponential moving average.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import MaskSpec, ViewConfig2D, ViewConfig3D, ViewSet, blockwise_mask, make_views_2d, make_views_3d
from .backbone import BackboneConfig, VisionTransformer, make_variant
from .errors import CheckpointError, InvalidInputError, NumericError
from .radprep import RadImage, VolumeGrid
from . import rawio

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadConfig:
    prototypes: int
    bottleneck_dim: int
    hidden_dim: int = 2048
    shared: bool = False  # image- and patch-level heads are separate MLPs


class ProjectionHead(nn.Module):
    """MLP bottleneck -> L2 normalization -> prototype inner products."""

    def __init__(self, in_dim: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.bottleneck_dim),
        )
        self.prototypes = nn.Linear(cfg.bottleneck_dim, cfg.prototypes, bias=False)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x)

    def prototype_logits(self, z: torch.Tensor) -> torch.Tensor:
        """Inner products of the L2-normalized bottleneck against prototypes;
        invariant to positive rescaling of `z`."""
        return self.prototypes(F.normalize(z, dim=-1, eps=1e-12))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite head input")
        return self.prototype_logits(self.bottleneck(x))


class SSLModel(nn.Module):
    """Backbone plus the two projection heads (one student or teacher side)."""

    def __init__(self, backbone: VisionTransformer, image_head_cfg: HeadConfig, patch_head_cfg: HeadConfig):
        super().__init__()
        self.backbone = backbone
        self.image_head = ProjectionHead(backbone.cfg.embed_dim, image_head_cfg)
        self.patch_head = ProjectionHead(backbone.cfg.embed_dim, patch_head_cfg)


def student_distribution(logits: torch.Tensor, student_temp: float) -> torch.Tensor:
    """softmax(logits / temp) along the prototype axis."""
    if student_temp <= 0:
        raise InvalidInputError("student temperature must be positive")
    return torch.softmax(logits / student_temp, dim=-1)


def sinkhorn_center(teacher_logits: torch.Tensor, teacher_temp: float, iters: int = 3) -> torch.Tensor:
    """Teacher assignment: tempered softmax balanced by Sinkhorn-Knopp.

    Rows (samples) of the result sum to 1; column marginals approach
    batch/K with more iterations. A single-row batch is degenerate (the
    balanced transport would erase the signal) and returns the plain
    softmax.
    """
    if teacher_temp <= 0:
        raise InvalidInputError("teacher temperature must be positive")
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    if teacher_logits.ndim != 2:
        raise InvalidInputError("expected a (batch, prototypes) matrix")
    if not torch.isfinite(teacher_logits).all():
        raise NumericError("non-finite teacher logits")
    b, k = teacher_logits.shape
    if b == 1:
        return torch.softmax(teacher_logits / teacher_temp, dim=-1)
    with torch.no_grad():
        scaled = teacher_logits / teacher_temp
        q = torch.exp(scaled - scaled.max()).t()  # (K, B); global shift cancels
        q = q / q.sum()
        for _ in range(iters):
            q = q / q.sum(dim=1, keepdim=True) / k  # prototype marginals -> 1/K
            q = q / q.sum(dim=0, keepdim=True) / b  # sample marginals -> 1/B
        return (q * b).t()


def cross_entropy(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """H(a, b) = -sum a*log(b), with 0*log(0) = 0, along the last axis."""
    return -torch.xlogy(target, pred).sum(dim=-1)


def image_level_loss(teacher_dists: torch.Tensor, student_dists: torch.Tensor) -> torch.Tensor:
    """Cross-view distillation over CLS distributions.

    `teacher_dists` covers the global views, `student_dists` all views in
    the same order (globals first). Sums H(teacher_g, student_v) over every
    pair with v != g, averaged over the pair count (and batch, if present).
    """
    if teacher_dists.shape[1:] != student_dists.shape[1:]:
        raise InvalidInputError("teacher/student distribution shapes disagree")
    n_teacher, n_student = teacher_dists.shape[0], student_dists.shape[0]
    if n_student < n_teacher:
        raise InvalidInputError(f"student must cover all {n_teacher} teacher views, got {n_student}")
    total = None
    for g in range(n_teacher):
        for v in range(n_student):
            if v == g:
                continue
            term = cross_entropy(teacher_dists[g], student_dists[v]).mean()
            total = term if total is None else total + term
    return total / (n_teacher * (n_student - 1))


def patch_level_loss(
    teacher_token_dists: torch.Tensor,
    student_token_dists: torch.Tensor,
    mask: MaskSpec | torch.Tensor | np.ndarray,
) -> torch.Tensor:
    """Mean cross-entropy over masked token positions.

    Token tensors are (..., N, K) with aligned grids; `mask` selects the N
    axis. An empty mask is defined as loss 0 (with a warning).
    """
    if isinstance(mask, MaskSpec):
        mask = mask.flat()
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    mask = mask.to(torch.bool)
    if teacher_token_dists.shape != student_token_dists.shape:
        raise InvalidInputError("token grids are not aligned")
    if mask.shape[-1] != teacher_token_dists.shape[-2]:
        raise InvalidInputError("mask length does not match token count")
    if not mask.any():
        logger.warning("patch_level_loss called with an empty mask; defined as 0")
        return teacher_token_dists.new_zeros(())
    h = cross_entropy(teacher_token_dists, student_token_dists)  # (..., N)
    mask = mask.expand(h.shape)
    return h[mask].mean()


def ema_update(teacher, student, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise.

    Accepts module pairs or iterables of tensors; shapes must match.
    """
    if not 0.0 <= momentum <= 1.0:
        raise InvalidInputError("momentum must lie in [0, 1]")
    t_params = list(teacher.parameters()) if isinstance(teacher, nn.Module) else list(teacher)
    s_params = list(student.parameters()) if isinstance(student, nn.Module) else list(student)
    if len(t_params) != len(s_params):
        raise InvalidInputError("teacher/student parameter counts differ")
    with torch.no_grad():
        for t, s in zip(t_params, s_params):
            if t.shape != s.shape:
                raise InvalidInputError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


@dataclass(frozen=True)
class ScheduleConfig:
    lr_start: float
    lr_peak: float
    lr_final: float
    warmup_iters: int
    total_iters: int
    weight_decay: float = 0.04
    momentum_start: float = 0.994
    momentum_final: float = 1.0

    def __post_init__(self):
        if self.lr_start > self.lr_peak:
            raise InvalidInputError("lr_start must not exceed lr_peak")
        if self.warmup_iters > self.total_iters:
            raise InvalidInputError("warmup_iters must not exceed total_iters")


def lr_at(iteration: int, sched: ScheduleConfig) -> float:
    """Linear warmup start->peak, then cosine decay peak->final."""
    if not 0 <= iteration <= sched.total_iters:
        raise InvalidInputError(f"iteration {iteration} outside [0, {sched.total_iters}]")
    if iteration < sched.warmup_iters:
        frac = iteration / sched.warmup_iters
        return sched.lr_start + (sched.lr_peak - sched.lr_start) * frac
    span = max(1, sched.total_iters - sched.warmup_iters)
    t = (iteration - sched.warmup_iters) / span
    return sched.lr_final + 0.5 * (sched.lr_peak - sched.lr_final) * (1.0 + math.cos(math.pi * t))


def momentum_at(iteration: int, sched: ScheduleConfig) -> float:
    """Cosine ramp of the teacher EMA momentum from start to final."""
    if sched.total_iters == 0:
        return sched.momentum_final
    t = min(max(iteration / sched.total_iters, 0.0), 1.0)
    return sched.momentum_final - 0.5 * (sched.momentum_final - sched.momentum_start) * (1.0 + math.cos(math.pi * t))


@dataclass
class PretrainConfig:
    """Pre-training hyperparameters; defaults reproduce the 2D base preset."""

    dimensionality: str = "2d"
    variant: str = "B"
    drop_path_rate: float = 0.3
    global_crop_size: int = 224
    global_crop_number: int = 2
    local_crop_size: int = 98
    local_crop_number: int = 8
    dino_head_prototypes: int = 65536
    dino_head_dim: int = 256
    ibot_head_prototypes: int = 65536
    ibot_head_dim: int = 256
    masking_ratio: tuple[float, float] = (0.1, 0.5)
    shared_head: bool = False
    batch_size: int = 2048
    total_iterations: int = 125000
    warmup_iterations: int = 12500
    learning_rate: tuple[float, float, float] = (0.0, 0.001, 1.0e-06)
    weight_decay: float = 0.04
    student_temp: float = 0.1
    teacher_temp: float = 0.07
    sinkhorn_iterations: int = 3
    centering: str = "sinkhorn"  # "sinkhorn" | "none" (ablation)
    momentum_start: float = 0.994
    momentum_final: float = 1.0
    head_hidden_dim: int = 2048
    embed_dim: int | None = None   # overrides the variant table (toy configs)
    heads: int | None = None
    blocks: int | None = None
    patch_size: int | None = None
    checkpoint_every: int = 0  # 0: final checkpoint only
    seed: int = 0

    def schedule(self) -> ScheduleConfig:
        start, peak, final = self.learning_rate
        return ScheduleConfig(
            lr_start=start,
            lr_peak=peak,
            lr_final=final,
            warmup_iters=self.warmup_iterations,
            total_iters=self.total_iterations,
            weight_decay=self.weight_decay,
            momentum_start=self.momentum_start,
            momentum_final=self.momentum_final,
        )

    def backbone_config(self) -> BackboneConfig:
        cfg = make_variant(self.variant, input_rank=self.dimensionality, drop_path_rate=self.drop_path_rate)
        overrides = {}
        if self.embed_dim is not None:
            overrides["embed_dim"] = self.embed_dim
        if self.heads is not None:
            overrides["heads"] = self.heads
        if self.blocks is not None:
            overrides["blocks"] = self.blocks
        if self.patch_size is not None:
            overrides["patch_size"] = self.patch_size
        overrides["base_size"] = self.global_crop_size
        return replace(cfg, **overrides)

    def view_config(self):
        if self.dimensionality == "2d":
            return ViewConfig2D(
                global_size=self.global_crop_size,
                global_count=self.global_crop_number,
                local_size=self.local_crop_size,
                local_count=self.local_crop_number,
            )
        return ViewConfig3D(
            global_size=self.global_crop_size,
            global_count=self.global_crop_number,
            local_size=self.local_crop_size,
            local_count=self.local_crop_number,
        )

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]


# Presets mirror the published pre-training hyperparameter table.
def preset(name: str) -> PretrainConfig:
    base = PretrainConfig()
    presets = {
        "2d_b": {},
        "2d_l": dict(
            variant="L", drop_path_rate=0.4, dino_head_prototypes=131072, dino_head_dim=384,
            ibot_head_prototypes=131072, ibot_head_dim=256, batch_size=1024,
            total_iterations=625000, warmup_iterations=100000, learning_rate=(0.0, 0.0002, 1.0e-06),
        ),
        "2d_g": dict(
            variant="G", drop_path_rate=0.4, dino_head_prototypes=131072, dino_head_dim=384,
            ibot_head_prototypes=131072, ibot_head_dim=256, batch_size=1024,
            total_iterations=625000, warmup_iterations=100000, learning_rate=(0.0, 0.0002, 1.0e-06),
        ),
    }
    for v in ("b", "l", "g"):
        presets[f"3d_{v}"] = dict(
            dimensionality="3d", variant=v.upper(), drop_path_rate=0.3,
            global_crop_size=96, local_crop_size=48, batch_size=1024,
            total_iterations=90000, warmup_iterations=3000, learning_rate=(0.0, 0.0002, 1.0e-06),
        )
    if name not in presets:
        raise InvalidInputError(f"unknown preset {name!r}; expected one of {sorted(presets)}")
    return replace(base, **presets[name])


@dataclass
class TrainState:
    student: SSLModel
    teacher: SSLModel
    optimizer: torch.optim.Optimizer
    iteration: int = 0


def init_train_state(cfg: PretrainConfig, dtype: torch.dtype = torch.float32) -> TrainState:
    """Build student/teacher pair (teacher starts as an exact copy) and Adam."""
    torch.manual_seed(cfg.seed)
    backbone = VisionTransformer(cfg.backbone_config())
    image_head = HeadConfig(cfg.dino_head_prototypes, cfg.dino_head_dim, hidden_dim=cfg.head_hidden_dim)
    patch_head = HeadConfig(cfg.ibot_head_prototypes, cfg.ibot_head_dim, hidden_dim=cfg.head_hidden_dim)
    student = SSLModel(backbone, image_head, patch_head).to(dtype)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.learning_rate[1], weight_decay=cfg.weight_decay)
    return TrainState(student=student, teacher=teacher, optimizer=optimizer, iteration=0)


def _stack_views(views: list[list[np.ndarray]], dtype: torch.dtype) -> torch.Tensor:
    """(views, batch, 1, *spatial) tensor from per-sample view lists."""
    per_view = list(zip(*views))
    stacked = [torch.from_numpy(np.stack(v)).unsqueeze(1) for v in per_view]
    return torch.stack(stacked).to(dtype)


def _teacher_patch_dists(teacher: SSLModel, tokens: torch.Tensor, mask: torch.Tensor, cfg: PretrainConfig) -> torch.Tensor:
    """Centered teacher token distributions, computed on masked positions and
    scattered back into a dense (B, N, K) tensor (unmasked rows are zero and
    never read by the loss)."""
    b, n, _ = tokens.shape
    flat_logits = teacher.patch_head(tokens.reshape(b * n, -1))
    sel = mask.reshape(-1)
    dists = torch.zeros(b * n, flat_logits.shape[-1], dtype=flat_logits.dtype)
    if cfg.centering == "sinkhorn":
        dists[sel] = sinkhorn_center(flat_logits[sel], cfg.teacher_temp, cfg.sinkhorn_iterations)
    else:
        dists[sel] = torch.softmax(flat_logits[sel] / cfg.teacher_temp, dim=-1)
    return dists.reshape(b, n, -1)


def train_step(
    batch: list[ViewSet],
    state: TrainState,
    cfg: PretrainConfig,
    mask_rng: np.random.Generator | int | None = None,
) -> dict:
    """One optimization step over a batch of ViewSets.

    Student global views are masked (mask tokens substituted before block 1)
    and feed both objectives; the teacher always sees unmasked views. Only
    the student receives gradients; the teacher is updated by EMA.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    dtype = next(state.student.parameters()).dtype
    sched = cfg.schedule()
    g_count = len(batch[0].global_views)
    globals_t = _stack_views([vs.global_views for vs in batch], dtype)  # (G, B, 1, *s)
    locals_t = None
    if batch[0].local_views:
        locals_t = _stack_views([vs.local_views for vs in batch], dtype)

    grid = state.student.backbone.grid_of(globals_t[0])
    n_tokens = int(np.prod(grid))
    if mask_rng is None:
        mask_rng = 0
    rng = mask_rng if isinstance(mask_rng, np.random.Generator) else np.random.default_rng(mask_rng)
    masks = []
    for vi in range(g_count):
        per_sample = []
        for si, vs in enumerate(batch):
            if vs.masks is not None:
                per_sample.append(vs.masks[vi].flat())
            else:
                per_sample.append(blockwise_mask(grid, cfg.masking_ratio, rng).flat())
        masks.append(torch.from_numpy(np.stack(per_sample)))
    mask_t = torch.stack(masks)  # (G, B, N) bool

    b = len(batch)
    teacher, student = state.teacher, state.student

    # Teacher: unmasked globals; CLS distributions centered over the G*B batch.
    with torch.no_grad():
        t_feats = [teacher.backbone(globals_t[g]) for g in range(g_count)]
        t_cls_logits = torch.cat([teacher.image_head(f.final.cls) for f in t_feats], dim=0)
        if cfg.centering == "sinkhorn":
            t_cls_dists = sinkhorn_center(t_cls_logits, cfg.teacher_temp, cfg.sinkhorn_iterations)
        else:
            t_cls_dists = torch.softmax(t_cls_logits / cfg.teacher_temp, dim=-1)
        t_cls_dists = t_cls_dists.reshape(g_count, b, -1)
        t_tok_dists = [
            _teacher_patch_dists(teacher, t_feats[g].final.patches, mask_t[g], cfg) for g in range(g_count)
        ]
        teacher_entropy = float(-torch.xlogy(t_cls_dists, t_cls_dists).sum(-1).mean())

    # Student: masked globals (CLS + masked tokens), unmasked locals (CLS only).
    s_cls_dists = []
    patch_terms = []
    for g in range(g_count):
        feats = student.backbone(globals_t[g], mask=mask_t[g])
        s_cls_dists.append(student_distribution(student.image_head(feats.final.cls), cfg.student_temp))
        s_tok_logits = student.patch_head(feats.final.patches.reshape(b * n_tokens, -1)).reshape(b, n_tokens, -1)
        s_tok_dists = student_distribution(s_tok_logits, cfg.student_temp)
        patch_terms.append(patch_level_loss(t_tok_dists[g], s_tok_dists, mask_t[g]))
    if locals_t is not None:
        for li in range(locals_t.shape[0]):
            feats = student.backbone(locals_t[li])
            s_cls_dists.append(student_distribution(student.image_head(feats.final.cls), cfg.student_temp))

    image_loss = image_level_loss(t_cls_dists, torch.stack(s_cls_dists))
    patch_loss = torch.stack(patch_terms).mean()
    total = image_loss + patch_loss
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss at iteration {state.iteration}: image={float(image_loss)}, patch={float(patch_loss)}"
        )

    lr = lr_at(state.iteration, sched)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    momentum = momentum_at(state.iteration, sched)
    ema_update(state.teacher, state.student, momentum)
    state.iteration += 1
    return {
        "iteration": state.iteration,
        "loss_total": float(total.detach()),
        "loss_image": float(image_loss.detach()),
        "loss_patch": float(patch_loss.detach()),
        "lr": lr,
        "momentum": momentum,
        "teacher_entropy": teacher_entropy,
    }


TRAIN_CHECKPOINT_FORMAT = "dentssl-train-v1"


def save_train_checkpoint(path: str | Path, state: TrainState, cfg: PretrainConfig) -> None:
    torch.save(
        {
            "format": TRAIN_CHECKPOINT_FORMAT,
            "meta": {
                "variant": cfg.variant,
                "iteration": state.iteration,
                "config": asdict(cfg),
                "config_hash": cfg.config_hash(),
            },
            "student": state.student.state_dict(),
            "teacher": state.teacher.state_dict(),
            "optimizer": state.optimizer.state_dict(),
        },
        path,
    )


def load_train_checkpoint(path: str | Path) -> tuple[TrainState, PretrainConfig]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != TRAIN_CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {TRAIN_CHECKPOINT_FORMAT} container")
    meta_cfg = dict(payload["meta"]["config"])
    for key in ("masking_ratio", "learning_rate"):
        meta_cfg[key] = tuple(meta_cfg[key])
    cfg = PretrainConfig(**meta_cfg)
    state = init_train_state(cfg)
    state.student.load_state_dict(payload["student"])
    state.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.iteration = payload["meta"]["iteration"]
    return state, cfg


def _sample_rng(seed: int, iteration: int, index: int, salt: int = 0) -> np.random.Generator:
    # Per-(iteration, sample) seeding keeps runs resumable bit-for-bit.
    return np.random.default_rng((seed, iteration, index, salt))


def _load_corpus(manifest_path: str | Path, dimensionality: str):
    records = rawio.ingest_manifest(manifest_path)
    wanted = rawio.KIND_IMAGE2D if dimensionality == "2d" else rawio.KIND_VOLUME3D
    base = Path(manifest_path).parent
    items = []
    for rec in records:
        if rec.kind != wanted:
            continue
        p = Path(rec.path)
        arr = rawio.load_tensor(p if p.is_absolute() else base / p)
        items.append((rec, arr.astype(np.float32)))
    if not items:
        raise InvalidInputError(f"manifest contains no {wanted} records")
    return items


def make_viewset(arr: np.ndarray, source_id: str, cfg: PretrainConfig, rng: np.random.Generator) -> ViewSet:
    if cfg.dimensionality == "2d":
        return make_views_2d(RadImage(pixels=arr, source_id=source_id), rng, cfg.view_config())
    return make_views_3d(VolumeGrid(voxels=arr, source_id=source_id), rng, cfg.view_config())


def pretrain(
    manifest_path: str | Path,
    cfg: PretrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    log_every: int = 10,
) -> Path:
    """Run the pre-training loop over a prepped manifest; returns the final
    checkpoint path. Re-running (or resuming) with the same seed reproduces
    the uninterrupted trajectory bit-for-bit."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = _load_corpus(manifest_path, cfg.dimensionality)

    if resume is not None:
        state, loaded_cfg = load_train_checkpoint(resume)
        if loaded_cfg.config_hash() != cfg.config_hash():
            raise CheckpointError("resume checkpoint was produced by a different configuration")
    else:
        state = init_train_state(cfg)

    history = []
    for it in range(state.iteration, cfg.total_iterations):
        torch.manual_seed((cfg.seed * 1_000_003 + it) % (2**63 - 1))
        batch_rng = np.random.default_rng((cfg.seed, it))
        indices = batch_rng.integers(0, len(items), size=min(cfg.batch_size, len(items)))
        batch = []
        for bi, idx in enumerate(indices):
            rec, arr = items[int(idx)]
            vs = make_viewset(arr, rec.path, cfg, _sample_rng(cfg.seed, it, bi, salt=1))
            grid = tuple(s // state.student.backbone.cfg.patch_size for s in vs.global_views[0].shape)
            vs.masks = [
                blockwise_mask(grid, cfg.masking_ratio, _sample_rng(cfg.seed, it, bi, salt=2 + gi))
                for gi in range(len(vs.global_views))
            ]
            batch.append(vs)
        report = train_step(batch, state, cfg)
        history.append(report)
        if log_every and report["iteration"] % log_every == 0:
            logger.info(
                "iter %d: total=%.4f image=%.4f patch=%.4f lr=%.2e",
                report["iteration"], report["loss_total"], report["loss_image"], report["loss_patch"], report["lr"],
            )
        if cfg.checkpoint_every and report["iteration"] % cfg.checkpoint_every == 0:
            save_train_checkpoint(out_dir / f"checkpoint_{report['iteration']:07d}.pt", state, cfg)

    final = out_dir / "checkpoint_final.pt"
    save_train_checkpoint(final, state, cfg)
    with open(out_dir / "train_log.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    return final
