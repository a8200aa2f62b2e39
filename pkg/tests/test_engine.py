"""SSL engine tests: heads, distributions, Sinkhorn centering, the two
distillation objectives against brute-force oracles, EMA semantics,
schedules, preset fidelity, and training-loop contracts."""

import copy
import math

import numpy as np
import pytest
import torch

from dentssl.augment import MaskSpec, ViewSet
from dentssl.backbone import parameter_hash
from dentssl.engine import (
    HeadConfig,
    PretrainConfig,
    ProjectionHead,
    ScheduleConfig,
    ema_update,
    image_level_loss,
    init_train_state,
    load_train_checkpoint,
    lr_at,
    momentum_at,
    patch_level_loss,
    preset,
    pretrain,
    save_train_checkpoint,
    sinkhorn_center,
    student_distribution,
    train_step,
)
from dentssl.errors import InvalidInputError
from dentssl import rawio


# --- oracles ----------------------------------------------------------------

def oracle_h(a: np.ndarray, b: np.ndarray) -> float:
    """H(a, b) = -sum a*log(b) with the 0*log(0)=0 convention."""
    total = 0.0
    for ai, bi in zip(a, b):
        if ai > 0:
            total -= ai * math.log(bi)
    return total


def oracle_image_loss(teacher: np.ndarray, student: np.ndarray) -> float:
    """Brute-force double loop over all (teacher view, student view) pairs."""
    terms = []
    for g in range(teacher.shape[0]):
        for v in range(student.shape[0]):
            if v == g:
                continue
            terms.append(oracle_h(teacher[g], student[v]))
    return float(np.mean(terms))


def oracle_patch_loss(teacher: np.ndarray, student: np.ndarray, mask: np.ndarray) -> float:
    """Explicit per-index loop over masked tokens."""
    terms = [oracle_h(teacher[j], student[j]) for j in range(mask.size) if mask[j]]
    return float(np.mean(terms))


def oracle_sinkhorn(logits: np.ndarray, temp: float, iters: int) -> np.ndarray:
    """Direct alternating-normalization reference (prototype rows to 1/K,
    sample columns to 1/B, then rescale samples to sum 1)."""
    q = np.exp(logits / temp - np.max(logits / temp)).T  # (K, B)
    q = q / q.sum()
    k, b = q.shape
    for _ in range(iters):
        q = q / q.sum(axis=1, keepdims=True) / k
        q = q / q.sum(axis=0, keepdims=True) / b
    return (q * b).T


def tiny_pretrain_config(**kw) -> PretrainConfig:
    base = dict(
        dimensionality="2d",
        variant="B",
        embed_dim=8,
        heads=2,
        blocks=1,
        patch_size=8,
        drop_path_rate=0.0,
        global_crop_size=16,
        global_crop_number=2,
        local_crop_size=8,
        local_crop_number=2,
        dino_head_prototypes=16,
        dino_head_dim=8,
        ibot_head_prototypes=16,
        ibot_head_dim=8,
        head_hidden_dim=16,
        batch_size=2,
        total_iterations=4,
        warmup_iterations=1,
        learning_rate=(0.0, 1e-3, 1e-5),
        seed=0,
    )
    base.update(kw)
    return PretrainConfig(**base)


# --- projection head ----------------------------------------------------------

def test_head_zero_feature_deterministic():
    torch.manual_seed(0)
    head = ProjectionHead(8, HeadConfig(prototypes=16, bottleneck_dim=4, hidden_dim=8))
    a = head(torch.zeros(3, 8))
    b = head(torch.zeros(3, 8))
    torch.testing.assert_close(a, b, atol=0, rtol=0)
    assert torch.isfinite(a).all()


def test_head_output_length_2d_b():
    head = ProjectionHead(768, HeadConfig(prototypes=65536, bottleneck_dim=256))
    out = head(torch.randn(2, 768))
    assert out.shape == (2, 65536)


def test_head_prototype_scale_invariance():
    torch.manual_seed(1)
    head = ProjectionHead(8, HeadConfig(prototypes=16, bottleneck_dim=4, hidden_dim=8))
    z = torch.randn(5, 4)
    torch.testing.assert_close(head.prototype_logits(z), head.prototype_logits(10 * z), atol=1e-5, rtol=0)


# --- student distribution ------------------------------------------------------

def test_student_distribution_uniform():
    out = student_distribution(torch.zeros(1, 6), 0.1)
    torch.testing.assert_close(out, torch.full((1, 6), 1 / 6))


def test_student_distribution_dominant_logit():
    logits = torch.zeros(1, 4)
    logits[0, 2] = 50.0
    out = student_distribution(logits, 0.5)
    assert out[0, 2] > 0.999999


def test_student_distribution_closed_form():
    out = student_distribution(torch.tensor([[0.0, math.log(3.0)]]), 1.0)
    torch.testing.assert_close(out, torch.tensor([[0.25, 0.75]]))


def test_student_distribution_bad_temp():
    with pytest.raises(InvalidInputError):
        student_distribution(torch.zeros(1, 2), 0.0)


# --- sinkhorn centering ---------------------------------------------------------

def test_sinkhorn_uniform_fixed_point():
    q = sinkhorn_center(torch.zeros(4, 8), 0.07, iters=3)
    torch.testing.assert_close(q, torch.full((4, 8), 1 / 8))
    torch.testing.assert_close(q.sum(0), torch.full((8,), 0.5))


def test_sinkhorn_batch_of_one_is_softmax():
    torch.manual_seed(2)
    logits = torch.randn(1, 16)
    for iters in (1, 3, 10):
        torch.testing.assert_close(
            sinkhorn_center(logits, 0.07, iters), torch.softmax(logits / 0.07, dim=-1)
        )


def test_sinkhorn_matches_oracle_and_column_balance():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(8, 16))
    ours = sinkhorn_center(torch.from_numpy(logits), 1.0, iters=3).numpy()
    ref = oracle_sinkhorn(logits, 1.0, 3)
    np.testing.assert_allclose(ours, ref, atol=1e-10)
    np.testing.assert_allclose(ours.sum(axis=1), 1.0, atol=1e-5)
    col = ours.sum(axis=0)
    target = 8 / 16
    assert np.all(np.abs(col - target) <= 0.1 * target)


def test_sinkhorn_imbalance_non_increasing():
    rng = np.random.default_rng(4)
    logits = torch.from_numpy(rng.normal(size=(6, 12)))
    prev = None
    for iters in range(1, 7):
        q = sinkhorn_center(logits, 1.0, iters)
        imbalance = float((q.sum(0) - 6 / 12).abs().max())
        if prev is not None:
            assert imbalance <= prev + 1e-12
        prev = imbalance


# --- image-level loss ------------------------------------------------------------

def test_image_loss_identical_one_hot_is_zero():
    one_hot = torch.zeros(2, 4)
    one_hot[:, 1] = 1.0
    student = torch.zeros(3, 4)
    student[:, 1] = 1.0
    assert float(image_level_loss(one_hot, student)) == 0.0


def test_image_loss_one_hot_vs_uniform():
    teacher = torch.zeros(2, 4)
    teacher[:, 0] = 1.0
    student = torch.full((3, 4), 0.25)
    assert float(image_level_loss(teacher, student)) == pytest.approx(math.log(4.0), rel=1e-6)


def test_image_loss_term_count_two_globals_eight_locals():
    # 2 teacher views x 9 student partners = 18 cross terms
    teacher = torch.rand(2, 6) + 0.01
    teacher = teacher / teacher.sum(-1, keepdim=True)
    student = torch.rand(10, 6) + 0.01
    student = student / student.sum(-1, keepdim=True)
    ours = float(image_level_loss(teacher, student))
    ref = oracle_image_loss(teacher.numpy(), student.numpy())
    assert ours == pytest.approx(ref, abs=1e-6)


def test_image_loss_matches_oracle_many_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        kp = int(rng.integers(2, 9))
        n_local = int(rng.integers(0, 4))
        teacher = rng.dirichlet(np.ones(kp), size=2)
        student = rng.dirichlet(np.ones(kp), size=2 + n_local)
        ours = float(image_level_loss(torch.from_numpy(teacher), torch.from_numpy(student)))
        assert ours == pytest.approx(oracle_image_loss(teacher, student), abs=1e-6)


def test_image_loss_view_mismatch():
    with pytest.raises(InvalidInputError):
        image_level_loss(torch.rand(3, 4), torch.rand(2, 4))


# --- patch-level loss --------------------------------------------------------------

def test_patch_loss_identical_one_hot_zero():
    t = torch.zeros(5, 3)
    t[:, 2] = 1.0
    mask = torch.ones(5, dtype=torch.bool)
    assert float(patch_level_loss(t, t.clone(), mask)) == 0.0


def test_patch_loss_uniform_vs_one_hot():
    teacher = torch.zeros(5, 4)
    teacher[:, 1] = 1.0
    student = torch.full((5, 4), 0.25)
    mask = torch.ones(5, dtype=torch.bool)
    assert float(patch_level_loss(teacher, student, mask)) == pytest.approx(math.log(4.0), rel=1e-6)


def test_patch_loss_matches_oracle_many_instances():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(2, 10))
        kp = int(rng.integers(2, 8))
        teacher = rng.dirichlet(np.ones(kp), size=n)
        student = rng.dirichlet(np.ones(kp), size=n)
        mask = rng.random(n) < 0.5
        if not mask.any():
            mask[0] = True
        ours = float(patch_level_loss(torch.from_numpy(teacher), torch.from_numpy(student), torch.from_numpy(mask)))
        assert ours == pytest.approx(oracle_patch_loss(teacher, student, mask), abs=1e-6)


def test_patch_loss_empty_mask_is_zero():
    t = torch.rand(4, 3)
    assert float(patch_level_loss(t, t, torch.zeros(4, dtype=torch.bool))) == 0.0


# --- EMA ----------------------------------------------------------------------------

def test_ema_endpoints():
    t = [torch.full((2, 2), 2.0)]
    s = [torch.zeros(2, 2)]
    ema_update(t, s, 1.0)
    torch.testing.assert_close(t[0], torch.full((2, 2), 2.0))
    ema_update(t, s, 0.0)
    torch.testing.assert_close(t[0], torch.zeros(2, 2))


def test_ema_midpoint():
    t = [torch.full((3,), 2.0)]
    ema_update(t, [torch.zeros(3)], 0.5)
    torch.testing.assert_close(t[0], torch.ones(3))


def test_ema_linearity():
    rng = torch.Generator().manual_seed(0)
    a, b, c, d = (torch.randn(4, 5, generator=rng) for _ in range(4))
    lam = 0.7
    t1 = [a.clone()]
    ema_update(t1, [b], lam)
    t2 = [c.clone()]
    ema_update(t2, [d], lam)
    t3 = [(a + c)]
    ema_update(t3, [b + d], lam)
    torch.testing.assert_close(t1[0] + t2[0], t3[0], atol=1e-6, rtol=0)


def test_ema_shape_mismatch():
    with pytest.raises(InvalidInputError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


# --- schedules ------------------------------------------------------------------------

def test_lr_schedule_endpoints():
    sched = ScheduleConfig(0.0, 0.001, 1.0e-06, warmup_iters=12500, total_iters=125000)
    assert lr_at(0, sched) == 0.0
    assert lr_at(12500, sched) == pytest.approx(0.001)
    assert lr_at(125000, sched) == pytest.approx(1.0e-06)


def test_lr_schedule_out_of_range():
    sched = ScheduleConfig(0.0, 1e-3, 1e-6, warmup_iters=10, total_iters=100)
    with pytest.raises(InvalidInputError):
        lr_at(101, sched)
    with pytest.raises(InvalidInputError):
        lr_at(-1, sched)


def test_momentum_schedule_monotone():
    sched = ScheduleConfig(0.0, 1e-3, 1e-6, warmup_iters=0, total_iters=100)
    values = [momentum_at(i, sched) for i in range(0, 101, 10)]
    assert values[0] == pytest.approx(0.994)
    assert values[-1] == pytest.approx(1.0)
    assert all(b >= a for a, b in zip(values, values[1:]))


# --- presets ---------------------------------------------------------------------------

def test_preset_2d_b_table_values():
    cfg = preset("2d_b")
    assert cfg.global_crop_size == 224 and cfg.global_crop_number == 2
    assert cfg.local_crop_size == 98 and cfg.local_crop_number == 8
    assert cfg.dino_head_prototypes == 65536 and cfg.dino_head_dim == 256
    assert cfg.ibot_head_prototypes == 65536 and cfg.ibot_head_dim == 256
    assert cfg.masking_ratio == (0.1, 0.5)
    assert cfg.shared_head is False
    assert cfg.batch_size == 2048
    assert cfg.total_iterations == 125000
    assert cfg.warmup_iterations == 12500
    assert cfg.learning_rate == (0.0, 0.001, 1.0e-06)
    assert cfg.weight_decay == 0.04
    assert cfg.drop_path_rate == 0.3


def test_preset_3d_crop_sizes():
    cfg = preset("3d_b")
    assert cfg.global_crop_size == 96 and cfg.local_crop_size == 48
    assert cfg.total_iterations == 90000 and cfg.warmup_iterations == 3000


def test_preset_2d_l_heads():
    cfg = preset("2d_l")
    assert cfg.dino_head_prototypes == 131072 and cfg.dino_head_dim == 384
    assert cfg.ibot_head_prototypes == 131072 and cfg.ibot_head_dim == 256
    assert cfg.drop_path_rate == 0.4


# --- train_step / pretrain ----------------------------------------------------------------

def _toy_batch(cfg: PretrainConfig, seed=0) -> list[ViewSet]:
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(cfg.batch_size):
        g = [rng.uniform(0, 1, (cfg.global_crop_size,) * 2).astype(np.float32) for _ in range(cfg.global_crop_number)]
        l = [rng.uniform(0, 1, (cfg.local_crop_size,) * 2).astype(np.float32) for _ in range(cfg.local_crop_number)]
        batch.append(ViewSet(global_views=g, local_views=l))
    return batch


def test_train_step_momentum_one_freezes_teacher():
    cfg = tiny_pretrain_config(momentum_start=1.0, momentum_final=1.0)
    state = init_train_state(cfg)
    before = parameter_hash(state.teacher)
    # two steps: the first runs at warmup lr 0 and cannot move the student
    train_step(_toy_batch(cfg), state, cfg, mask_rng=0)
    train_step(_toy_batch(cfg, seed=1), state, cfg, mask_rng=1)
    assert parameter_hash(state.teacher) == before
    assert parameter_hash(state.student) != before


def test_train_step_teacher_receives_no_gradients():
    cfg = tiny_pretrain_config()
    state = init_train_state(cfg)
    train_step(_toy_batch(cfg), state, cfg, mask_rng=0)
    assert all(p.grad is None for p in state.teacher.parameters())
    assert all(not p.requires_grad for p in state.teacher.parameters())


def test_train_step_deterministic_losses():
    reports = []
    for _ in range(2):
        cfg = tiny_pretrain_config()
        torch.manual_seed(123)
        state = init_train_state(cfg)
        r = [train_step(_toy_batch(cfg, seed=s), state, cfg, mask_rng=s)["loss_total"] for s in range(3)]
        reports.append(r)
    assert reports[0] == reports[1]


def _write_toy_manifest(tmp_path, n=6, size=24):
    rng = np.random.default_rng(0)
    records = []
    for i in range(n):
        arr = rng.uniform(0, 1, (size, size)).astype(np.float32)
        name = f"im{i}.rt"
        rawio.save_tensor(tmp_path / name, arr)
        records.append(rawio.ManifestRecord(name, "image2d", "PAN", (size, size)))
    manifest = tmp_path / "manifest.tsv"
    rawio.write_manifest(records, manifest)
    return manifest


def test_pretrain_zero_iterations_checkpoint_is_init(tmp_path):
    cfg = tiny_pretrain_config(total_iterations=0, warmup_iterations=0)
    manifest = _write_toy_manifest(tmp_path)
    final = pretrain(manifest, cfg, tmp_path / "run")
    state, _ = load_train_checkpoint(final)
    fresh = init_train_state(cfg)
    assert parameter_hash(state.student) == parameter_hash(fresh.student)
    assert parameter_hash(state.teacher) == parameter_hash(fresh.teacher)
    # teacher == student at iteration 0
    assert parameter_hash(state.teacher.backbone) == parameter_hash(state.student.backbone)


def test_pretrain_same_seed_identical_trajectories(tmp_path):
    cfg = tiny_pretrain_config(total_iterations=3)
    manifest = _write_toy_manifest(tmp_path)
    pretrain(manifest, cfg, tmp_path / "a")
    pretrain(manifest, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()


def test_pretrain_resume_bitwise_equivalent(tmp_path):
    manifest = _write_toy_manifest(tmp_path)
    cfg = tiny_pretrain_config(total_iterations=4, checkpoint_every=2)
    final_full = pretrain(manifest, cfg, tmp_path / "full")
    midpoint = tmp_path / "full" / "checkpoint_0000002.pt"
    assert midpoint.is_file()
    final_resumed = pretrain(manifest, cfg, tmp_path / "resumed", resume=midpoint)

    a, _ = load_train_checkpoint(final_full)
    b, _ = load_train_checkpoint(final_resumed)
    assert parameter_hash(a.student) == parameter_hash(b.student)
    assert parameter_hash(a.teacher) == parameter_hash(b.teacher)
