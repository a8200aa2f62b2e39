"""Backbone tests: variant table, parameter budget, tokenization shapes,
positional-embedding interpolation, determinism, attention validity,
gradient fidelity, and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from dentssl.backbone import (
    BackboneConfig,
    VisionTransformer,
    interpolate_pos_embed,
    load_checkpoint,
    make_variant,
    param_count,
    parameter_hash,
    resize_to_patch_multiple,
    save_checkpoint,
    swiglu_hidden,
)
from dentssl.errors import InvalidInputError


def tiny_config(**kw):
    base = dict(variant="tiny", embed_dim=8, heads=2, blocks=2, patch_size=4, base_size=16)
    base.update(kw)
    return BackboneConfig(**base)


# --- variant factory -----------------------------------------------------

@pytest.mark.parametrize(
    "name,dim,heads,blocks",
    [("B", 768, 12, 12), ("L", 1024, 16, 24), ("G", 1536, 24, 40)],
)
def test_make_variant_table(name, dim, heads, blocks):
    cfg = make_variant(name)
    assert (cfg.embed_dim, cfg.heads, cfg.blocks) == (dim, heads, blocks)
    assert cfg.patch_size == 14
    cfg3 = make_variant(name, input_rank="3d")
    assert cfg3.patch_size == 16


def test_make_variant_unknown():
    with pytest.raises(InvalidInputError):
        make_variant("XL")


def test_vit_b_parameter_budget():
    model = VisionTransformer(make_variant("B"))
    n = param_count(model)
    assert abs(n - 86e6) / 86e6 < 0.05


def test_swiglu_hidden_multiple_of_heads():
    assert swiglu_hidden(768, 12) % 12 == 0
    assert swiglu_hidden(768, 12) == 2052


# --- tokenization --------------------------------------------------------

def test_patchify_224_grid():
    model = VisionTransformer(make_variant("B"))
    tokens, grid = model.embed(torch.zeros(1, 1, 224, 224))
    assert grid == (16, 16)
    assert tokens.shape == (1, 257, 768)


def test_patchify_volume_grid():
    cfg = BackboneConfig(variant="t3", embed_dim=8, heads=2, blocks=1, patch_size=16, input_rank="3d", base_size=96)
    model = VisionTransformer(cfg)
    tokens, grid = model.embed(torch.zeros(1, 1, 96, 96, 96))
    assert grid == (6, 6, 6)
    assert tokens.shape == (1, 217, 8)


def test_patchify_single_patch():
    cfg = tiny_config(patch_size=14, base_size=14)
    model = VisionTransformer(cfg)
    tokens, grid = model.embed(torch.zeros(1, 1, 14, 14))
    assert grid == (1, 1)
    assert tokens.shape == (1, 2, 8)


def test_patchify_indivisible_names_axis():
    model = VisionTransformer(tiny_config())
    with pytest.raises(InvalidInputError, match="axis 1"):
        model.embed(torch.zeros(1, 1, 16, 18))


def test_resize_policy_makes_divisible():
    model = VisionTransformer(tiny_config())
    out = model(torch.randn(1, 1, 17, 19))  # resized internally
    assert out.final.grid_dims == (4, 5)
    assert resize_to_patch_multiple(torch.zeros(1, 1, 17, 19), 4).shape[2:] == (16, 20)


# --- positional embedding -------------------------------------------------

def test_pos_embed_identity():
    table = torch.randn(1, 1 + 16 * 16, 8)
    out = interpolate_pos_embed(table, (16, 16), (16, 16))
    assert out is table


def test_pos_embed_target_shape():
    table = torch.randn(1, 1 + 16 * 16, 8)
    out = interpolate_pos_embed(table, (16, 16), (7, 7))
    assert out.shape == (1, 1 + 49, 8)
    torch.testing.assert_close(out[:, 0], table[:, 0])


def test_pos_embed_preserves_linear_ramp():
    # table value = row index: stays a linear ramp after resampling
    base = (16, 16)
    rows = torch.arange(16, dtype=torch.float32).reshape(16, 1).expand(16, 16)
    table = torch.cat([torch.zeros(1, 1, 1), rows.reshape(1, 256, 1)], dim=1)
    out = interpolate_pos_embed(table, base, (7, 7))[0, 1:, 0].reshape(7, 7)
    expected = torch.linspace(0, 15, 7).reshape(7, 1).expand(7, 7)
    torch.testing.assert_close(out, expected, atol=1e-5, rtol=0)


def test_pos_embed_rank_mismatch():
    with pytest.raises(InvalidInputError):
        interpolate_pos_embed(torch.zeros(1, 5, 4), (2, 2), (2, 2, 2))


# --- forward contracts ----------------------------------------------------

def test_eval_forward_deterministic():
    model = VisionTransformer(tiny_config(drop_path_rate=0.3)).eval()
    x = torch.randn(2, 1, 16, 16)
    a = model(x)
    b = model(x)
    torch.testing.assert_close(a.final.patches, b.final.patches, atol=0, rtol=0)


def test_layer_count_matches_blocks():
    model = VisionTransformer(make_variant("B")).eval()
    feats = model(torch.randn(1, 1, 28, 28))
    assert len(feats.layers) == 12


def test_zero_drop_path_train_equals_eval():
    model = VisionTransformer(tiny_config(drop_path_rate=0.0))
    x = torch.randn(2, 1, 16, 16)
    model.train()
    a = model(x)
    model.eval()
    b = model(x)
    torch.testing.assert_close(a.final.patches, b.final.patches, atol=0, rtol=0)


def test_attention_rows_sum_to_one():
    model = VisionTransformer(tiny_config()).eval()
    feats = model(torch.randn(3, 1, 16, 16), keep_all_attention=True)
    for attn in feats.attentions:
        torch.testing.assert_close(attn.sum(dim=-1), torch.ones_like(attn.sum(dim=-1)), atol=1e-5, rtol=0)


def test_batch_permutation_equivariance():
    model = VisionTransformer(tiny_config()).eval()
    x = torch.randn(4, 1, 16, 16)
    perm = torch.tensor([2, 0, 3, 1])
    a = model(x).final.patches
    b = model(x[perm]).final.patches
    torch.testing.assert_close(b, a[perm], atol=1e-6, rtol=0)


def test_mask_token_substitution_changes_masked_positions_only():
    model = VisionTransformer(tiny_config()).eval()
    x = torch.randn(1, 1, 16, 16)
    mask = torch.zeros(1, 16, dtype=torch.bool)
    mask[0, 3] = True
    plain, _ = model.embed(x)
    masked, _ = model.embed(x, mask=mask)
    diff = (plain - masked).abs().sum(-1)[0]
    assert diff[1 + 3] > 0  # offset 1 for CLS
    assert torch.all(diff[torch.arange(17) != 4] == 0)


def test_input_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = VisionTransformer(tiny_config()).double().eval()
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
    # random linear readout: sum(LayerNorm(.)) would be identically constant
    v = torch.randn(8, dtype=torch.float64)
    readout = (model(x).final.cls * v).sum()
    (grad,) = torch.autograd.grad(readout, x)

    def f(inp):
        with torch.no_grad():
            return float((model(inp).final.cls * v).sum())

    rng = np.random.default_rng(0)
    picks = rng.choice(x.numel(), size=40, replace=False)
    h = 1e-6
    max_rel = 0.0
    flat = x.detach().clone().reshape(-1)
    for i in picks:
        e = torch.zeros_like(flat)
        e[i] = h
        num = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
        ana = float(grad.reshape(-1)[i])
        rel = abs(ana - num) / max(1e-8, abs(ana), abs(num))
        max_rel = max(max_rel, rel)
    assert max_rel <= 1e-3


# --- checkpoints ----------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = VisionTransformer(tiny_config())
    p = tmp_path / "ckpt.pt"
    save_checkpoint(p, model, iteration=123)
    loaded, meta = load_checkpoint(p)
    assert meta["iteration"] == 123
    assert meta["variant"] == "tiny"
    assert parameter_hash(loaded) == parameter_hash(model)
    for (ka, va), (kb, vb) in zip(sorted(model.state_dict().items()), sorted(loaded.state_dict().items())):
        assert ka == kb
        assert torch.equal(va, vb)
