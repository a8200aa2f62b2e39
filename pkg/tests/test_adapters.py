"""Adapter-suite tests: probe grid and embeddings, segmentation heads,
tap formula, spatial prior module, injector/extractor equations, and the
fine-tuning loops' contracts."""

import math

import numpy as np
import pytest
import torch

from dentssl.adapters import (
    ADAPTER_LAYER_OPTIONS,
    ADAPTER_LR_GRID,
    CrossAttention,
    Extractor,
    Injector,
    LinearSegHead2D,
    ProbeGrid,
    SpatialPriorModule,
    UNETRHead3D,
    ViTAdapter,
    finetune_adapter_classifier,
    finetune_segmentation,
    image_embedding,
    linear_probe,
    make_seg_head,
    spm_token_count,
    unetr_layer_taps,
)
from dentssl.backbone import BackboneConfig, VisionTransformer, parameter_hash
from dentssl.errors import InvalidInputError


def tiny_backbone(blocks=4, dim=16, patch=8, base=32, rank="2d", heads=2, seed=0):
    torch.manual_seed(seed)
    cfg = BackboneConfig(
        variant="tiny", embed_dim=dim, heads=heads, blocks=blocks, patch_size=patch,
        input_rank=rank, base_size=base,
    )
    return VisionTransformer(cfg)


# --- probe grid ---------------------------------------------------------------

def test_probe_grid_contract():
    grid = ProbeGrid.log_spaced()
    assert len(grid.c_values) == 45
    assert grid.c_values[0] == pytest.approx(1e-6, rel=1e-12)
    assert grid.c_values[-1] == pytest.approx(1e5, rel=1e-12)
    ratios = np.diff(np.log10(np.array(grid.c_values)))
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
    assert grid.max_iter == 1000
    assert grid.tol == 1e-12


# --- image embedding ------------------------------------------------------------

def test_image_embedding_last_layer_cls():
    bb = tiny_backbone()
    x = torch.randn(3, 1, 32, 32)
    emb = image_embedding(bb, x, layers=1)
    bb.eval()
    with torch.no_grad():
        expected = bb(x).final.cls
    torch.testing.assert_close(emb, expected, atol=0, rtol=0)


def test_image_embedding_four_layer_mean_oracle():
    bb = tiny_backbone()
    x = torch.randn(2, 1, 32, 32)
    emb = image_embedding(bb, x, layers=4)
    bb.eval()
    with torch.no_grad():
        feats = bb(x)
        expected = (feats.layers[-1].cls + feats.layers[-2].cls + feats.layers[-3].cls + feats.layers[-4].cls) / 4
    torch.testing.assert_close(emb, expected, atol=1e-6, rtol=0)


def test_image_embedding_bad_layer_count():
    with pytest.raises(InvalidInputError):
        image_embedding(tiny_backbone(), torch.randn(1, 1, 32, 32), layers=2)


# --- linear probe ------------------------------------------------------------------

def test_linear_probe_separable_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal(loc=+3.0, size=(30, 8))
    b = rng.normal(loc=-3.0, size=(30, 8))
    x = np.vstack([a, b])
    y = np.array([0] * 30 + [1] * 30)
    result = linear_probe(x, y, seed=0)
    assert result.train_accuracy == 1.0


def test_linear_probe_chance_level_on_random_labels():
    rng = np.random.default_rng(1)
    accs = []
    for seed in range(5):
        x = rng.normal(size=(120, 6))
        y = rng.integers(0, 2, size=120)
        plan = np.random.default_rng(seed).permutation(120)
        tr, te = plan[:80], plan[80:]
        res = linear_probe(x[tr], y[tr], seed=seed, test_embeddings=x[te], test_labels=y[te])
        accs.append(res.test_accuracy)
    assert abs(float(np.mean(accs)) - 0.5) <= 0.1


def test_linear_probe_single_class_rejected():
    with pytest.raises(InvalidInputError):
        linear_probe(np.zeros((10, 3)), np.zeros(10, dtype=int))


# --- seg heads -----------------------------------------------------------------------

def test_linear_seg_head_output_shape():
    head = LinearSegHead2D(embed_dim=16, classes=3)
    taps = [torch.randn(2, 16, 16) for _ in range(4)]
    out = head(taps, (4, 4), (37, 53))
    assert out.shape == (2, 3, 37, 53)


def test_linear_seg_head_constant_features_constant_logits():
    head = LinearSegHead2D(embed_dim=8, classes=2).eval()
    taps = [torch.ones(1, 16, 8) * (i + 1) for i in range(4)]
    out = head(taps, (4, 4), (32, 32))
    for c in range(2):
        channel = out[0, c]
        torch.testing.assert_close(channel, torch.full_like(channel, channel[0, 0].item()), atol=1e-5, rtol=0)


def test_linear_seg_head_wrong_tap_count():
    head = LinearSegHead2D(embed_dim=8, classes=2)
    with pytest.raises(InvalidInputError):
        head([torch.randn(1, 16, 8)] * 3, (4, 4), (32, 32))


@pytest.mark.parametrize("blocks,expected", [(12, (3, 6, 9, 12)), (24, (6, 12, 18, 24)), (40, (10, 20, 30, 40))])
def test_unetr_layer_taps(blocks, expected):
    assert unetr_layer_taps(blocks) == expected
    assert set(expected) <= set(range(1, blocks + 1))
    assert expected[-1] == blocks


def test_unetr_layer_taps_indivisible():
    with pytest.raises(InvalidInputError):
        unetr_layer_taps(10)


def test_unetr_head_output_shape_96():
    head = UNETRHead3D(embed_dim=8, classes=2, patch_size=16, feature_size=4)
    taps = [torch.randn(1, 216, 8) for _ in range(4)]
    out = head(taps, (6, 6, 6), (96, 96, 96))
    assert out.shape == (1, 2, 96, 96, 96)


def test_unetr_head_single_class():
    head = UNETRHead3D(embed_dim=8, classes=1, patch_size=8, feature_size=4)
    taps = [torch.randn(2, 27, 8) for _ in range(4)]
    out = head(taps, (3, 3, 3), (24, 24, 24))
    assert out.shape == (2, 1, 24, 24, 24)


def test_unetr_head_unreconstructible_dims():
    head = UNETRHead3D(embed_dim=8, classes=1, patch_size=8, feature_size=4)
    with pytest.raises(InvalidInputError):
        head([torch.randn(1, 27, 8)] * 4, (3, 3, 3), (25, 24, 24))


# --- spatial prior module ----------------------------------------------------------------

def test_spm_token_count_2d():
    assert spm_token_count((224, 224)) == 1029  # 784 + 196 + 49


def test_spm_token_count_3d():
    assert spm_token_count((96, 96, 96)) == 1971  # 1728 + 216 + 27


def test_spm_forward_shapes_2d():
    spm = SpatialPriorModule(embed_dim=16, ndim=2)
    pyr = spm(torch.randn(2, 1, 224, 224))
    assert pyr.f1.shape == (2, 16, 28, 28)
    assert pyr.f2.shape == (2, 16, 14, 14)
    assert pyr.f3.shape == (2, 16, 7, 7)
    assert pyr.tokens.shape == (2, 1029, 16)


def test_spm_forward_shapes_3d():
    spm = SpatialPriorModule(embed_dim=8, ndim=3)
    pyr = spm(torch.randn(1, 1, 96, 96, 96))
    assert pyr.tokens.shape == (1, 1971, 8)


def test_spm_token_count_property_random_multiples():
    rng = np.random.default_rng(2)
    spm = SpatialPriorModule(embed_dim=4, ndim=2)
    for _ in range(5):
        h, w = (int(rng.integers(1, 5)) * 32 for _ in range(2))
        pyr = spm(torch.zeros(1, 1, h, w))
        assert pyr.tokens.shape[1] == spm_token_count((h, w))


def test_spm_zero_input_zero_pyramid():
    spm = SpatialPriorModule(embed_dim=8, ndim=2)
    pyr = spm(torch.zeros(2, 1, 64, 64))
    assert float(pyr.tokens.abs().max()) == 0.0


def test_spm_indivisible_rejected():
    spm = SpatialPriorModule(embed_dim=8, ndim=2)
    with pytest.raises(InvalidInputError):
        spm(torch.zeros(1, 1, 65, 64))


# --- injector / extractor -------------------------------------------------------------------

def test_injector_gamma_zero_identity():
    torch.manual_seed(0)
    inj = Injector(dim=16, heads=2)
    f_vit = torch.randn(2, 10, 16)
    f_sp = torch.randn(2, 7, 16)
    out = inj(f_vit, f_sp)
    torch.testing.assert_close(out, f_vit, atol=0, rtol=0)


def test_injector_single_key_closed_form():
    torch.manual_seed(1)
    attn = CrossAttention(dim=8, heads=2)
    query = torch.randn(1, 5, 8)
    kv = torch.randn(1, 1, 8)  # single token: softmax over one key is 1
    out = attn(query, kv)
    expected = attn.proj(attn.v(kv)).expand(1, 5, 8)
    torch.testing.assert_close(out, expected, atol=1e-6, rtol=0)


def test_injector_gamma_scales_delta_linearly():
    torch.manual_seed(2)
    inj = Injector(dim=8, heads=2)
    f_vit = torch.randn(1, 6, 8)
    f_sp = torch.randn(1, 4, 8)
    with torch.no_grad():
        inj.gamma.fill_(1.0)
        delta1 = inj(f_vit, f_sp) - f_vit
        inj.gamma.fill_(2.0)
        delta2 = inj(f_vit, f_sp) - f_vit
    torch.testing.assert_close(delta2, 2 * delta1, atol=1e-6, rtol=0)


def test_extractor_zero_init_projections_identity():
    torch.manual_seed(3)
    ext = Extractor(dim=8, heads=2)
    with torch.no_grad():
        ext.attn.proj.weight.zero_()
        ext.attn.proj.bias.zero_()
        ext.ffn[-1].weight.zero_()
        ext.ffn[-1].bias.zero_()
    f_sp = torch.randn(2, 9, 8)
    f_vit = torch.randn(2, 5, 8)
    torch.testing.assert_close(ext(f_sp, f_vit), f_sp, atol=0, rtol=0)


def test_extractor_preserves_query_token_count():
    ext = Extractor(dim=8, heads=2)
    out = ext(torch.randn(1, 11, 8), torch.randn(1, 4, 8))
    assert out.shape == (1, 11, 8)


def test_extractor_matches_two_step_oracle():
    torch.manual_seed(4)
    ext = Extractor(dim=8, heads=2).eval()
    f_sp = torch.randn(1, 6, 8)
    f_vit = torch.randn(1, 3, 8)
    with torch.no_grad():
        ours = ext(f_sp, f_vit)
        # the two displayed update equations, applied literally
        hat = f_sp + ext.attn(ext.norm_query(f_sp), ext.norm_kv(f_vit))
        ref = hat + ext.ffn(ext.norm_ffn(hat))
    torch.testing.assert_close(ours, ref, atol=1e-6, rtol=0)


# --- full adapter ------------------------------------------------------------------------------

def test_vit_adapter_identity_at_init_and_shapes():
    bb = tiny_backbone(blocks=4, dim=16, patch=8, base=32)
    adapter = ViTAdapter(bb, heads=2)
    x = torch.randn(1, 1, 32, 32)
    feats, pyramid = adapter(x)
    assert len(feats) == 4
    assert feats[-1].shape == (1, 17, 16)
    assert pyramid.tokens.shape[1] == spm_token_count((32, 32))
    # gamma = 0 at init: tap features equal the plain backbone's tap features
    bb.eval()
    with torch.no_grad():
        plain = bb(x)
    taps = unetr_layer_taps(4)
    for f, tap in zip(feats, taps):
        layer = plain.layers[tap - 1]
        torch.testing.assert_close(f[:, 0], layer.cls, atol=1e-6, rtol=0)
        torch.testing.assert_close(f[:, 1:], layer.patches, atol=1e-6, rtol=0)


def test_vit_adapter_backbone_frozen():
    bb = tiny_backbone(blocks=4)
    ViTAdapter(bb)
    assert all(not p.requires_grad for p in bb.parameters())


# --- fine-tuning loops ---------------------------------------------------------------------------

def test_adapter_classifier_grid_contract():
    assert len(ADAPTER_LR_GRID) == 13
    assert min(ADAPTER_LR_GRID) == 1e-5
    assert max(ADAPTER_LR_GRID) == 0.1
    assert ADAPTER_LAYER_OPTIONS == (1, 4)


def test_adapter_classifier_separable_toy():
    bb = tiny_backbone(blocks=4, dim=16, patch=8, base=32)
    rng = np.random.default_rng(0)
    n = 24
    images = np.zeros((n, 32, 32), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        # horizontal bands: classes invariant to the flip augmentation
        if i % 2:
            images[i, 2:12, :] = 200.0
            labels[i] = 1
        else:
            images[i, 20:30, :] = 200.0
        images[i] += rng.normal(0, 2.0, size=(32, 32))
    fit = finetune_adapter_classifier(
        bb, images, labels, lr_grid=(1e-2, 5e-2), layer_options=(1, 4), iterations=300, seed=0
    )
    assert len(fit.grid_scores) == 4
    assert fit.val_accuracy == 1.0
    assert fit.backbone_hash == parameter_hash(bb)


def test_finetune_segmentation_freezes_backbone_and_improves():
    bb = tiny_backbone(blocks=4, dim=16, patch=8, base=32)
    rng = np.random.default_rng(1)
    n = 12
    images = rng.normal(0, 1.0, size=(n, 32, 32)).astype(np.float32)
    masks = np.zeros((n, 32, 32), dtype=np.int64)
    for i in range(n):
        r, c = rng.integers(2, 18, size=2)
        images[i, r : r + 12, c : c + 12] += 8.0
        masks[i, r : r + 12, c : c + 12] = 1
    head = make_seg_head(bb, classes=2, mode="linear2d")
    before = parameter_hash(bb)
    fit = finetune_segmentation(bb, images, masks, head, mode="linear2d", classes=1, epochs=30, seed=0)
    assert parameter_hash(bb) == before
    assert fit.backbone_hash == before
    assert fit.best_val_dice > 0.5
