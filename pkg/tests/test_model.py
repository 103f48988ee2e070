import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from rangeseq.model import FULL, TOY, ModelConfig, PredictionNet, TransformerBranch, count_params_flops
from rangeseq.tensor_core import ShapeError, configure_threads

D = torch.float64


def toy_input(seed=0, cfg=TOY, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 1, cfg.P, cfg.height, cfg.width, generator=g, dtype=dtype)


def test_bottleneck_and_output_shapes():
    net = PredictionNet(TOY)
    feats, skips = net.encode(toy_input())
    assert tuple(feats.shape[1:]) == (32, 5, 2, 8) == TOY.bottleneck
    assert [tuple(s.shape[1:]) for s in skips] == [(1, 5, 16, 64), (8, 5, 8, 32), (16, 5, 4, 16)]
    fused = net.transform(feats)
    assert fused.shape == feats.shape
    out = net(toy_input())
    assert out.range_pred.shape == out.mask_prob.shape == (1, 5, 16, 64)


@pytest.mark.parametrize("P, F, H, W", [(5, 5, 16, 64), (3, 4, 8, 32), (2, 1, 32, 16), (1, 3, 16, 16)])
def test_shape_contract_other_configs(P, F, H, W):
    cfg = ModelConfig(P=P, F=F, height=H, width=W, channels=(4, 8), n_heads=2, ff_width=8)
    out = PredictionNet(cfg).predict(np.full((P, H, W), 10.0))
    assert out.range_pred.shape == (F, H, W) and out.mask_prob.shape == (F, H, W)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        ModelConfig(height=12)
    with pytest.raises(ValueError):
        ModelConfig(n_heads=5)
    with pytest.raises(ValueError):
        ModelConfig(width=96, channels=(8, 16, 32))  # bottleneck width 12
    with pytest.raises(ValueError):
        ModelConfig(branch="diagonal")
    assert ModelConfig(branch="H-only").branch == "H"
    assert ModelConfig(width=96, branch="W").branch == "W"


def test_encoder_rotation_equivariance():
    net = PredictionNet(TOY)
    x = toy_input(3)
    stride = 2 ** TOY.n_stages
    for k in (stride, 3 * stride, 5 * stride):
        feats, skips = net.encode(x)
        feats_rot, skips_rot = net.encode(torch.roll(x, k, -1))
        assert torch.equal(feats_rot, torch.roll(feats, k // stride, -1))
        for i, (a, b) in enumerate(zip(skips, skips_rot)):
            assert torch.equal(b, torch.roll(a, k // 2 ** i, -1))


def test_same_seed_same_model():
    a, b = PredictionNet(TOY), PredictionNet(TOY)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    configure_threads(1)
    x = toy_input(1)
    assert torch.equal(a(x).range_pred, b(x).range_pred)
    c = PredictionNet(replace(TOY, seed=1))
    assert not torch.equal(c.decoder.head.weight, a.decoder.head.weight)


def test_outputs_bounded():
    net = PredictionNet(TOY)
    with torch.no_grad():
        net.decoder.head.bias.fill_(50.0)
    out = net(toy_input())
    assert out.range_pred.max() <= TOY.r_max and out.range_pred.min() >= 0
    assert out.mask_prob.max() <= 1 and out.mask_prob.min() >= 0


def test_uniform_attention_gives_value_mean():
    br = TransformerBranch(8, 2, 2, 4, "W", n_layers=1, n_heads=2, ff_width=8).double()
    layer = br.layers[0]
    with torch.no_grad():
        for m in (layer.attn.q, layer.attn.k):
            m.weight.zero_()
            m.bias.zero_()
    s = torch.randn(1, 8, 8, dtype=D)
    normed = layer.norm1(s)
    v = layer.attn.v(normed)
    expected = layer.attn.out(v.mean(dim=1, keepdim=True).expand_as(v))
    torch.testing.assert_close(layer.attn(normed), expected)


def test_attention_permutation_equivariance():
    br = TransformerBranch(8, 2, 2, 4, "W", n_layers=1, n_heads=2, ff_width=8).double()
    with torch.no_grad():
        br.pos.zero_()
    s = torch.randn(1, 8, 8, dtype=D)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(0))
    torch.testing.assert_close(br.attend(s)[:, perm], br.attend(s[:, perm]))


@pytest.mark.parametrize("axis", ["H", "W"])
def test_branch_shape_and_sentence_order(axis):
    br = TransformerBranch(8, 3, 2, 4, axis, n_layers=1, n_heads=2, ff_width=8)
    x = torch.randn(1, 8, 3, 2, 4)
    assert br(x).shape == x.shape
    collapsed = x[:, :, :, :1, :] if axis == "W" else x[:, :, :, :, :1]
    s, (t, L) = br.sentence(collapsed)
    assert s.shape == (1, 3 * L, 8)
    # words are time-major: frame 1 starts after all L positions of frame 0
    ref = collapsed[0, :, 1, 0, 0] if axis == "W" else collapsed[0, :, 1, 0, 0]
    torch.testing.assert_close(s[0, L], ref)
    torch.testing.assert_close(br.unsentence(s, t, L), collapsed)


def test_branch_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        TransformerBranch(8, 2, 3, 4, "W", n_layers=1, n_heads=2, ff_width=8)


@pytest.mark.parametrize("branch, dead", [("H", "W"), ("W", "H")])
def test_disabled_branch_gets_zero_gradient(branch, dead):
    both = PredictionNet(TOY)
    single = PredictionNet(replace(TOY, branch=branch))
    assert single.branch_parameters(dead) == []
    # graft the missing branch on and confirm nothing reaches it
    ghost = both.branch_w if dead == "W" else both.branch_h
    out = single(toy_input())
    loss = out.range_pred.mean() + out.mask_prob.mean()
    grads = torch.autograd.grad(loss, list(single.parameters()) + list(ghost.parameters()), allow_unused=True)
    n_live = len(list(single.parameters()))
    assert all(g is None or not g.any() for g in grads[n_live:])
    assert any(g is not None and g.any() for g in grads[:n_live])


def test_fuse_accepts_identical_branches():
    net = PredictionNet(TOY)
    feats = torch.randn(1, *TOY.bottleneck)
    assert net.fuse(feats, feats).shape == feats.shape
    with pytest.raises(ShapeError):
        net.fuse(feats)


def test_skips_are_live():
    net = PredictionNet(TOY)
    x = toy_input()
    feats, skips = net.encode(x)
    fused = net.transform(feats)
    ref = net.decoder(fused, skips)
    zeroed = net.decoder(fused, [torch.zeros_like(s) for s in skips])
    assert not torch.allclose(ref, zeroed)
    with pytest.raises(ShapeError):
        net.decoder(fused, skips[:-1])


def test_temporal_mapping_only_when_needed():
    assert PredictionNet(TOY).decoder.temporal is None
    assert PredictionNet(replace(TOY, F=3)).decoder.temporal is not None


def test_encode_rejects_wrong_dims():
    with pytest.raises(ShapeError):
        PredictionNet(TOY).encode(torch.zeros(1, 1, 5, 16, 32))


def test_single_conv_mac_count():
    cfg = ModelConfig(P=5, height=32, width=128, channels=(8,), n_heads=2, ff_width=8)
    c = count_params_flops(cfg)
    first = dict(c.per_layer)["encoder.stages.0.conv"]
    # stride (1,2,2) on 32x128 gives a (5,16,64) output volume
    assert first == 8 * 1 * 27 * 5 * 16 * 64 == 1_105_920


def test_linear_mac_rule():
    net_cfg = replace(TOY, n_layers=1)
    c = count_params_flops(net_cfg)
    rows = dict(c.per_layer)
    L = TOY.P * TOY.bottleneck[3]  # W-branch sentence length
    assert rows["branch_w.layers.0.attn.q"] == L * 32 * 32
    assert rows["branch_w.layers.0.ff1"] == L * 32 * TOY.ff_width
    assert rows["branch_w.layers.0.attn.scores+mix"] == 2 * L * L * 32
    # the documented example: 10 positions of a 32 -> 32 projection
    assert 10 * 32 * 32 == 10_240


def test_param_count_matches_module_and_scales_quadratically():
    c = count_params_flops(TOY)
    assert c.params == sum(p.numel() for p in PredictionNet(TOY).parameters())
    wide = replace(TOY, channels=tuple(2 * ch for ch in TOY.channels), ff_width=2 * TOY.ff_width)
    conv_params = lambda cfg: sum(p.numel() for n, p in PredictionNet(cfg).named_parameters()
                                  if n.endswith("conv.weight") and p.dim() == 5 and p.shape[1] > 1)
    assert 3.8 < conv_params(wide) / conv_params(TOY) <= 4.0


def test_full_preset_size():
    c = count_params_flops(FULL)
    assert 20e6 < c.params < 25e6
    assert c.macs > 1e10


def test_config_hash_ignores_seed():
    assert TOY.config_hash() == replace(TOY, seed=9).config_hash()
    assert TOY.config_hash() != replace(TOY, branch="H").config_hash()
