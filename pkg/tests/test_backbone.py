import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramidreg.backbone import Backbone, RefineUnit, forward_dual, level_shapes
from pyramidreg.warping import upsample


def small_backbone(seed=0):
    torch.manual_seed(seed)
    return Backbone((4, 6, 6, 6), 5).double()


def test_encoder_stage_shapes_32():
    enc = small_backbone().encode(torch.rand(1, 1, 32, 32, 32, dtype=torch.float64))
    assert [tuple(f.shape[2:]) for f in enc] == [(16,) * 3, (8,) * 3, (4,) * 3, (2,) * 3]
    assert [f.shape[1] for f in enc] == [4, 6, 6, 6]


@torch.no_grad()
def test_large_volume_pyramid_shapes():
    net = Backbone((2, 2, 2, 2), 2).eval()
    x = torch.zeros(1, 1, 160, 192, 160)
    enc = net.encode(x)
    assert tuple(enc[-1].shape[2:]) == (10, 12, 10)
    pyramid = net.decode(enc)
    assert [tuple(p.shape[2:]) for p in pyramid] == [(10, 12, 10), (20, 24, 20), (40, 48, 40), (80, 96, 80)]


def test_too_small_input_rejected():
    with pytest.raises(ValueError, match="too small"):
        small_backbone().encode(torch.zeros(1, 1, 15, 32, 32, dtype=torch.float64))


@settings(max_examples=8, deadline=None)
@given(st.tuples(*[st.integers(16, 37)] * 3))
def test_level_schedule_for_any_valid_shape(shape):
    net = small_backbone().eval()
    with torch.no_grad():
        pyramid = net(torch.rand(1, 1, *shape, dtype=torch.float64))
    expected = [tuple(math.ceil(s / 2 ** k) for s in shape) for k in (4, 3, 2, 1)]
    assert [tuple(p.shape[2:]) for p in pyramid] == expected == level_shapes(shape)
    assert all(p.shape[1] == 5 for p in pyramid)


def test_refine_unit_additive_fusion():
    unit = RefineUnit(3, 4).double()
    coarse = torch.rand(1, 4, 2, 2, 2, dtype=torch.float64)
    skip = torch.rand(1, 3, 4, 4, 4, dtype=torch.float64)
    torch.nn.init.zeros_(unit.proj.weight)
    torch.nn.init.zeros_(unit.proj.bias)
    assert torch.equal(unit(coarse, skip), upsample(coarse, (4, 4, 4)))

    torch.nn.init.normal_(unit.proj.weight)
    out = unit(torch.zeros_like(coarse), skip)
    assert torch.allclose(out, unit.proj(skip))
    assert out.shape == (1, 4, 4, 4, 4)


def test_refine_unit_shape_mismatch():
    unit = RefineUnit(3, 4)
    with pytest.raises(ValueError):
        unit(torch.zeros(1, 4, 2, 2, 2), torch.zeros(1, 3, 6, 4, 4))


def test_zero_refine_collapses_to_upsampled_level_one():
    net = small_backbone().eval()
    for unit in net.refine:
        torch.nn.init.zeros_(unit.proj.weight)
        torch.nn.init.zeros_(unit.proj.bias)
    with torch.no_grad():
        pyramid = net(torch.rand(1, 1, 32, 32, 32, dtype=torch.float64))
    expected = pyramid[0]
    for level in pyramid[1:]:
        expected = upsample(expected, level.shape[2:])
        assert torch.equal(level, expected)


@torch.no_grad()
def test_dual_stream_consistency():
    net = small_backbone().eval()
    a = torch.rand(1, 1, 16, 20, 16, dtype=torch.float64)
    b = torch.rand(1, 1, 16, 20, 16, dtype=torch.float64)
    pa, pb = forward_dual(net, a, a)
    assert all(torch.equal(x, y) for x, y in zip(pa, pb))
    pab, pba = forward_dual(net, a, b), forward_dual(net, b, a)
    assert all(torch.equal(x, y) for x, y in zip(pab[0], pba[1]))
    assert all(torch.equal(x, y) for x, y in zip(pab[1], pba[0]))
    single = net(b)
    assert all(torch.equal(x, y) for x, y in zip(pab[1], single))
    with pytest.raises(ValueError):
        forward_dual(net, a, torch.rand(1, 1, 16, 16, 16, dtype=torch.float64))


def test_streams_share_parameters():
    net = small_backbone()
    n_params = sum(p.numel() for p in net.parameters())
    pm, pf = forward_dual(net, torch.rand(2, 1, 16, 16, 16, dtype=torch.float64), torch.rand(2, 1, 16, 16, 16, dtype=torch.float64))
    assert sum(p.numel() for p in net.parameters()) == n_params
    # both streams route gradient into the one parameter set
    pm[-1].sum().backward()
    g_moving = net.stages[0][0][0].weight.grad.clone()
    net.zero_grad()
    pf[-1].sum().backward()
    assert net.stages[0][0][0].weight.grad is not None
    assert not torch.equal(g_moving, net.stages[0][0][0].weight.grad)


def test_first_stage_has_no_res_blocks():
    net = small_backbone()
    assert len(net.stages[0]) == 1
    assert all(len(stage) == 3 for stage in net.stages[1:])
