import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from spikesr.autodiff import gradient_check
from spikesr.blocks import HDA, SAB, SAG, SCB, ChannelAttention, FusionBlock, SeparableTCA, SpatialAttention
from spikesr.dsa import DSA
from spikesr.layers import per_step
from spikesr.neuron import relaxed


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def gelu(x):
    from math import erf
    return 0.5 * x * (1 + np.vectorize(erf)(x / np.sqrt(2)))


def test_scb_zero_input_gives_zero():
    scb = SCB(3)
    with torch.no_grad():
        scb.conv.bias.zero_()
    out = scb(torch.zeros(2, 1, 3, 5, 5))
    assert torch.equal(out, torch.zeros_like(out))


def test_scb_all_spiking_conv_is_weight_sum():
    scb = SCB(3)
    x = torch.full((2, 2, 3, 6, 6), 5.0)
    pre = per_step(scb.conv, scb.lif(x))
    expect = scb.conv.weight.sum(dim=(1, 2, 3)) + scb.conv.bias
    assert torch.allclose(pre, expect.view(1, 1, 3, 1, 1).expand_as(pre), atol=1e-12)
    # constant per channel, so tdBN maps it to beta
    assert torch.allclose(scb(x), torch.zeros_like(x), atol=1e-6)


def test_scb_order_validation():
    with pytest.raises(ValueError):
        SCB(2, order="sideways")


@pytest.mark.parametrize("order", ["lif_first", "conv_first"])
def test_scb_gradient(order, gen):
    torch.manual_seed(0)
    scb = SCB(2, order=order)
    x = torch.randn(2, 1, 2, 4, 4, generator=gen, requires_grad=True)
    with relaxed():
        assert gradient_check(lambda: scb(x).sum() + scb(x).square().sum(), [x]) < 1e-4


def hda_oracle(u, m: HDA):
    t, b, c = u.shape[:3]
    d = u.mean(axis=(3, 4)).transpose(1, 0, 2).reshape(b, t * c)
    w1, b1 = m.fc1.weight.detach().numpy(), m.fc1.bias.detach().numpy()
    w2, b2 = m.fc2.weight.detach().numpy(), m.fc2.bias.detach().numpy()
    g = sigmoid(gelu(d @ w1.T + b1) @ w2.T + b2)
    g = g.reshape(b, t, c).transpose(1, 0, 2)
    return u * g[..., None, None]


def test_hda_formula(gen):
    torch.manual_seed(3)
    m = HDA(2, 4, reduction=4)
    u = torch.randn(2, 3, 4, 5, 5, generator=gen)
    np.testing.assert_allclose(m(u).detach().numpy(), hda_oracle(u.numpy(), m), atol=1e-12)


def test_hda_saturated_gates(gen):
    m = zero_(HDA(2, 4, 4))
    u = torch.randn(2, 1, 4, 3, 3, generator=gen)
    with torch.no_grad():
        m.fc2.bias.fill_(1e4)
    assert torch.equal(m(u), u)
    with torch.no_grad():
        m.fc2.bias.fill_(-1e4)
    assert torch.equal(m(u), torch.zeros_like(u))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_hda_gates_in_open_interval(seed):
    g = torch.Generator().manual_seed(seed)
    m = HDA(3, 4, 4)
    gate = m.gate(torch.randn(3, 2, 4, 3, 3, generator=g))
    assert torch.all(gate > 0) and torch.all(gate < 1)


def test_hda_fewer_steps_and_too_many(gen):
    m = HDA(4, 3, 4)
    u = torch.randn(1, 2, 3, 4, 4, generator=gen)
    assert m(u).shape == u.shape
    with pytest.raises(ValueError):
        m(torch.randn(5, 2, 3, 4, 4))
    with pytest.raises(ValueError):
        HDA(1, 2, 4)


def test_hda_gradient(gen):
    m = HDA(2, 3, 2)
    u = torch.randn(2, 2, 3, 3, 3, generator=gen, requires_grad=True)
    assert gradient_check(lambda: m(u).square().sum(), [u, m.fc1.weight]) < 1e-6


def test_separable_and_spatial_attention_shapes(gen):
    y = torch.randn(3, 2, 8, 5, 5, generator=gen)
    assert SeparableTCA(8)(y).shape == y.shape
    assert ChannelAttention(8)(y).shape == y.shape
    assert SpatialAttention()(y[0]).shape == y[0].shape


def conv_reflect(img, k, b):
    p = k.shape[0] // 2
    xp = np.pad(img, p, mode="reflect")
    out = np.full(img.shape, b)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] += np.sum(xp[i : i + k.shape[0], j : j + k.shape[1]] * k)
    return out


def fb_oracle(y, fb: FusionBlock):
    t, b = y.shape[:2]
    w = fb.ta.conv.weight.detach().numpy().ravel()
    bias = fb.ta.conv.bias.item()
    d = np.pad(y.mean(axis=(2, 3, 4)), ((1, 1), (0, 0)))
    ta = np.stack([w[0] * d[i] + w[1] * d[i + 1] + w[2] * d[i + 2] + bias for i in range(t)])
    y1 = sigmoid(ta)[:, :, None, None, None] * y
    k = fb.sa.weight.detach().numpy()[0, 0]
    sb = fb.sa.bias.item()
    m = y.mean(axis=(0, 2))
    sa = np.stack([conv_reflect(m[i], k, sb) for i in range(b)])[:, None]
    y2 = sigmoid(sa)[None] * (1 - y1)
    return (y1 + y2).mean(axis=0)


def test_fusion_formula(gen):
    torch.manual_seed(5)
    fb = FusionBlock()
    y = (torch.rand(3, 2, 4, 9, 9, generator=gen) > 0.5).double()
    np.testing.assert_allclose(fb(y).detach().numpy(), fb_oracle(y.numpy(), fb), atol=1e-12)


def test_fusion_saturated_gates(gen):
    y = (torch.rand(1, 2, 3, 8, 8, generator=gen) > 0.5).double()
    fb = zero_(FusionBlock())
    with torch.no_grad():
        fb.ta.conv.bias.fill_(1e4)
        fb.sa.bias.fill_(1e4)
    assert torch.equal(fb(y), torch.ones(2, 3, 8, 8))
    with torch.no_grad():
        fb.ta.conv.bias.fill_(-1e4)
        fb.sa.bias.fill_(-1e4)
    assert torch.equal(fb(y), torch.zeros(2, 3, 8, 8))


def test_fusion_gradient(gen):
    fb = FusionBlock()
    y = torch.rand(2, 1, 2, 6, 6, generator=gen, requires_grad=True)
    assert gradient_check(lambda: fb(y).square().sum(), [y, fb.sa.weight]) < 1e-6


def make_sab(c=4, t=2, dsa=True):
    return SAB(c, HDA(t, c, 2), DSA(c, 4, 8, grid=4) if dsa else None)


def test_sab_residual_identity(gen):
    sab = zero_(SAB(4, None, None))
    x = torch.randn(2, 1, 4, 6, 6, generator=gen)
    assert torch.equal(sab(x), x)


def test_sab_shape(gen):
    torch.manual_seed(0)
    x = torch.randn(4, 1, 8, 16, 16, generator=gen)
    assert make_sab(8, 4)(x).shape == x.shape


def test_sab_gradient(gen):
    torch.manual_seed(0)
    sab = make_sab(4, 2)
    x = torch.randn(2, 1, 4, 8, 8, generator=gen, requires_grad=True)
    w = torch.randn(2, 1, 4, 8, 8, generator=gen)
    with relaxed():
        assert gradient_check(lambda: (sab(x) * w).sum(), [x]) < 1e-4


def test_sag_identity_and_reachability(gen):
    sag = SAG([], 3)
    zero_(sag.scb.conv)
    x = torch.randn(2, 1, 3, 6, 6, generator=gen)
    assert torch.equal(sag(x), x)

    torch.manual_seed(1)
    sag = SAG([make_sab(4, 2), make_sab(4, 2)], 4)
    x = torch.randn(2, 2, 4, 8, 8, generator=gen)
    y = sag(x)
    assert y.shape == x.shape
    y.square().sum().backward()
    g = sag.sabs[0].scb1.conv.weight.grad
    assert g is not None and g.abs().sum() > 0
