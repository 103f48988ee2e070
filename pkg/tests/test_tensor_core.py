import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from rangeseq import tensor_core as tc
from rangeseq.gradcheck import kernel_checks

D = torch.float64


def rand(g, *shape):
    return torch.randn(*shape, generator=g, dtype=D, requires_grad=True)


def numpy_conv3d_circular_width(x, w, b, pad):
    """Direct loop convolution: zero padding on T/H, wrap-around padding on W."""
    n, ci, T, H, W = x.shape
    co, _, kt, kh, kw = w.shape
    pt, ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (0, 0)))
    xp = np.concatenate([xp[..., W - pw:], xp, xp[..., :pw]], axis=-1) if pw else xp
    To, Ho, Wo = xp.shape[2] - kt + 1, xp.shape[3] - kh + 1, xp.shape[4] - kw + 1
    out = np.zeros((n, co, To, Ho, Wo))
    for o, t, i, j in itertools.product(range(co), range(To), range(Ho), range(Wo)):
        out[:, o, t, i, j] = (xp[:, :, t:t + kt, i:i + kh, j:j + kw] * w[o]).sum(axis=(1, 2, 3, 4)) + b[o]
    return out


def test_conv3d_matches_direct_loops():
    g = tc.seeded_generator(0)
    x, w, b = rand(g, 2, 2, 3, 4, 5), rand(g, 3, 2, 3, 3, 3), rand(g, 3)
    ours = tc.conv3d(x, w, b, 1, 1, "circular-width").detach().numpy()
    ref = numpy_conv3d_circular_width(x.detach().numpy(), w.detach().numpy(), b.detach().numpy(), (1, 1, 1))
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_identity_kernel():
    x = torch.randn(1, 3, 2, 4, 5, dtype=D)
    w = torch.eye(3, dtype=D).view(3, 3, 1, 1, 1)
    assert torch.equal(tc.conv3d(x, w, torch.zeros(3, dtype=D)), x)


@pytest.mark.parametrize("k", [1, 3, 5, 7, 17])
def test_circular_conv_rotation_equivariance(k):
    g = tc.seeded_generator(k)
    x = torch.randn(1, 4, 3, 8, 32, generator=g)
    w = torch.randn(6, 4, 3, 3, 3, generator=g)
    b = torch.randn(6, generator=g)
    y = tc.conv3d(x, w, b, 1, 1, "circular-width")
    y_rot = tc.conv3d(torch.roll(x, k, -1), w, b, 1, 1, "circular-width")
    assert torch.equal(y_rot, torch.roll(y, k, -1))


def test_softmax_single_element():
    assert tc.softmax(torch.tensor([[3.7]]), -1).item() == 1.0


def test_shape_errors_name_kernel():
    with pytest.raises(tc.ShapeError, match="conv3d"):
        tc.conv3d(torch.zeros(1, 2, 3, 4, 5), torch.zeros(3, 4, 1, 1, 1))
    with pytest.raises(tc.ShapeError, match="linear"):
        tc.linear(torch.zeros(2, 5), torch.zeros(3, 4))
    with pytest.raises(tc.ShapeError, match="scaled_dot_product_attention"):
        tc.scaled_dot_product_attention(torch.zeros(1, 1, 2, 3), torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3, 3))
    with pytest.raises(tc.ShapeError, match="concat"):
        tc.concat([torch.zeros(2, 3), torch.zeros(3, 3)], 1)


def test_global_avg_pool_is_mean_and_shift_invariant():
    x = torch.randn(2, 3, 4, 5, 16, dtype=torch.float32)
    torch.testing.assert_close(tc.global_avg_pool(x), x.mean(dim=(2, 3, 4)))
    assert torch.equal(tc.global_avg_pool(torch.roll(x, 5, -1)), tc.global_avg_pool(x))


def test_backward_contracts():
    x = torch.randn(4, dtype=D, requires_grad=True)
    unused = torch.randn(2, dtype=D, requires_grad=True)
    tc.backward((x ** 2).sum(), [x, unused])
    torch.testing.assert_close(x.grad, 2 * x.detach())
    assert torch.equal(unused.grad, torch.zeros(2, dtype=D))
    with pytest.raises(tc.ShapeError):
        tc.backward(x * 2)


def test_kernel_suite_passes():
    failures = [r for r in kernel_checks(seed=3) if not r.ok]
    assert not failures, failures


SHAPES = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(3, 5))


@given(SHAPES, st.integers(0, 1000))
def test_conv3d_gradients_random_shapes(shape, seed):
    n, c, t, h, w = shape
    g = tc.seeded_generator(seed)
    x, wt, b = rand(g, n, c, t, h, w), rand(g, 2, c, 3, 3, 3), rand(g, 2)
    proj = torch.randn(n, 2, t, h, w, generator=g, dtype=D)
    fn = lambda: (tc.conv3d(x, wt, b, 1, 1, "circular-width") * proj).sum()
    assert tc.check_gradients("conv3d", fn, [x, wt, b], max_entries=40).ok


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000))
def test_softmax_attention_gradients_random_shapes(L, d, seed):
    g = tc.seeded_generator(seed)
    q, k, v = rand(g, 1, 1, L, d), rand(g, 1, 1, L, d), rand(g, 1, 1, L, d)
    proj = torch.randn(1, 1, L, d, generator=g, dtype=D)
    fn = lambda: (tc.scaled_dot_product_attention(q, k, v) * proj).sum()
    assert tc.check_gradients("attention", fn, [q, k, v]).ok


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_sample_norm_gradients_random_shapes(c, h, w, seed):
    g = tc.seeded_generator(seed)
    x = rand(g, 1, c, 2, h, w)
    weight, bias = rand(g, c), rand(g, c)
    proj = torch.randn(x.shape, generator=g, dtype=D)
    fn = lambda: (tc.sample_norm(x, weight, bias) * proj).sum()
    assert tc.check_gradients("sample_norm", fn, [x, weight, bias]).ok


def test_kink_aware_differences_handle_leaky_relu_at_zero():
    x = torch.tensor([5e-6, 2e-5, -3e-5, 1.0], dtype=D, requires_grad=True)
    fn = lambda: tc.leaky_relu(x).sum()
    res = tc.check_gradients("leaky_relu near kink", fn, [x])
    assert res.ok and res.n_retried == 3


@pytest.mark.parametrize("channels, k", [(1, 1), (8, 3), (16, 3), (32, 3), (64, 3), (256, 5), (480, 5)])
def test_eca_kernel_rule(channels, k):
    assert tc.eca_kernel_size(channels) == k


def test_eca_identity_and_zero():
    eca = tc.ECA(8).double()
    with torch.no_grad():
        eca.conv.weight.zero_()
        eca.conv.bias.fill_(40.0)
    x = torch.randn(1, 8, 2, 3, 4, dtype=D)
    torch.testing.assert_close(eca(x), x, rtol=1e-12, atol=1e-15)
    assert torch.equal(tc.ECA(8)(torch.zeros(1, 8, 2, 3, 4)), torch.zeros(1, 8, 2, 3, 4))


def test_sample_norm_statistics():
    sn = tc.SampleNorm(3).double()
    x = torch.randn(1, 3, 2, 4, 5, dtype=D) * 3 + 1
    y = sn(x)
    torch.testing.assert_close(y.mean(dim=(2, 3, 4)), torch.zeros(1, 3, dtype=D), atol=1e-12, rtol=0)
    torch.testing.assert_close(y.var(dim=(2, 3, 4), unbiased=False), torch.ones(1, 3, dtype=D), atol=1e-4, rtol=0)
    assert not torch.equal(sn.running_mean, torch.zeros(3, dtype=D))
    sn.eval()
    out = sn(x)
    assert out.shape == x.shape


def test_adam_first_steps():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0], dtype=D))
    opt = tc.make_adam([p], lr=1e-3)
    p.grad = torch.zeros(3, dtype=D)
    opt.step()
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0, 3.0], dtype=D))

    q = torch.nn.Parameter(torch.zeros(4, dtype=D))
    opt = tc.make_adam([q], lr=1e-3)
    g = torch.tensor([0.3, -5.0, 1e-2, 7.0], dtype=D)
    q.grad = g.clone()
    opt.step()
    # hand recurrence: m = 0.1 g, v = 0.001 g^2, bias-corrected m/sqrt(v) = sign(g)
    m_hat, v_hat = 0.1 * g / 0.1, 0.001 * g ** 2 / 0.001
    expected = -1e-3 * m_hat / (v_hat.sqrt() + 1e-8)
    torch.testing.assert_close(q.detach(), expected, rtol=1e-12, atol=0)
    assert torch.allclose(q.detach().abs(), torch.full((4,), 1e-3, dtype=D), rtol=1e-5)


def test_adam_purity():
    a = torch.nn.Parameter(torch.ones(3, dtype=D))
    b = torch.nn.Parameter(torch.ones(3, dtype=D))
    opt = tc.make_adam([a, b])
    for _ in range(3):
        a.grad = torch.tensor([0.1, 0.2, 0.3], dtype=D)
        b.grad = a.grad.clone()
        opt.step()
    assert torch.equal(a, b)


def test_set_lr():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = tc.make_adam([p])
    tc.set_lr(opt, 5e-4)
    assert opt.param_groups[0]["lr"] == 5e-4


def test_single_thread_determinism():
    tc.configure_threads(1)
    layer = tc.TransformerLayer(8, 2, 16)

    def run():
        x = torch.randn(2, 10, 8, generator=tc.seeded_generator(5), requires_grad=True)
        y = layer(x).pow(2).sum()
        gx, = torch.autograd.grad(y, x)
        return y.detach(), gx

    (y1, g1), (y2, g2) = run(), run()
    assert torch.equal(y1, y2) and torch.equal(g1, g2)


def test_seeded_generator_reproducible():
    a = torch.randn(5, generator=tc.seeded_generator(9))
    b = torch.randn(5, generator=tc.seeded_generator(9))
    assert torch.equal(a, b)
