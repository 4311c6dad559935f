import numpy as np
import pytest

from flowprompt import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function over one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f()
        flat[i] = keep - eps
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, arrays, tol=1e-7):
    """build(tensors) -> scalar Tensor; verifies grads of every array."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    ad.backward(loss)
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: float(build([ad.Tensor(x) for x in arrays]).data), a)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, atol=tol, rtol=1e-5)


rng = np.random.default_rng(0)


def test_add_mul_broadcast():
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5,))
    check_op(lambda ts: ad.mean(ad.mul(ad.add(ts[0], ts[1]), ts[0])), [a, b])


def test_linear_and_gelu():
    x = rng.normal(size=(3, 4, 6))
    w = rng.normal(size=(6, 5))
    b = rng.normal(size=(5,))
    check_op(lambda ts: ad.mean(ad.gelu(ad.linear(ts[0], ts[1], ts[2]))), [x, w, b])


def test_layernorm():
    x = rng.normal(size=(3, 7, 6))
    g = rng.normal(size=(6,))
    b = rng.normal(size=(6,))
    check_op(lambda ts: ad.mean(ad.layernorm(ts[0], ts[1], ts[2])), [x, g, b], tol=1e-6)


def test_attention_with_mask():
    q = rng.normal(size=(2, 2, 5, 4))
    k = rng.normal(size=(2, 2, 5, 4))
    v = rng.normal(size=(2, 2, 5, 4))
    mask = np.zeros((2, 1, 1, 5))
    mask[:, :, :, -1] = -1e9
    check_op(lambda ts: ad.mean(ad.attention(ts[0], ts[1], ts[2], mask)), [q, k, v], tol=1e-6)


def test_concat_slice_swap():
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 2, 4))

    def build(ts):
        c = ad.concat([ts[0], ts[1]], axis=1)
        s = ad.slice_axis(c, 1, 1, 4)
        return ad.mean(ad.swapaxes(s, 1, 2))

    check_op(build, [a, b])


def test_gather_scatter_embedding():
    table = rng.normal(size=(6, 3))
    ids = np.array([0, 2, 2, 5])
    x = rng.normal(size=(4, 3))

    def build(ts):
        e = ad.embedding(ts[0], ids)
        g = ad.gather_rows(ts[1], np.array([1, 1, 3]))
        sc = ad.scatter_rows([np.array([0, 2]), np.array([1])],
                             [ad.slice_axis(g, 0, 0, 2), ad.slice_axis(g, 0, 2, 3)], 3)
        return ad.add(ad.mean(e), ad.mean(ad.mul(sc, sc)))

    check_op(build, [table, x])


def test_masked_losses():
    logits = rng.normal(size=(3, 4))
    labels = (rng.random((3, 4)) > 0.5).astype(float)
    mask = np.ones((3, 4))
    mask[:, -1] = 0.0
    pred = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 4))

    check_op(lambda ts: ad.masked_bce_with_logits(ts[0], labels, mask), [logits])
    check_op(lambda ts: ad.masked_mse(ts[0], target, mask), [pred])


def test_sigmoid_scale_sub_broadcast_to():
    x = rng.normal(size=(2, 3))

    def build(ts):
        y = ad.broadcast_to(ts[0], (4, 2, 3))
        return ad.mean(ad.sigmoid(ad.sub(ad.scale(y, 1.7), 0.3)))

    check_op(build, [x])


def test_composite_two_layer_net():
    x = rng.normal(size=(4, 6))
    w1 = rng.normal(size=(6, 8)) * 0.5
    b1 = rng.normal(size=(8,)) * 0.1
    g1 = np.abs(rng.normal(size=(8,))) + 0.5
    be = rng.normal(size=(8,)) * 0.1
    w2 = rng.normal(size=(8, 2)) * 0.5

    def build(ts):
        h = ad.gelu(ad.linear(ts[0], ts[1], ts[2]))
        h = ad.layernorm(h, ts[3], ts[4])
        out = ad.linear(h, ts[5])
        return ad.mean(ad.mul(out, out))

    check_op(build, [x, w1, b1, g1, be, w2], tol=1e-6)


def test_no_grad_skips_tape():
    x = ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y.bwd is None and not y.requires_grad


def test_grad_accumulates_across_uses():
    x = ad.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.scale(x, 4.0))  # x^2 + 4x -> grad 2x + 4
    ad.backward(ad.sum_all(y))
    np.testing.assert_allclose(x.grad, [8.0, 10.0])


def test_reused_subgraph_gradient():
    x = ad.Tensor(np.array([1.5]), requires_grad=True)
    h = ad.mul(x, x)
    loss = ad.sum_all(ad.mul(h, h))  # x^4 -> 4x^3
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [4 * 1.5**3], rtol=1e-12)
