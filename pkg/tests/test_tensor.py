import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    adaptive_pool_loops,
    bilinear_loops,
    conv2d_direct,
    depthwise_direct,
    layer_norm_formula,
    linear_loops,
    phi_series,
    softmax_direct,
)
from ultraupconvnet import functional as F
from ultraupconvnet.gradcheck import finite_diff_check
from ultraupconvnet.tensor import Tensor, Tape, backward, concat, elementwise_add, no_grad


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# -- conv2d ----------------------------------------------------------------


def test_conv2d_sum_of_ones():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_stem_shape():
    x = Tensor(np.zeros((1, 3, 224, 224)))
    w = Tensor(np.zeros((96, 3, 4, 4)))
    assert F.conv2d(x, w, stride=4).shape == (1, 96, 56, 56)
    assert F.conv_output_size(224, 4, 4, 0) == 56


def test_depthwise_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((4, 1, 7, 7))
    got = F.conv2d(Tensor(x), Tensor(w), padding=3, groups=4).data
    assert np.max(np.abs(got - depthwise_direct(x, w, 3))) < 1e-9


@pytest.mark.parametrize(
    "cin,cout,k,stride,pad,groups",
    [(3, 5, 3, 1, 1, 1), (4, 6, 2, 2, 0, 2), (2, 3, 1, 1, 0, 1), (3, 2, 4, 4, 0, 1), (4, 4, 3, 2, 1, 4)],
)
def test_conv2d_matches_direct(cin, cout, k, stride, pad, groups):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, cin, 8, 8))
    w = rng.standard_normal((cout, cin // groups, k, k))
    b = rng.standard_normal(cout)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
    assert np.max(np.abs(got - conv2d_direct(x, w, b, stride, pad, groups))) < 1e-9


@given(
    h=st.integers(1, 20),
    k=st.integers(1, 7),
    s=st.integers(1, 4),
    p=st.integers(0, 3),
)
@settings(max_examples=60, deadline=None)
def test_conv2d_output_size_formula(h, k, s, p):
    if h + 2 * p < k:
        return
    x = Tensor(np.zeros((1, 1, h, h)))
    w = Tensor(np.zeros((1, 1, k, k)))
    assert F.conv2d(x, w, stride=s, padding=p).shape[2:] == ((h + 2 * p - k) // s + 1,) * 2


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ValueError, match="groups"):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 1, 1))), groups=2)
    with pytest.raises(ValueError, match="in-channel"):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 1, 1))))
    with pytest.raises(ValueError, match="height"):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 8))), Tensor(np.zeros((1, 1, 3, 3))))


# -- linear / layer_norm / gelu / softmax ------------------------------------


def test_linear_examples():
    w = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert F.linear(Tensor([1.0, 2.0]), w, Tensor([0.0, 0.0, 0.0])).data.tolist() == [1, 2, 3]
    b = Tensor([0.5, -1.0, 2.0])
    assert F.linear(Tensor([0.0, 0.0]), w, b).data.tolist() == b.data.tolist()


def test_linear_matches_loops():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    got = F.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(got - linear_loops(x, w, b))) < 1e-12


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError, match="Din"):
        F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(F.layer_norm(Tensor([1.0, 1.0, 1.0]), one, zero).data, 0.0)
    out = F.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-6).data
    assert np.allclose(out, [-1.0, 1.0], atol=1e-3)


def test_layer_norm_matches_formula():
    rng = np.random.default_rng(3)
    v, g, b = rng.standard_normal(7), rng.standard_normal(7), rng.standard_normal(7)
    got = F.layer_norm(Tensor(v), Tensor(g), Tensor(b), eps=1e-6).data
    assert np.max(np.abs(got - layer_norm_formula(v, g, b, 1e-6))) < 1e-12


def test_gelu_values():
    assert F.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(F.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    assert abs(F.gelu(Tensor([1.0])).data[0] - phi_series(1.0)) < 1e-9
    assert abs(F.gelu(Tensor([-0.7])).data[0] + 0.7 * phi_series(-0.7)) < 1e-9


def test_softmax_examples():
    assert np.allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = F.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and abs(big[0] - 1.0) < 1e-12 and big[1] < 1e-300
    rng = np.random.default_rng(4)
    v = rng.standard_normal(4)
    assert np.max(np.abs(F.softmax(Tensor(v)).data - softmax_direct(v))) < 1e-12


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
@settings(max_examples=100, deadline=None)
def test_softmax_normalized_and_shift_invariant(vals, shift):
    v = np.array(vals)
    p = F.softmax(Tensor(v)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.max(np.abs(F.softmax(Tensor(v + shift)).data - p)) < 1e-9


# -- pooling / resampling ----------------------------------------------------


def test_pool_avg2d_examples():
    assert np.all(F.pool_avg2d(Tensor(np.full((1, 1, 4, 4), 3.0)), 2, 2).data == 3.0)
    assert F.pool_avg2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 1, 1).data.item() == 2.5
    x = np.random.default_rng(5).standard_normal((1, 1, 6, 6))
    assert np.max(np.abs(F.pool_avg2d(Tensor(x), 3, 3).data - adaptive_pool_loops(x, 3, 3))) < 1e-12
    x = np.random.default_rng(6).standard_normal((2, 3, 7, 5))
    assert np.max(np.abs(F.pool_avg2d(Tensor(x), 3, 2).data - adaptive_pool_loops(x, 3, 2))) < 1e-12
    with pytest.raises(ValueError, match="target"):
        F.pool_avg2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


def test_upsample_bilinear_examples():
    const = F.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 1.5)), 6, 6).data
    assert np.allclose(const, 1.5, atol=0, rtol=1e-15)
    row = F.upsample_bilinear(Tensor([[[[0.0, 1.0]]]]), 1, 4).data.reshape(-1)
    assert np.allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)
    x = Tensor(np.random.default_rng(7).standard_normal((1, 1, 3, 3)))
    assert np.array_equal(F.upsample_bilinear(x, 3, 3).data, x.data)
    with pytest.raises(ValueError, match="downscale"):
        F.upsample_bilinear(x, 2, 2)


def test_upsample_matches_loops():
    x = np.random.default_rng(8).standard_normal((1, 2, 3, 4))
    assert np.max(np.abs(F.upsample_bilinear(Tensor(x), 7, 9).data - bilinear_loops(x, 7, 9))) < 1e-12


# -- add / concat / pooling ----------------------------------------------------


def test_add_and_broadcast_add():
    x = Tensor(np.random.default_rng(9).standard_normal((2, 3)))
    assert np.array_equal(elementwise_add(x, Tensor(np.zeros((2, 3)))).data, x.data)
    out = F.broadcast_add_channels(Tensor(np.zeros((1, 2, 2, 2))), Tensor([1.0, 2.0])).data
    assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == 2.0)
    with pytest.raises(ValueError):
        elementwise_add(x, Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        F.broadcast_add_channels(Tensor(np.zeros((1, 2, 2, 2))), Tensor([1.0, 2.0, 3.0]))


def test_broadcast_add_gradient_counts():
    v = Tensor([0.3, -0.2, 0.1], requires_grad=True)
    x = Tensor(np.random.default_rng(10).standard_normal((2, 3, 4, 5)))
    backward(F.broadcast_add_channels(x, v).sum())
    assert np.array_equal(v.grad, np.full(3, 2 * 4 * 5.0))


def test_concat_and_global_pool():
    a, b = Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3)))
    assert concat([a, b], axis=1).shape == (1, 5)
    assert np.all(F.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5))).data == 2.5)
    rng = np.random.default_rng(11)
    parts = [rng.standard_normal((2, k, 3)) for k in (1, 4, 2)]
    cat = concat([Tensor(p) for p in parts], axis=1)
    assert np.array_equal(cat[:, 0:1].data, parts[0])
    assert np.array_equal(cat[:, 1:5].data, parts[1])
    assert np.array_equal(cat[:, 5:7].data, parts[2])
    with pytest.raises(ValueError, match="dim 0"):
        concat([Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2)))], axis=1)


# -- backward / tape ---------------------------------------------------------


def test_backward_simple_cases():
    x = Tensor(np.random.default_rng(12).standard_normal((2, 3)), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = Tensor([1.0, 2.0], requires_grad=True)
    backward((y * y).sum())
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar_and_repeat():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_tape_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 3.0
    z = (y + x).sum()
    tape = Tape.from_loss(z)
    pos = {id(t): i for i, t in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_shared_leaf_accumulates_within_one_pass():
    x = Tensor([3.0], requires_grad=True)
    backward((x * x + x * 2.0).sum())
    assert x.grad.tolist() == [8.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_ops_reproducible():
    def run():
        rng = np.random.default_rng(42)
        x = rand(rng, 2, 3, 8, 8)
        w = rand(rng, 4, 3, 3, 3)
        y = F.gelu(F.conv2d(x, w, padding=1))
        loss = F.softmax(y, axis=1).sum() + y.mean()
        backward(loss)
        return loss.data.copy(), w.grad.copy(), x.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# -- finite differences ------------------------------------------------------


def test_finite_diff_check_trivial():
    rng = np.random.default_rng(13)
    x = rand(rng, 3, 4)
    assert max(finite_diff_check(lambda: x.sum(), [x]).values()) < 1e-10
    assert max(finite_diff_check(lambda: (x * x).sum(), [x]).values()) < 1e-7


def _gc(f, params, **kw):
    return max(finite_diff_check(f, params, **kw).values())


def test_gradcheck_smooth_elementwise():
    rng = np.random.default_rng(14)
    x = rand(rng, 3, 5)
    c = Tensor(rng.standard_normal((3, 5)))
    assert _gc(lambda: (F.gelu(x) * c).sum(), [x]) < 1e-7
    assert _gc(lambda: (F.softmax(x, axis=1) * c).sum(), [x]) < 1e-7
    assert _gc(lambda: (F.log_softmax(x, axis=0) * c).sum(), [x]) < 1e-7


def test_gradcheck_structural_ops():
    rng = np.random.default_rng(15)
    x = rand(rng, 2, 3, 6, 6)
    v = rand(rng, 3)
    vn = rand(rng, 2, 3)
    c6 = Tensor(rng.standard_normal((2, 3, 6, 6)))
    assert _gc(lambda: (F.pool_avg2d(x, 3, 2) * Tensor(np.arange(18.0).reshape(1, 3, 3, 2))).sum(), [x]) < 1e-7
    c = Tensor(rng.standard_normal((2, 3, 11, 13)))
    assert _gc(lambda: (F.upsample_bilinear(x, 11, 13) * c).sum(), [x]) < 1e-7
    assert _gc(lambda: (F.broadcast_add_channels(x, v) * c6).sum(), [x, v]) < 1e-7
    assert _gc(lambda: (F.broadcast_add_channels(x, vn) * c6).sum(), [x, vn]) < 1e-7
    y = rand(rng, 2, 2, 6, 6)
    cc = Tensor(rng.standard_normal((2, 5, 6, 6)))
    assert _gc(lambda: (concat([x, y], axis=1) * cc).sum(), [x, y]) < 1e-7
    cg = Tensor(rng.standard_normal((2, 3)))
    assert _gc(lambda: (F.global_avg_pool(x) * cg).sum(), [x]) < 1e-7


@pytest.mark.parametrize("k,stride,pad,groups", [(3, 1, 1, 1), (7, 1, 3, 4), (2, 2, 0, 2), (4, 4, 0, 1)])
def test_gradcheck_conv2d(k, stride, pad, groups):
    rng = np.random.default_rng(16)
    x = rand(rng, 2, 4, 8, 8)
    w = rand(rng, 4, 4 // groups, k, k)
    b = rand(rng, 4)
    out_shape = F.conv2d(x, w, b, stride, pad, groups).shape
    c = Tensor(rng.standard_normal(out_shape))
    assert _gc(lambda: (F.conv2d(x, w, b, stride, pad, groups) * c).sum(), [x, w, b]) < 1e-4


def test_gradcheck_linear_layer_norm():
    rng = np.random.default_rng(17)
    x, w, b = rand(rng, 2, 3, 5), rand(rng, 4, 5), rand(rng, 4)
    g, be = rand(rng, 5), rand(rng, 5)
    c4 = Tensor(rng.standard_normal((2, 3, 4)))
    c5 = Tensor(rng.standard_normal((2, 3, 5)))
    assert _gc(lambda: (F.linear(x, w, b) * c4).sum(), [x, w, b]) < 1e-7
    assert _gc(lambda: (F.layer_norm(x, g, be) * c5).sum(), [x, g, be]) < 1e-4


def test_gradcheck_composite_graph():
    """conv -> norm -> gelu -> linear -> cross-entropy."""
    from ultraupconvnet.losses import cross_entropy

    rng = np.random.default_rng(18)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w, b = rand(rng, 4, 3, 3, 3), rand(rng, 4)
    g, be = rand(rng, 4), rand(rng, 4)
    lw, lb = rand(rng, 3, 4), rand(rng, 3)
    target = np.array([0, 2])

    def f():
        y = F.conv2d(x, w, b, padding=1)
        y = F.layer_norm_channels_first(y, g, be)
        y = F.gelu(y)
        return cross_entropy(F.linear(F.global_avg_pool(y), lw, lb), target)

    report = finite_diff_check(f, {"w": w, "b": b, "g": g, "be": be, "lw": lw, "lb": lb}, h=1e-5)
    assert max(report.values()) < 1e-4, report


def test_float_values_finite_after_ops():
    rng = np.random.default_rng(19)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)) * 30)
    for out in (F.gelu(x), F.softmax(x, 1), F.log_softmax(x, 1), F.layer_norm_channels_first(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))):
        assert np.all(np.isfinite(out.data))
    assert math.isfinite(F.log_softmax(Tensor([1e4, -1e4]), 0).data[1])
