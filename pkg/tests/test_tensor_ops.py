import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volseg import tensor as T
from volseg.tensor import Tape, Tensor, backward

from _oracles import assert_grad_close, brute_conv3d, bce_direct, conv3d_as_matrix, numeric_grad

RNG = np.random.default_rng


def taped_grads(loss_fn, tensors):
    """Run loss_fn once under a tape, backprop, return grads in tensor order."""
    for t in tensors:
        t.zero_grad()
    tape = Tape()
    with tape:
        loss = loss_fn()
    backward(loss, tape)
    return [t.grad for t in tensors]


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_identity_kernel():
    x = Tensor(RNG(0).normal(size=(1, 4, 4, 4)))
    k = Tensor(np.ones((1, 1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = T.conv3d(x, k, b, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv3d_zero_kernel_zero_output():
    x = Tensor(RNG(1).normal(size=(2, 5, 4, 3)))
    k = Tensor(np.zeros((3, 2, 3, 3, 3)))
    b = Tensor(np.zeros(3))
    out = T.conv3d(x, k, b, stride=1, padding=1)
    assert out.shape == (3, 5, 4, 3)
    np.testing.assert_array_equal(out.data, np.zeros((3, 5, 4, 3)))


def test_conv3d_ones_kernel_box_sums():
    # All-ones 3x3x3 kernel over an all-ones 5x5x5 volume with padding 1:
    # interior voxels see the full 27-box, face centers see 18.
    x = np.ones((1, 5, 5, 5))
    k = np.ones((1, 1, 3, 3, 3))
    b = np.zeros(1)
    out = T.conv3d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1)
    oracle = brute_conv3d(x, k, b, stride=1, padding=1)
    np.testing.assert_allclose(out.data, oracle, rtol=0, atol=1e-12)
    assert out.data[0, 2, 2, 2] == 27.0
    assert out.data[0, 0, 2, 2] == 18.0


@pytest.mark.parametrize(
    "cin,cout,dims,k,stride,padding",
    [
        (1, 1, (4, 4, 4), 3, 1, 1),
        (2, 3, (5, 4, 6), 3, 1, 0),
        (3, 2, (6, 6, 6), 3, 2, 1),
        (2, 2, (5, 5, 5), 1, 1, 0),
        (1, 4, (7, 5, 6), 5, 2, 2),
    ],
)
def test_conv3d_matches_brute_force(cin, cout, dims, k, stride, padding):
    rng = RNG(42)
    x = rng.normal(size=(cin,) + dims)
    ker = rng.normal(size=(cout, cin, k, k, k))
    b = rng.normal(size=cout)
    out = T.conv3d(Tensor(x), Tensor(ker), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, brute_conv3d(x, ker, b, stride, padding), atol=1e-12)


def test_conv3d_fast_path_matches_reference_kernel():
    rng = RNG(7)
    for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        x = rng.normal(size=(2, 6, 5, 6))
        ker = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        fast = T.conv3d(Tensor(x), Tensor(ker), Tensor(b), stride=stride, padding=padding).data
        ref = T.conv3d_reference(x, ker, b, stride=stride, padding=padding)
        np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-12)


def test_conv3d_shape_errors_name_the_dimension():
    x = Tensor(np.zeros((3, 4, 4, 4)))
    k = Tensor(np.zeros((2, 4, 3, 3, 3)))
    b = Tensor(np.zeros(2))
    with pytest.raises(ValueError, match="3 channels.*C_in=4"):
        T.conv3d(x, k, b)
    with pytest.raises(ValueError, match="bias"):
        T.conv3d(Tensor(np.zeros((4, 4, 4, 4))), k, Tensor(np.zeros(5)))
    with pytest.raises(ValueError, match="odd"):
        T.conv3d(x, Tensor(np.zeros((2, 3, 2, 2, 2))), b)
    with pytest.raises(ValueError, match="output dimension D"):
        T.conv3d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 1, 5, 5, 5))), Tensor(np.zeros(1)))


def test_conv3d_forward_bit_identical_across_calls():
    rng = RNG(3)
    x = Tensor(rng.normal(size=(2, 6, 6, 6)))
    k = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
    b = Tensor(rng.normal(size=2))
    a = T.conv3d(x, k, b, stride=2, padding=1).data
    bb = T.conv3d(x, k, b, stride=2, padding=1).data
    assert np.array_equal(a, bb)


# ---------------------------------------------------------------------------
# conv3d_transpose


def test_conv3d_transpose_doubles_spatial_dims():
    rng = RNG(5)
    x = Tensor(rng.normal(size=(4, 16, 16, 16)))
    k = Tensor(rng.normal(size=(4, 2, 2, 2, 2)))
    b = Tensor(rng.normal(size=2))
    out = T.conv3d_transpose(x, k, b, stride=2, padding=0)
    assert out.shape == (2, 32, 32, 32)


def test_conv3d_transpose_zero_input_broadcasts_bias():
    x = Tensor(np.zeros((2, 3, 3, 3)))
    k = Tensor(RNG(6).normal(size=(2, 3, 2, 2, 2)))
    b = Tensor(np.array([1.5, -2.0, 0.25]))
    out = T.conv3d_transpose(x, k, b, stride=2, padding=0)
    expected = np.broadcast_to(b.data[:, None, None, None], out.shape)
    np.testing.assert_array_equal(out.data, expected)


def test_conv3d_transpose_matches_dense_transpose_matrix():
    # Build the conv matrix A for a 5^3 -> 2^3 stride-2 conv explicitly, then
    # check the transposed op computes A.T (plus bias) on a random 2^3 input.
    rng = RNG(8)
    cin_conv, cout_conv = 2, 3
    k = rng.normal(size=(cout_conv, cin_conv, 3, 3, 3))
    A = conv3d_as_matrix(k, (5, 5, 5), stride=2, padding=0)
    y = rng.normal(size=(cout_conv, 2, 2, 2))
    b = rng.normal(size=cin_conv)
    # same kernel array, read as [C_in', C_out', k, k, k] by the transpose op
    out = T.conv3d_transpose(Tensor(y), Tensor(k), Tensor(b), stride=2, padding=0)
    expected = (A.T @ y.reshape(-1)).reshape(cin_conv, 5, 5, 5) + b[:, None, None, None]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_conv3d_transpose_matches_reference_kernel():
    rng = RNG(9)
    for stride, padding, ks in [(1, 0, 3), (2, 0, 2), (2, 1, 4), (3, 1, 3)]:
        x = rng.normal(size=(2, 4, 3, 4))
        ker = rng.normal(size=(2, 3, ks, ks, ks))
        b = rng.normal(size=3)
        fast = T.conv3d_transpose(Tensor(x), Tensor(ker), Tensor(b), stride=stride, padding=padding).data
        ref = T.conv3d_transpose_reference(x, ker, b, stride=stride, padding=padding)
        np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    d=st.integers(3, 9),
    k=st.integers(1, 4),
    stride=st.integers(1, 3),
    padding=st.integers(0, 1),
)
def test_downsample_then_upsample_restores_shape(d, k, stride, padding):
    # the /2 ... *2 contract: when the conv consumes its input evenly, the
    # matched transpose restores the original spatial shape
    if k % 2 == 0:
        k += 1  # conv3d requires odd kernels
    if d + 2 * padding - k < 0 or (d + 2 * padding - k) % stride != 0:
        return
    rng = RNG(d * 31 + k * 7 + stride)
    x = Tensor(rng.normal(size=(1, d, d, d)))
    kc = Tensor(rng.normal(size=(2, 1, k, k, k)))
    bc = Tensor(np.zeros(2))
    down = T.conv3d(x, kc, bc, stride=stride, padding=padding)
    kt = Tensor(rng.normal(size=(2, 1, k, k, k)))
    bt = Tensor(np.zeros(1))
    up = T.conv3d_transpose(down, kt, bt, stride=stride, padding=padding)
    assert up.shape == x.shape


# ---------------------------------------------------------------------------
# pointwise ops and bce


def test_relu_basic():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    x = Tensor(np.abs(RNG(2).normal(size=8)) + 0.1)
    np.testing.assert_array_equal(T.relu(x).data, x.data)


def test_sigmoid_values_and_saturation():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    hi = T.sigmoid(Tensor([50.0])).data[0]
    assert abs(hi - 1.0) < 1e-15
    lo = T.sigmoid(Tensor([-700.0])).data[0]
    assert 0.0 <= lo < 1e-300
    big = T.sigmoid(Tensor([700.0, -700.0]))
    assert np.all(np.isfinite(big.data))


def test_bce_matching_prob_and_target_is_tiny():
    t = np.array([0.0, 1.0, 1.0, 0.0])
    out = T.bce(Tensor(t.copy()), Tensor(t))
    assert out.item() <= -math.log1p(-1e-7) + 1e-12


def test_bce_half_probability_is_ln2():
    for t in (np.zeros((2, 2)), np.ones((2, 2)), np.array([[0.0, 1.0], [1.0, 0.0]])):
        out = T.bce(Tensor(np.full((2, 2), 0.5)), Tensor(t))
        assert abs(out.item() - math.log(2.0)) < 1e-15


def test_bce_matches_direct_summation():
    rng = RNG(11)
    p = rng.uniform(0.02, 0.98, size=(4, 4, 4))
    t = (rng.random((4, 4, 4)) < 0.5).astype(np.float64)
    out = T.bce(Tensor(p), Tensor(t))
    assert abs(out.item() - bce_direct(p, t)) < 1e-12


def test_bce_errors():
    with pytest.raises(ValueError, match="shape"):
        T.bce(Tensor(np.full(3, 0.5)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="binary"):
        T.bce(Tensor(np.full(3, 0.5)), Tensor(np.array([0.0, 0.5, 1.0])))


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_sum_gives_ones():
    x = Tensor(RNG(12).normal(size=(2, 2)), requires_grad=True)
    tape = Tape()
    with tape:
        loss = T.tensor_sum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_single_weight_closed_form():
    # loss = bce(sigmoid(w * x), t): d/dw = mean((sigmoid(wx) - t) * x)
    rng = RNG(13)
    x = rng.normal(size=6)
    t = (rng.random(6) < 0.5).astype(np.float64)
    w = Tensor(np.array([0.7]), requires_grad=True)

    tape = Tape()
    with tape:
        wx = T.elementwise_mul(Tensor(x), T.concat_channels([w] * 6))
        loss = T.bce(T.sigmoid(wx), Tensor(t))
    backward(loss, tape)
    s = 1.0 / (1.0 + np.exp(-0.7 * x))
    expected = np.mean((s - t) * x)
    # every broadcast copy of w accumulates its slice into the same grad buffer
    assert abs(float(np.sum(w.grad)) - expected) < 1e-12


def test_backward_twice_without_reset_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    with tape:
        loss = T.tensor_sum(x)
    backward(loss, tape)
    with pytest.raises(RuntimeError, match="already consumed"):
        backward(loss, tape)
    tape.reset()
    with tape:
        loss2 = T.tensor_sum(x)
    backward(loss2, tape)  # fine after reset


def test_backward_nonscalar_loss_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    with tape:
        y = T.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_backward_detached_loss_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    with tape:
        T.tensor_sum(x)
    stray = Tensor(np.asarray(1.0), requires_grad=True)
    with pytest.raises(RuntimeError, match="detached"):
        backward(stray, tape)


def test_tape_is_topologically_ordered_and_visited_once():
    x = Tensor(RNG(14).normal(size=(2, 3, 3, 3)), requires_grad=True)
    k = Tensor(RNG(15).normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    tape = Tape()
    with tape:
        h = T.conv3d(x, k, b, padding=1)
        h = T.relu(h)
        loss = T.tensor_mean(T.elementwise_mul(h, h))
    seen = {id(x), id(k), id(b)}
    for entry in tape.entries:
        for inp in entry.inputs:
            assert id(inp) in seen or not inp.requires_grad
        seen.add(id(entry.output))

    calls = []
    for entry in tape.entries:
        orig = entry.backward_fn
        entry.backward_fn = (lambda fn, name: lambda g: (calls.append(name), fn(g)))(orig, entry.op)
    backward(loss, tape)
    assert calls == [e.op for e in reversed(tape.entries)]


# ---------------------------------------------------------------------------
# finite-difference checks, one per differentiable op


def _fd_check(loss_fn, leaves, h=1e-5, rel=1e-6, floor=1e-9):
    grads = taped_grads(loss_fn, leaves)
    for leaf, g in zip(leaves, grads):
        num = numeric_grad(lambda: loss_fn().item(), leaf.data, h=h)
        assert_grad_close(g, num, rel=rel, floor=floor)


def _weighted_scalar(x, rng):
    # reduce through a fixed random weighting so every entry matters
    w = Tensor(rng.normal(size=x.shape))
    return T.tensor_sum(T.elementwise_mul(x, w))


def test_grad_add():
    rng = RNG(20)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    wr = RNG(21)
    w = Tensor(wr.normal(size=(3, 3)))
    _fd_check(lambda: T.tensor_sum(T.elementwise_mul(T.add(a, b), w)), [a, b])


def test_grad_scalar_mul():
    rng = RNG(22)
    a = Tensor(rng.normal(size=(4,)), requires_grad=True)
    w = Tensor(rng.normal(size=(4,)))
    _fd_check(lambda: T.tensor_sum(T.elementwise_mul(T.scalar_mul(a, 2.5), w)), [a])


def test_grad_elementwise_mul():
    rng = RNG(23)
    a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    _fd_check(lambda: T.tensor_sum(T.elementwise_mul(a, b)), [a, b])


def test_grad_sum_and_mean():
    rng = RNG(24)
    a = Tensor(rng.normal(size=(5,)), requires_grad=True)
    _fd_check(lambda: T.tensor_sum(a), [a])
    _fd_check(lambda: T.tensor_mean(a), [a])


def test_grad_relu_away_from_zero():
    rng = RNG(25)
    vals = rng.normal(size=(4, 4))
    vals[np.abs(vals) < 0.05] = 0.5  # keep clear of the kink
    a = Tensor(vals, requires_grad=True)
    w = Tensor(RNG(26).normal(size=(4, 4)))
    _fd_check(lambda: T.tensor_sum(T.elementwise_mul(T.relu(a), w)), [a])


def test_grad_sigmoid_matches_closed_form_and_fd():
    rng = RNG(27)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = Tensor(RNG(28).normal(size=(3, 3)))
    grads = taped_grads(lambda: T.tensor_sum(T.elementwise_mul(T.sigmoid(a), w)), [a])
    s = 1.0 / (1.0 + np.exp(-a.data))
    np.testing.assert_allclose(grads[0], w.data * s * (1 - s), rtol=1e-12)
    _fd_check(lambda: T.tensor_sum(T.elementwise_mul(T.sigmoid(a), w)), [a])


def test_grad_bce():
    rng = RNG(29)
    p = Tensor(rng.uniform(0.1, 0.9, size=(3, 3, 3)), requires_grad=True)
    t = Tensor((rng.random((3, 3, 3)) < 0.5).astype(np.float64))
    _fd_check(lambda: T.bce(p, t), [p])


def test_grad_concat_and_slice():
    rng = RNG(30)
    a = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
    w = Tensor(RNG(31).normal(size=(3, 3, 3, 3)))

    def loss():
        cat = T.concat_channels([a, b])
        return T.tensor_sum(T.elementwise_mul(cat, w))

    _fd_check(loss, [a, b])

    w2 = Tensor(RNG(32).normal(size=(1, 3, 3, 3)))
    _fd_check(lambda: T.tensor_sum(T.elementwise_mul(T.channel_slice(a, 1, 2), w2)), [a])


def test_grad_conv3d():
    rng = RNG(33)
    x = Tensor(rng.normal(size=(2, 5, 4, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w = Tensor(RNG(34).normal(size=(3, 3, 2, 3)))

    def loss():
        return T.tensor_sum(T.elementwise_mul(T.conv3d(x, k, b, stride=2, padding=1), w))

    _fd_check(loss, [x, k, b])


def test_grad_conv3d_uneven_consumption():
    # stride 2 with an input the conv does not tile exactly
    rng = RNG(35)
    x = Tensor(rng.normal(size=(1, 6, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 1, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    w = Tensor(RNG(36).normal(size=(2, 3, 3, 3)))

    def loss():
        return T.tensor_sum(T.elementwise_mul(T.conv3d(x, k, b, stride=2, padding=1), w))

    _fd_check(loss, [x, k, b])


def test_grad_conv3d_transpose():
    rng = RNG(37)
    x = Tensor(rng.normal(size=(3, 3, 3, 3)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 2, 2, 2)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    w = Tensor(RNG(38).normal(size=(2, 6, 6, 6)))

    def loss():
        return T.tensor_sum(T.elementwise_mul(T.conv3d_transpose(x, k, b, stride=2, padding=0), w))

    _fd_check(loss, [x, k, b])


def test_grad_conv3d_transpose_with_padding():
    rng = RNG(39)
    x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 4, 4, 4)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    w = Tensor(RNG(40).normal(size=(2, 6, 6, 6)))

    def loss():
        return T.tensor_sum(T.elementwise_mul(T.conv3d_transpose(x, k, b, stride=2, padding=1), w))

    _fd_check(loss, [x, k, b])
