import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from signseg import tensor as tc
from signseg.tensor import Tensor, parameter


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x, w):
    c_out, c_in, k = w.shape
    t = x.shape[1]
    pad = k // 2
    out = np.zeros((c_out, t))
    for o in range(c_out):
        for i in range(t):
            s = 0.0
            for c in range(c_in):
                for j in range(k):
                    src = i + j - pad
                    if 0 <= src < t:
                        s += x[c, src] * w[o, c, j]
            out[o, i] = s
    return out


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(tc.elementwise("add", [1, 2], [3, 4]).data, [4, 6])

    def test_relu(self):
        np.testing.assert_array_equal(tc.elementwise("relu", [-1, 0, 2]).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert tc.elementwise("sigmoid", 0.0).item() == 0.5

    def test_sigmoid_extremes_are_finite(self):
        y = tc.sigmoid([-800.0, 800.0]).data
        assert y[0] >= 0 and y[1] == 1.0

    def test_broadcast_size_one(self):
        out = tc.add(np.ones((2, 3)), np.ones((1, 3)))
        assert out.shape == (2, 3)

    def test_shape_mismatch(self):
        with pytest.raises(tc.ShapeError):
            tc.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_broadcast_gradients_accumulate(self):
        a = parameter(np.ones((2, 3)))
        b = parameter(np.ones((1, 3)))
        tc.backward(tc.sum(tc.mul(a, b)))
        np.testing.assert_array_equal(b.grad, [[2, 2, 2]])
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            tc.elementwise("div", 1.0, 2.0)

    def test_nan_is_error(self):
        with pytest.raises(FloatingPointError):
            Tensor([np.nan])


class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal(tc.matmul(np.eye(2), m).data, m)

    def test_projection(self):
        np.testing.assert_array_equal(tc.matmul([[1, 0], [0, 0]], [[5], [7]]).data, [[5], [0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(tc.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-13)

    def test_batched_left_matrix(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(2, 3, 5, 4))
        ref = np.einsum("ij,ntjc->ntic", a, b)
        np.testing.assert_allclose(tc.matmul(a, b).data, ref, atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(tc.ShapeError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    @pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((5, 5), (2, 3, 5, 4)),
                                       ((2, 3, 4), (4, 6)), ((2, 3, 4), (2, 4, 5))])
    def test_gradients(self, sa, sb):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=np.broadcast_shapes(sa[:-2], sb[:-2]) + (sa[-2], sb[-1]))
        assert tc.grad_check(lambda x: tc.sum(tc.matmul(x, b) * w), a) < 1e-7
        assert tc.grad_check(lambda x: tc.sum(tc.matmul(a, x) * w), b) < 1e-7


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        y = tc.softmax([1000.0, 0.0, 0.0]).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [1, 0, 0], atol=1e-300)

    def test_matches_direct_formula(self):
        x = np.random.default_rng(3).normal(size=4)
        e = [math.exp(v) for v in x]
        ref = [v / math.fsum(e) for v in e]
        np.testing.assert_allclose(tc.softmax(x).data, ref, rtol=0, atol=1e-12)

    def test_mask_gives_exact_zero(self):
        y = tc.softmax([1.0, 2.0, 3.0], mask=[True, False, True]).data
        assert y[1] == 0.0
        assert abs(y.sum() - 1) < 1e-12

    @settings(max_examples=1000, deadline=None)
    @given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = tc.softmax(x, axis=1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(tc.softmax(x + c, axis=1).data, y, atol=1e-9)

    def test_order_preserving(self):
        x = np.array([0.3, -1.0, 2.0, 0.1])
        assert np.array_equal(np.argsort(tc.softmax(x).data), np.argsort(x))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert tc.grad_check(lambda t: tc.sum(tc.softmax(t, axis=1) * w), x) < 1e-8


class TestTemporalConv:
    def test_delta_kernel(self):
        out = tc.temporal_conv([[1.0, 2.0, 3.0]], [[[0.0, 1.0, 0.0]]])
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])

    def test_box_kernel_zero_padding(self):
        out = tc.temporal_conv([[1.0, 1.0, 1.0]], [[[1.0, 1.0, 1.0]]])
        np.testing.assert_array_equal(out.data, [[2, 3, 2]])

    def test_against_naive_loop(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(3, 11)), rng.normal(size=(4, 3, 5))
        np.testing.assert_allclose(tc.temporal_conv(x, w).data, naive_conv(x, w), atol=1e-10)

    def test_batched_layout(self):
        rng = np.random.default_rng(6)
        x, w = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, 3))
        out = tc.temporal_conv(x, w).data
        for n in range(2):
            np.testing.assert_allclose(out[n], naive_conv(x[n], w), atol=1e-10)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            tc.temporal_conv(np.ones((1, 4)), np.ones((1, 1, 2)))

    @settings(max_examples=1000, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 9)),
                      elements=st.floats(-10, 10)),
           st.sampled_from([1, 3, 5, 9]))
    def test_centered_delta_is_identity(self, x, k):
        c = x.shape[0]
        w = np.zeros((c, c, k))
        for i in range(c):
            w[i, i, k // 2] = 1.0
        np.testing.assert_array_equal(tc.temporal_conv(x, w).data, x)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x, w = rng.normal(size=(2, 6, 3, 4)), rng.normal(size=(5, 4, 3))
        r = rng.normal(size=(2, 6, 3, 5))
        assert tc.grad_check(lambda t: tc.sum(tc.conv_time(t, w) * r), x) < 1e-7
        assert tc.grad_check(lambda t: tc.sum(tc.conv_time(x, t) * r), w) < 1e-7


class TestGraphConv:
    def test_identity(self):
        h = np.random.default_rng(8).normal(size=(4, 3))
        np.testing.assert_array_equal(tc.graph_conv(h, np.eye(4), np.eye(3)).data, h)

    def test_two_node(self):
        out = tc.graph_conv([[2.0], [4.0]], [[0.5, 0.5], [0.5, 0.5]], [[1.0]])
        np.testing.assert_array_equal(out.data, [[3], [3]])

    def test_definitional_composition(self):
        rng = np.random.default_rng(9)
        a, h, w = rng.normal(size=(5, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
        ref = tc.matmul(tc.matmul(a, h), w).data
        assert np.array_equal(tc.graph_conv(h, a, w).data, ref)

    def test_dimension_mismatch(self):
        with pytest.raises(tc.ShapeError):
            tc.graph_conv(np.ones((4, 2)), np.eye(5), np.eye(2))

    @settings(max_examples=1000, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)),
                      elements=st.floats(-1e3, 1e3)))
    def test_identity_property(self, h):
        j, c = h.shape
        np.testing.assert_array_equal(tc.graph_conv(h, np.eye(j), np.eye(c)).data, h)


class TestBatchNorm:
    def test_constant_channel(self):
        st_ = tc.BatchNormState(1)
        out = tc.batch_norm_1d(np.full((1, 5), 3.0), st_, "train")
        np.testing.assert_array_equal(out.data, np.zeros((1, 5)))

    def test_two_values(self):
        out = tc.batch_norm_1d([[-1.0, 1.0]], tc.BatchNormState(1), "train")
        np.testing.assert_allclose(out.data, [[-1, 1]] / np.sqrt(1 + 1e-5), rtol=0, atol=1e-15)

    def test_eval_identity(self):
        x = np.random.default_rng(10).normal(size=(3, 4))
        out = tc.batch_norm_1d(x, tc.BatchNormState(3), "eval")
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)

    def test_running_stats_momentum(self):
        state = tc.BatchNormState(1)
        tc.batch_norm_1d([[1.0, 3.0]], state, "train")
        assert state.running_mean[0] == pytest.approx(0.1 * 2.0)
        assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)

    def test_channel_mismatch(self):
        with pytest.raises(tc.ShapeError):
            tc.batch_norm_1d(np.ones((2, 3)), tc.BatchNormState(3), "train")

    def test_gradients_with_affine_and_mask(self):
        rng = np.random.default_rng(11)
        x, r = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        mask = (np.arange(5) < 4)[None, :, None] * np.ones((2, 1, 1))

        def f(t, m=None):
            return tc.sum(tc.batch_norm(t, tc.BatchNormState(3), True, gamma, beta, mask=m) * r)

        assert tc.grad_check(f, x) < 1e-7
        assert tc.grad_check(lambda t: f(t, mask), x) < 1e-7
        assert tc.grad_check(lambda g: tc.sum(tc.batch_norm(x, tc.BatchNormState(3), True, g, beta) * r),
                             gamma) < 1e-8


class TestReduce:
    def test_mean_rows(self):
        np.testing.assert_array_equal(tc.reduce("mean", [[1.0, 3.0], [5.0, 7.0]], axis=1).data, [2, 6])
        np.testing.assert_array_equal(tc.reduce("mean", [[1.0, 3.0], [5.0, 7.0]], axis=0).data, [3, 5])

    def test_sum(self):
        assert tc.reduce("sum", [1.0, 2.0, 3.0]).item() == 6

    def test_mean_backward_uniform(self):
        x = parameter(np.arange(8.0).reshape(2, 4))
        tc.backward(tc.mean(x))
        np.testing.assert_array_equal(x.grad, np.full((2, 4), 1 / 8))

    def test_unknown(self):
        with pytest.raises(ValueError):
            tc.reduce("max", [1.0])


class TestCrossEntropy:
    def test_confident(self):
        logits = np.full((3, 4), -20.0)
        y = np.array([0, 2, 3])
        logits[np.arange(3), y] = 20.0
        assert tc.cross_entropy(logits, y).item() < 1e-3

    def test_uniform(self):
        assert tc.cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 1])).item() == pytest.approx(math.log(4))

    def test_weighted_against_per_frame_oracle(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(7, 4))
        y = np.array([0, 1, 2, 3, 3, 1, 0])
        w = np.array([0.1, 1.0, 1.0, 5.0])
        num = den = 0.0
        for t in range(7):
            z = logits[t]
            lse = math.log(math.fsum(math.exp(v) for v in z))
            num += w[y[t]] * -(z[y[t]] - lse)
            den += w[y[t]]
        assert tc.cross_entropy(logits, y, w).item() == pytest.approx(num / den, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            tc.cross_entropy(np.zeros((2, 4)), np.array([0, 4]))

    def test_gradient(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, size=6)
        assert tc.grad_check(lambda t: tc.cross_entropy(t, y, [0.1, 1, 1, 5]), logits) < 1e-4


class TestBackward:
    def test_sum_grad_ones(self):
        x = parameter(np.arange(4.0))
        tc.backward(tc.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_square(self):
        x = parameter([1.0, -2.0, 3.0])
        tc.backward(tc.sum(x * x))
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_non_scalar_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.backward(parameter([1.0, 2.0]) * 2.0)

    @settings(max_examples=1000, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)),
           hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)))
    def test_accumulation_law(self, a, b):
        n = min(a.size, b.size)
        a, b = a[:n], b[:n]
        x = parameter(a)
        tc.backward(tc.sum(x * b) + tc.sum(tc.relu(x)))
        np.testing.assert_allclose(x.grad, b + (a > 0), rtol=0, atol=1e-12)

    def test_record_topological_and_unique(self):
        x = parameter(np.ones(3))
        y = x * 2.0
        z = tc.sum(y * y + y)
        rec = tc.ComputationRecord(z)
        pos = {id(n): i for i, n in enumerate(rec.nodes)}
        assert len(pos) == len(rec.nodes)
        for n in rec.nodes:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]

    def test_no_grad_records_nothing(self):
        x = parameter(np.ones(3))
        with tc.no_grad():
            y = tc.sum(x * 2.0)
        assert y.is_leaf and not y.requires_grad


class TestGradCheck:
    def test_sum_exact(self):
        x = np.random.default_rng(14).normal(size=(3, 3))
        assert tc.grad_check(tc.sum, x) < 1e-9

    def test_detects_wrong_gradient(self):
        def bad(t):
            out = tc.sum(t * t)
            out._backward = lambda g: (np.zeros(t.shape),)
            return out

        x = np.random.default_rng(15).normal(size=4) + 3.0
        assert tc.grad_check(bad, x) > 0.1

    def test_nondeterministic_rejected(self):
        rng = np.random.default_rng(16)
        with pytest.raises(RuntimeError):
            tc.grad_check(lambda t: tc.sum(t * rng.normal()), np.ones(2))


OPS = {
    "add": lambda x, r: tc.sum(tc.add(x, r) * r),
    "sub": lambda x, r: tc.sum(tc.sub(r, x) * r),
    "mul": lambda x, r: tc.sum(tc.mul(x, x) * r),
    "relu": lambda x, r: tc.sum(tc.relu(x) * r),
    "sigmoid": lambda x, r: tc.sum(tc.sigmoid(x) * r),
    "abs": lambda x, r: tc.sum(tc.absolute(x) * r),
    "softmax": lambda x, r: tc.sum(tc.softmax(x, axis=-1) * r),
    "mean": lambda x, r: tc.mean(x * r),
    "transpose": lambda x, r: tc.sum(tc.transpose(x) * r.T),
    "take": lambda x, r: tc.sum(x[:, 1:] * r[:, 1:]),
    "concat": lambda x, r: tc.sum(tc.concat([x, x * 2.0], axis=0) * tc.concat([r, r], axis=0)),
    "cross_entropy": lambda x, r: tc.cross_entropy(x, np.argmax(r, axis=1), [0.5, 1.0, 2.0, 1.5]),
    "matmul": lambda x, r: tc.sum(tc.matmul(x, r.T)),
    "temporal_conv": lambda x, r: tc.sum(tc.temporal_conv(x, np.stack([r[:, :3]] * 2))),
    "batch_norm": lambda x, r: tc.sum(tc.batch_norm(x, tc.BatchNormState(4), True) * r),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check_on_100_instances(name):
    f = OPS[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        r = rng.normal(size=(3, 4))
        if name == "abs":
            x = x + np.sign(x) * 0.1  # keep away from the kink
        assert tc.grad_check(lambda t: f(t, r), x) < 1e-4, (name, seed)
