"""Contract and gradient tests for the reverse-mode tensor core.

Every gradient assertion is checked against an independent central
finite-difference oracle implemented here in the test module.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pretower import tensor as T
from pretower.errors import ShapeError


def numeric_grad(loss_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. an array, in place."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / scale))


def check_grads(make_loss, params, tol=1e-4):
    """make_loss() must rebuild the graph from `params` and return a scalar Tensor."""
    for p in params:
        p.zero_grad()
    make_loss().backward()
    for p in params:
        num = numeric_grad(lambda: make_loss().item(), p.data)
        assert rel_err(p.grad, num) < tol


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_case(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_zeros_annihilate(self):
        rng = np.random.default_rng(0)
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(rng.normal(size=(3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 4))))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        np.testing.assert_array_equal(T.relu(T.Tensor([-3.0, -0.5])).data, [0.0, 0.0])

    def test_gradient_indicator(self):
        x = T.Tensor([-1.0, 2.0], requires_grad=True)
        T.reduce_sum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_gradient_zero_at_zero(self):
        x = T.Tensor([0.0], requires_grad=True)
        T.reduce_sum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=17))
        once = T.relu(x).data
        twice = T.relu(T.relu(x)).data
        np.testing.assert_allclose(twice, once, atol=1e-12)


class TestSoftmax:
    def test_uniform_for_constant_input(self):
        for c in (-5.0, 0.0, 3.25):
            out = T.softmax(T.Tensor([c, c, c]))
            np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_hand_case(self):
        out = T.softmax(T.Tensor([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_no_overflow(self):
        out = T.softmax(T.Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_empty_is_error(self):
        with pytest.raises(ShapeError):
            T.softmax(T.Tensor(np.zeros(0)))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=9), st.floats(-30, 30))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, values, c):
        x = np.array(values)
        s = T.softmax(T.Tensor(x)).data
        assert abs(s.sum() - 1.0) <= 1e-12
        shifted = T.softmax(T.Tensor(x + c)).data
        np.testing.assert_allclose(shifted, s, atol=1e-12)


class TestL2Normalize:
    def test_hand_case(self):
        np.testing.assert_allclose(T.l2_normalize(T.Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)

    def test_zero_vector_stays_zero(self):
        np.testing.assert_array_equal(T.l2_normalize(T.Tensor([0.0, 0.0])).data, [0.0, 0.0])

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.normal(size=(5, 7)))
        once = T.l2_normalize(x).data
        twice = T.l2_normalize(T.l2_normalize(x)).data
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_unit_vector_unchanged(self):
        v = np.array([0.6, 0.0, 0.8])
        np.testing.assert_allclose(T.l2_normalize(T.Tensor(v)).data, v, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic_hand_case(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.dot(x, x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            x.backward()

    def test_unreachable_parameter_gets_zero(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        unused = T.Tensor([5.0], requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        grads = T.gradients(loss, {"x": x, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], [0.0])
        np.testing.assert_array_equal(grads["x"], [2.0, 4.0])

    def test_shared_parameter_accumulates(self):
        w = T.Tensor([[0.5, -0.2], [0.1, 0.3]], requires_grad=True)
        x = T.Tensor([[1.0, 2.0]])

        def make_loss():
            # w used on two paths: x@w and x@w@w
            y = T.matmul(x, w)
            z = T.matmul(y, w)
            return T.reduce_sum(T.add(y, z))

        check_grads(make_loss, [w])


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _away_from_zero(rng, *shape):
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng):
    """(name, params, loss builder) triples exercising every primitive."""
    a = T.Tensor(_rand(rng, 3, 4), requires_grad=True)
    b = T.Tensor(_rand(rng, 4, 2), requires_grad=True)
    yield "matmul2d", [a, b], lambda: T.reduce_sum(T.matmul(a, b))

    ab = T.Tensor(_rand(rng, 2, 3, 4), requires_grad=True)
    bb = T.Tensor(_rand(rng, 2, 4, 2), requires_grad=True)
    yield "matmul3d", [ab, bb], lambda: T.reduce_sum(T.matmul(ab, bb))

    c = T.Tensor(_rand(rng, 3, 4), requires_grad=True)
    d = T.Tensor(_rand(rng, 3, 4), requires_grad=True)
    yield "add", [c, d], lambda: T.reduce_sum(T.add(c, d))
    yield "mul", [c, d], lambda: T.reduce_sum(T.mul(c, d))

    bias = T.Tensor(_rand(rng, 4), requires_grad=True)
    yield "bias_add", [c, bias], lambda: T.reduce_sum(T.add(c, bias))

    e = T.Tensor(_away_from_zero(rng, 5), requires_grad=True)
    yield "relu", [e], lambda: T.reduce_sum(T.relu(e))
    yield "sigmoid", [e], lambda: T.reduce_sum(T.sigmoid(e))
    yield "exp", [e], lambda: T.reduce_sum(T.exp(e))
    yield "scale", [e], lambda: T.reduce_sum(T.scale(e, -2.5))
    yield "shift", [e], lambda: T.reduce_sum(T.shift(e, 1.5))

    pos = T.Tensor(rng.uniform(0.2, 2.0, size=6), requires_grad=True)
    yield "log", [pos], lambda: T.reduce_sum(T.log(pos))

    f = T.Tensor(_rand(rng, 2, 5), requires_grad=True)
    yield "softmax", [f], lambda: T.reduce_sum(T.mul(T.softmax(f), T.softmax(f)))
    yield "l2_normalize", [f], lambda: T.reduce_sum(T.mul(T.l2_normalize(f), f))
    yield "mean", [f], lambda: T.reduce_mean(f)
    yield "mean_axis", [f], lambda: T.reduce_sum(T.reduce_mean(f, axis=1))
    yield "max_axis", [f], lambda: T.reduce_sum(T.reduce_max(f, axis=1))
    yield "transpose", [f], lambda: T.reduce_sum(T.mul(T.transpose(f), T.transpose(f)))
    yield "reshape", [f], lambda: T.reduce_sum(T.mul(T.reshape(f, (5, 2)), T.reshape(f, (5, 2))))
    yield "repeat_cols", [f], lambda: T.reduce_sum(T.mul(T.repeat_cols(f, 3), T.repeat_cols(f, 3)))

    g1 = T.Tensor(_rand(rng, 2, 3), requires_grad=True)
    g2 = T.Tensor(_rand(rng, 4, 3), requires_grad=True)
    yield "concat", [g1, g2], lambda: T.reduce_sum(T.mul(T.concat([g1, g2], axis=0), T.concat([g1, g2], axis=0)))

    table = T.Tensor(_rand(rng, 6, 3), requires_grad=True)
    ids = np.array([0, 2, 2, 5])
    yield "gather_rows", [table], lambda: T.reduce_sum(T.mul(T.gather_rows(table, ids), T.gather_rows(table, ids)))

    v1 = T.Tensor(_rand(rng, 7), requires_grad=True)
    v2 = T.Tensor(_rand(rng, 7), requires_grad=True)
    yield "dot", [v1, v2], lambda: T.dot(v1, v2)

    h = T.Tensor(_away_from_zero(rng, 8), requires_grad=True)
    yield "clip", [h], lambda: T.reduce_sum(T.clip(h, -0.5, 0.5))

    k = T.Tensor(_rand(rng, 4, 6), requires_grad=True)
    yield (
        "dropout",
        [k],
        lambda: T.reduce_sum(T.dropout(k, 0.3, np.random.default_rng(99))),
    )


@pytest.mark.parametrize("seed", range(20))
def test_all_ops_match_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    for name, params, make_loss in op_cases(rng):
        for p in params:
            p.zero_grad()
        make_loss().backward()
        for p in params:
            num = numeric_grad(lambda: make_loss().item(), p.data)
            err = rel_err(p.grad, num)
            assert err < 1e-4, f"{name}: rel err {err}"


class TestOpDetails:
    def test_max_tie_routes_to_first(self):
        x = T.Tensor([[2.0, 2.0, 1.0]], requires_grad=True)
        T.reduce_sum(T.reduce_max(x, axis=1)).backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])

    def test_clip_blocks_outside(self):
        x = T.Tensor([-2.0, 0.0, 2.0], requires_grad=True)
        T.reduce_sum(T.clip(x, -1.0, 1.0)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_gather_out_of_range(self):
        t = T.Tensor(np.zeros((3, 2)))
        with pytest.raises(IndexError):
            T.gather_rows(t, np.array([3]))

    def test_gather_gradient_sparsity(self):
        t = T.Tensor(np.ones((5, 2)), requires_grad=True)
        T.reduce_sum(T.gather_rows(t, np.array([1, 1, 3]))).backward()
        expected = np.zeros((5, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(t.grad, expected)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))

    def test_mul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.mul(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))

    def test_dropout_zero_rate_is_identity(self):
        x = T.Tensor([1.0, 2.0])
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_scales_kept_values(self):
        x = T.Tensor(np.ones(10_000))
        out = T.dropout(x, 0.25, np.random.default_rng(5))
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs(out.data.mean() - 1.0) < 0.05

    def test_operator_sugar(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = (2.0 * x + 1.0 - x) * x  # (x+1)*x = x^2 + x
        np.testing.assert_allclose(y.data, [2.0, 6.0])
        T.reduce_sum(y).backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0])  # 2x + 1

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(11)
        for _, params, make_loss in op_cases(rng):
            out = make_loss()
            assert np.all(np.isfinite(out.data))
