import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenebench import tensor as T


def rand_matrix(rng, rows, cols):
    return T.Matrix(rng.standard_normal((rows, cols)))


def sumsq(m):
    return T.sum_all(T.hadamard(m, m))


class TestMatmul:
    def test_identity(self):
        a = T.Matrix([[3.0, 4.0], [5.0, 6.0]])
        out = T.matmul(T.Matrix(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_zero(self):
        rng = np.random.default_rng(0)
        a = rand_matrix(rng, 3, 4)
        z = T.Matrix(np.zeros((4, 2)))
        assert np.all(T.matmul(a, z).data == 0.0)

    def test_hand_product(self):
        # oracle: dot products by hand
        # [[1,2],[3,4]] @ [[5,6],[7,8]] = [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
        a = T.Matrix([[1.0, 2.0], [3.0, 4.0]])
        b = T.Matrix([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            T.matmul(T.Matrix(np.ones((2, 3))), T.Matrix(np.ones((2, 3))))

    def test_associative_within_tolerance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = rand_matrix(rng, 4, 3)
            b = rand_matrix(rng, 3, 5)
            c = rand_matrix(rng, 5, 2)
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.allclose(left, right, rtol=1e-9, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a = rand_matrix(rng, 5, 5)
        b = rand_matrix(rng, 5, 5)
        first = T.matmul(a, b).data.tobytes()
        second = T.matmul(a, b).data.tobytes()
        assert first == second


class TestSoftmax:
    def test_constant_rows(self):
        out = T.softmax(T.Matrix([[2.5, 2.5, 2.5]]), axis=1)
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_log_three(self):
        out = T.softmax(T.Matrix([[0.0, np.log(3.0)]]), axis=1)
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, xs, c):
        x = T.Matrix([xs])
        shifted = T.Matrix([[v + c for v in xs]])
        np.testing.assert_allclose(
            T.softmax(x, axis=1).data, T.softmax(shifted, axis=1).data, atol=1e-12
        )

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        y = T.softmax(rand_matrix(rng, 6, 9), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-12)
        assert np.all(y > 0) and np.all(y < 1)

    def test_axis_zero_columns(self):
        rng = np.random.default_rng(12)
        y = T.softmax(rand_matrix(rng, 5, 4), axis=0).data
        np.testing.assert_allclose(y.sum(axis=0), np.ones(4), atol=1e-12)


class TestMhca:
    def test_single_key_ignores_query(self):
        rng = np.random.default_rng(2)
        params = T.MhcaParams.create(dq=4, dk=4, dv=4, width=8, d_out=4, heads=2, seed=5)
        key = rand_matrix(rng, 1, 4)
        value = rand_matrix(rng, 1, 4)
        out_a = T.mhca(rand_matrix(rng, 3, 4), key, value, params)
        out_b = T.mhca(rand_matrix(rng, 3, 4), key, value, params)
        np.testing.assert_allclose(out_a.output.data, out_b.output.data, atol=1e-12)
        # with one key the softmax weight is exactly 1
        for w in out_a.weights:
            np.testing.assert_allclose(w.data, np.ones((3, 1)))

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        params = T.MhcaParams.create(dq=6, dk=6, dv=6, width=12, d_out=6, heads=3, seed=1)
        res = T.mhca(rand_matrix(rng, 4, 6), rand_matrix(rng, 7, 6), rand_matrix(rng, 7, 6), params)
        for w in res.weights:
            np.testing.assert_allclose(w.data.sum(axis=1), np.ones(4), atol=1e-12)

    def test_context_in_convex_hull_of_projected_values(self):
        rng = np.random.default_rng(9)
        params = T.MhcaParams.create(dq=4, dk=4, dv=4, width=8, d_out=4, heads=2, seed=3)
        key = rand_matrix(rng, 5, 4)
        value = rand_matrix(rng, 5, 4)
        res = T.mhca(rand_matrix(rng, 3, 4), key, value, params)
        for h in range(params.heads):
            w = res.weights[h].data
            assert np.all(w >= 0)
            v_proj = value.data @ params.wv[h].data
            np.testing.assert_allclose(res.contexts[h].data, w @ v_proj, atol=1e-12)

    def test_hand_computed_single_head(self):
        # one head, identity projections, nq=1, nk=2: output is the
        # softmax-weighted average of the value rows
        ident = T.Matrix(np.eye(2))
        params = T.MhcaParams(wq=(ident,), wk=(ident,), wv=(ident,), wo=T.Matrix(np.eye(2)))
        query = T.Matrix([[1.0, 0.0]])
        key = T.Matrix([[2.0, 0.0], [0.0, 0.0]])
        value = T.Matrix([[1.0, 10.0], [3.0, -2.0]])
        res = T.mhca(query, key, value, params)
        # logits = [2, 0] / sqrt(2)
        z = np.array([2.0, 0.0]) / np.sqrt(2.0)
        w = np.exp(z - z.max())
        w = w / w.sum()
        expected = w[0] * value.data[0] + w[1] * value.data[1]
        np.testing.assert_allclose(res.output.data[0], expected, atol=1e-12)

    def test_zero_heads_rejected(self):
        with pytest.raises(ValueError):
            T.MhcaParams.create(dq=4, dk=4, dv=4, width=8, d_out=4, heads=0, seed=0)

    def test_head_width_divisibility(self):
        with pytest.raises(ValueError, match="divide"):
            T.MhcaParams.create(dq=4, dk=4, dv=4, width=9, d_out=4, heads=2, seed=0)

    def test_dimension_mismatch(self):
        params = T.MhcaParams.create(dq=4, dk=4, dv=4, width=8, d_out=4, heads=2, seed=0)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            T.mhca(rand_matrix(rng, 2, 5), rand_matrix(rng, 3, 4), rand_matrix(rng, 3, 4), params)
        with pytest.raises(ValueError):
            T.mhca(rand_matrix(rng, 2, 4), rand_matrix(rng, 3, 4), rand_matrix(rng, 2, 4), params)


class TestFiniteDiff:
    def test_square_function(self):
        report = T.finite_diff_check(
            lambda ps: float(ps[0][0, 0] ** 2),
            [np.array([[3.0]])],
            [np.array([[6.0]])],
            eps=1e-5,
        )
        assert report.max_rel_err < 1e-8
        assert report.param_count == 1

    def test_softmax_sum_is_constant(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 5))

        def f(ps):
            return T.sum_all(T.softmax(T.Matrix(ps[0]), axis=1)).item()

        report = T.finite_diff_check(f, [x], [np.zeros_like(x)], eps=1e-5)
        assert report.max_abs_err < 1e-6

    def test_mhca_loss_gradients(self):
        rng = np.random.default_rng(8)
        params = T.MhcaParams.create(dq=4, dk=4, dv=4, width=4, d_out=3, heads=2, seed=21)
        q0 = rng.standard_normal((2, 4))
        k0 = rng.standard_normal((3, 4))
        v0 = rng.standard_normal((3, 4))

        def forward(arrays):
            q, k, v = T.Matrix(arrays[0]), T.Matrix(arrays[1]), T.Matrix(arrays[2])
            return sumsq(T.mhca(q, k, v, params).output)

        q, k, v = T.Matrix(q0), T.Matrix(k0), T.Matrix(v0)
        loss = sumsq(T.mhca(q, k, v, params).output)
        grads = T.gradients(loss, [q, k, v])
        report = T.finite_diff_check(
            lambda ps: forward(ps).item(), [q0, k0, v0], grads, eps=1e-5
        )
        assert report.max_rel_err < 1e-4

    def test_mhca_weight_gradients(self):
        rng = np.random.default_rng(13)
        params = T.MhcaParams.create(dq=3, dk=3, dv=3, width=4, d_out=2, heads=2, seed=2)
        q = T.Matrix(rng.standard_normal((2, 3)))
        k = T.Matrix(rng.standard_normal((4, 3)))
        v = T.Matrix(rng.standard_normal((4, 3)))
        names = sorted(params.named("m"))
        tensors = params.named("m")
        wrt = [tensors[n] for n in names]
        loss = sumsq(T.mhca(q, k, v, params).output)
        grads = T.gradients(loss, wrt)

        def forward(arrays):
            heads = params.heads
            wq = tuple(T.Matrix(arrays[names.index(f"m.wq{h}")]) for h in range(heads))
            wk = tuple(T.Matrix(arrays[names.index(f"m.wk{h}")]) for h in range(heads))
            wv = tuple(T.Matrix(arrays[names.index(f"m.wv{h}")]) for h in range(heads))
            wo = T.Matrix(arrays[names.index("m.wo")])
            p = T.MhcaParams(wq=wq, wk=wk, wv=wv, wo=wo)
            return sumsq(T.mhca(q, k, v, p).output).item()

        report = T.finite_diff_check(forward, [m.data for m in wrt], grads, eps=1e-5)
        assert report.max_rel_err < 1e-4

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            T.finite_diff_check(lambda ps: 0.0, [np.zeros((1, 1))], [np.zeros((1, 1))], eps=0.0)


class TestElementwiseBackward:
    """Every op with an analytic backward passes finite differences on small inputs."""

    @pytest.mark.parametrize(
        "builder",
        [
            lambda m: T.relu(m),
            # hadamard with the raw input keeps the loss non-constant in x;
            # sum-of-squares of layer_norm alone is ~n per row
            lambda m: T.hadamard(T.layer_norm(m), m),
            lambda m: T.row_normalize(T.hadamard(m, m)),
            lambda m: T.softmax(m, axis=0),
            lambda m: T.softmax(m, axis=1),
            lambda m: T.transpose(m),
            lambda m: T.scale(m, -1.7),
            lambda m: T.mean_all(m),
            lambda m: T.hcat([m, T.relu(m)]),
            lambda m: T.add(m, T.scale(m, 2.0)),
            lambda m: T.sub(T.hadamard(m, m), m),
        ],
    )
    def test_op_backward(self, builder):
        rng = np.random.default_rng(17)
        x0 = rng.standard_normal((3, 4)) + 0.1

        def f(ps):
            return sumsq(builder(T.Matrix(ps[0]))).item()

        x = T.Matrix(x0)
        loss = sumsq(builder(x))
        (grad,) = T.gradients(loss, [x])
        report = T.finite_diff_check(f, [x0], [grad], eps=1e-5)
        assert report.max_rel_err < 1e-4, report


class TestMatrixType:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            T.Matrix([[np.nan]])

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            T.Matrix([1.0, 2.0])

    def test_data_is_readonly(self):
        m = T.Matrix([[1.0]])
        with pytest.raises(ValueError):
            m.data[0, 0] = 2.0

    def test_unreachable_gradient_is_zero(self):
        a = T.Matrix([[1.0, 2.0]])
        b = T.Matrix([[3.0, 4.0]])
        loss = sumsq(a)
        grads = T.gradients(loss, [b])
        np.testing.assert_array_equal(grads[0], np.zeros((1, 2)))
