import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import multiavatar.diffcore as dc
from multiavatar.diffcore import Tensor, grad_check


def rand(shape, rng, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestElementwise:
    def test_add(self):
        out = dc.elementwise(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), "add")
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4)))
        out = dc.mul(x, dc.ones((3, 4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_broadcast_example(self):
        out = dc.add(Tensor([[1.0], [2.0]]), Tensor([10.0, 20.0]))
        np.testing.assert_array_equal(out.data, [[11.0, 21.0], [12.0, 22.0]])

    def test_broadcast_matches_bruteforce(self):
        # brute-force enumeration over the broadcast result shape
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 1, 4))
        b = rng.normal(size=(2, 1))
        out = dc.add(Tensor(a), Tensor(b)).data
        assert out.shape == (3, 2, 4)
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    assert out[i, j, k] == a[i, 0, k] + b[j, 0]

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4,\)"):
            dc.add(dc.zeros((2, 3)), dc.zeros((4,)))

    def test_div_zero_flagged_in_debug_mode(self):
        dc.set_debug_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                dc.div(Tensor([1.0]), Tensor([0.0]))
        finally:
            dc.set_debug_checks(False)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_broadcast_grad_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = rand((2, 3), rng)
        b = rand((3,), rng)

        def f(t):
            return (dc.mul(t, b) + a).sum()

        assert grad_check(f, a) < 1e-6


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 5)))
        out = dc.matmul(Tensor(np.eye(3)), a)
        np.testing.assert_allclose(out.data, a.data, rtol=0, atol=0)

    def test_dot_product(self):
        out = dc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = dc.matmul(Tensor(a), Tensor(b)).data
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.matmul(dc.zeros((2, 3)), dc.zeros((4, 2)))

    def test_backward_closed_form(self):
        # loss = sum(A @ B)  =>  dA = ones @ B^T
        rng = np.random.default_rng(4)
        a = rand((3, 4), rng)
        b = rand((4, 2), rng)
        dc.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)), atol=1e-12)


class TestActivations:
    def test_sigmoid_zero(self):
        assert dc.sigmoid(Tensor([0.0])).item() == 0.5

    def test_softplus_zero(self):
        assert abs(dc.softplus(Tensor([0.0])).item() - np.log(2.0)) < 1e-12

    def test_relu_negative_grad(self):
        x = Tensor([-3.0], requires_grad=True)
        out = dc.relu(x)
        assert out.item() == 0.0
        out.sum().backward()
        assert x.grad[0] == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            dc.activation(Tensor([1.0]), "tanhh")

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "softplus", "sin", "cos", "exp"])
    def test_grad_check(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        x = rand((4, 3), rng)
        if kind == "relu":
            # keep away from the kink
            x.data[np.abs(x.data) < 1e-3] = 0.5
        assert grad_check(lambda t: dc.activation(t, kind).sum(), x) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(dc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_shift_invariance(self):
        for c in (-37.0, 0.0, 1e4):
            out = dc.softmax(Tensor([c, c, c])).data
            np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_against_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(dc.softmax(Tensor(x)).data, ref, atol=1e-12)

    def test_sums_to_one_positive(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(6, 7)) * 10)
        out = dc.softmax(x, axis=1).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), np.ones(6), atol=1e-12)

    def test_grad_check(self):
        rng = np.random.default_rng(6)
        x = rand((5,), rng)
        w = rng.normal(size=5)
        assert grad_check(lambda t: (dc.softmax(t) * Tensor(w)).sum(), x) < 1e-6


class TestShapeOps:
    def test_concat_axis0(self):
        out = dc.concat([Tensor([[1.0], [2.0]])], axis=0)
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 2.0])

    def test_concat_with_empty(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = dc.concat([x, dc.zeros((2, 0))], axis=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_concat_extent_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.concat([dc.zeros((2, 3)), dc.zeros((3, 3))], axis=1)

    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_split_concat_roundtrip(self, seed, rows_a, rows_b, cols):
        rng = np.random.default_rng(seed)
        full = rng.normal(size=(rows_a + rows_b, cols))
        t = Tensor(full)
        back = dc.concat([t[:rows_a], t[rows_a:]], axis=0)
        np.testing.assert_array_equal(back.data, full)

    def test_concat_backward_splits(self):
        rng = np.random.default_rng(7)
        a = rand((2, 3), rng)
        b = rand((4, 3), rng)
        w = Tensor(rng.normal(size=(6, 3)))
        (dc.concat([a, b], axis=0) * w).sum().backward()
        np.testing.assert_array_equal(a.grad, w.data[:2])
        np.testing.assert_array_equal(b.grad, w.data[2:])

    def test_gather_scatter_roundtrip(self):
        rng = np.random.default_rng(8)
        x = rand((10,), rng)
        idx = np.array([3, 3, 7, 0])
        out = dc.gather(x, idx)
        out.sum().backward()
        expected = np.zeros(10)
        np.testing.assert_array_equal(out.data, x.data[idx])
        expected[[3, 7, 0]] = [2.0, 1.0, 1.0]
        np.testing.assert_array_equal(x.grad, expected)

    def test_scatter_rows(self):
        rng = np.random.default_rng(9)
        vals = rand((3, 2), rng)
        out = dc.scatter_rows(vals, np.array([4, 0, 2]), 6)
        assert out.shape == (6, 2)
        np.testing.assert_array_equal(out.data[4], vals.data[0])
        np.testing.assert_array_equal(out.data[1], 0)
        (out * out).sum().backward()
        np.testing.assert_allclose(vals.grad, 2 * vals.data)

    def test_cumsum_grad(self):
        rng = np.random.default_rng(10)
        x = rand((3, 5), rng)
        w = Tensor(rng.normal(size=(3, 5)))
        assert grad_check(lambda t: (dc.cumsum(t, axis=1) * w).sum(), x) < 1e-6


class TestReduce:
    def test_sum(self):
        assert dc.reduce(Tensor([1.0, 2.0, 3.0]), "sum").item() == 6.0

    def test_mean_constant(self):
        out = dc.reduce(dc.ones((4, 4)) * 2.5, "mean")
        assert out.item() == 2.5

    def test_sum_backward_all_ones(self):
        x = dc.zeros((3, 4), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_max_axis_grad(self):
        rng = np.random.default_rng(11)
        x = rand((4, 6), rng)
        assert grad_check(lambda t: t.max(axis=1).sum(), x) < 1e-6


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.grad[0] == 6.0

    def test_non_scalar_rejected(self):
        x = dc.zeros((3,), requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_unused_parameter_gets_zero_grad(self):
        # a row never touched by the forward pass ends up with zero gradient
        codes = Tensor(np.random.default_rng(12).normal(size=(2, 4)), requires_grad=True)
        (codes[0] * codes[0]).sum().backward()
        assert np.all(codes.grad[1] == 0.0)
        assert np.any(codes.grad[0] != 0.0)

    def test_deterministic_bitwise(self):
        def run():
            rng = np.random.default_rng(13)
            a = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            b = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            loss = (dc.sigmoid(dc.matmul(a, b)) * dc.softmax(a, axis=0)).sum()
            loss.backward()
            return a.grad.copy(), b.grad.copy()

        ga1, gb1 = run()
        ga2, gb2 = run()
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)

    def test_diamond_graph_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        z = (y + y).sum()  # z = 2x^2, dz/dx = 4x = 8
        z.backward()
        assert x.grad[0] == 8.0

    def test_no_grad_blocks_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with dc.no_grad():
            out = x * x
        assert not out.requires_grad


class TestGradCheckHarness:
    def test_quadratic(self):
        rng = np.random.default_rng(14)
        x = rand((5,), rng)
        assert grad_check(lambda t: (t * t).sum(), x) < 1e-6

    def test_linear_near_machine_eps(self):
        rng = np.random.default_rng(15)
        w = Tensor(rng.normal(size=7))
        x = rand((7,), rng)
        assert grad_check(lambda t: (t * w).sum(), x) < 1e-9


class TestAdam:
    def test_first_step_closed_form(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = dc.AdamState([p])
        dc.adam_step([p], [p.grad], state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
        # bias-corrected first step: m_hat = v_hat = g, so delta = -lr * 1/(1 + eps)
        expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-12)
        assert state.t == 1

    def test_zero_grad_is_noop(self):
        rng = np.random.default_rng(16)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        before = p.data.copy()
        state = dc.AdamState([p])
        for _ in range(5):
            dc.adam_step([p], [np.zeros_like(p.data)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert state.t == 5

    def test_two_steps_match_scalar_reference(self):
        # hand-rolled scalar reference oracle
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g = 0.7
        theta, m, v = 2.0, 0.0, 0.0
        for t in range(1, 3):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + eps)

        p = Tensor(np.array([2.0]), requires_grad=True)
        state = dc.AdamState([p])
        for _ in range(2):
            dc.adam_step([p], [np.array([g])], state, lr=lr, betas=(b1, b2), eps=eps)
        np.testing.assert_allclose(p.data, [theta], rtol=1e-12)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = dc.AdamState([p])
        with pytest.raises(dc.ShapeError):
            dc.adam_step([p], [np.zeros(4)], state, lr=0.1)

    def test_grouped_optimizer(self):
        rng = np.random.default_rng(17)
        fast = Tensor(rng.normal(size=2), requires_grad=True)
        slow = Tensor(rng.normal(size=2), requires_grad=True)
        opt = dc.Adam([{"params": [fast], "lr": 1e-2}, {"params": [slow], "lr": 1e-4}])
        opt.zero_grad()
        ((fast * fast).sum() + (slow * slow).sum()).backward()
        f0, s0 = fast.data.copy(), slow.data.copy()
        opt.step()
        # equal unit-scale gradients: the fast group moves ~100x further
        assert np.all(np.abs(fast.data - f0) > 50 * np.abs(slow.data - s0))
