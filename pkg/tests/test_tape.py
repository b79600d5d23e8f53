"""Finite-difference verification of every autodiff primitive."""

import numpy as np
import pytest

from defmap import tape


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_op(build, n, rng, tol=1e-6, h=1e-6):
    """build(Var) -> scalar Var; compares tape gradient against FD."""
    x = rng.standard_normal(n)

    def f(v):
        return float(build(tape.Var(v)).data)

    leaf = tape.Var(x)
    out = build(leaf)
    tape.backward(out)
    ga = leaf.grad
    gf = fd_grad(f, x, h=h)
    err = np.max(np.abs(ga - gf) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gf))))
    assert err < tol, f"max rel grad error {err:.3e}"


class TestArithmetic:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)

        def build(v):
            a = tape.reshape(v[slice(0, 6)], (2, 3))
            b = v[slice(6, 9)]
            c = a * b + b - a / (b * b + 2.0)
            return tape.vsum(c * c)

        check_op(build, 9, rng)

    def test_power_sqrt_exp_log(self):
        rng = np.random.default_rng(1)

        def build(v):
            p = v * v + 1.5  # keep strictly positive
            return tape.vsum(tape.sqrt(p) + tape.exp(-p) + tape.log(p) + p**1.5)

        check_op(build, 7, rng)

    def test_matmul_all_arity(self):
        rng = np.random.default_rng(2)

        def build(v):
            A = tape.reshape(v[slice(0, 6)], (2, 3))
            B = tape.reshape(v[slice(6, 12)], (3, 2))
            x = v[slice(12, 15)]
            m = A @ B
            mv = A @ x
            vm = x @ B
            s = tape.dot(x, x)
            return tape.vsum(m * m) + tape.vsum(mv) + tape.vsum(vm) + s

        check_op(build, 15, rng)

    def test_sum_axes_and_mean(self):
        rng = np.random.default_rng(3)

        def build(v):
            a = tape.reshape(v, (3, 4))
            s0 = tape.vsum(a, axis=0)
            s1 = tape.vsum(a, axis=1, keepdims=True)
            return tape.vsum(s0 * s0) + tape.vsum(s1) + 2.0 * tape.vmean(a)

        check_op(build, 12, rng)


class TestNonlinear:
    def test_tanh_sigmoid_relu(self):
        rng = np.random.default_rng(4)

        def build(v):
            return tape.vsum(tape.tanh(v) + tape.sigmoid(v) * tape.relu(v + 0.3))

        check_op(build, 11, rng)

    def test_clip_min_gradient_gate(self):
        v = tape.Var(np.array([-1.0, 0.5, 2.0]))
        out = tape.vsum(tape.clip_min(v, 0.0))
        tape.backward(out)
        np.testing.assert_array_equal(v.grad, [0.0, 1.0, 1.0])

    def test_detach_blocks_gradient(self):
        v = tape.Var(np.array([1.0, 2.0]))
        out = tape.vsum(tape.detach(v) * v)
        tape.backward(out)
        np.testing.assert_allclose(v.grad, v.data)  # only the live branch


class TestStructured:
    def test_take_scatter_adds(self):
        rng = np.random.default_rng(5)

        def build(v):
            a = tape.reshape(v, (4, 3))
            rows = a[np.array([0, 0, 2])]  # repeated row: grads must add
            return tape.vsum(rows * rows) + tape.vsum(a[1:, :2])

        check_op(build, 12, rng)

    def test_concat_stack_transpose(self):
        rng = np.random.default_rng(6)

        def build(v):
            a = v[slice(0, 4)]
            b = v[slice(4, 8)]
            c = tape.concat([a, b * 2.0])
            s = tape.stack([a, b], axis=1)
            return tape.vsum(c * c) + tape.vsum(tape.transpose(s) @ s)

        check_op(build, 8, rng)

    def test_cross3(self):
        rng = np.random.default_rng(7)

        def build(v):
            a, b = v[slice(0, 3)], v[slice(3, 6)]
            c = tape.cross3(a, b)
            return tape.dot(c, c) + tape.vsum(c)

        check_op(build, 6, rng)

    def test_solve_grads_both_args(self):
        rng = np.random.default_rng(8)

        def build(v):
            A = tape.reshape(v[slice(0, 9)], (3, 3)) + np.eye(3) * 4.0
            b = v[slice(9, 12)]
            x = tape.solve(A, b)
            return tape.dot(x, x)

        check_op(build, 12, rng, tol=1e-5)

    def test_solve_matches_numpy(self):
        rng = np.random.default_rng(9)
        A = rng.standard_normal((3, 3)) + np.eye(3) * 3
        b = rng.standard_normal(3)
        x = tape.solve(tape.Var(A), tape.Var(b))
        np.testing.assert_allclose(x.data, np.linalg.solve(A, b), atol=1e-12)

    def test_batch_matvec(self):
        rng = np.random.default_rng(10)

        def build(v):
            M = tape.reshape(v[slice(0, 24)], (4, 3, 2))
            w = v[slice(24, 26)]
            y = tape.batch_matvec(M, w)
            return tape.vsum(y * y)

        check_op(build, 26, rng)

    def test_take_along(self):
        rng = np.random.default_rng(11)
        idx = np.array([[0, 2], [1, 1], [3, 0]])

        def build(v):
            a = tape.reshape(v, (3, 4))
            picked = tape.take_along(a, idx)
            return tape.vsum(picked * picked)

        check_op(build, 12, rng)


class TestImageOps:
    def test_bilinear_sample_matches_manual(self):
        rng = np.random.default_rng(12)
        img = rng.random((5, 7, 3))
        coords = np.array([[1.25, 2.5], [0.0, 0.0], [5.9, 3.1]])
        out = tape.bilinear_sample(img, tape.Var(coords)).data
        x, y = 1.25, 2.5
        manual = (
            (1 - 0.5) * ((1 - 0.25) * img[2, 1] + 0.25 * img[2, 2])
            + 0.5 * ((1 - 0.25) * img[3, 1] + 0.25 * img[3, 2])
        )
        np.testing.assert_allclose(out[0], manual, atol=1e-12)
        np.testing.assert_allclose(out[1], img[0, 0], atol=1e-12)

    def test_bilinear_sample_grad(self):
        rng = np.random.default_rng(13)
        img = rng.random((6, 6, 2))

        def build(v):
            coords = tape.reshape(v * 0.8 + 2.5, (5, 2))
            vals = tape.bilinear_sample(img, coords)
            return tape.vsum(vals * vals)

        check_op(build, 10, rng, tol=1e-5)

    def test_bilinear_clamp_and_mask(self):
        img = np.ones((4, 4, 1))
        coords = np.array([[-3.0, 1.0], [1.0, 1.0], [9.0, 9.0]])
        mask = tape.clamp_mask(img.shape, coords)
        np.testing.assert_array_equal(mask, [True, False, True])
        out = tape.bilinear_sample(img, tape.Var(coords))
        np.testing.assert_allclose(out.data, 1.0)

    def test_box_blur_constant_preserved(self):
        img = tape.Var(np.full((5, 6, 3), 2.5))
        out = tape.box_blur(img, radius=2)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-12)

    def test_box_blur_grad(self):
        rng = np.random.default_rng(14)
        w = rng.standard_normal((4, 4, 1))

        def build(v):
            img = tape.reshape(v, (4, 4, 1))
            out = tape.box_blur(img, radius=1)
            return tape.vsum(out * w)

        check_op(build, 16, rng)

    def test_scatter_rows_roundtrip(self):
        rng = np.random.default_rng(15)
        rc = np.array([[0, 1], [2, 3], [1, 0]])

        def build(v):
            vals = tape.reshape(v, (3, 2))
            img = tape.scatter_rows((3, 4, 2), rc, vals)
            return tape.vsum(img * img) + tape.vsum(img[0])

        check_op(build, 6, rng)


class TestDriver:
    def test_grad_accumulates_on_shared_node(self):
        x = tape.Var(np.array([3.0]))
        y = x * 2.0
        z = y + y * y  # y used twice
        tape.backward(tape.vsum(z))
        np.testing.assert_allclose(x.grad, [2.0 + 2.0 * 2.0 * 2.0 * 3.0])

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal(40)

        def run():
            v = tape.Var(x)
            m = tape.reshape(v, (8, 5))
            out = tape.vsum(tape.tanh(m @ tape.transpose(m)))
            tape.backward(out)
            return v.grad.copy()

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)

    def test_collect_returns_zero_for_unused_leaf(self):
        a, b = tape.Var(np.ones(3)), tape.Var(np.ones(2))
        loss = tape.vsum(a * a)
        bundle = tape.collect(loss, {"a": a, "b": b})
        assert bundle.value == 3.0
        np.testing.assert_array_equal(bundle.grads["b"], np.zeros(2))
        np.testing.assert_array_equal(bundle.flat(["a", "b"]), [2, 2, 2, 0, 0])

    def test_grad_check_passes_and_catches_corruption(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal(6)

        def good(v):
            return tape.vsum(tape.tanh(v) * v)

        assert tape.grad_check(good, x) < 1e-7

        def corrupted(v):
            # deliberately wrong backward: detach one factor
            return tape.vsum(tape.tanh(tape.detach(v)) * v)

        assert tape.grad_check(corrupted, x) > 1e-3

    def test_grad_check_coordinate_subset(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal(10)

        def f(v):
            return tape.dot(v, v)

        assert tape.grad_check(f, x, coords=[0, 3, 7]) < 1e-9
