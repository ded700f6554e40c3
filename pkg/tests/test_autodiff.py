"""Tape engine tests: every op against central finite differences."""

import numpy as np
import pytest

from spikeclm import autodiff as ad
from spikeclm import numerics
from spikeclm.errors import InternalError


def tape_grad(f, x: np.ndarray) -> np.ndarray:
    """Gradient of scalar-valued f at x through the tape."""
    v = ad.Var(x.copy(), requires_grad=True)
    out = f(v)
    out.backward()
    return v.grad


def check_against_fd(f, x, rtol=1e-5, atol=1e-7):
    got = tape_grad(f, x)
    want = numerics.finite_diff_grad(lambda v: float(f(ad.Var(v)).data), x)
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


class TestElementwise:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_add_mul_sub_div(self):
        x = self.rng.normal(size=(3, 4))
        c = self.rng.normal(size=(3, 4))
        check_against_fd(lambda v: ((v + c) * (v - 2.0) / 3.0).sum(), x)

    def test_pow_and_rsub(self):
        x = self.rng.uniform(0.5, 2.0, size=(5,))
        check_against_fd(lambda v: ((1.0 - v) ** 3).sum(), x)
        check_against_fd(lambda v: (v ** -0.5).sum(), x)

    def test_exp_log_relu(self):
        x = self.rng.uniform(0.2, 2.0, size=(4, 2))
        check_against_fd(lambda v: ad.exp(v).sum(), x)
        check_against_fd(lambda v: ad.log(v).sum(), x)
        x2 = self.rng.normal(size=(20,)) + 0.01  # keep away from the kink
        check_against_fd(lambda v: (ad.relu(v) * 3.0).sum(), x2)

    def test_broadcast_grads(self):
        """Gradients sum correctly over broadcast dimensions."""
        x = self.rng.normal(size=(1, 4))
        c = self.rng.normal(size=(3, 4))
        check_against_fd(lambda v: (v * c).sum(), x)
        b = self.rng.normal(size=(4,))
        vb = ad.Var(b, requires_grad=True)
        out = (ad.Var(c) + vb).sum()
        out.backward()
        np.testing.assert_allclose(vb.grad, np.full(4, 3.0))


class TestMatmulShapes:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_matmul_both_sides(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4, 2))
        check_against_fd(lambda v: (v @ b).sum(), a)
        vb = ad.Var(b.copy(), requires_grad=True)
        out = (ad.Var(a) @ vb).sum()
        out.backward()
        fd = numerics.finite_diff_grad(lambda w: float((a @ w).sum()), b)
        np.testing.assert_allclose(vb.grad, fd, rtol=1e-5, atol=1e-7)

    def test_batched_matmul_broadcast_weight(self):
        """[B, L, k] @ [k, n] accumulates the weight grad over the batch."""
        x = self.rng.normal(size=(5, 2, 3))
        w = self.rng.normal(size=(3, 4))
        vw = ad.Var(w.copy(), requires_grad=True)
        ((ad.Var(x) @ vw) ** 2).sum().backward()
        fd = numerics.finite_diff_grad(lambda v: float(((x @ v) ** 2).sum()), w)
        np.testing.assert_allclose(vw.grad, fd, rtol=1e-4, atol=1e-6)

    def test_reshape_swapaxes_getitem(self):
        x = self.rng.normal(size=(4, 6))
        check_against_fd(lambda v: v.reshape(2, 12).sum(axis=0).sum(), x)
        check_against_fd(lambda v: (v.swapaxes(0, 1) @ np.ones((4, 1))).sum(), x)
        check_against_fd(lambda v: (v[1:3] * 2.0).sum(), x)

    def test_sum_mean_axes(self):
        x = self.rng.normal(size=(3, 4, 2))
        check_against_fd(lambda v: v.sum(axis=1).mean(), x)
        check_against_fd(lambda v: v.mean(axis=(0, 2), keepdims=True).sum(), x)


class TestSoftmaxFamily:
    def setup_method(self):
        self.rng = np.random.default_rng(3)

    def test_softmax_grad(self):
        x = self.rng.normal(size=(2, 5))
        c = self.rng.normal(size=(2, 5))
        check_against_fd(lambda v: (ad.softmax(v) * c).sum(), x)

    def test_log_softmax_grad(self):
        x = self.rng.normal(size=(3, 4))
        c = self.rng.normal(size=(3, 4))
        check_against_fd(lambda v: (ad.log_softmax(v) * c).sum(), x)

    def test_softmax_rows_sum_to_one(self):
        x = self.rng.normal(size=(4, 7)) * 30  # large logits stay stable
        s = ad.softmax(ad.Var(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), rtol=1e-12)
        assert np.isfinite(ad.log_softmax(x)).all()

    def test_plain_array_dispatch(self):
        x = self.rng.normal(size=(2, 3))
        assert not isinstance(ad.softmax(x), ad.Var)
        np.testing.assert_allclose(ad.softmax(x), ad.softmax(ad.Var(x)).data)


class TestGatherOps:
    def test_take_rows_accumulates_repeats(self):
        """Same row used twice gets twice the gradient."""
        w = np.arange(6.0).reshape(3, 2)
        ids = np.array([[0, 1], [1, 1]])
        vw = ad.Var(w, requires_grad=True)
        ad.take_rows(vw, ids).sum().backward()
        np.testing.assert_array_equal(vw.grad, [[1, 1], [3, 3], [0, 0]])

    def test_take_rows_plain_path(self):
        w = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(ad.take_rows(w, np.array([2, 0])), w[[2, 0]])

    def test_gather_last(self):
        x = np.arange(12.0).reshape(2, 2, 3)
        ids = np.array([[0, 2], [1, 1]])
        v = ad.Var(x, requires_grad=True)
        out = ad.gather_last(v, ids)
        np.testing.assert_array_equal(out.data, [[0, 5], [7, 10]])
        out.sum().backward()
        fd = numerics.finite_diff_grad(
            lambda z: float(np.take_along_axis(z, ids[..., None], -1).sum()), x)
        np.testing.assert_allclose(v.grad, fd, rtol=1e-6, atol=1e-8)


class TestBackwardMechanics:
    def test_zero_seed_gives_zero_grads(self):
        x = ad.Var(np.ones((2, 2)), requires_grad=True)
        ((x * 3.0) ** 2).sum().backward(seed=0.0)
        np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))

    def test_grad_accumulates_over_reuse(self):
        """A node consumed twice receives both contributions."""
        x = ad.Var(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])

    def test_backward_on_constant_raises(self):
        with pytest.raises(InternalError):
            ad.Var(np.ones(2)).backward()

    def test_constants_prune_the_tape(self):
        c = ad.Var(np.ones(3))
        out = c * 2.0 + c
        assert not out.requires_grad and out._parents == ()

    def test_two_layer_chain_matches_fd(self):
        """Composite mlp-style function end to end."""
        rng = np.random.default_rng(5)
        w1 = rng.normal(size=(3, 4))
        w2 = rng.normal(size=(4, 2))
        x = rng.normal(size=(5, 3))

        def f(v):
            h = ad.relu(ad.Var(x) @ v)
            return ad.log_softmax(h @ w2).mean()

        check_against_fd(f, w1, rtol=1e-4, atol=1e-6)

    def test_custom_unary_wiring(self):
        x = ad.Var(np.array([1.0, -1.0]), requires_grad=True)
        local = np.array([0.5, 0.25])
        out = ad.custom_unary(x, np.array([1.0, 0.0]), local)
        (out * np.array([2.0, 2.0])).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * local)
