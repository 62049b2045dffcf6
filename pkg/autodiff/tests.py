import math

import numpy as np
from django.test import SimpleTestCase

from . import engine as ad
from .engine import NonFiniteError, ShapeMismatchError, Tape, TapeError
from .gradcheck import grad_check


def away_from_zero(rng, shape, low=0.2):
    magnitude = rng.uniform(low, 1.0, size=shape)
    return magnitude * rng.choice([-1.0, 1.0], size=shape)


class ForwardValueTests(SimpleTestCase):
    def test_softmax_uniform_row(self):
        x = ad.leaf([[0.0, 0.0, 0.0]])
        with Tape() as tape:
            y = ad.softmax_rows(x)
            root = ad.sum(y)
        np.testing.assert_allclose(y.value, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-15)
        tape.backward(root)
        np.testing.assert_allclose(x.grad, np.zeros((1, 3)), atol=1e-15)

    def test_logsumexp_is_shifted(self):
        x = ad.leaf([[1000.0, 1001.0]])
        out = ad.logsumexp_rows_masked(x, np.ones((1, 2), dtype=bool))
        self.assertAlmostEqual(out.item(), 1001.0 + math.log1p(math.exp(-1.0)), places=9)
        self.assertAlmostEqual(out.item(), 1001.3132617, places=7)

    def test_logsumexp_respects_mask(self):
        x = ad.leaf([[3.0, 50.0, 1.0]])
        out = ad.logsumexp_rows_masked(x, np.array([[True, False, True]]))
        self.assertAlmostEqual(out.item(), math.log(math.exp(3.0) + math.exp(1.0)), places=12)

    def test_logsumexp_fully_masked_row(self):
        x = ad.leaf(np.ones((2, 2)))
        with self.assertRaises(ShapeMismatchError):
            ad.logsumexp_rows_masked(x, np.array([[True, False], [False, False]]))

    def test_frobenius(self):
        x = ad.leaf([[1.0, 2.0], [3.0, 4.0]])
        with Tape() as tape:
            root = ad.frobenius_sq(x)
        self.assertEqual(root.item(), 30.0)
        tape.backward(root)
        np.testing.assert_array_equal(x.grad, [[2.0, 4.0], [6.0, 8.0]])

    def test_row_normalize_zero_row(self):
        x = ad.leaf([[0.0, 0.0], [3.0, 4.0]])
        out = ad.row_l2_normalize(x)
        np.testing.assert_array_equal(out.value[0], [0.0, 0.0])
        np.testing.assert_allclose(out.value[1], [0.6, 0.8], rtol=1e-15)

    def test_mean_topk_rows(self):
        x = ad.leaf([[0.9, 0.1, 0.5], [0.2, 0.7, 0.3]])
        out = ad.mean_topk_rows(x, 2)
        np.testing.assert_allclose(out.value, [[0.7], [0.5]], rtol=1e-15)

    def test_softplus_is_stable(self):
        x = ad.leaf([[-800.0, 0.0, 800.0]])
        out = ad.softplus(x)
        np.testing.assert_allclose(out.value, [[0.0, math.log(2.0), 800.0]], atol=1e-300, rtol=1e-15)

    def test_large_inputs_stay_finite(self):
        rng = np.random.default_rng(0)
        x = ad.leaf(rng.uniform(-1e4, 1e4, size=(5, 7)))
        with Tape() as tape:
            a = ad.logsumexp_rows_masked(x, np.ones((5, 7), dtype=bool))
            b = ad.softmax_rows(x)
            root = ad.add(ad.sum(a), ad.frobenius_sq(b))
        tape.backward(root)
        self.assertTrue(np.isfinite(x.grad).all())


class TopKTests(SimpleTestCase):
    def test_simple_row(self):
        self.assertEqual(ad.topk_indices(np.array([[0.9, 0.1, 0.5]]), 1).tolist(), [[0]])

    def test_tie_goes_to_lower_index(self):
        self.assertEqual(ad.topk_indices(np.array([[0.5, 0.5, 0.1]]), 1).tolist(), [[0]])
        self.assertEqual(ad.topk_indices(np.array([[0.1, 0.5, 0.5, 0.5]]), 2).tolist(), [[1, 2]])

    def test_matches_sort_oracle(self):
        values = np.random.default_rng(7).standard_normal((20, 30))
        picked = ad.topk_indices(values, 5)
        for row, indices in zip(values, picked):
            self.assertEqual(indices.tolist(), np.argsort(-row, kind='stable')[:5].tolist())

    def test_ties_match_sort_oracle(self):
        values = np.random.default_rng(8).integers(0, 4, size=(15, 12)).astype(float)
        picked = ad.topk_indices(values, 4)
        for row, indices in zip(values, picked):
            self.assertEqual(indices.tolist(), np.argsort(-row, kind='stable')[:4].tolist())

    def test_p_out_of_range(self):
        with self.assertRaises(ShapeMismatchError):
            ad.topk_indices(np.zeros((2, 3)), 4)


class BackwardTests(SimpleTestCase):
    def test_sum_gives_ones(self):
        x = ad.leaf(np.random.default_rng(0).standard_normal((3, 5)))
        with Tape() as tape:
            root = ad.sum(x)
        tape.backward(root)
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_matrix_calculus_identity(self):
        rng = np.random.default_rng(1)
        x = ad.leaf(rng.standard_normal((4, 3)))
        k = rng.standard_normal((3, 5))
        with Tape() as tape:
            root = ad.frobenius_sq(ad.matmul(x, ad.constant(k)))
        tape.backward(root)
        np.testing.assert_allclose(x.grad, 2.0 * x.value @ k @ k.T, rtol=1e-10, atol=1e-12)

    def test_non_scalar_root(self):
        x = ad.leaf(np.ones((2, 2)))
        with Tape() as tape:
            y = ad.scale(x, 2.0)
        with self.assertRaises(TapeError):
            tape.backward(y)

    def test_repeated_backward_accumulates(self):
        x = ad.leaf([[1.0, -2.0]])
        with Tape() as tape:
            root = ad.frobenius_sq(x)
        tape.backward(root)
        tape.backward(root)
        np.testing.assert_array_equal(x.grad, [[4.0, -8.0]])

    def test_shared_subexpression(self):
        x = ad.leaf([[1.5, 2.0]])
        with Tape() as tape:
            y = ad.scale(x, 3.0)
            root = ad.sum(ad.hadamard(y, y))
        tape.backward(root)
        np.testing.assert_allclose(x.grad, 18.0 * x.value, rtol=1e-15)

    def test_gather_rows_accumulates_repeats(self):
        x = ad.leaf(np.arange(6.0).reshape(3, 2))
        with Tape() as tape:
            root = ad.sum(ad.gather_rows(x, [0, 0, 2]))
        tape.backward(root)
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_constants_get_no_grad(self):
        x = ad.leaf([[1.0]])
        c = ad.constant([[2.0]])
        with Tape() as tape:
            root = ad.hadamard(x, c)
        tape.backward(root)
        self.assertIsNone(c.grad)
        self.assertEqual(x.grad.tolist(), [[2.0]])

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = ad.leaf(rng.standard_normal((3, 4)))
        k = rng.standard_normal((4, 4))

        def f():
            return ad.sum(ad.softplus(ad.right_mul_const(x, k)))

        def g():
            return ad.frobenius_sq(ad.right_mul_const(ad.row_l2_normalize(x), k))

        grads = []
        for build in (f, g, lambda: ad.add(ad.scale(f(), 2.0), ad.scale(g(), -0.5))):
            x.zero_grad()
            with Tape() as tape:
                root = build()
            tape.backward(root)
            grads.append(x.grad.copy())
        np.testing.assert_allclose(grads[2], 2.0 * grads[0] - 0.5 * grads[1], rtol=1e-12, atol=1e-14)

    def test_deterministic(self):
        values = np.random.default_rng(3).standard_normal((6, 4))
        results = []
        for _ in range(2):
            x = ad.leaf(values)
            with Tape() as tape:
                s = ad.matmul(ad.row_l2_normalize(x), ad.transpose(ad.row_l2_normalize(x)))
                root = ad.sum(ad.logsumexp_rows_masked(s, np.ones((6, 6), dtype=bool)))
            tape.backward(root)
            results.append(x.grad.tobytes())
        self.assertEqual(results[0], results[1])


class ErrorTests(SimpleTestCase):
    def test_shape_mismatch_names_op_and_shapes(self):
        with self.assertRaisesRegex(ShapeMismatchError, r'add: shapes \(2, 3\) and \(3, 2\)'):
            ad.add(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((3, 2))))

    def test_matmul_alignment(self):
        with self.assertRaisesRegex(ShapeMismatchError, 'matmul'):
            ad.matmul(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((2, 3))))

    def test_non_finite_forward(self):
        with np.errstate(over='ignore'):
            with self.assertRaisesRegex(NonFiniteError, 'exp'):
                ad.exp(ad.leaf([[1000.0]]))

    def test_non_finite_leaf(self):
        with self.assertRaises(NonFiniteError):
            ad.leaf([[np.nan]])


class GradCheckTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)

    def assertGradOK(self, f, leaf, tol=1e-5, **kwargs):
        self.assertLessEqual(grad_check(f, leaf, n_samples=8, **kwargs), tol)

    def test_sum(self):
        x = ad.leaf(self.rng.standard_normal((3, 4)))
        self.assertLessEqual(grad_check(lambda: ad.sum(x), x, n_samples=5, h=0.25), 1e-10)

    def test_linear_ops(self):
        a = ad.leaf(self.rng.standard_normal((4, 3)))
        b = self.rng.standard_normal((3, 5))
        k = self.rng.standard_normal((2, 4))
        self.assertGradOK(
            lambda: ad.frobenius_sq(ad.transpose(ad.left_mul_const(k, ad.matmul(a, ad.constant(b))))), a
        )

    def test_elementwise_ops(self):
        a = ad.leaf(away_from_zero(self.rng, (3, 4)))
        b = self.rng.standard_normal((3, 4))
        self.assertGradOK(
            lambda: ad.sum(ad.hadamard(ad.relu(a), ad.softplus(ad.sub(a, ad.constant(b))))),
            a,
        )

    def test_exp_and_scale(self):
        a = ad.leaf(self.rng.standard_normal((2, 3)))
        self.assertGradOK(lambda: ad.sum(ad.scale(ad.exp(a), -0.7)), a)

    def test_row_normalize(self):
        a = ad.leaf(self.rng.standard_normal((4, 3)))
        w = self.rng.standard_normal((4, 3))
        self.assertGradOK(lambda: ad.sum(ad.hadamard(ad.row_l2_normalize(a), ad.constant(w))), a)

    def test_softmax(self):
        a = ad.leaf(self.rng.standard_normal((3, 5)))
        w = self.rng.standard_normal((3, 5))
        self.assertGradOK(lambda: ad.sum(ad.hadamard(ad.softmax_rows(a), ad.constant(w))), a)

    def test_logsumexp_masked(self):
        a = ad.leaf(self.rng.standard_normal((4, 5)))
        mask = self.rng.random((4, 5)) > 0.4
        mask[:, 0] = True
        self.assertGradOK(lambda: ad.sum(ad.logsumexp_rows_masked(a, mask)), a)

    def test_mean_topk(self):
        a = ad.leaf(self.rng.standard_normal((4, 6)))
        self.assertGradOK(lambda: ad.frobenius_sq(ad.mean_topk_rows(a, 3)), a)

    def test_gather_rows(self):
        a = ad.leaf(self.rng.standard_normal((5, 2)))
        self.assertGradOK(lambda: ad.frobenius_sq(ad.gather_rows(a, [4, 1, 1, 0])), a)

    def test_scale_cols_both_inputs(self):
        a = ad.leaf(self.rng.standard_normal((4, 3)))
        v = ad.leaf(self.rng.standard_normal((1, 3)))
        self.assertGradOK(lambda: ad.frobenius_sq(ad.scale_cols(a, v)), a)
        self.assertGradOK(lambda: ad.frobenius_sq(ad.scale_cols(a, v)), v)

    def test_wrong_backward_is_caught(self):
        a = ad.leaf(self.rng.uniform(0.5, 1.5, size=(2, 3)))

        def bad_square(node):
            return ad.make_op(node.value ** 2, (node,), lambda g: (g * node.value,), 'bad_square')

        self.assertGreater(grad_check(lambda: ad.sum(bad_square(a)), a, n_samples=5), 1e-2)
