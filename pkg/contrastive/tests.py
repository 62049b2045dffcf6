import math

import numpy as np
from django.test import SimpleTestCase

from autodiff import engine as ad
from autodiff.engine import Tape
from autodiff.gradcheck import grad_check
from specmatch.exceptions import ConfigError
from .losses import (
    LossConfig,
    PositiveCountError,
    UniformNegativeSampler,
    ZeroFeatureError,
    bidirectional_contrastive,
    cosine_similarity,
    cross_loss,
    self_loss,
    split_similarity,
)


def cross_value(features_x, features_y, p, tau=1.0):
    sim = cosine_similarity(ad.constant(features_x), ad.constant(features_y))
    return cross_loss(split_similarity(sim, p), tau).item()


def self_value(features, p, tau=1.0):
    return self_loss(ad.constant(features), p, tau).item()


def self_oracle(features, p, tau=1.0):
    unit = features / np.linalg.norm(features, axis=1, keepdims=True)
    sim = unit @ unit.T
    total = 0.0
    for row in sim:
        negatives = row[np.argsort(-row, kind='stable')[p:]] / tau
        peak = negatives.max()
        total += peak + math.log(np.exp(negatives - peak).sum())
    return total / len(sim)


class LossConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = LossConfig()
        self.assertEqual((config.theta_cross, config.theta_self, config.theta_align), (1.0, 0.1, 1.0))
        self.assertEqual((config.tau_c, config.tau_s, config.alpha), (1.0, 1.0, 0.07))
        self.assertEqual((config.p_c, config.p_s), (30, 30))

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            LossConfig(tau_c=0.0)
        with self.assertRaises(ConfigError):
            LossConfig(p_s=0)
        with self.assertRaises(ConfigError):
            LossConfig(theta_self=-1.0)
        with self.assertRaises(ConfigError):
            LossConfig(negative_sampling='uniform')
        with self.assertRaises(ConfigError):
            LossConfig(p_c=10, p_s=20, tie_p=True)

    def test_with_p(self):
        config = LossConfig(tie_p=True).with_p(10)
        self.assertEqual((config.p_c, config.p_s), (10, 10))


class CosineSimilarityTests(SimpleTestCase):
    def test_orthonormal_rows(self):
        features = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))[0]
        sim = cosine_similarity(ad.constant(features), ad.constant(features)).value
        np.testing.assert_allclose(sim, np.eye(4), atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        fx, fy = rng.standard_normal((5, 3)), rng.standard_normal((6, 3))
        a = cosine_similarity(ad.constant(fx), ad.constant(fy)).value
        b = cosine_similarity(ad.constant(10.0 * fx), ad.constant(fy)).value
        np.testing.assert_allclose(b, a, rtol=0, atol=1e-12)

    def test_matches_pairwise_loop(self):
        rng = np.random.default_rng(2)
        fx, fy = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        sim = cosine_similarity(ad.constant(fx), ad.constant(fy)).value
        for i in range(3):
            for j in range(4):
                expected = fx[i] @ fy[j] / (np.linalg.norm(fx[i]) * np.linalg.norm(fy[j]))
                self.assertAlmostEqual(sim[i, j], expected, delta=1e-12)
        self.assertTrue((np.abs(sim) <= 1.0 + 1e-9).all())

    def test_zero_row_without_guard(self):
        fx = np.array([[1.0, 0.0], [0.0, 0.0]])
        with self.assertRaises(ZeroFeatureError):
            cosine_similarity(ad.constant(fx), ad.constant(np.eye(2)), eps=None)
        guarded = cosine_similarity(ad.constant(fx), ad.constant(np.eye(2))).value
        np.testing.assert_array_equal(guarded[1], [0.0, 0.0])

    def test_dimension_mismatch(self):
        with self.assertRaises(ad.ShapeMismatchError):
            cosine_similarity(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 4))))


class SplitTests(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(split_similarity(ad.constant([[0.9, 0.1, 0.5]]), 1).positive_idx.tolist(), [[0]])
        self.assertEqual(split_similarity(ad.constant([[0.5, 0.5, 0.1]]), 1).positive_idx.tolist(), [[0]])

    def test_matches_sort_oracle(self):
        values = np.random.default_rng(3).uniform(-1, 1, size=(20, 30))
        split = split_similarity(ad.constant(values), 5)
        for row, indices, negatives in zip(values, split.positive_idx, split.negative_mask):
            self.assertEqual(indices.tolist(), np.argsort(-row, kind='stable')[:5].tolist())
            self.assertEqual(len(set(indices.tolist())), 5)
            self.assertGreaterEqual(row[indices].min(), row[negatives].max())
            self.assertEqual(int(negatives.sum()), 25)

    def test_no_negatives_left(self):
        with self.assertRaises(PositiveCountError):
            split_similarity(ad.constant(np.zeros((2, 3))), 3)

    def test_uniform_sampler_thins_complement(self):
        values = np.random.default_rng(4).uniform(-1, 1, size=(6, 12))
        split = split_similarity(ad.constant(values), 2, UniformNegativeSampler(4, seed=0))
        full = np.ones_like(split.negative_mask)
        np.put_along_axis(full, split.positive_idx, False, axis=1)
        self.assertTrue((split.negative_mask.sum(axis=1) == 4).all())
        self.assertFalse((split.negative_mask & ~full).any())


class CrossLossTests(SimpleTestCase):
    def test_single_negative_closed_form(self):
        split = split_similarity(ad.constant([[0.8, 0.2]]), 1)
        self.assertAlmostEqual(cross_loss(split, 1.0).item(), -0.6, delta=1e-12)

    def test_hand_evaluation(self):
        split = split_similarity(ad.constant([[1.0, -1.0, -1.0]]), 1)
        self.assertAlmostEqual(cross_loss(split, 1.0).item(), -2.0 + math.log(2.0), delta=1e-12)
        self.assertAlmostEqual(cross_loss(split, 1.0).item(), -1.3068528, places=7)

    def test_temperature(self):
        split = split_similarity(ad.constant([[0.8, 0.2]]), 1)
        self.assertAlmostEqual(cross_loss(split, 0.5).item(), -1.2, delta=1e-12)

    def test_gradient_step_separates(self):
        fx = ad.leaf([[1.0, 0.4], [0.5, 1.0]])
        fy = ad.constant(np.eye(2))

        def similarities():
            return cosine_similarity(ad.constant(fx.value), fy).value

        before = similarities()
        with Tape() as tape:
            loss = cross_loss(split_similarity(cosine_similarity(fx, fy), 1), 1.0)
        tape.backward(loss)
        fx.value -= 0.05 * fx.grad
        after = similarities()

        self.assertGreater(np.trace(after), np.trace(before))
        self.assertLess(after[0, 1], before[0, 1])
        self.assertLess(after[1, 0], before[1, 0])

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        fx = ad.leaf(rng.standard_normal((10, 8)))
        fy = ad.constant(rng.standard_normal((12, 8)))
        error = grad_check(lambda: cross_loss(split_similarity(cosine_similarity(fx, fy), 3), 1.0), fx, n_samples=8)
        self.assertLessEqual(error, 1e-4)


class SelfLossTests(SimpleTestCase):
    def test_orthogonal_pair(self):
        self.assertAlmostEqual(self_value(np.eye(2), 1), 0.0, delta=1e-12)

    def test_identical_pair(self):
        self.assertAlmostEqual(self_value(np.array([[0.6, 0.8], [0.6, 0.8]]), 1), 1.0, delta=1e-12)

    def test_matches_direct_oracle(self):
        features = np.random.default_rng(6).standard_normal((10, 8))
        self.assertAlmostEqual(self_value(features, 3), self_oracle(features, 3), delta=1e-10)
        self.assertAlmostEqual(self_value(features, 3, tau=0.5), self_oracle(features, 3, tau=0.5), delta=1e-10)

    def test_p_must_leave_negatives(self):
        with self.assertRaises(PositiveCountError):
            self_value(np.random.default_rng(0).standard_normal((4, 3)), 4)

    def test_grad_check(self):
        f = ad.leaf(np.random.default_rng(7).standard_normal((10, 8)))
        self.assertLessEqual(grad_check(lambda: self_loss(f, 3, 1.0), f, n_samples=8), 1e-4)


class BidirectionalTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(8)
        self.fx = rng.standard_normal((9, 5))
        self.fy = rng.standard_normal((11, 5))
        self.config = LossConfig(p_c=3, p_s=2)

    def values(self, fx, fy, config=None):
        cross, self_ = bidirectional_contrastive(ad.constant(fx), ad.constant(fy), config or self.config)
        return cross.item(), self_.item()

    def test_components_match_single_direction(self):
        cross, self_ = self.values(self.fx, self.fy)
        expected_cross = 0.5 * (cross_value(self.fx, self.fy, 3) + cross_value(self.fy, self.fx, 3))
        expected_self = 0.5 * (self_value(self.fx, 2) + self_value(self.fy, 2))
        self.assertAlmostEqual(cross, expected_cross, delta=1e-12)
        self.assertAlmostEqual(self_, expected_self, delta=1e-12)

    def test_scale_invariance(self):
        base = self.values(self.fx, self.fy)
        scaled = self.values(3.5 * self.fx, 0.2 * self.fy)
        np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-9)

    def test_permutation_invariance(self):
        order = np.random.default_rng(9).permutation(11)
        np.testing.assert_allclose(self.values(self.fx, self.fy[order]), self.values(self.fx, self.fy), atol=1e-12)

    def test_large_features_stay_finite(self):
        rng = np.random.default_rng(10)
        values = self.values(rng.uniform(-1e4, 1e4, (9, 5)), rng.uniform(-1e4, 1e4, (11, 5)))
        self.assertTrue(np.isfinite(values).all())

    def test_temperature_scaling_is_applied(self):
        hot = self.values(self.fx, self.fy, LossConfig(p_c=3, p_s=2, tau_c=0.1, tau_s=0.1))
        self.assertNotAlmostEqual(hot[0], self.values(self.fx, self.fy)[0])
