import csv
import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from autodiff import engine as ad
from autodiff.engine import Tape
from autodiff.gradcheck import grad_check
from contrastive.losses import LossConfig
from evaluation.manifest import prediction_filename
from evaluation.synthetic import base_mesh, write_synthetic_dataset
from features.checkpoint import save_checkpoint
from features.network import NetConfig, init_params
from meshes.mesh import Mesh
from meshes.mesh_utils import load_correspondence
from meshes.primitives import icosphere, uv_sphere
from specmatch.containers import read_container
from specmatch.exceptions import ConfigError
from spectral.operators import SpectralConfig, compute_spectra
from spectral.shapes import shape_from_mesh
from .baseline import (
    BaselineConfig,
    SingularSystemError,
    baseline_losses,
    baseline_solve_fmap,
    descriptor_coefficients,
)
from .bench import BENCH_HEADER, bench_size
from .inference import match_shapes
from .maps import align_loss, fmap_from_pmap, nearest_rows, recover_pmap, soft_map, total_loss


def rigid_permuted_copy(mesh, seed):
    """Rotated, translated copy with shuffled vertex order; returns (copy, gt) with gt[x] = copy index of x."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    order = rng.permutation(mesh.n_vertices)
    inverse = np.argsort(order)
    moved = (mesh.vertices @ q.T + np.array([1.0, -2.0, 0.5]))[order]
    return Mesh(moved, inverse[mesh.triangles], f'{mesh.name}_moved'), inverse


def random_row_stochastic(rng, rows, cols):
    logits = rng.standard_normal((rows, cols))
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


class SoftMapTests(SimpleTestCase):
    def test_hot_limit_is_uniform(self):
        rng = np.random.default_rng(0)
        pi = soft_map(ad.constant(rng.standard_normal((5, 3))), ad.constant(rng.standard_normal((7, 3))), 1e9)
        np.testing.assert_allclose(pi.pi.value, np.full((5, 7), 1 / 7), rtol=0, atol=1e-9)

    def test_matches_softmax_loop(self):
        rng = np.random.default_rng(1)
        fx, fy = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        pi = soft_map(ad.constant(fx), ad.constant(fy), 0.07).pi.value
        for i in range(3):
            weights = np.array([np.exp(fx[i] @ fy[j] / 0.07) for j in range(4)])
            np.testing.assert_allclose(pi[i], weights / weights.sum(), rtol=1e-12)

    def test_rows_are_stochastic(self):
        rng = np.random.default_rng(2)
        pi = soft_map(ad.constant(5 * rng.standard_normal((20, 8))), ad.constant(5 * rng.standard_normal((30, 8))), 0.07)
        np.testing.assert_allclose(pi.row_sums(), 1.0, rtol=0, atol=1e-9)
        self.assertTrue(((pi.pi.value >= 0) & (pi.pi.value <= 1)).all())

    def test_alpha_must_be_positive(self):
        with self.assertRaises(ConfigError):
            soft_map(ad.constant(np.ones((2, 2))), ad.constant(np.ones((2, 2))), 0.0)


class FunctionalMapTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ops = compute_spectra(icosphere(1), 10)
        cls.ops_small = compute_spectra(uv_sphere(4, 7), 8)

    def test_identity_map(self):
        c = fmap_from_pmap(ad.constant(np.eye(42)), self.ops, self.ops).numpy()
        np.testing.assert_allclose(c, np.eye(10), rtol=0, atol=1e-6)

    def test_dense_triple_product(self):
        pi = random_row_stochastic(np.random.default_rng(3), 42, 30)
        c = fmap_from_pmap(ad.constant(pi), self.ops, self.ops_small).numpy()
        expected = self.ops.phi.T @ np.diag(self.ops.mass) @ pi @ self.ops_small.phi
        np.testing.assert_allclose(c, expected, rtol=1e-10, atol=1e-12)

    def test_isometric_copy_gives_orthogonal_map(self):
        mesh = base_mesh('bumpy_sphere', 200)
        moved, gt = rigid_permuted_copy(mesh, 4)
        ops_x, ops_y = compute_spectra(mesh, 30), compute_spectra(moved, 30)
        pi = np.zeros((mesh.n_vertices, moved.n_vertices))
        pi[np.arange(mesh.n_vertices), gt] = 1.0
        c = fmap_from_pmap(ad.constant(pi), ops_x, ops_y).numpy()
        self.assertLessEqual(np.abs(c @ c.T - np.eye(30)).max(), 1e-3)

        recovered = recover_pmap(ops_x, ops_y, c)
        self.assertGreaterEqual(np.mean(recovered.source_to_target == gt), 0.99)

    def test_shape_check(self):
        with self.assertRaises(ad.ShapeMismatchError):
            fmap_from_pmap(ad.constant(np.eye(30)), self.ops, self.ops)

    def test_array_input_matches_tape_path(self):
        pi = random_row_stochastic(np.random.default_rng(5), 42, 30)
        direct = fmap_from_pmap(pi, self.ops, self.ops_small)
        traced = fmap_from_pmap(ad.constant(pi), self.ops, self.ops_small)
        np.testing.assert_allclose(direct.numpy(), traced.numpy(), rtol=1e-12, atol=1e-14)
        self.assertEqual(direct.numpy().shape, (10, 8))
        with self.assertRaises(ad.ShapeMismatchError):
            fmap_from_pmap(np.eye(30), self.ops, self.ops)


class AlignLossTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ops_x = compute_spectra(uv_sphere(4, 7), 8)
        cls.ops_y = compute_spectra(uv_sphere(3, 8), 8)

    def test_identity_configuration_is_zero(self):
        loss = align_loss(self.ops_x, ad.constant(np.eye(30)), self.ops_x, ad.constant(np.eye(8)))
        self.assertEqual(loss.item(), 0.0)

    def test_matches_residual_sum(self):
        rng = np.random.default_rng(5)
        pi = random_row_stochastic(rng, 30, 26)
        c = rng.standard_normal((8, 8))
        loss = align_loss(self.ops_x, ad.constant(pi), self.ops_y, ad.constant(c)).item()
        transported = pi @ self.ops_y.phi @ c.T
        expected = sum(
            (self.ops_x.phi[i, j] - transported[i, j]) ** 2 for i in range(30) for j in range(8)
        )
        self.assertGreaterEqual(loss, 0.0)
        self.assertAlmostEqual(loss, expected, delta=1e-10 * max(1.0, expected))

    def test_grad_check_through_soft_map(self):
        rng = np.random.default_rng(6)
        fx = ad.leaf(0.3 * rng.standard_normal((30, 6)))
        fy = ad.constant(0.3 * rng.standard_normal((26, 6)))

        def pipeline():
            pi = soft_map(fx, fy, 0.5)
            return align_loss(self.ops_x, pi, self.ops_y, fmap_from_pmap(pi, self.ops_x, self.ops_y))

        self.assertLessEqual(grad_check(pipeline, fx, n_samples=6), 1e-4)

    def test_descent_lowers_alignment(self):
        rng = np.random.default_rng(7)
        fx = ad.leaf(0.3 * rng.standard_normal((30, 6)))
        fy = ad.constant(0.3 * rng.standard_normal((26, 6)))
        values = []
        for _ in range(100):
            fx.zero_grad()
            with Tape() as tape:
                pi = soft_map(fx, fy, 0.5)
                loss = align_loss(self.ops_x, pi, self.ops_y, fmap_from_pmap(pi, self.ops_x, self.ops_y))
            tape.backward(loss)
            values.append(loss.item())
            fx.value -= 0.01 * fx.grad
        self.assertLess(values[-1], values[0])


class TotalLossTests(SimpleTestCase):
    def test_weighted_sum(self):
        parts = [ad.constant([[2.0]]), ad.constant([[3.0]]), ad.constant([[5.0]])]
        self.assertAlmostEqual(total_loss(*parts, LossConfig()).item(), 2.0 + 0.3 + 5.0, delta=1e-12)

    def test_zero_weights(self):
        parts = [ad.constant([[2.0]]), ad.constant([[3.0]]), ad.constant([[5.0]])]
        config = LossConfig(theta_cross=0.0, theta_self=0.0, theta_align=0.0)
        self.assertEqual(total_loss(*parts, config).item(), 0.0)

    def test_ablation_configs(self):
        no_cross = LossConfig(theta_cross=0.0)
        no_self = LossConfig(theta_self=0.0)
        parts = [ad.constant([[2.0]]), ad.constant([[3.0]]), ad.constant([[5.0]])]
        self.assertAlmostEqual(total_loss(*parts, no_cross).item(), 5.3, delta=1e-12)
        self.assertAlmostEqual(total_loss(*parts, no_self).item(), 7.0, delta=1e-12)


class BaselineSolverTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(8)

    def test_unregularized_square(self):
        a = self.rng.standard_normal((5, 5))
        b = self.rng.standard_normal((5, 5))
        c = baseline_solve_fmap(b, a, np.arange(5.0), np.arange(5.0), 0.0)
        np.testing.assert_allclose(c, b @ np.linalg.inv(a), rtol=1e-8, atol=1e-8)

    def test_strong_regularizer_kills_off_resonance(self):
        a = self.rng.standard_normal((6, 12))
        b = self.rng.standard_normal((6, 12))
        evals = np.array([0.0, 2.0, 4.5, 7.0, 9.5, 12.0])
        c = baseline_solve_fmap(b, a, evals, evals + 0.1, 1e12)
        far = (evals[:, None] - (evals + 0.1)[None, :]) ** 2 >= 1.0
        self.assertLessEqual(np.abs(c[far]).max(), 1e-6)

    def test_matches_dense_normal_equations(self):
        k, d = 5, 9
        a = self.rng.standard_normal((k, d))
        b = self.rng.standard_normal((k, d))
        evals_x = np.sort(self.rng.uniform(0, 10, k))
        evals_y = np.sort(self.rng.uniform(0, 10, k))
        c = baseline_solve_fmap(b, a, evals_x, evals_y, 0.3)

        weights = ((evals_x[:, None] - evals_y[None, :]) ** 2).ravel()
        system = np.kron(np.eye(k), a @ a.T) + 0.3 * np.diag(weights)
        rhs = (b @ a.T).ravel()
        expected = np.linalg.solve(system, rhs).reshape(k, k)
        np.testing.assert_allclose(c, expected, rtol=1e-8, atol=1e-10)

    def test_singular_system(self):
        a = self.rng.standard_normal((4, 6))
        a[2] = 0.0
        with self.assertRaises(SingularSystemError):
            baseline_solve_fmap(self.rng.standard_normal((4, 6)), a, np.arange(4.0), np.arange(4.0), 0.0)

    def test_near_singular_system_falls_back_to_lstsq(self):
        a = self.rng.standard_normal((4, 6))
        a[2] = a[1] + 1e-5 * self.rng.standard_normal(6)
        b = self.rng.standard_normal((4, 6))
        with self.assertLogs('fmaps.baseline', 'WARNING') as logs:
            c = baseline_solve_fmap(b, a, np.arange(4.0), np.arange(4.0), 0.0)
        self.assertIn('lstsq', logs.output[0])
        expected = np.linalg.lstsq(a.T, b.T, rcond=None)[0].T
        np.testing.assert_allclose(c @ a, expected @ a, atol=1e-8)
        self.assertTrue(np.isfinite(c).all())

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            BaselineConfig(lambda_reg=-1.0)


class BaselineLossTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ops_x = compute_spectra(uv_sphere(4, 7), 8)
        cls.ops_y = compute_spectra(uv_sphere(3, 8), 8)

    def test_identity_maps(self):
        pi = ad.constant(random_row_stochastic(np.random.default_rng(9), 30, 26))
        bi, orth, _ = baseline_losses(np.eye(8), np.eye(8), pi, self.ops_x, self.ops_y)
        self.assertEqual(bi.item(), 0.0)
        self.assertEqual(orth.item(), 0.0)

    def test_coupling_vanishes_for_projected_map(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            pi = ad.constant(random_row_stochastic(rng, 30, 26))
            c_yx = fmap_from_pmap(pi, self.ops_x, self.ops_y)
            _, _, coupling = baseline_losses(np.eye(8), c_yx, pi, self.ops_x, self.ops_y)
            self.assertLessEqual(coupling.item(), 1e-10)

    def test_direct_formulas(self):
        rng = np.random.default_rng(11)
        c_xy, c_yx = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        ops_x = compute_spectra(uv_sphere(4, 7), 4)
        ops_y = compute_spectra(uv_sphere(3, 8), 4)
        pi = random_row_stochastic(rng, 30, 26)
        bi, orth, coupling = baseline_losses(c_xy, c_yx, ad.constant(pi), ops_x, ops_y)
        projected = ops_x.phi_pinv @ pi @ ops_y.phi
        self.assertAlmostEqual(bi.item(), np.sum((c_yx @ c_xy - np.eye(4)) ** 2), delta=1e-12 * max(1, bi.item()))
        self.assertAlmostEqual(orth.item(), np.sum((c_yx @ c_yx.T - np.eye(4)) ** 2), delta=1e-12 * max(1, orth.item()))
        self.assertAlmostEqual(coupling.item(), np.sum((c_yx - projected) ** 2), delta=1e-12 * max(1, coupling.item()))


class RecoveryTests(SimpleTestCase):
    def test_self_match_is_identity(self):
        ops = compute_spectra(icosphere(1), 10)
        recovered = recover_pmap(ops, ops, np.eye(10))
        np.testing.assert_array_equal(recovered.source_to_target, np.arange(42))

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(12)
        ops_x = compute_spectra(uv_sphere(6, 8), 8)
        ops_y = compute_spectra(uv_sphere(5, 9), 8)
        c = rng.standard_normal((8, 8))
        recovered = recover_pmap(ops_x, ops_y, c).source_to_target
        aligned = ops_y.phi @ c.T
        for x in range(ops_x.n_vertices):
            distances = [np.sum((ops_x.phi[x] - aligned[y]) ** 2) for y in range(ops_y.n_vertices)]
            self.assertEqual(recovered[x], int(np.argmin(distances)))

    @override_settings(SPECMATCH_THREADS=4)
    def test_threaded_chunks_agree(self):
        rng = np.random.default_rng(13)
        queries, targets = rng.standard_normal((100, 5)), rng.standard_normal((70, 5))
        serial = nearest_rows(queries, targets, threads=1, chunk=16)
        threaded = nearest_rows(queries, targets, chunk=16)
        np.testing.assert_array_equal(serial, threaded)

    def test_ties_go_to_lowest_index(self):
        queries = np.array([[0.0, 0.0]])
        targets = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        self.assertEqual(nearest_rows(queries, targets, threads=1).tolist(), [0])


SMALL = NetConfig(in_dim=4, width=8, n_blocks=2)


class MatchCommandTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.cache = cls.tmp / 'cache'
        train, _ = write_synthetic_dataset(cls.tmp / 'data', 'bumpy_sphere', 100, n_train=1, n_test=0, seed=1)
        cls.entry = train.pairs[0]
        cls.manifest = cls.tmp / 'data' / 'train.json'
        call_command('precompute', manifest=str(cls.manifest), k=10, cache_dir=str(cls.cache), stdout=StringIO())
        cls.checkpoint = save_checkpoint(
            cls.tmp / 'model.ckpt', init_params(SMALL, seed=1), SpectralConfig(k=10, n_hks=4), seed=1, epoch=0,
        )

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def match(self, out, *args, checkpoint=None, **options):
        stdout = StringIO()
        call_command(
            'match', str(checkpoint or self.checkpoint), *args,
            cache_dir=str(self.cache), out=str(self.tmp / out), stdout=stdout, **options,
        )
        return stdout.getvalue()

    def pair_args(self):
        return str(self.entry.source), str(self.entry.target)

    def test_writes_correspondence_and_summary(self):
        output = self.match('single', *self.pair_args())
        path = self.tmp / 'single' / prediction_filename(self.entry)
        corr = load_correspondence(path, 100, 100)
        self.assertEqual(len(corr), 100)
        self.assertIn('(100 vertices)', output)
        for stage in ('features', 'Cmap', 'NN'):
            self.assertIn(stage, output)
        self.assertTrue((self.tmp / 'single' / 'run.json').exists())

    def test_same_inputs_same_bytes(self):
        self.match('a', *self.pair_args())
        self.match('b', *self.pair_args())
        name = prediction_filename(self.entry)
        self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes())

    def test_manifest_mode_and_fmap_dump(self):
        self.match('all', manifest=str(self.manifest), dump_fmap=True)
        self.assertTrue((self.tmp / 'all' / prediction_filename(self.entry)).exists())
        fmaps = list((self.tmp / 'all').glob('*.fmap'))
        self.assertEqual(len(fmaps), 1)
        header, tensors = read_container(fmaps[0])
        self.assertEqual(header['kind'], 'functional-map')
        self.assertEqual(tensors['c_yx'].shape, (10, 10))

    def test_k_mismatch_is_explicit(self):
        other = save_checkpoint(
            self.tmp / 'k12.ckpt', init_params(SMALL, seed=1), SpectralConfig(k=12, n_hks=4), seed=1, epoch=0,
        )
        with self.assertRaises(CommandError) as caught:
            self.match('k12', *self.pair_args(), checkpoint=other)
        self.assertEqual(caught.exception.returncode, 2)
        self.assertIn('k=12', str(caught.exception))
        self.assertIn('k=10', str(caught.exception))
        self.assertFalse((self.tmp / 'k12').exists())

    def test_config_must_agree_with_checkpoint(self):
        config = self.tmp / 'wide.json'
        config.write_text(json.dumps({
            'spectral': {'k': 10, 'n_hks': 4},
            'net': {'in_dim': 4, 'width': 16, 'n_blocks': 2},
        }))
        with self.assertRaises(CommandError) as caught:
            self.match('wide', *self.pair_args(), config=str(config))
        self.assertEqual(caught.exception.returncode, 2)

    def test_source_without_target(self):
        with self.assertRaises(CommandError) as caught:
            self.match('half', str(self.entry.source))
        self.assertEqual(caught.exception.returncode, 2)


class InferenceTests(SimpleTestCase):
    def test_match_shapes_timings(self):
        mesh = uv_sphere(5, 9)
        shape = shape_from_mesh(mesh, compute_spectra(mesh, 8), SpectralConfig(k=8, n_hks=4))
        result = match_shapes(init_params(SMALL, seed=0), shape, shape, alpha=0.07, threads=1)
        self.assertEqual(list(result.timings), ['features', 'fmap', 'nn'])
        self.assertEqual(len(result.correspondence), mesh.n_vertices)
        self.assertEqual(result.fmap.numpy().shape, (8, 8))
        self.assertGreaterEqual(result.total_seconds, 0.0)


class BenchCommandTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = self.tmp / 'bench.json'
        self.config.write_text(json.dumps({'net': {'in_dim': 4, 'width': 8, 'n_blocks': 2}}))

    def tearDown(self):
        self._tmp.cleanup()

    def bench(self, **options):
        call_command('bench', sizes=[100], k=[10], config=str(self.config), out=str(self.tmp / 'out'),
                     stdout=StringIO(), **options)
        with open(self.tmp / 'out' / 'bench.csv', newline='') as fh:
            return list(csv.reader(fh))

    def test_schema_and_ratio(self):
        rows = self.bench(reps=5)
        self.assertEqual(rows[0], BENCH_HEADER)
        self.assertEqual(rows[0], ['size', 'k', 'op', 'median_ms'])
        self.assertEqual(
            [row[2] for row in rows[1:]],
            ['fmap_projection', 'baseline_solver', 'train_step', 'nn_search', 'projection_solver_ratio'],
        )
        self.assertTrue(all(row[:2] == ['100', '10'] for row in rows[1:]))
        values = {row[2]: float(row[3]) for row in rows[1:]}
        self.assertTrue(all(value > 0 for value in values.values()))
        expected = values['fmap_projection'] / values['baseline_solver']
        self.assertAlmostEqual(values['projection_solver_ratio'] / expected, 1.0, delta=1e-4)

    def test_skip_train(self):
        rows = self.bench(reps=5, skip_train=True)
        self.assertNotIn('train_step', [row[2] for row in rows[1:]])

    def test_too_few_reps(self):
        with self.assertRaises(CommandError) as caught:
            self.bench(reps=4)
        self.assertEqual(caught.exception.returncode, 2)

    def test_k_too_large_for_size(self):
        with self.assertRaises(ConfigError):
            bench_size(100, 99, reps=5)

    def test_estimators_are_timed_alone(self):
        with mock.patch('fmaps.bench.soft_map', wraps=soft_map) as soft, \
                mock.patch('fmaps.bench.descriptor_coefficients', wraps=descriptor_coefficients) as coefficients:
            rows = bench_size(100, 10, reps=7, skip_train=True)
        self.assertEqual(soft.call_count, 1)
        self.assertEqual(coefficients.call_count, 2)
        self.assertEqual([row.op for row in rows][:2], ['fmap_projection', 'baseline_solver'])
