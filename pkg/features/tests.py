import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from autodiff import engine as ad
from autodiff.engine import NonFiniteError, Tape
from autodiff.gradcheck import grad_check
from evaluation.synthetic import base_mesh
from meshes.primitives import uv_sphere
from specmatch.exceptions import ConfigError
from spectral.operators import SpectralConfig, compute_spectra, hks
from .checkpoint import CheckpointError, CheckpointMismatchError, load_checkpoint, save_checkpoint
from .network import NetConfig, NetParams, diffuse, forward, init_params, param_shapes

SMALL = NetConfig(in_dim=4, width=8, n_blocks=2)


def small_mesh_spectra():
    return compute_spectra(uv_sphere(4, 7), 10)


class InitTests(SimpleTestCase):
    def test_default_parameter_count(self):
        params = init_params(NetConfig(), seed=0)
        expected = (16 * 128 + 128) + 4 * (128 + 2 * (128 * 128 + 128))
        self.assertEqual(expected, 134784)
        self.assertEqual(params.count(), expected)

    def test_same_seed_same_bytes(self):
        a = init_params(SMALL, seed=3)
        b = init_params(SMALL, seed=3)
        for (name, x), (_, y) in zip(a, b):
            self.assertEqual(x.tobytes(), y.tobytes(), name)

    def test_different_seed(self):
        a = init_params(SMALL, seed=3)['lift.weight']
        b = init_params(SMALL, seed=4)['lift.weight']
        self.assertFalse(np.array_equal(a, b))

    def test_zero_blocks_rejected(self):
        with self.assertRaises(ConfigError):
            NetConfig(n_blocks=0)

    def test_weight_bounds_and_biases(self):
        params = init_params(SMALL, seed=0)
        self.assertLessEqual(np.abs(params['lift.weight']).max(), 1.0 / np.sqrt(4))
        self.assertLessEqual(np.abs(params['blocks.0.linear1.weight']).max(), 1.0 / np.sqrt(8))
        self.assertFalse(params['blocks.1.linear2.bias'].any())

    def test_diffusion_times_span_range(self):
        times = init_params(SMALL, seed=0).diffusion_times()['blocks.0.diffusion_time'].ravel()
        np.testing.assert_allclose(times, np.logspace(-3, -1, 8), rtol=1e-10)
        self.assertTrue((times > 0).all())

    def test_shape_check(self):
        tensors = {name: np.zeros(shape) for name, shape in param_shapes(SMALL).items()}
        tensors['lift.bias'] = np.zeros((2, 8))
        with self.assertRaises(ConfigError):
            NetParams(SMALL, tensors)


class DiffuseTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ops = small_mesh_spectra()
        cls.rng = np.random.default_rng(0)

    def test_zero_time_is_projection(self):
        features = self.ops.phi @ self.rng.standard_normal((self.ops.k, 3))
        out = diffuse(ad.constant(features), self.ops, np.zeros((1, 3)))
        np.testing.assert_allclose(out.value, features, atol=1e-8)

    def test_long_time_keeps_the_mean(self):
        features = self.rng.standard_normal((self.ops.n_vertices, 3))
        t = np.full((1, 3), 1e6 / self.ops.evals[1])
        out = diffuse(ad.constant(features), self.ops, t).value
        ratio = out.var(axis=0) / features.var(axis=0)
        self.assertTrue((ratio <= 1e-6).all())
        mean = self.ops.mass @ features / self.ops.mass.sum()
        np.testing.assert_allclose(out[0], mean, rtol=1e-8, atol=1e-12)

    def test_matches_dense_oracle(self):
        features = self.rng.standard_normal((self.ops.n_vertices, 4))
        t = np.array([[0.0, 0.01, 0.1, 1.0]])
        out = diffuse(ad.constant(features), self.ops, t).value
        A = np.diag(self.ops.mass)
        for j in range(4):
            kernel = self.ops.phi @ np.diag(np.exp(-self.ops.evals * t[0, j])) @ self.ops.phi.T @ A
            np.testing.assert_allclose(out[:, j], kernel @ features[:, j], rtol=1e-10, atol=1e-12)

    def test_time_shape_check(self):
        with self.assertRaises(ad.ShapeMismatchError):
            diffuse(ad.constant(np.ones((self.ops.n_vertices, 3))), self.ops, np.zeros((1, 2)))


class ForwardTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ops = small_mesh_spectra()
        cls.hks = hks(cls.ops, 4)
        cls.params = init_params(SMALL, seed=1)

    def test_output_shape(self):
        features = forward(self.params, self.hks, self.ops)
        self.assertEqual(features.values.shape, (30, 8))
        self.assertEqual(features.shape_name, self.ops.name)

    def test_permutation_equivariance(self):
        order = np.random.default_rng(5).permutation(self.ops.n_vertices)
        base = forward(self.params, self.hks, self.ops).numpy()
        permuted = forward(self.params, self.hks[order], self.ops.permuted(order)).numpy()
        np.testing.assert_allclose(permuted, base[order], rtol=1e-10, atol=1e-12)

    def test_rigid_motion_invariance(self):
        mesh = base_mesh('bumpy_sphere', 240)
        angle = 0.7
        rotation = np.array([[np.cos(angle), -np.sin(angle), 0.0], [np.sin(angle), np.cos(angle), 0.0], [0.0, 0.0, 1.0]])
        moved = mesh.with_vertices(mesh.vertices @ rotation.T + 4.0)
        outputs = []
        for shape in (mesh, moved):
            ops = compute_spectra(shape, 30)
            outputs.append(forward(self.params, hks(ops, 4), ops).numpy())
        np.testing.assert_allclose(outputs[1], outputs[0], rtol=1e-6, atol=1e-9)

    def test_identity_fixture(self):
        config = NetConfig(in_dim=4, width=4, n_blocks=1)
        tensors = {name: np.zeros(shape) for name, shape in param_shapes(config).items()}
        tensors['lift.weight'] = np.eye(4)
        tensors['blocks.0.linear1.weight'] = np.eye(4)
        tensors['blocks.0.linear2.weight'] = np.eye(4)
        tensors['blocks.0.diffusion_time'] = np.full((1, 4), np.log(np.expm1(0.05)))
        out = forward(NetParams(config, tensors), self.hks, self.ops).numpy()

        kernel = self.ops.phi @ np.diag(np.exp(-0.05 * self.ops.evals)) @ self.ops.phi_pinv
        expected = self.hks + np.maximum(kernel @ self.hks, 0.0)
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_non_finite_activation_names_block(self):
        tensors = dict(self.params.tensors)
        tensors['blocks.1.linear1.bias'] = np.full((1, 8), 1e308)
        tensors['blocks.1.linear2.weight'] = np.full((8, 8), 10.0)
        with np.errstate(over='ignore', invalid='ignore'):
            with self.assertRaisesRegex(NonFiniteError, 'block 1'):
                forward(NetParams(SMALL, tensors), self.hks, self.ops)

    def test_gradients_of_every_parameter_group(self):
        weights = np.random.default_rng(2).standard_normal((30, 8))
        leaves = self.params.as_leaves()

        def objective():
            features = forward(leaves, self.hks, self.ops).values
            return ad.sum(ad.hadamard(features, ad.constant(weights)))

        for name, node in leaves.items():
            with self.subTest(parameter=name):
                self.assertLessEqual(grad_check(objective, node, n_samples=5, seed=1), 1e-4)

    def test_all_leaves_receive_gradients(self):
        leaves = self.params.as_leaves()
        with Tape() as tape:
            root = ad.frobenius_sq(forward(leaves, self.hks, self.ops).values)
        tape.backward(root)
        for name, node in leaves.items():
            self.assertIsNotNone(node.grad, name)
            self.assertEqual(node.grad.shape, node.value.shape)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.params = init_params(SMALL, seed=9)
        self.spectral = SpectralConfig(k=10, n_hks=4)

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip(self):
        path = save_checkpoint(self.tmp / 'final.ckpt', self.params, self.spectral, seed=9, epoch=3)
        loaded, header = load_checkpoint(path, SMALL, self.spectral)
        self.assertEqual(header['epoch'], 3)
        self.assertEqual(header['seed'], 9)
        for name, array in self.params:
            self.assertEqual(loaded[name].tobytes(), array.tobytes(), name)

    def test_identical_params_identical_bytes(self):
        a = save_checkpoint(self.tmp / 'a.ckpt', self.params, self.spectral, seed=9, epoch=1)
        b = save_checkpoint(self.tmp / 'b.ckpt', init_params(SMALL, seed=9), self.spectral, seed=9, epoch=1)
        self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_k_mismatch(self):
        path = save_checkpoint(self.tmp / 'final.ckpt', self.params, self.spectral, seed=9, epoch=1)
        with self.assertRaises(CheckpointMismatchError):
            load_checkpoint(path, spectral_config=SpectralConfig(k=20, n_hks=4))

    def test_net_mismatch(self):
        path = save_checkpoint(self.tmp / 'final.ckpt', self.params, self.spectral, seed=9, epoch=1)
        with self.assertRaises(CheckpointMismatchError):
            load_checkpoint(path, net_config=NetConfig(in_dim=4, width=8, n_blocks=3))

    def test_not_a_checkpoint(self):
        path = self.tmp / 'junk.ckpt'
        path.write_bytes(b'hello world')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)
