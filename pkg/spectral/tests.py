import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import scipy.linalg
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from meshes.mesh import Mesh
from meshes.mesh_utils import total_area, write_mesh
from meshes.primitives import corpus, icosphere, right_triangle, strip, tetrahedron, uv_sphere
from evaluation.synthetic import base_mesh
from specmatch.exceptions import ConfigError
from .cache import (
    MissingSpectraError,
    StaleSpectraError,
    cache_path,
    cached_orders,
    is_fresh,
    load_spectra,
    mesh_key,
    save_spectra,
)
from .operators import (
    DisconnectedMeshError,
    SpectralConfig,
    SpectralError,
    SpectralOperators,
    compute_spectra,
    cotan_laplacian,
    eig_k,
    eigen_residuals,
    hks,
    hks_times,
    is_symmetric,
    lumped_mass,
    standardize_columns,
)

CORPUS_K = {'tetrahedron': 3, 'icosphere42': 20, 'strip24': 10}


def corpus_k(mesh):
    return CORPUS_K.get(mesh.name, 30)


def dense_laplacian_oracle(mesh):
    n = mesh.n_vertices
    dense = np.zeros((n, n))
    v = mesh.vertices
    for tri in mesh.triangles:
        for corner in range(3):
            o, i, j = tri[corner], tri[(corner + 1) % 3], tri[(corner + 2) % 3]
            e1, e2 = v[i] - v[o], v[j] - v[o]
            cot = np.dot(e1, e2) / np.linalg.norm(np.cross(e1, e2))
            dense[i, j] -= 0.5 * cot
            dense[j, i] -= 0.5 * cot
    for i in range(n):
        dense[i, i] = -(dense[i].sum() - dense[i, i])
    return dense


def random_rotation(seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class LaplacianTests(SimpleTestCase):
    def test_right_triangle_cotangents(self):
        L = cotan_laplacian(right_triangle()).toarray()
        self.assertAlmostEqual(L[1, 2], 0.0, places=14)
        self.assertAlmostEqual(L[0, 1], -0.5, places=14)
        self.assertAlmostEqual(L[0, 2], -0.5, places=14)
        self.assertAlmostEqual(L[0, 0], 1.0, places=14)

    def test_rows_sum_to_zero(self):
        for mesh in corpus():
            with self.subTest(mesh=mesh.name):
                L = cotan_laplacian(mesh)
                self.assertLessEqual(np.abs(np.asarray(L.sum(axis=1))).max(), 1e-10)
                self.assertTrue(is_symmetric(L, 1e-14))

    def test_icosphere_matches_dense_assembly(self):
        mesh = icosphere(1)
        diff = np.abs(cotan_laplacian(mesh).toarray() - dense_laplacian_oracle(mesh)).max()
        self.assertLessEqual(diff, 1e-12)


class MassTests(SimpleTestCase):
    def test_right_triangle(self):
        mass = lumped_mass(right_triangle())
        np.testing.assert_allclose(mass[:3], [0.5 / 3] * 3, rtol=1e-14)
        self.assertEqual(mass[3], 0.0)

    def test_sums_to_total_area(self):
        for mesh in corpus():
            with self.subTest(mesh=mesh.name):
                self.assertLessEqual(abs(lumped_mass(mesh).sum() - total_area(mesh)) / total_area(mesh), 1e-12)

    def test_icosphere_accumulation(self):
        mesh = icosphere(1)
        expected = np.zeros(mesh.n_vertices)
        for tri, area in zip(mesh.triangles, mesh.triangle_areas):
            for vertex in tri:
                expected[vertex] += area / 3.0
        np.testing.assert_allclose(lumped_mass(mesh), expected, rtol=1e-14)


class EigensystemTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spectra = [(mesh, compute_spectra(mesh, corpus_k(mesh))) for mesh in corpus()]

    def test_corpus_invariants(self):
        for mesh, ops in self.spectra:
            with self.subTest(mesh=mesh.name):
                L = cotan_laplacian(mesh)
                first, rest = eigen_residuals(L, ops.mass, ops.phi, ops.evals)
                self.assertLessEqual(first, 1e-8)
                self.assertLessEqual(rest, 1e-6)
                gram = ops.phi.T @ (ops.mass[:, None] * ops.phi)
                self.assertLessEqual(np.abs(gram - np.eye(ops.k)).max(), 1e-6)
                self.assertTrue((np.diff(ops.evals) >= 0).all())
                self.assertTrue((ops.evals >= 0).all())
                self.assertLessEqual(ops.evals[0], 1e-6 * ops.evals[-1])
                self.assertLessEqual(np.abs(ops.phi_pinv @ ops.phi - np.eye(ops.k)).max(), 1e-6)

    def test_constant_mode(self):
        for mesh, ops in self.spectra:
            with self.subTest(mesh=mesh.name):
                expected = 1.0 / np.sqrt(total_area(mesh))
                np.testing.assert_allclose(ops.phi[:, 0], expected, rtol=1e-6)

    def test_sign_convention(self):
        for mesh, ops in self.spectra:
            with self.subTest(mesh=mesh.name):
                pivots = np.argmax(np.abs(ops.phi), axis=0)
                self.assertTrue((ops.phi[pivots, np.arange(ops.k)] > 0).all())

    def test_icosphere_matches_dense_oracle(self):
        mesh = icosphere(1)
        ops = compute_spectra(mesh, 20)
        oracle = scipy.linalg.eigh(cotan_laplacian(mesh).toarray(), np.diag(lumped_mass(mesh)), eigvals_only=True)[:20]
        self.assertLessEqual(abs(ops.evals[0]), 1e-8)
        np.testing.assert_allclose(ops.evals[1:], oracle[1:], rtol=1e-6)

    def test_deterministic(self):
        mesh = base_mesh('bumpy_sphere', 240)
        a = compute_spectra(mesh, 30, seed=5)
        b = compute_spectra(mesh, 30, seed=5)
        self.assertEqual(a.phi.tobytes(), b.phi.tobytes())

    def test_projection_is_idempotent(self):
        _, ops = self.spectra[2]
        v = np.random.default_rng(0).standard_normal(ops.n_vertices)
        once = ops.phi @ ops.project(v)
        twice = ops.phi @ ops.project(once)
        np.testing.assert_allclose(twice, once, atol=1e-8)

    def test_k_must_be_below_vertex_count(self):
        mesh = tetrahedron()
        with self.assertRaises(SpectralError):
            eig_k(cotan_laplacian(mesh), lumped_mass(mesh), 4)

    def test_disconnected_mesh(self):
        tet = tetrahedron()
        vertices = np.concatenate([tet.vertices, tet.vertices + 5.0])
        triangles = np.concatenate([tet.triangles, tet.triangles + 4])
        with self.assertRaises(DisconnectedMeshError):
            compute_spectra(Mesh(vertices, triangles, 'two_tets'), 3)


class HKSTests(SimpleTestCase):
    def test_dimensions(self):
        ops = compute_spectra(base_mesh('bumpy_sphere', 240), 30)
        signature = hks(ops, 16)
        self.assertEqual(signature.shape, (ops.n_vertices, 16))
        area = ops.mass.sum()
        np.testing.assert_allclose(ops.mass @ signature / area, 0.0, atol=1e-12)
        np.testing.assert_allclose(ops.mass @ signature ** 2 / area, 1.0 / 16, rtol=1e-10)
        self.assertAlmostEqual(ops.mass @ (signature ** 2).sum(axis=1) / area, 1.0, delta=1e-10)

    def test_l2_scaling(self):
        ops = compute_spectra(base_mesh('bumpy_sphere', 240), 30)
        signature = hks(ops, 16, scaling='l2')
        np.testing.assert_allclose(np.linalg.norm(signature, axis=0), 1.0, rtol=1e-12)
        self.assertTrue((signature >= 0).all())

    def test_standardizing_removes_the_shared_offset(self):
        ops = compute_spectra(base_mesh('bumpy_sphere', 240), 30)
        raw = hks(ops, 16, scaling='none')
        scaled = hks(ops, 16)
        spread = raw.std(axis=0) / raw.mean(axis=0)
        self.assertLess(spread[-1], 0.1)
        self.assertGreater(scaled[:, -1].std(), 0.1)
        self.assertGreater(np.corrcoef(raw[:, -1], scaled[:, -1])[0, 1], 1 - 1e-9)

    def test_constant_column_becomes_zero(self):
        values = np.column_stack([np.full(5, 2.0), np.arange(5.0)])
        scaled = standardize_columns(values, np.ones(5))
        np.testing.assert_array_equal(scaled[:, 0], 0.0)
        self.assertAlmostEqual(np.mean(scaled[:, 1] ** 2), 0.5, delta=1e-12)

    def test_unknown_scaling(self):
        ops = compute_spectra(icosphere(1), 20)
        with self.assertRaises(ConfigError):
            hks(ops, 4, scaling='minmax')
        with self.assertRaises(ConfigError):
            SpectralConfig(hks_scaling='minmax')

    def test_time_range(self):
        ops = compute_spectra(icosphere(1), 20)
        times = hks_times(ops, 16)
        self.assertAlmostEqual(times[0], 4 * np.log(10) / ops.evals[-1], delta=1e-12 * times[0])
        self.assertAlmostEqual(times[-1], 4 * np.log(10) / ops.evals[1], delta=1e-12 * times[-1])

    def test_direct_summation(self):
        ops = compute_spectra(strip(6), 6)
        signature = hks(ops, 4, scaling='none')
        times = hks_times(ops, 4)
        for x in range(ops.n_vertices):
            for j, t in enumerate(times):
                expected = sum(np.exp(-ops.evals[i] * t) * ops.phi[x, i] ** 2 for i in range(ops.k))
                self.assertLessEqual(abs(signature[x, j] - expected), 1e-10 * expected)
        self.assertTrue((signature >= 0).all())

    def test_rigid_motion_invariance(self):
        mesh = base_mesh('bumpy_sphere', 240)
        moved = mesh.with_vertices(mesh.vertices @ random_rotation(1).T + np.array([0.3, -2.0, 1.5]))
        a = hks(compute_spectra(mesh, 30), 16)
        b = hks(compute_spectra(moved, 30), 16)
        np.testing.assert_allclose(b, a, rtol=1e-6, atol=1e-9)

    def test_smoothing(self):
        ops = compute_spectra(base_mesh('bent_cylinder', 240), 30)
        signature = hks(ops, 16, scaling='none')
        self.assertLessEqual(signature[:, -1].var(), signature[:, 0].var())

    def test_zero_second_eigenvalue(self):
        ops = SpectralOperators.from_basis(np.eye(4)[:, :3], np.array([0.0, 0.0, 1.0]), np.ones(4))
        with self.assertRaises(DisconnectedMeshError):
            hks(ops, 4)


class CacheTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.mesh = icosphere(1)
        self.ops = compute_spectra(self.mesh, 20)

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip(self):
        path = save_spectra(cache_path(self.tmp, self.mesh, 20), self.ops, self.mesh)
        self.assertEqual(path.name, f'icosphere42.{mesh_key(self.mesh)}.k20.spectra')
        loaded = load_spectra(path, self.mesh, 20)
        self.assertEqual(loaded.phi.tobytes(), self.ops.phi.tobytes())
        np.testing.assert_array_equal(loaded.phi_pinv, self.ops.phi_pinv)
        self.assertTrue(is_fresh(path, self.mesh, 20))

    def test_stale_after_vertex_change(self):
        path = save_spectra(cache_path(self.tmp, self.mesh, 20), self.ops, self.mesh)
        moved = self.mesh.with_vertices(self.mesh.vertices * 1.01)
        self.assertFalse(is_fresh(path, moved, 20))
        with self.assertRaises(StaleSpectraError):
            load_spectra(path, moved)

    def test_k_mismatch(self):
        path = save_spectra(cache_path(self.tmp, self.mesh, 20), self.ops, self.mesh)
        self.assertFalse(is_fresh(path, self.mesh, 30))
        with self.assertRaises(StaleSpectraError):
            load_spectra(path, self.mesh, 30)

    def test_missing(self):
        with self.assertRaises(MissingSpectraError):
            load_spectra(self.tmp / 'nothing.k20.spectra')

    def test_same_stem_meshes_get_separate_entries(self):
        other = uv_sphere(5, 8, name=self.mesh.name)
        other_ops = compute_spectra(other, 20)
        first = save_spectra(cache_path(self.tmp, self.mesh, 20), self.ops, self.mesh)
        second = save_spectra(cache_path(self.tmp, other, 20), other_ops, other)
        self.assertNotEqual(first, second)
        self.assertEqual(load_spectra(first, self.mesh, 20).n_vertices, self.mesh.n_vertices)
        self.assertEqual(load_spectra(second, other, 20).n_vertices, other.n_vertices)
        with self.assertRaises(StaleSpectraError):
            load_spectra(first, other, 20)

    def test_same_vertices_different_triangles(self):
        flipped = Mesh(self.mesh.vertices, self.mesh.triangles[:, ::-1], self.mesh.name)
        self.assertNotEqual(mesh_key(flipped), mesh_key(self.mesh))
        path = save_spectra(cache_path(self.tmp, self.mesh, 20), self.ops, self.mesh)
        self.assertFalse(is_fresh(path, flipped, 20))

    def test_cached_orders(self):
        for k in (10, 30):
            (self.tmp / f'icosphere42.{mesh_key(self.mesh)}.k{k}.spectra').write_bytes(b'')
        (self.tmp / f'icosphere42.{mesh_key(self.mesh)}.kx.spectra').write_bytes(b'')
        (self.tmp / 'icosphere42.000000000000.k20.spectra').write_bytes(b'')
        self.assertEqual(cached_orders(self.tmp, self.mesh), [10, 30])


class PrecomputeCommandTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.cache = self.tmp / 'cache'
        self.paths = [
            write_mesh(icosphere(1), self.tmp / 'ico.off'),
            write_mesh(uv_sphere(5, 8), self.tmp / 'uv.obj'),
        ]

    def tearDown(self):
        self._tmp.cleanup()

    def precompute(self, *paths, **options):
        out = StringIO()
        call_command('precompute', *map(str, paths), k=10, cache_dir=str(self.cache), stdout=out, **options)
        return out.getvalue()

    def test_rerun_is_idempotent(self):
        self.assertIn('2 recomputed, 0 up to date, 0 failed', self.precompute(*self.paths))
        self.assertEqual(len(list(self.cache.glob('ico.*.k10.spectra'))), 1)
        self.assertEqual(len(list(self.cache.glob('uv.*.k10.spectra'))), 1)
        self.assertTrue((self.cache / 'run.json').exists())
        self.assertIn('0 recomputed, 2 up to date', self.precompute(*self.paths))
        self.assertIn('2 recomputed', self.precompute(*self.paths, force=True))

    def test_modified_mesh_is_recomputed(self):
        self.precompute(*self.paths)
        mesh = icosphere(1)
        write_mesh(mesh.with_vertices(mesh.vertices * 1.5), self.paths[0])
        self.assertIn('1 recomputed, 1 up to date', self.precompute(*self.paths))

    def test_same_stem_in_two_directories(self):
        (self.tmp / 'other').mkdir()
        twin = write_mesh(uv_sphere(5, 8, name='ico'), self.tmp / 'other' / 'ico.off')
        self.assertIn('2 recomputed, 0 up to date', self.precompute(self.paths[0], twin))
        self.assertEqual(len(list(self.cache.glob('ico.*.k10.spectra'))), 2)
        self.assertIn('0 recomputed, 2 up to date', self.precompute(self.paths[0], twin))

    def test_failure_is_reported_and_others_continue(self):
        broken = self.tmp / 'broken.off'
        broken.write_text('OFF\n3 1 0\n0 0 0\n')
        with self.assertRaises(CommandError) as caught:
            self.precompute(broken, self.paths[0])
        self.assertEqual(caught.exception.returncode, 3)
        self.assertEqual(len(list(self.cache.glob('ico.*.k10.spectra'))), 1)

    def test_no_meshes(self):
        with self.assertRaises(CommandError) as caught:
            self.precompute()
        self.assertEqual(caught.exception.returncode, 2)
