import csv
import json
import math
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from meshes.mesh import Correspondence, CorrespondenceError, Mesh
from meshes.mesh_utils import load_correspondence, total_area, write_correspondence
from meshes.primitives import strip, tetrahedron, uv_sphere
from specmatch.exceptions import ConfigError
from .geodesics import GeodesicTable, UnreachableVertexError, geodesic_table
from .manifest import ManifestError, PairEntry, PairManifest, load_manifest, prediction_filename, write_manifest
from .metrics import mean_geo_error, pck_curve
from .report import MissingPredictionError, evaluate_manifest, report_header, write_pck_plot, write_report
from .synthetic import (
    MAX_EDGE_DISTORTION,
    DistortionError,
    base_mesh,
    edge_length_ratios,
    synth_pair,
    write_synthetic_dataset,
)


def floyd_warshall(mesh):
    n = mesh.n_vertices
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for (i, j), length in zip(mesh.edges, mesh.edge_lengths):
        dist[i, j] = dist[j, i] = length
    for k in range(n):
        dist = np.minimum(dist, dist[:, k, None] + dist[None, k, :])
    return dist


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()


class GeodesicTableTests(SimpleTestCase):
    def test_line_metric_along_strip(self):
        table = geodesic_table(strip(10))
        np.testing.assert_array_equal(table.dist[0, :10], np.arange(10.0))

    def test_two_triangle_square(self):
        dist = geodesic_table(strip(2)).dist
        self.assertAlmostEqual(dist[0, 3], math.sqrt(2.0), delta=1e-15)
        self.assertAlmostEqual(dist[1, 2], 2.0, delta=1e-15)
        self.assertAlmostEqual(dist[0, 1], 1.0, delta=1e-15)

    def test_matches_floyd_warshall(self):
        mesh = uv_sphere(4, 7, radius_fn=lambda t, p: 1.0 + 0.2 * np.cos(t) * np.sin(p))
        np.testing.assert_allclose(geodesic_table(mesh).dist, floyd_warshall(mesh), rtol=0, atol=1e-12)

    def test_metric_invariants(self):
        mesh = base_mesh('bent_cylinder', 120)
        dist = geodesic_table(mesh).dist
        np.testing.assert_array_equal(np.diag(dist), 0.0)
        np.testing.assert_allclose(dist, dist.T, rtol=0, atol=1e-9)
        rng = np.random.default_rng(0)
        i, j, k = rng.integers(0, mesh.n_vertices, size=(3, 500))
        self.assertTrue((dist[i, k] <= dist[i, j] + dist[j, k] + 1e-9).all())

    def test_threaded_sources_agree(self):
        mesh = base_mesh('bumpy_sphere', 300)
        self.assertGreater(mesh.n_vertices, 256)
        np.testing.assert_array_equal(geodesic_table(mesh, threads=1).dist, geodesic_table(mesh, threads=3).dist)

    def test_disconnected_mesh(self):
        tet = tetrahedron()
        mesh = Mesh(
            np.concatenate([tet.vertices, tet.vertices + 5.0]),
            np.concatenate([tet.triangles, tet.triangles + 4]),
            'two_tets',
        )
        with self.assertRaisesRegex(UnreachableVertexError, 'vertex 4'):
            geodesic_table(mesh)


class MetricTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.mesh = strip(50)
        cls.table = geodesic_table(cls.mesh)
        cls.area = total_area(cls.mesh)

    def test_exact_prediction(self):
        gt = Correspondence.identity(100)
        self.assertEqual(mean_geo_error(gt, gt, self.table, self.area), 0.0)

    def test_single_vertex_off_by_sqrt_area(self):
        self.assertAlmostEqual(self.area, 49.0, delta=1e-12)
        mapping = np.arange(100)
        mapping[0] = 7
        pred = Correspondence(mapping, n_target=100)
        error = mean_geo_error(pred, Correspondence.identity(100), self.table, self.area)
        self.assertAlmostEqual(error, 1.0, delta=1e-12)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        pred = Correspondence(rng.integers(0, 100, 100), n_target=100)
        gt = Correspondence(rng.integers(0, 100, 100), n_target=100)
        total = 0.0
        for x in range(100):
            total += self.table.dist[pred.source_to_target[x], gt.source_to_target[x]]
        expected = 100.0 / 100 * total / math.sqrt(self.area)
        self.assertAlmostEqual(mean_geo_error(pred, gt, self.table, self.area), expected, delta=1e-10)

    def test_scale_invariance(self):
        mesh = base_mesh('bumpy_sphere', 120)
        scaled = mesh.with_vertices(3.7 * mesh.vertices)
        rng = np.random.default_rng(2)
        pred = Correspondence(rng.integers(0, mesh.n_vertices, mesh.n_vertices), n_target=mesh.n_vertices)
        gt = Correspondence.identity(mesh.n_vertices)
        a = mean_geo_error(pred, gt, geodesic_table(mesh), total_area(mesh))
        b = mean_geo_error(pred, gt, geodesic_table(scaled), total_area(scaled))
        self.assertAlmostEqual(b / a, 1.0, delta=1e-9)

    def test_length_mismatch(self):
        with self.assertRaises(CorrespondenceError):
            mean_geo_error(Correspondence.identity(99), Correspondence.identity(100), self.table, self.area)

    def test_pck_exact_prediction(self):
        gt = Correspondence.identity(100)
        self.assertEqual(pck_curve(gt, gt, self.table, self.area), [(0.01, 1.0), (0.05, 1.0), (0.10, 1.0)])

    def test_pck_zero_threshold_counts_exact_hits(self):
        mapping = np.arange(100)
        mapping[:30] = (mapping[:30] + 1) % 50
        pred = Correspondence(mapping, n_target=100)
        curve = pck_curve(pred, Correspondence.identity(100), self.table, self.area, [0.0])
        self.assertAlmostEqual(curve[0][1], 0.7, delta=1e-12)

    def test_pck_is_monotone(self):
        rng = np.random.default_rng(3)
        thresholds = np.linspace(0.0, 1.0, 40)
        for _ in range(5):
            pred = Correspondence(rng.integers(0, 100, 100), n_target=100)
            fractions = [f for _, f in pck_curve(pred, Correspondence.identity(100), self.table, self.area, thresholds)]
            self.assertTrue(all(b >= a for a, b in zip(fractions, fractions[1:])))

    def test_pck_thresholds_must_ascend(self):
        gt = Correspondence.identity(100)
        with self.assertRaises(ConfigError):
            pck_curve(gt, gt, self.table, self.area, [0.1, 0.05])

    def test_table_wrapper(self):
        table = GeodesicTable(np.zeros((3, 3)), 'tiny')
        self.assertEqual(table.n_vertices, 3)


class SynthPairTests(SimpleTestCase):
    def test_zero_deformation_is_identity(self):
        for family, params in (('bent_cylinder', {'bend': 0.0}), ('bumpy_sphere', {'amplitude': 0.0})):
            with self.subTest(family=family):
                source, target, gt = synth_pair(family, 150, params, seed=0)
                np.testing.assert_array_equal(target.vertices, source.vertices)
                np.testing.assert_array_equal(gt.source_to_target, np.arange(source.n_vertices))

    def test_edge_distortion_bound(self):
        for family in ('bent_cylinder', 'bumpy_sphere'):
            for seed in range(3):
                source, target, _ = synth_pair(family, 200, seed=seed)
                ratios = edge_length_ratios(source, target)
                self.assertTrue(((ratios >= 1 - MAX_EDGE_DISTORTION) & (ratios <= 1 + MAX_EDGE_DISTORTION)).all())

    def test_seeds_change_geometry_not_connectivity(self):
        _, a, _ = synth_pair('bent_cylinder', 150, seed=1)
        _, b, _ = synth_pair('bent_cylinder', 150, seed=2)
        np.testing.assert_array_equal(a.triangles, b.triangles)
        self.assertFalse(np.allclose(a.vertices, b.vertices))

    def test_same_seed_same_pair(self):
        _, a, _ = synth_pair('bumpy_sphere', 150, seed=5)
        _, b, _ = synth_pair('bumpy_sphere', 150, seed=5)
        self.assertEqual(a.vertices.tobytes(), b.vertices.tobytes())

    def test_rejections(self):
        with self.assertRaises(ConfigError):
            synth_pair('bumpy_sphere', 50)
        with self.assertRaises(ConfigError):
            synth_pair('torus', 150)
        with self.assertRaises(DistortionError):
            synth_pair('bent_cylinder', 150, {'bend': 3.0})


class ManifestTests(TempDirMixin, SimpleTestCase):
    def touch(self, name):
        path = self.tmp / name
        path.write_text('x')
        return path

    def test_round_trip_with_relative_paths(self):
        entry = PairEntry(self.touch('a.off'), self.touch('b.off'), self.touch('a__b.gt'))
        write_manifest(PairManifest((entry,), 'test'), self.tmp / 'test.json')
        self.assertIn('"a.off"', (self.tmp / 'test.json').read_text())
        manifest = load_manifest(self.tmp / 'test.json', require_gt=True)
        self.assertEqual(manifest.role, 'test')
        self.assertEqual(manifest.pairs[0].source, self.tmp / 'a.off')
        self.assertEqual(prediction_filename(manifest.pairs[0]), 'a__b.corr')
        self.assertEqual(manifest.pairs[0].label, 'a|b')

    def test_mesh_paths_are_distinct(self):
        a, b, c = self.touch('a.off'), self.touch('b.off'), self.touch('c.off')
        manifest = PairManifest((PairEntry(a, b), PairEntry(b, c), PairEntry(a, c)))
        self.assertEqual(manifest.mesh_paths(), [a, b, c])

    def test_missing_manifest_is_config_error(self):
        with self.assertRaises(ConfigError):
            load_manifest(self.tmp / 'absent.json')

    def test_bad_documents(self):
        self.touch('a.off')
        cases = {
            'missing_file.json': '{"pairs": [{"source": "a.off", "target": "nope.off"}]}',
            'unknown_key.json': '{"pairs": [], "extra": 1}',
            'no_pairs.json': '{"pairs": []}',
            'no_gt.json': '{"pairs": [{"source": "a.off", "target": "a.off"}]}',
        }
        for name, text in cases.items():
            (self.tmp / name).write_text(text)
            with self.subTest(name=name), self.assertRaises(ManifestError):
                load_manifest(self.tmp / name, require_gt=True)


class ReportTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.train, self.test = write_synthetic_dataset(
            self.tmp / 'data', ['bumpy_sphere', 'bent_cylinder'], 100, n_train=1, n_test=2, seed=3,
        )
        self.manifest = load_manifest(self.tmp / 'data' / 'test.json', require_gt=True)
        self.predictions = self.tmp / 'pred'

    def write_predictions(self, corrupt=False):
        rng = np.random.default_rng(4)
        for entry in self.manifest.pairs:
            n = len(entry.gt.read_text().split())
            mapping = rng.integers(0, n, n) if corrupt else np.arange(n)
            write_correspondence(Correspondence(mapping), self.predictions / prediction_filename(entry))

    def test_dataset_layout(self):
        self.assertEqual((len(self.train), len(self.test)), (1, 2))
        self.assertTrue((self.tmp / 'data' / 'train.json').exists())
        entry = self.manifest.pairs[0]
        self.assertTrue(entry.source.name.startswith('bent_cylinder_001'))
        n = len(entry.gt.read_text().split())
        gt = load_correspondence(entry.gt, n, n)
        np.testing.assert_array_equal(gt.source_to_target, np.arange(n))

    def test_identity_predictions_report_zero(self):
        self.write_predictions()
        reports = evaluate_manifest(self.manifest, self.predictions)
        path = write_report(reports, self.tmp / 'report.csv')
        with open(path, newline='') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['pair', 'mean_geo_error_x100', 'pck@0.01', 'pck@0.05', 'pck@0.10'])
        self.assertEqual(rows[0], report_header())
        self.assertEqual([row[0] for row in rows[1:]], [e.label for e in self.manifest.pairs] + ['mean'])
        for row in rows[1:]:
            self.assertEqual(float(row[1]), 0.0)
            self.assertEqual([float(v) for v in row[2:]], [1.0, 1.0, 1.0])

    def test_aggregate_is_mean_of_pairs(self):
        self.write_predictions(corrupt=True)
        reports = evaluate_manifest(self.manifest, self.predictions)
        with open(write_report(reports, self.tmp / 'report.csv'), newline='') as fh:
            rows = list(csv.reader(fh))
        per_pair = [float(row[1]) for row in rows[1:-1]]
        self.assertGreater(min(per_pair), 0.0)
        self.assertAlmostEqual(float(rows[-1][1]), float(np.mean(per_pair)), delta=1e-12)

    def test_svg_plot(self):
        self.write_predictions(corrupt=True)
        path = write_pck_plot(evaluate_manifest(self.manifest, self.predictions), self.tmp / 'pck.svg')
        text = path.read_text()
        self.assertIn('<svg', text)
        self.assertEqual(list(self.tmp.glob('.pck.svg.*')), [])

    def test_missing_prediction(self):
        with self.assertRaises(MissingPredictionError):
            evaluate_manifest(self.manifest, self.predictions)


class EvalCommandTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        write_synthetic_dataset(self.tmp / 'data', ['bumpy_sphere'], 100, n_train=0, n_test=2, seed=5)
        self.manifest = load_manifest(self.tmp / 'data' / 'test.json', require_gt=True)
        self.predictions = self.tmp / 'pred'

    def write_identity(self):
        for entry in self.manifest.pairs:
            n = len(entry.gt.read_text().split())
            write_correspondence(Correspondence.identity(n), self.predictions / prediction_filename(entry))

    def evaluate(self, *args, **options):
        out = StringIO()
        call_command('eval', str(self.manifest.path), str(self.predictions), *args,
                     out=str(self.tmp / 'report'), stdout=out, **options)
        return out.getvalue()

    def test_identity_predictions(self):
        self.write_identity()
        output = self.evaluate(plot=True)
        self.assertIn('mean geodesic error x100: 0.0000', output)
        with open(self.tmp / 'report' / 'report.csv', newline='') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(rows[0], report_header())
        self.assertEqual(len(rows), 1 + 2 + 1)
        self.assertTrue(all(float(row[1]) == 0.0 for row in rows[1:]))
        self.assertIn('<svg', (self.tmp / 'report' / 'pck.svg').read_text())
        self.assertTrue((self.tmp / 'report' / 'run.json').exists())

    def test_custom_thresholds(self):
        self.write_identity()
        self.evaluate(thresholds=[0.02, 0.2])
        with open(self.tmp / 'report' / 'report.csv', newline='') as fh:
            header = next(csv.reader(fh))
        self.assertEqual(header, ['pair', 'mean_geo_error_x100', 'pck@0.02', 'pck@0.20'])
        self.assertFalse((self.tmp / 'report' / 'pck.svg').exists())

    def test_missing_prediction_exit_code(self):
        with self.assertRaises(CommandError) as caught:
            self.evaluate()
        self.assertEqual(caught.exception.returncode, 3)
        self.assertFalse((self.tmp / 'report').exists())


class SynthCommandTests(TempDirMixin, SimpleTestCase):
    def synth(self, **options):
        call_command('synth', out=str(self.tmp / 'out'), resolution=100, stdout=StringIO(), **options)

    def test_writes_manifests(self):
        self.synth(train=2, test=1, families='bent_cylinder', format='ply', seed=4)
        train = load_manifest(self.tmp / 'out' / 'train.json', require_gt=True)
        test = load_manifest(self.tmp / 'out' / 'test.json', require_gt=True)
        self.assertEqual((len(train), len(test)), (2, 1))
        self.assertEqual(train.pairs[0].source.suffix, '.ply')
        run = json.loads((self.tmp / 'out' / 'run.json').read_text())
        self.assertEqual(run['seed'], 4)

    def test_bad_deform_json(self):
        with self.assertRaises(CommandError) as caught:
            self.synth(train=1, test=0, deform='{bend:')
        self.assertEqual(caught.exception.returncode, 2)

    def test_unknown_family(self):
        with self.assertRaises(CommandError) as caught:
            self.synth(train=1, test=0, families='torus')
        self.assertEqual(caught.exception.returncode, 2)
