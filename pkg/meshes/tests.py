import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from .mesh import Correspondence, CorrespondenceError, DegenerateTriangleError, Mesh, MeshError
from .mesh_utils import (
    MeshFormatError,
    UnsupportedFormatError,
    load_correspondence,
    load_mesh,
    total_area,
    write_correspondence,
    write_mesh,
)
from .primitives import icosphere, right_triangle, strip, tetrahedron, tube, uv_sphere

TETRAHEDRON_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()

    def write(self, name, text):
        path = self.tmp / name
        path.write_text(text)
        return path


class LoadMeshTests(TempDirMixin, SimpleTestCase):
    def test_off_tetrahedron(self):
        mesh = load_mesh(self.write('tet.off', TETRAHEDRON_OFF))
        self.assertEqual(mesh.n_vertices, 4)
        self.assertEqual(mesh.n_triangles, 4)
        self.assertEqual(mesh.name, 'tet')

    def test_obj_indices_are_one_based(self):
        text = 'v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\nf 1 2 3\n'
        mesh = load_mesh(self.write('tri.obj', text))
        self.assertEqual(mesh.triangles.tolist(), [[0, 1, 2]])

    def test_obj_negative_indices_and_slashes(self):
        text = 'v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf -4/1/1 -3/2/2 -1/3/3\n'
        mesh = load_mesh(self.write('neg.obj', text))
        self.assertEqual(mesh.triangles.tolist(), [[0, 1, 3]])

    def test_quads_are_fan_triangulated(self):
        text = 'OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n'
        mesh = load_mesh(self.write('quad.off', text))
        self.assertEqual(mesh.triangles.tolist(), [[0, 1, 2], [0, 2, 3]])

    def test_repeated_index_is_degenerate(self):
        text = TETRAHEDRON_OFF.replace('3 0 2 1', '3 0 0 1')
        with self.assertRaises(DegenerateTriangleError) as ctx:
            load_mesh(self.write('bad.off', text))
        self.assertEqual(ctx.exception.triangle_indices, [0])

    def test_zero_area_triangle_is_degenerate(self):
        text = 'OFF\n4 2 0\n0 0 0\n1 0 0\n2 0 0\n0 1 0\n3 0 1 2\n3 0 1 3\n'
        with self.assertRaises(DegenerateTriangleError) as ctx:
            load_mesh(self.write('flat.off', text))
        self.assertEqual(ctx.exception.triangle_indices, [0])

    def test_parse_error_reports_line(self):
        text = TETRAHEDRON_OFF.replace('1 0 0\n', '1 zero 0\n', 1)
        with self.assertRaises(MeshFormatError) as ctx:
            load_mesh(self.write('typo.off', text))
        self.assertEqual(ctx.exception.line, 4)

    def test_out_of_range_face(self):
        text = TETRAHEDRON_OFF.replace('3 1 2 3', '3 1 2 9')
        with self.assertRaises(MeshFormatError) as ctx:
            load_mesh(self.write('range.off', text))
        self.assertEqual(ctx.exception.line, 10)

    def test_binary_ply_rejected(self):
        text = 'ply\nformat binary_little_endian 1.0\nelement vertex 4\nend_header\n'
        with self.assertRaises(UnsupportedFormatError):
            load_mesh(self.write('bin.ply', text))

    def test_unknown_extension(self):
        with self.assertRaises(UnsupportedFormatError):
            load_mesh(self.write('shape.stl', 'solid'))

    def test_ascii_ply(self):
        text = (
            'ply\nformat ascii 1.0\ncomment made by hand\n'
            'element vertex 4\nproperty float x\nproperty float y\nproperty float z\n'
            'element face 1\nproperty list uchar int vertex_indices\nend_header\n'
            '0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 3\n'
        )
        mesh = load_mesh(self.write('tri.ply', text))
        self.assertEqual(mesh.n_vertices, 4)
        self.assertEqual(mesh.triangles.tolist(), [[0, 1, 3]])

    def test_vertex_order_is_stable(self):
        path = self.write('tet.off', TETRAHEDRON_OFF)
        first = load_mesh(path)
        second = load_mesh(path)
        self.assertEqual(first.vertices.tobytes(), second.vertices.tobytes())
        self.assertEqual(first.vertices[1].tolist(), [1.0, 0.0, 0.0])

    def test_round_trip_all_formats(self):
        mesh = uv_sphere(5, 8, lambda theta, phi: 1.0 + 0.1 * np.cos(3 * phi) * np.sin(theta))
        for extension in ('.off', '.obj', '.ply'):
            with self.subTest(extension=extension):
                path = write_mesh(mesh, self.tmp / f'sphere{extension}')
                loaded = load_mesh(path)
                np.testing.assert_allclose(loaded.vertices, mesh.vertices, rtol=1e-9, atol=0)
                np.testing.assert_array_equal(loaded.triangles, mesh.triangles)


class MeshTests(SimpleTestCase):
    def test_too_few_vertices(self):
        with self.assertRaises(MeshError):
            Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_arrays_are_read_only(self):
        mesh = tetrahedron()
        with self.assertRaises(ValueError):
            mesh.vertices[0, 0] = 5.0

    def test_edges_unique(self):
        mesh = tetrahedron()
        self.assertEqual(mesh.edges.shape, (6, 2))
        self.assertTrue((mesh.edges[:, 0] < mesh.edges[:, 1]).all())

    def test_primitive_vertex_counts(self):
        self.assertEqual(icosphere(1).n_vertices, 42)
        self.assertEqual(uv_sphere(4, 7).n_vertices, 30)
        self.assertEqual(tube(6, 5).n_vertices, 30)
        self.assertEqual(strip(12).n_vertices, 24)


class TotalAreaTests(SimpleTestCase):
    def test_right_triangle(self):
        self.assertAlmostEqual(total_area(right_triangle()), 0.5, places=15)

    def test_unit_tetrahedron(self):
        self.assertAlmostEqual(total_area(tetrahedron(1.0)), math.sqrt(3.0), places=12)

    def test_icosphere_against_triangle_loop(self):
        mesh = icosphere(1)
        expected = 0.0
        for a, b, c in mesh.triangles:
            va, vb, vc = mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]
            cross = np.cross(vb - va, vc - va)
            expected += 0.5 * math.sqrt(float(cross @ cross))
        self.assertLessEqual(abs(total_area(mesh) - expected) / expected, 1e-12)


class CorrespondenceFileTests(TempDirMixin, SimpleTestCase):
    def test_identity(self):
        corr = load_correspondence(self.write('gt.txt', '0\n1\n2\n'), 3, 3)
        self.assertEqual(corr.source_to_target.tolist(), [0, 1, 2])

    def test_out_of_range_reports_line(self):
        with self.assertRaisesRegex(CorrespondenceError, r'gt\.txt:2: index 7'):
            load_correspondence(self.write('gt.txt', '0\n7\n1\n'), 3, 5)

    def test_length_mismatch(self):
        with self.assertRaises(CorrespondenceError):
            load_correspondence(self.write('gt.txt', '0\n1\n'), 3, 3)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        corr = Correspondence(rng.integers(0, 40, size=25), 'a', 'b', n_target=40)
        path = write_correspondence(corr, self.tmp / 'a__b.corr')
        loaded = load_correspondence(path, 25, 40)
        np.testing.assert_array_equal(loaded.source_to_target, corr.source_to_target)

    def test_accuracy_against(self):
        ident = Correspondence.identity(4)
        other = Correspondence([0, 1, 3, 2], n_target=4)
        self.assertEqual(ident.accuracy_against(other), 0.5)
