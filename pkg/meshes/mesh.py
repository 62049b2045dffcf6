"""
Triangle meshes and vertex correspondences.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from specmatch.exceptions import DataError

# Squared length units; anything at or below this is a zero-area triangle.
MIN_TRIANGLE_AREA = 1e-12
MIN_VERTICES = 4


class MeshError(DataError):
    pass


class DegenerateTriangleError(MeshError):
    """Raised with the indices of every offending triangle."""

    def __init__(self, message, triangle_indices):
        super().__init__(message)
        self.triangle_indices = list(triangle_indices)


class CorrespondenceError(DataError):
    pass


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    name: str = 'mesh'

    def __post_init__(self):
        vertices = _frozen(self.vertices, np.float64)
        triangles = _frozen(self.triangles, np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f'{self.name}: vertices must be an (n, 3) array, got {vertices.shape}')
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError(f'{self.name}: triangles must be an (m, 3) array, got {triangles.shape}')
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'triangles', triangles)
        self.validate()

    def validate(self):
        n = self.n_vertices
        if n < MIN_VERTICES:
            raise MeshError(f'{self.name}: needs at least {MIN_VERTICES} vertices, found {n}')
        if self.n_triangles < 1:
            raise MeshError(f'{self.name}: has no triangles')
        if not np.isfinite(self.vertices).all():
            raise MeshError(f'{self.name}: vertex coordinates must be finite')

        tris = self.triangles
        out_of_range = np.flatnonzero(((tris < 0) | (tris >= n)).any(axis=1))
        if out_of_range.size:
            raise MeshError(
                f'{self.name}: triangles {out_of_range.tolist()} reference vertices outside [0, {n})'
            )

        repeated = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        flat = self.triangle_areas <= MIN_TRIANGLE_AREA
        bad = np.flatnonzero(repeated | flat)
        if bad.size:
            raise DegenerateTriangleError(
                f'{self.name}: degenerate triangles {bad.tolist()}', bad.tolist()
            )

    @property
    def n_vertices(self):
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self):
        return int(self.triangles.shape[0])

    @cached_property
    def triangle_areas(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    @cached_property
    def edges(self):
        """Unique undirected edges as an (e, 2) array with i < j, sorted."""
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    @cached_property
    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def with_vertices(self, vertices, name=None):
        """Same connectivity, new embedding."""
        return Mesh(vertices, self.triangles, name or self.name)

    def __str__(self):
        return f'{self.name} ({self.n_vertices} vertices, {self.n_triangles} triangles)'


@dataclass(frozen=True, eq=False)
class Correspondence:
    source_to_target: np.ndarray
    source_name: str = 'source'
    target_name: str = 'target'
    n_target: int = None

    def __post_init__(self):
        mapping = _frozen(self.source_to_target, np.int64)
        if mapping.ndim != 1:
            raise CorrespondenceError('source_to_target must be one-dimensional')
        object.__setattr__(self, 'source_to_target', mapping)
        if self.n_target is not None:
            bad = np.flatnonzero((mapping < 0) | (mapping >= self.n_target))
            if bad.size:
                raise CorrespondenceError(
                    f'{self.source_name}->{self.target_name}: entries {bad[:10].tolist()} '
                    f'outside [0, {self.n_target})'
                )

    def __len__(self):
        return int(self.source_to_target.shape[0])

    @classmethod
    def identity(cls, n, source_name='source', target_name='target'):
        return cls(np.arange(n), source_name, target_name, n_target=n)

    def accuracy_against(self, other):
        """Fraction of source vertices mapped to the same target as `other`."""
        if len(self) != len(other):
            raise CorrespondenceError(f'length mismatch: {len(self)} vs {len(other)}')
        return float(np.mean(self.source_to_target == other.source_to_target))

    def __str__(self):
        return f'{self.source_name} -> {self.target_name} ({len(self)} vertices)'
