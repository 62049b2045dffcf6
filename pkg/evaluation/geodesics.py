"""
All-pairs graph geodesics on the vertex-edge graph of a mesh.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from specmatch.exceptions import DataError

logger = logging.getLogger(__name__)

SOURCE_CHUNK = 256


class UnreachableVertexError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class GeodesicTable:
    dist: np.ndarray
    mesh_name: str = 'mesh'

    @property
    def n_vertices(self):
        return int(self.dist.shape[0])


def edge_graph(mesh):
    """Symmetric sparse adjacency with Euclidean edge lengths as weights."""
    edges = mesh.edges
    lengths = mesh.edge_lengths
    n = mesh.n_vertices
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sparse.csr_matrix((np.concatenate([lengths, lengths]), (rows, cols)), shape=(n, n))


def geodesic_table(mesh, threads=None):
    """Dijkstra from every vertex; sources are split across a thread pool."""
    graph = edge_graph(mesh)
    n = mesh.n_vertices
    threads = threads or settings.SPECMATCH_THREADS
    chunks = [np.arange(s, min(s + SOURCE_CHUNK, n)) for s in range(0, n, SOURCE_CHUNK)]

    def run(indices):
        return dijkstra(graph, directed=False, indices=indices)

    if threads <= 1 or len(chunks) == 1:
        parts = [run(chunk) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    dist = np.vstack(parts)

    unreachable = np.argwhere(np.isinf(dist[0]))
    if unreachable.size:
        raise UnreachableVertexError(
            f'{mesh.name}: vertex {int(unreachable[0, 0])} is unreachable from vertex 0 (disconnected mesh)'
        )
    dist.setflags(write=False)
    logger.debug('Geodesic table for %s: %d x %d, max %.4g', mesh.name, n, n, dist.max())
    return GeodesicTable(dist, mesh.name)
