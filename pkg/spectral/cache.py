"""
On-disk cache of precomputed spectra, one container file per mesh and k.

Files are named `<stem>.<key>.k<k>.spectra`, where the key is a short
digest of the vertex and triangle arrays, so meshes sharing a file stem get
separate entries. The header records the mesh name, vertex count, k and the
full SHA-256 digest; a cache only counts as fresh if that digest matches the
mesh being matched or trained on.
"""
import hashlib
import logging
from pathlib import Path

import numpy as np

from specmatch.containers import ContainerError, read_container, write_container
from specmatch.exceptions import DataError
from .operators import SpectralOperators

logger = logging.getLogger(__name__)

FORMAT_VERSION = 2
KEY_LENGTH = 12


class MissingSpectraError(DataError):
    pass


class StaleSpectraError(DataError):
    pass


def mesh_hash(mesh):
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(mesh.vertices, dtype='<f8').tobytes())
    digest.update(np.ascontiguousarray(mesh.triangles, dtype='<i8').tobytes())
    return digest.hexdigest()


def mesh_key(mesh):
    return mesh_hash(mesh)[:KEY_LENGTH]


def cache_path(cache_dir, mesh, k):
    return Path(cache_dir) / f'{mesh.name}.{mesh_key(mesh)}.k{k}.spectra'


def cached_orders(cache_dir, mesh):
    """Truncation orders k with a spectra cache file for exactly this mesh."""
    prefix = f'{mesh.name}.{mesh_key(mesh)}.k'
    orders = []
    for path in Path(cache_dir).glob(f'{prefix}*.spectra'):
        suffix = path.name[len(prefix):-len('.spectra')]
        if suffix.isdigit():
            orders.append(int(suffix))
    return sorted(orders)


def save_spectra(path, ops, mesh):
    header = {
        'format_version': FORMAT_VERSION,
        'mesh_name': mesh.name,
        'n_vertices': mesh.n_vertices,
        'k': ops.k,
        'mesh_hash': mesh_hash(mesh),
    }
    write_container(path, header, {'phi': ops.phi, 'evals': ops.evals, 'mass': ops.mass})
    logger.debug('Cached %s at %s', ops, path)
    return Path(path)


def read_spectra_header(path):
    header, _ = read_container(path)
    return header


def load_spectra(path, mesh=None, k=None):
    """
    Load cached spectra. With `mesh`, the vertex count and mesh hash must
    match; with `k`, the cached truncation order must match.
    """
    path = Path(path)
    if not path.exists():
        raise MissingSpectraError(f'No spectra cache at {path}; run precompute first')
    try:
        header, tensors = read_container(path)
    except ContainerError as e:
        raise StaleSpectraError(str(e)) from e

    if header.get('format_version') != FORMAT_VERSION:
        raise StaleSpectraError(f'{path}: cache format {header.get("format_version")} != {FORMAT_VERSION}')
    if mesh is not None:
        if header.get('n_vertices') != mesh.n_vertices or header.get('mesh_hash') != mesh_hash(mesh):
            raise StaleSpectraError(f'{path}: cached spectra do not belong to the current {mesh.name} mesh')
    if k is not None and header.get('k') != k:
        raise StaleSpectraError(f'{path}: cache has k={header.get("k")}, expected k={k}')

    return SpectralOperators.from_basis(
        tensors['phi'], tensors['evals'], tensors['mass'], header.get('mesh_name', path.stem)
    )


def is_fresh(path, mesh, k):
    """True when `path` holds spectra for exactly this mesh at this k."""
    path = Path(path)
    if not path.exists():
        return False
    try:
        header, _ = read_container(path)
    except ContainerError:
        return False
    return (
        header.get('format_version') == FORMAT_VERSION
        and header.get('k') == k
        and header.get('n_vertices') == mesh.n_vertices
        and header.get('mesh_hash') == mesh_hash(mesh)
    )
