"""
A mesh bundled with its cached spectra and HKS input, as training, matching
and benchmarking consume it.
"""
import logging
from dataclasses import dataclass

import numpy as np

from meshes.mesh_utils import load_mesh
from .cache import cache_path, is_fresh, load_spectra, save_spectra
from .operators import SpectralOperators, compute_spectra, hks

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Shape:
    mesh: object
    ops: SpectralOperators
    hks: np.ndarray

    @property
    def name(self):
        return self.mesh.name

    @property
    def n_vertices(self):
        return self.mesh.n_vertices


def ensure_spectra(mesh, spectral_config, cache_dir, force=False):
    """
    Return (ops, recomputed). A cache file whose mesh hash and k match is
    reused unless `force`.
    """
    path = cache_path(cache_dir, mesh, spectral_config.k)
    if not force and is_fresh(path, mesh, spectral_config.k):
        return load_spectra(path, mesh=mesh, k=spectral_config.k), False
    ops = compute_spectra(mesh, spectral_config.k, seed=spectral_config.eig_seed)
    save_spectra(path, ops, mesh)
    logger.info('Computed %s', ops)
    return ops, True


def shape_from_mesh(mesh, ops, spectral_config):
    signature = hks(ops, spectral_config.n_hks, scaling=spectral_config.hks_scaling)
    return Shape(mesh, ops, signature)


def load_shape(mesh_path, spectral_config, cache_dir):
    """Load a mesh and its cached spectra; the cache must exist and be fresh."""
    mesh = load_mesh(mesh_path)
    ops = load_spectra(cache_path(cache_dir, mesh, spectral_config.k), mesh=mesh, k=spectral_config.k)
    return shape_from_mesh(mesh, ops, spectral_config)
