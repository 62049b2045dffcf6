"""
Inference with a trained network: features, projected functional map and
nearest-neighbour map recovery for one pair of shapes.
"""
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass

from features.checkpoint import CheckpointMismatchError
from features.network import forward
from meshes.mesh_utils import load_mesh
from spectral.cache import MissingSpectraError, cache_path, cached_orders
from spectral.shapes import load_shape
from .maps import fmap_from_pmap, recover_pmap, soft_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchResult:
    correspondence: object
    fmap: object
    timings: OrderedDict

    @property
    def total_seconds(self):
        return sum(self.timings.values())


def match_shapes(params, shape_x, shape_y, alpha, threads=None):
    """Hard map X -> Y from a trained network, with per-stage wall-clock seconds."""
    timings = OrderedDict()

    start = time.perf_counter()
    features_x = forward(params, shape_x.hks, shape_x.ops, shape_x.name)
    features_y = forward(params, shape_y.hks, shape_y.ops, shape_y.name)
    timings['features'] = time.perf_counter() - start

    start = time.perf_counter()
    fmap = fmap_from_pmap(soft_map(features_x, features_y, alpha), shape_x.ops, shape_y.ops)
    timings['fmap'] = time.perf_counter() - start

    start = time.perf_counter()
    correspondence = recover_pmap(shape_x.ops, shape_y.ops, fmap, threads)
    timings['nn'] = time.perf_counter() - start

    logger.info(
        'Matched %s -> %s in %.3fs (features %.3fs, fmap %.3fs, nn %.3fs)',
        shape_x.name, shape_y.name, sum(timings.values()), *timings.values(),
    )
    return MatchResult(correspondence, fmap, timings)


def load_shape_for_checkpoint(mesh_path, spectral_config, cache_dir):
    """
    Like load_shape, but a cache missing at the checkpoint's k while present at
    other orders is reported as a checkpoint mismatch.
    """
    try:
        return load_shape(mesh_path, spectral_config, cache_dir)
    except MissingSpectraError:
        mesh = load_mesh(mesh_path)
        orders = cached_orders(cache_dir, mesh)
        if orders:
            raise CheckpointMismatchError(
                f'checkpoint expects k={spectral_config.k} but {mesh.name} is cached only at '
                f'k={", ".join(map(str, orders))} ({cache_path(cache_dir, mesh, spectral_config.k)} missing)'
            )
        raise
