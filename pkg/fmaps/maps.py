"""
Soft pointwise maps, functional maps by spectral projection, the alignment
loss, and hard correspondence recovery.

For shapes X and Y with operators (Phi_X, Phi_X^+) and (Phi_Y, Phi_Y^+):

    Pi_XY = softmax_rows(F_X F_Y^T / alpha)          raw dot products
    C_YX  = (Phi_X^+ Pi_XY) Phi_Y                    k x k
    L_align = || Phi_X - Pi_XY Phi_Y C_YX^T ||_F^2

Recovery maps each vertex x to the nearest row of Phi_Y C_YX^T to row x of
Phi_X (exact search, ties to the lowest index).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from scipy.spatial.distance import cdist

from autodiff import engine as ad
from meshes.mesh import Correspondence
from methodmap.registry import implements
from specmatch.containers import write_container
from specmatch.exceptions import ConfigError

logger = logging.getLogger(__name__)

NN_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class SoftMap:
    pi: ad.Node
    alpha: float

    def row_sums(self):
        return self.pi.value.sum(axis=1)


@dataclass(frozen=True, eq=False)
class FunctionalMap:
    c: ad.Node

    @property
    def k(self):
        return self.c.shape[0]

    def numpy(self):
        return self.c.value


def _node(value):
    return ad.as_node(getattr(value, 'values', value))


@implements('soft_map')
def soft_map(features_x, features_y, alpha):
    """Row-softmax of raw feature dot products F_X F_Y^T / alpha."""
    if not alpha > 0:
        raise ConfigError(f'alpha must be > 0, got {alpha}')
    fx, fy = _node(features_x), _node(features_y)
    if fx.shape[1] != fy.shape[1]:
        raise ad.ShapeMismatchError(f'soft_map: feature dims {fx.shape[1]} and {fy.shape[1]} differ')
    logits = ad.scale(ad.matmul(fx, ad.transpose(fy)), 1.0 / alpha)
    return SoftMap(ad.softmax_rows(logits), alpha)


@implements('spectral_projection')
def fmap_from_pmap(soft, ops_x, ops_y):
    """
    C_YX = Phi_X^+ Pi Phi_Y, associated as ((Phi_X^+) Pi) Phi_Y.

    A SoftMap or Node is differentiated through the tape. A plain array is
    projected directly with the precomputed Phi_X^+ = Phi_X^T diag(mass_X),
    without copying Pi.
    """
    if isinstance(soft, np.ndarray):
        if soft.shape != (ops_x.n_vertices, ops_y.n_vertices):
            raise ad.ShapeMismatchError(
                f'fmap_from_pmap: map shape {soft.shape} does not fit '
                f'|V_X|={ops_x.n_vertices}, |V_Y|={ops_y.n_vertices}'
            )
        c = (ops_x.phi_pinv @ soft) @ ops_y.phi
        if not np.isfinite(c).all():
            raise ad.NonFiniteError('fmap_from_pmap: projected map is not finite')
        return FunctionalMap(ad.constant(c))

    pi = soft.pi if isinstance(soft, SoftMap) else ad.as_node(soft)
    if pi.shape != (ops_x.n_vertices, ops_y.n_vertices):
        raise ad.ShapeMismatchError(
            f'fmap_from_pmap: map shape {pi.shape} does not fit |V_X|={ops_x.n_vertices}, |V_Y|={ops_y.n_vertices}'
        )
    return FunctionalMap(ad.right_mul_const(ad.left_mul_const(ops_x.phi_pinv, pi), ops_y.phi))


@implements('alignment')
def align_loss(ops_x, soft, ops_y, fmap):
    """|| Phi_X - Pi Phi_Y C^T ||_F^2 between the soft map and its projected functional map."""
    pi = soft.pi if isinstance(soft, SoftMap) else ad.as_node(soft)
    c = fmap.c if isinstance(fmap, FunctionalMap) else ad.as_node(fmap)
    transported = ad.matmul(ad.right_mul_const(pi, ops_y.phi), ad.transpose(c))
    return ad.frobenius_sq(ad.sub(ad.constant(ops_x.phi), transported))


@implements('total_loss')
def total_loss(cross, self_, align, config):
    """theta_cross * cross + theta_self * self + theta_align * align."""
    weighted = ad.add(ad.scale(cross, config.theta_cross), ad.scale(self_, config.theta_self))
    return ad.add(weighted, ad.scale(align, config.theta_align))


def _nearest(queries, targets):
    return np.argmin(cdist(queries, targets, 'sqeuclidean'), axis=1)


def nearest_rows(queries, targets, threads=None, chunk=NN_CHUNK):
    """Index of the nearest target row for every query row (exact, lowest index on ties)."""
    threads = threads or settings.SPECMATCH_THREADS
    starts = range(0, queries.shape[0], chunk)
    if threads <= 1 or len(starts) == 1:
        parts = [_nearest(queries[s:s + chunk], targets) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: _nearest(queries[s:s + chunk], targets), starts))
    return np.concatenate(parts).astype(np.int64)


@implements('map_recovery')
def recover_pmap(ops_x, ops_y, c_yx, threads=None):
    """Hard map X -> Y: nearest row of Phi_Y C_YX^T for each row of Phi_X."""
    c = np.asarray(c_yx.numpy() if isinstance(c_yx, FunctionalMap) else c_yx, dtype=np.float64)
    if c.shape != (ops_x.k, ops_y.k):
        raise ad.ShapeMismatchError(f'recover_pmap: C shape {c.shape} != ({ops_x.k}, {ops_y.k})')
    aligned = ops_y.phi @ c.T
    mapping = nearest_rows(ops_x.phi, aligned, threads)
    return Correspondence(mapping, ops_x.name, ops_y.name, n_target=ops_y.n_vertices)


def save_fmap(path, c_yx, source_name, target_name):
    c = np.asarray(c_yx.numpy() if isinstance(c_yx, FunctionalMap) else c_yx, dtype=np.float64)
    header = {'format_version': 1, 'kind': 'functional-map', 'source': source_name, 'target': target_name}
    write_container(path, header, {'c_yx': c})
    return path
