"""
Finite-difference checks of every loss pipeline the trainer differentiates.

Each pipeline builds small random inputs from a seed and returns
(objective, leaves): `objective` is a zero-argument callable producing the
1x1 loss from `leaves`. `run_gradchecks` checks every leaf and reports the
worst relative error per pipeline.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from autodiff import engine as ad
from autodiff.gradcheck import grad_check
from contrastive.losses import LossConfig, cosine_similarity, cross_loss, self_loss, split_similarity
from features.network import NetConfig, init_params
from fmaps.maps import align_loss, fmap_from_pmap, soft_map
from meshes.primitives import uv_sphere
from spectral.operators import SpectralConfig, compute_spectra
from spectral.shapes import shape_from_mesh
from specmatch.exceptions import ConfigError
from .trainer import TrainConfig, pair_losses

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
PIPELINES = OrderedDict()


def pipeline(name):
    def register(builder):
        PIPELINES[name] = builder
        return builder
    return register


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_error: float
    n_samples: int
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def _bumped(theta, phi):
    return 1.0 + 0.15 * np.cos(theta) ** 2 + 0.1 * np.sin(theta) * np.cos(phi)


def toy_pair(k=10, n_hks=4):
    """Two 30-vertex shapes: a unit UV sphere and a bumped copy of its grid."""
    config = SpectralConfig(k=k, n_hks=n_hks)
    shapes = []
    for mesh in (uv_sphere(4, 7, name='toy_x'), uv_sphere(4, 7, radius_fn=_bumped, name='toy_y')):
        shapes.append(shape_from_mesh(mesh, compute_spectra(mesh, k), config))
    return shapes


@pipeline('cross_loss')
def cross_pipeline(rng):
    fx = ad.leaf(rng.standard_normal((30, 8)), name='features_x')
    fy = ad.constant(rng.standard_normal((26, 8)))
    return (lambda: cross_loss(split_similarity(cosine_similarity(fx, fy), 3), 1.0)), [fx]


@pipeline('self_loss')
def self_pipeline(rng):
    f = ad.leaf(rng.standard_normal((30, 8)), name='features')
    return (lambda: self_loss(f, 3, 1.0)), [f]


@pipeline('align_loss')
def align_pipeline(rng):
    shape_x, shape_y = toy_pair()
    fx = ad.leaf(0.3 * rng.standard_normal((30, 6)), name='features_x')
    fy = ad.leaf(0.3 * rng.standard_normal((30, 6)), name='features_y')

    def objective():
        pi = soft_map(fx, fy, 0.5)
        return align_loss(shape_x.ops, pi, shape_y.ops, fmap_from_pmap(pi, shape_x.ops, shape_y.ops))

    return objective, [fx, fy]


@pipeline('total_loss')
def total_pipeline(rng):
    shape_x, shape_y = toy_pair()
    params = init_params(NetConfig(in_dim=4, width=8, n_blocks=2), seed=int(rng.integers(1 << 31)))
    leaves = params.as_leaves()
    loss_config = LossConfig(p_c=3, p_s=3, alpha=0.5)
    train_config = TrainConfig(epochs=1)

    def objective():
        return pair_losses(leaves, shape_x, shape_y, loss_config, train_config).total

    checked = [leaves['lift.weight'], leaves['blocks.0.diffusion_time'], leaves['blocks.1.linear2.weight']]
    return objective, checked


def run_gradchecks(names=None, n_samples=5, seed=0, tolerance=TOLERANCE):
    results = []
    for name in names or PIPELINES:
        if name not in PIPELINES:
            raise ConfigError(f'unknown gradcheck pipeline {name!r} (known: {", ".join(PIPELINES)})')
        objective, leaves = PIPELINES[name](np.random.default_rng(seed))
        worst = 0.0
        for index, node in enumerate(leaves):
            worst = max(worst, grad_check(objective, node, n_samples=n_samples, seed=seed + index))
        result = GradCheckResult(name, worst, n_samples * len(leaves), tolerance)
        logger.info('gradcheck %s: max relative error %.3e', name, worst)
        results.append(result)
    return results
