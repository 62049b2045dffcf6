"""
Wall-clock comparison of the projected functional map against the
regularized solver, plus one training step and nearest-neighbour inference,
on synthetic shapes of several vertex counts.

The two map estimators are timed on their own, from inputs prepared
outside the timed region out of the same per-vertex features:

    fmap_projection   Phi_X^+ Pi Phi_Y for a dense soft map Pi
    baseline_solver   the row-decoupled regularized solve on the
                      spectral coefficients of the features

Projection of a dense Pi costs O(k |V|^2) and the solver O(k^4), so the
ratio depends on both. Each op reports the median over `reps` sequential
repetitions.
"""
import csv
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np

from contrastive.losses import LossConfig
from evaluation.synthetic import synth_pair
from features.network import NetConfig, init_params
from spectral.operators import SpectralConfig, compute_spectra
from spectral.shapes import shape_from_mesh
from specmatch.exceptions import ConfigError
from specmatch.storage import atomic_write
from training.optim import OptimizerState, adam_step
from training.trainer import TrainConfig, pair_gradients
from .baseline import BaselineConfig, baseline_solve_fmap, descriptor_coefficients
from .maps import fmap_from_pmap, recover_pmap, soft_map

logger = logging.getLogger(__name__)

BENCH_HEADER = ['size', 'k', 'op', 'median_ms']
OPS = ('fmap_projection', 'baseline_solver', 'train_step', 'nn_search')
RATIO_OP = 'projection_solver_ratio'
MIN_REPS = 5
# extra descriptor channels beyond k keep A A^T full rank in the solver
EXTRA_DESCRIPTORS = 16


@dataclass(frozen=True)
class BenchRow:
    size: int
    k: int
    op: str
    median_ms: float

    def as_row(self):
        return [self.size, self.k, self.op, format(self.median_ms, '.6g')]


def median_ms(func, reps):
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        func()
        times.append(time.perf_counter() - start)
    return 1e3 * statistics.median(times)


def _features(n_vertices, n_channels, rng):
    return rng.standard_normal((n_vertices, n_channels)) / np.sqrt(n_channels)


def bench_size(size, k, reps, skip_train=False, seed=0, net_config=None, loss_config=None,
               baseline_config=None, train_config=None):
    """Rows for one (vertex count, k) setting."""
    if k >= size - 1:
        raise ConfigError(f'k={k} needs more than {k + 1} vertices, got size {size}')
    net_config = net_config or NetConfig()
    loss_config = loss_config or LossConfig()
    baseline_config = baseline_config or BaselineConfig()
    train_config = train_config or TrainConfig(epochs=1, seed=seed)

    source, target, _ = synth_pair('bumpy_sphere', size, seed=seed, name=f'bench_{size}')
    ops_x = compute_spectra(source, k, seed=seed)
    ops_y = compute_spectra(target, k, seed=seed)
    rng = np.random.default_rng(seed)
    channels = k + EXTRA_DESCRIPTORS
    features_x = _features(source.n_vertices, channels, rng)
    features_y = _features(target.n_vertices, channels, rng)

    pi = soft_map(features_x, features_y, loss_config.alpha).pi.value
    coefficients_x = descriptor_coefficients(ops_x, features_x)
    coefficients_y = descriptor_coefficients(ops_y, features_y)

    def projection():
        return fmap_from_pmap(pi, ops_x, ops_y)

    def solver():
        return baseline_solve_fmap(
            coefficients_x, coefficients_y, ops_x.evals, ops_y.evals, baseline_config.lambda_reg,
        )

    c_yx = projection()
    n = source.n_vertices
    rows = [
        BenchRow(n, k, 'fmap_projection', median_ms(projection, reps)),
        BenchRow(n, k, 'baseline_solver', median_ms(solver, reps)),
    ]

    if not skip_train:
        spectral = SpectralConfig(k=k, n_hks=net_config.in_dim)
        shape_x = shape_from_mesh(source, ops_x, spectral)
        shape_y = shape_from_mesh(target, ops_y, spectral)
        params = init_params(net_config, seed)
        state = OptimizerState.zeros_like(params)

        def train_step():
            _, grads = pair_gradients(params, shape_x, shape_y, loss_config, train_config)
            adam_step(params, grads, state, train_config)

        rows.append(BenchRow(n, k, 'train_step', median_ms(train_step, reps)))

    rows.append(BenchRow(n, k, 'nn_search', median_ms(lambda: recover_pmap(ops_x, ops_y, c_yx, threads=1), reps)))
    rows.append(BenchRow(n, k, RATIO_OP, rows[0].median_ms / rows[1].median_ms))
    logger.info(
        'bench |V|=%d k=%d: projection %.2f ms, solver %.2f ms (ratio %.3g)',
        n, k, rows[0].median_ms, rows[1].median_ms, rows[-1].median_ms,
    )
    return rows


def run_bench(sizes, ks, reps=MIN_REPS, skip_train=False, seed=0, **configs):
    if reps < MIN_REPS:
        raise ConfigError(f'reps must be at least {MIN_REPS}, got {reps}')
    if not sizes or not ks:
        raise ConfigError('bench needs at least one size and one k')
    rows = []
    for size in sizes:
        for k in ks:
            rows.extend(bench_size(size, k, reps, skip_train, seed, **configs))
    return rows


def write_bench_csv(rows, path):
    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(BENCH_HEADER)
        for row in rows:
            writer.writerow(row.as_row())
    return path
