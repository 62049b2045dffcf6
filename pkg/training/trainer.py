"""
Unsupervised training over shape pairs.

One iteration takes one pair (X, Y): features for both shapes, the
bidirectional contrastive losses, soft maps and spectral-projection
functional maps in both directions, the alignment loss averaged over the two
directions, the weighted total, backward, gradient clipping and one Adam
step. Every iteration appends one row per pair to metrics.csv.

With parallel_pairs > 1, that many pairs are evaluated on worker threads and
their gradients summed before a single step. Negative sampling then draws
from a shared generator in scheduling order, so runs are not bit-stable.
"""
import csv
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from django.conf import settings

from autodiff import engine as ad
from autodiff.engine import NonFiniteError, Tape
from contrastive.losses import bidirectional_cross, bidirectional_self, make_sampler
from features.checkpoint import save_checkpoint
from features.network import forward, init_params
from fmaps.baseline import BaselineConfig, baseline_losses
from fmaps.maps import align_loss, fmap_from_pmap, soft_map, total_loss
from methodmap.registry import implements
from specmatch.exceptions import ConfigError, NumericalError
from specmatch.storage import atomic_write
from spectral.shapes import load_shape
from .optim import NonFiniteGradientError, OptimizerState, adam_step, clip_by_global_norm

logger = logging.getLogger(__name__)

PAIR_POLICIES = ('all', 'random')
METRICS_HEADER = ['iter', 'pair', 'cross', 'self', 'align', 'total', 'grad_norm']
METRICS_FILE = 'metrics.csv'
FINAL_CHECKPOINT = 'final.ckpt'
SWEEP_HEADER = ['p', 'final_total', 'checkpoint']


class TrainingError(NumericalError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pair_policy: str = 'all'
    pairs_per_epoch: int = None
    max_iterations: int = None
    seed: int = 0
    disable_cross: bool = False
    disable_self: bool = False
    baseline_losses_mode: bool = False
    checkpoint_every: int = 1
    grad_clip: float = 10.0
    parallel_pairs: int = 1

    def __post_init__(self):
        if self.epochs is None:
            raise ConfigError('train.epochs is required')
        if self.epochs < 1:
            raise ConfigError(f'train.epochs must be >= 1, got {self.epochs}')
        if not self.learning_rate > 0:
            raise ConfigError(f'learning_rate must be > 0, got {self.learning_rate}')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f'Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})')
        if not self.eps > 0:
            raise ConfigError(f'eps must be > 0, got {self.eps}')
        if self.pair_policy not in PAIR_POLICIES:
            raise ConfigError(f'pair_policy must be one of {PAIR_POLICIES}, got {self.pair_policy!r}')
        if self.pair_policy == 'random' and not (self.pairs_per_epoch and self.pairs_per_epoch >= 1):
            raise ConfigError('pair_policy "random" needs pairs_per_epoch >= 1')
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError(f'max_iterations must be >= 1, got {self.max_iterations}')
        if self.checkpoint_every < 0:
            raise ConfigError('checkpoint_every must be >= 0 (0 writes only the final checkpoint)')
        if self.grad_clip is not None and self.grad_clip < 0:
            raise ConfigError(f'grad_clip must be >= 0, got {self.grad_clip}')
        if self.parallel_pairs < 1:
            raise ConfigError(f'parallel_pairs must be >= 1, got {self.parallel_pairs}')

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PairLosses:
    cross: ad.Node
    self_: ad.Node
    align: ad.Node
    total: ad.Node

    def values(self):
        return [node.item() for node in (self.cross, self.self_, self.align, self.total)]


@dataclass(frozen=True)
class TrainResult:
    params: object
    final_total: float
    checkpoint: Path
    metrics: Path
    iterations: int


def pair_label(shape_x, shape_y):
    return f'{shape_x.name}|{shape_y.name}'


def _fmt(value):
    return format(float(value), '.17g')


@implements('structural_penalty')
def structural_penalty(c_xy, c_yx, soft, ops_x, ops_y, baseline_config):
    """theta_bi * L_bi + theta_or * L_or for the map C_YX."""
    bijectivity, orthogonality, _ = baseline_losses(c_xy, c_yx, soft, ops_x, ops_y)
    return ad.add(
        ad.scale(bijectivity, baseline_config.theta_bi),
        ad.scale(orthogonality, baseline_config.theta_or),
    )


def pair_losses(nodes, shape_x, shape_y, loss_config, train_config, baseline_config=None, sampler=None):
    """Build the loss graph for one pair from parameter nodes (leaves or constants)."""
    fx = forward(nodes, shape_x.hks, shape_x.ops, shape_x.name)
    fy = forward(nodes, shape_y.hks, shape_y.ops, shape_y.name)
    zero = ad.constant([[0.0]])

    cross = zero if train_config.disable_cross else bidirectional_cross(fx, fy, loss_config, sampler)
    self_ = zero if train_config.disable_self else bidirectional_self(fx, fy, loss_config, sampler)

    pi_xy = soft_map(fx, fy, loss_config.alpha)
    pi_yx = soft_map(fy, fx, loss_config.alpha)
    c_yx = fmap_from_pmap(pi_xy, shape_x.ops, shape_y.ops)
    c_xy = fmap_from_pmap(pi_yx, shape_y.ops, shape_x.ops)
    if train_config.baseline_losses_mode:
        baseline_config = baseline_config or BaselineConfig()
        forward_term = structural_penalty(c_xy, c_yx, pi_xy, shape_x.ops, shape_y.ops, baseline_config)
        backward_term = structural_penalty(c_yx, c_xy, pi_yx, shape_y.ops, shape_x.ops, baseline_config)
    else:
        forward_term = align_loss(shape_x.ops, pi_xy, shape_y.ops, c_yx)
        backward_term = align_loss(shape_y.ops, pi_yx, shape_x.ops, c_xy)
    align = ad.scale(ad.add(forward_term, backward_term), 0.5)

    return PairLosses(cross, self_, align, total_loss(cross, self_, align, loss_config))


def pair_gradients(params, shape_x, shape_y, loss_config, train_config, baseline_config=None, sampler=None):
    """(losses, grads) for one pair; grads is an OrderedDict keyed like params."""
    label = pair_label(shape_x, shape_y)
    leaves = params.as_leaves()
    try:
        with Tape() as tape:
            losses = pair_losses(leaves, shape_x, shape_y, loss_config, train_config, baseline_config, sampler)
        total = losses.total.item()
        if not np.isfinite(total):
            raise TrainingError(f'{label}: total loss is {total}')
        tape.backward(losses.total)
    except NonFiniteError as e:
        logger.error('Non-finite values on pair %s: %s', label, e)
        raise TrainingError(f'{label}: {e}') from e

    grads = OrderedDict(
        (name, leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    )
    return losses, grads


def schedule(n_pairs, config, rng):
    """Pair indices for one epoch."""
    if config.pair_policy == 'random':
        return rng.integers(0, n_pairs, size=config.pairs_per_epoch).tolist()
    return rng.permutation(n_pairs).tolist()


def _check_inputs(pairs, net_config, spectral_config):
    if not pairs:
        raise ConfigError('training needs at least one shape pair')
    for shape_x, shape_y in pairs:
        for shape in (shape_x, shape_y):
            if shape.hks.shape[1] != net_config.in_dim:
                raise ConfigError(
                    f'{shape.name}: {shape.hks.shape[1]} HKS channels but net.in_dim={net_config.in_dim}'
                )
            if shape.ops.k != spectral_config.k:
                raise ConfigError(f'{shape.name}: spectra have k={shape.ops.k}, config asks for {spectral_config.k}')


def _check_diffusion_times(params):
    for name, times in params.diffusion_times().items():
        if not (times > 0).all():
            raise TrainingError(f'{name}: diffusion times must stay positive')


def train(pairs, config, loss_config, net_config, spectral_config, out_dir,
          baseline_config=None, initial_params=None):
    """
    Train on `pairs`, a list of (Shape, Shape). Writes metrics.csv,
    epoch_NNNN.ckpt every `checkpoint_every` epochs and final.ckpt into
    `out_dir`.
    """
    _check_inputs(pairs, net_config, spectral_config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    params = initial_params.copy() if initial_params is not None else init_params(net_config, config.seed)
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    sampler = make_sampler(loss_config, config.seed)
    workers = min(config.parallel_pairs, settings.SPECMATCH_THREADS)
    logger.info(
        'Training %s on %d pairs for %d epochs (lr=%g, seed=%d)',
        params, len(pairs), config.epochs, config.learning_rate, config.seed,
    )

    def evaluate(index):
        shape_x, shape_y = pairs[index]
        return pair_gradients(params, shape_x, shape_y, loss_config, config, baseline_config, sampler)

    iteration = 0
    last_total = float('nan')
    final_epoch = 0
    metrics_path = out_dir / METRICS_FILE
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and config.parallel_pairs > 1 else None
    try:
        with atomic_write(metrics_path) as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(METRICS_HEADER)
            done = False
            for epoch in range(1, config.epochs + 1):
                order = schedule(len(pairs), config, rng)
                totals = []
                for start in range(0, len(order), config.parallel_pairs):
                    if config.max_iterations and iteration >= config.max_iterations:
                        done = True
                        break
                    batch = order[start:start + config.parallel_pairs]
                    results = list(pool.map(evaluate, batch)) if pool else [evaluate(i) for i in batch]
                    iteration += 1

                    grads = results[0][1]
                    for _, extra in results[1:]:
                        grads = OrderedDict((name, grads[name] + extra[name]) for name in grads)
                    grads, norm = clip_by_global_norm(grads, config.grad_clip)

                    labels = [pair_label(*pairs[i]) for i in batch]
                    for label, (losses, _) in zip(labels, results):
                        writer.writerow([iteration, label] + [_fmt(v) for v in losses.values()] + [_fmt(norm)])
                        totals.append(losses.total.item())
                    try:
                        adam_step(params, grads, state, config)
                    except NonFiniteGradientError as e:
                        logger.error('Iteration %d (%s): %s', iteration, ', '.join(labels), e)
                        raise TrainingError(f'iteration {iteration} ({", ".join(labels)}): {e}') from e
                    _check_diffusion_times(params)
                    logger.debug('iter %d %s total=%.6g grad_norm=%.3g', iteration, labels, totals[-1], norm)

                if totals:
                    final_epoch = epoch
                    last_total = totals[-1]
                    logger.info('Epoch %d: %d iterations, mean total %.6g', epoch, len(totals), np.mean(totals))
                if config.checkpoint_every and epoch % config.checkpoint_every == 0 and not done:
                    save_checkpoint(out_dir / f'epoch_{epoch:04d}.ckpt', params, spectral_config, config.seed, epoch)
                if done:
                    break
            final = save_checkpoint(out_dir / FINAL_CHECKPOINT, params, spectral_config, config.seed, final_epoch)
    finally:
        if pool:
            pool.shutdown()

    logger.info('Finished after %d iterations; final total %.6g', iteration, last_total)
    return TrainResult(params, last_total, final, metrics_path, iteration)


def train_sweep(pairs, config, loss_config, net_config, spectral_config, out_dir, p_values,
                baseline_config=None):
    """
    One training per p (p_c = p_s = p, temperatures tied) into <out>/p_<p>/,
    plus sweep.csv with the final total and checkpoint of each run.
    """
    if not p_values:
        raise ConfigError('sweep.p_values is empty')
    out_dir = Path(out_dir)
    results = []
    for p in p_values:
        tied = replace(loss_config, p_c=p, p_s=p, tie_p=True)
        result = train(pairs, config, tied, net_config, spectral_config, out_dir / f'p_{p}', baseline_config)
        results.append((p, result))

    with atomic_write(out_dir / 'sweep.csv') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(SWEEP_HEADER)
        for p, result in results:
            writer.writerow([p, _fmt(result.final_total), result.checkpoint.relative_to(out_dir).as_posix()])
    return results


def load_training_pairs(manifest, spectral_config, cache_dir):
    """Shapes for every manifest pair, each distinct mesh loaded once."""
    shapes = {path: load_shape(path, spectral_config, cache_dir) for path in manifest.mesh_paths()}
    return [(shapes[entry.source], shapes[entry.target]) for entry in manifest.pairs]
