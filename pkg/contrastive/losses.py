"""
Hybrid similarity generation and the cross-/self-contrastive losses.

The similarity between two feature sets is the cosine matrix S. Each row's
top-p entries are its positives; every other entry of the row is a negative
unless a negative sampler thins them out. The selection is a constant for
differentiation: gradients flow only through the selected values.

    cross:  mean_i [ -mean(top-p_c of S_i) / tau_c + logsumexp_{j in neg(i)} S_ij / tau_c ]
    self:   mean_i   logsumexp_{j in neg(i)} S_XX_ij / tau_s

The self-similarity diagonal is not masked; s_ii = 1 lands among the
positives on its own.
"""
import logging
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np

from autodiff import engine as ad
from methodmap.registry import implements
from specmatch.exceptions import ConfigError, NumericalError

logger = logging.getLogger(__name__)

NEGATIVE_SAMPLING = ('none', 'uniform')


class PositiveCountError(ConfigError):
    pass


class ZeroFeatureError(NumericalError):
    pass


@dataclass(frozen=True)
class LossConfig:
    p_c: int = 30
    p_s: int = 30
    tau_c: float = 1.0
    tau_s: float = 1.0
    theta_cross: float = 1.0
    theta_self: float = 0.1
    theta_align: float = 1.0
    alpha: float = 0.07
    negative_sampling: str = 'none'
    n_negatives: int = None
    tie_p: bool = False

    def __post_init__(self):
        if self.p_c < 1 or self.p_s < 1:
            raise ConfigError(f'positive counts must be >= 1 (p_c={self.p_c}, p_s={self.p_s})')
        if not (self.tau_c > 0 and self.tau_s > 0):
            raise ConfigError(f'temperatures must be > 0 (tau_c={self.tau_c}, tau_s={self.tau_s})')
        if min(self.theta_cross, self.theta_self, self.theta_align) < 0:
            raise ConfigError('loss weights must be non-negative')
        if not self.alpha > 0:
            raise ConfigError(f'soft-map temperature alpha must be > 0, got {self.alpha}')
        if self.negative_sampling not in NEGATIVE_SAMPLING:
            raise ConfigError(f'negative_sampling must be one of {NEGATIVE_SAMPLING}, got {self.negative_sampling!r}')
        if self.negative_sampling == 'uniform' and not (self.n_negatives and self.n_negatives >= 1):
            raise ConfigError('uniform negative sampling needs n_negatives >= 1')
        if self.tie_p and (self.p_c != self.p_s or self.tau_c != self.tau_s):
            raise ConfigError('tie_p requires p_c == p_s and tau_c == tau_s')

    def with_p(self, p):
        """Same config with p_c = p_s = p."""
        return replace(self, p_c=p, p_s=p)

    def as_dict(self):
        return asdict(self)


class UniformNegativeSampler:
    """Keep `n_negatives` uniformly chosen negatives per row (all of them if fewer)."""

    def __init__(self, n_negatives, seed=0):
        self.n_negatives = n_negatives
        self.rng = np.random.default_rng(seed)

    def __call__(self, mask):
        keys = self.rng.random(mask.shape)
        if self.n_negatives >= mask.sum(axis=1).min():
            return mask
        keys[~mask] = np.inf
        keep = np.argpartition(keys, self.n_negatives - 1, axis=1)[:, :self.n_negatives]
        thinned = np.zeros_like(mask)
        np.put_along_axis(thinned, keep, True, axis=1)
        return thinned


def make_sampler(config, seed=0):
    if config.negative_sampling == 'uniform':
        return UniformNegativeSampler(config.n_negatives, seed)
    return None


@dataclass(frozen=True, eq=False)
class SimilaritySplit:
    sim: ad.Node
    positive_idx: np.ndarray
    p: int
    sampler: object = None

    @cached_property
    def negative_mask(self):
        """Boolean complement of the positives, optionally thinned by the sampler."""
        mask = np.ones(self.sim.shape, dtype=bool)
        np.put_along_axis(mask, self.positive_idx, False, axis=1)
        if self.sampler is not None:
            mask = self.sampler(mask)
        return mask


def _values(features):
    return getattr(features, 'values', features)


def cosine_similarity(features_x, features_y, eps=1e-12):
    """S = normalize_rows(F_X) normalize_rows(F_Y)^T. With eps=None a zero row is an error."""
    fx = ad.as_node(_values(features_x))
    fy = ad.as_node(_values(features_y))
    if fx.shape[1] != fy.shape[1]:
        raise ad.ShapeMismatchError(f'cosine_similarity: feature dims {fx.shape[1]} and {fy.shape[1]} differ')
    if eps is None:
        for label, node in (('X', fx), ('Y', fy)):
            zero = np.flatnonzero(~np.any(node.value != 0.0, axis=1))
            if zero.size:
                raise ZeroFeatureError(f'cosine_similarity: rows {zero[:10].tolist()} of {label} are all zero')
        eps = np.finfo(np.float64).tiny
    nx = ad.row_l2_normalize(fx, eps)
    ny = nx if fy is fx else ad.row_l2_normalize(fy, eps)
    return ad.matmul(nx, ad.transpose(ny))


@implements('similarity_split')
def split_similarity(sim, p, sampler=None):
    """Per-row top-p positives (ties to the lower column) and the negative complement."""
    n_cols = sim.shape[1]
    if p >= n_cols:
        raise PositiveCountError(f'p={p} leaves no negatives in rows of length {n_cols}')
    if p < 1:
        raise PositiveCountError(f'p must be >= 1, got {p}')
    return SimilaritySplit(sim, ad.topk_indices(sim.value, p), p, sampler)


@implements('cross_contrastive')
def cross_loss(split, tau_c):
    """Top-p positives pulled in, remaining similarities pushed out by logsumexp, averaged over rows."""
    n_rows = split.sim.shape[0]
    positive = ad.mean_topk_rows(split.sim, split.p, split.positive_idx)
    negative = ad.logsumexp_rows_masked(ad.scale(split.sim, 1.0 / tau_c), split.negative_mask)
    per_row = ad.sub(negative, ad.scale(positive, 1.0 / tau_c))
    return ad.scale(ad.sum(per_row), 1.0 / n_rows)


@implements('self_contrastive')
def self_loss(features, p_s, tau_s, sampler=None):
    """Within-shape term: logsumexp of S_XX / tau_s over each row's negatives, averaged over rows."""
    sim = cosine_similarity(features, features)
    split = split_similarity(sim, p_s, sampler)
    negative = ad.logsumexp_rows_masked(ad.scale(sim, 1.0 / tau_s), split.negative_mask)
    return ad.scale(ad.sum(negative), 1.0 / sim.shape[0])


def bidirectional_cross(features_x, features_y, config, sampler=None):
    """Cross loss averaged over the X->Y and Y->X directions."""
    sim = cosine_similarity(features_x, features_y)
    forward_loss = cross_loss(split_similarity(sim, config.p_c, sampler), config.tau_c)
    backward_loss = cross_loss(split_similarity(ad.transpose(sim), config.p_c, sampler), config.tau_c)
    return ad.scale(ad.add(forward_loss, backward_loss), 0.5)


def bidirectional_self(features_x, features_y, config, sampler=None):
    self_x = self_loss(features_x, config.p_s, config.tau_s, sampler)
    self_y = self_loss(features_y, config.p_s, config.tau_s, sampler)
    return ad.scale(ad.add(self_x, self_y), 0.5)


def bidirectional_contrastive(features_x, features_y, config, sampler=None):
    """
    (cross, self) for a shape pair: the cross loss averaged over both
    directions and the self loss averaged over both shapes.
    """
    return (
        bidirectional_cross(features_x, features_y, config, sampler),
        bidirectional_self(features_x, features_y, config, sampler),
    )
