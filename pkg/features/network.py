"""
Learned per-vertex feature extractor.

A reduced diffusion network: a linear lift from the HKS input to `width`
channels, then `n_blocks` residual blocks of

    x <- x + linear2(relu(linear1(diffuse(x))))

where `diffuse` applies per-channel spectral heat diffusion with a learned
time t = softplus(theta) per channel. There is no spatial-gradient branch.
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from autodiff import engine as ad
from autodiff.engine import NonFiniteError
from methodmap.registry import implements
from specmatch.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetConfig:
    in_dim: int = 16
    width: int = 128
    n_blocks: int = 4
    t_min: float = 1e-3
    t_max: float = 1e-1

    def __post_init__(self):
        if self.in_dim < 1 or self.width < 1:
            raise ConfigError(f'network widths must be positive (in_dim={self.in_dim}, width={self.width})')
        if self.n_blocks < 1:
            raise ConfigError(f'network needs at least one block, got n_blocks={self.n_blocks}')
        if not 0 < self.t_min <= self.t_max:
            raise ConfigError(f'diffusion time range needs 0 < t_min <= t_max, got [{self.t_min}, {self.t_max}]')

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: ad.Node
    shape_name: str = 'mesh'

    @property
    def n_vertices(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def numpy(self):
        return self.values.value


def param_shapes(config):
    shapes = OrderedDict()
    shapes['lift.weight'] = (config.in_dim, config.width)
    shapes['lift.bias'] = (1, config.width)
    for b in range(config.n_blocks):
        shapes[f'blocks.{b}.diffusion_time'] = (1, config.width)
        shapes[f'blocks.{b}.linear1.weight'] = (config.width, config.width)
        shapes[f'blocks.{b}.linear1.bias'] = (1, config.width)
        shapes[f'blocks.{b}.linear2.weight'] = (config.width, config.width)
        shapes[f'blocks.{b}.linear2.bias'] = (1, config.width)
    return shapes


class NetParams:
    """Named float64 parameter arrays for one NetConfig, in a fixed order."""

    def __init__(self, config, tensors):
        self.config = config
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f'parameter names do not fit the network config (missing {missing}, extra {extra})')
        self.tensors = OrderedDict()
        for name, shape in expected.items():
            array = np.array(tensors[name], dtype=np.float64, copy=True)
            if array.shape != shape:
                raise ConfigError(f'{name}: expected shape {shape}, got {array.shape}')
            self.tensors[name] = array

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name):
        return self.tensors[name]

    def count(self):
        return int(sum(array.size for array in self.tensors.values()))

    def copy(self):
        return NetParams(self.config, self.tensors)

    def as_leaves(self):
        """Fresh differentiable leaves for one training iteration."""
        return OrderedDict((name, ad.leaf(array, name=name)) for name, array in self.tensors.items())

    def as_constants(self):
        return OrderedDict((name, ad.constant(array, name=name)) for name, array in self.tensors.items())

    def diffusion_times(self):
        return OrderedDict(
            (name, np.logaddexp(0.0, array))
            for name, array in self.tensors.items()
            if name.endswith('diffusion_time')
        )

    def all_finite(self):
        return all(np.isfinite(array).all() for array in self.tensors.values())

    def __str__(self):
        return f'NetParams({self.config.in_dim}->{self.config.width} x{self.config.n_blocks}, {self.count()} params)'


def init_params(config, seed=0):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, log-spaced diffusion times."""
    rng = np.random.default_rng(seed)
    times = np.logspace(np.log10(config.t_min), np.log10(config.t_max), config.width)
    raw_time = np.log(np.expm1(times))[None, :]

    tensors = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith('weight'):
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith('bias'):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = raw_time.copy()
    params = NetParams(config, tensors)
    logger.debug('Initialized %s with seed %d', params, seed)
    return params


def linear(x, weight, bias):
    ones = ad.constant(np.ones((x.shape[0], 1)))
    return ad.add(ad.matmul(x, weight), ad.matmul(ones, bias))


def diffuse(features, ops, times):
    """
    Per-channel heat diffusion: column j <- phi diag(exp(-evals * t_j)) phi^+ F[:, j].

    `times` is a 1 x channels node (or array) of non-negative times.
    """
    times = times if isinstance(times, ad.Node) else ad.constant(times)
    if times.shape != (1, features.shape[1]):
        raise ad.ShapeMismatchError(f'diffuse: times {times.shape} do not fit features {features.shape}')
    decay = ad.exp(ad.matmul(ad.constant(-ops.evals[:, None]), times))
    coefficients = ad.left_mul_const(ops.phi_pinv, features)
    return ad.left_mul_const(ops.phi, ad.hadamard(coefficients, decay))


@implements('features')
def forward(params, hks, ops, shape_name=None):
    """
    Features for one shape. `params` is a NetParams (no gradients) or the
    mapping returned by NetParams.as_leaves().
    """
    if isinstance(params, NetParams):
        config = params.config
        nodes = params.as_constants()
    else:
        nodes = params
        config = None
    name = shape_name or ops.name

    hks = np.asarray(hks, dtype=np.float64)
    if not np.isfinite(hks).all():
        raise NonFiniteError(f'{name}: HKS input is not finite')
    in_dim = nodes['lift.weight'].shape[0]
    if hks.shape != (ops.n_vertices, in_dim):
        raise ad.ShapeMismatchError(f'{name}: HKS shape {hks.shape} != ({ops.n_vertices}, {in_dim})')

    x = linear(ad.constant(hks), nodes['lift.weight'], nodes['lift.bias'])
    n_blocks = config.n_blocks if config else sum(1 for key in nodes if key.endswith('diffusion_time'))
    for b in range(n_blocks):
        prefix = f'blocks.{b}.'
        try:
            times = ad.softplus(nodes[prefix + 'diffusion_time'])
            h = diffuse(x, ops, times)
            h = linear(h, nodes[prefix + 'linear1.weight'], nodes[prefix + 'linear1.bias'])
            h = ad.relu(h)
            h = linear(h, nodes[prefix + 'linear2.weight'], nodes[prefix + 'linear2.bias'])
            x = ad.add(x, h)
        except NonFiniteError as e:
            raise NonFiniteError(f'{name}: block {b}: {e}') from e
    return FeatureMatrix(x, name)
