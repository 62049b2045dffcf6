"""
Bias-corrected Adam over NetParams.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from autodiff.engine import ShapeMismatchError
from methodmap.registry import implements
from specmatch.exceptions import NumericalError

logger = logging.getLogger(__name__)


class NonFiniteGradientError(NumericalError):
    def __init__(self, message, parameter):
        super().__init__(message)
        self.parameter = parameter


@dataclass
class OptimizerState:
    first: OrderedDict
    second: OrderedDict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        named = _named(params)
        first = OrderedDict((name, np.zeros_like(array)) for name, array in named)
        second = OrderedDict((name, np.zeros_like(array)) for name, array in named)
        return cls(first, second, 0)


def _named(params):
    """(name, array) pairs of a NetParams or a plain mapping."""
    return list(params) if hasattr(params, 'tensors') else list(params.items())


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    """Return (clipped grads, norm before clipping). A falsy max_norm disables clipping."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = OrderedDict((name, g * factor) for name, g in grads.items())
    return grads, norm


@implements('optimizer')
def adam_step(params, grads, state, config):
    """
    One Adam update of `params` in place. `config` supplies learning_rate,
    beta1, beta2 and eps. Every parameter must have a gradient of its shape.
    """
    named = _named(params)
    for name, array in named:
        grad = grads.get(name)
        if grad is None or grad.shape != array.shape:
            raise ShapeMismatchError(f'{name}: gradient shape {None if grad is None else grad.shape} != {array.shape}')
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(f'non-finite gradient for parameter {name}', name)

    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, array in named:
        grad = grads[name]
        m = state.first[name]
        v = state.second[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        array -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return params, state
