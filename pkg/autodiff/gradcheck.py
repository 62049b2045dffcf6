"""
Central finite-difference check of reverse-mode gradients.
"""
import logging

import numpy as np

from .engine import Tape

logger = logging.getLogger(__name__)


def _evaluate(f):
    with Tape():
        return f().item()


def grad_check(f, leaf, n_samples=5, h=1e-5, seed=0):
    """
    Compare backward() against central differences on `n_samples` randomly
    chosen entries of `leaf`.

    `f` is a zero-argument callable that builds the graph from `leaf` (and
    anything else it closes over) and returns a 1x1 root. It must be
    deterministic in the leaf values. Returns the max over sampled entries of
    |fd - ad| / max(1e-8, |fd|, |ad|).
    """
    leaf.zero_grad()
    with Tape() as tape:
        root = f()
    tape.backward(root)
    analytic = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad.copy()
    leaf.zero_grad()

    rng = np.random.default_rng(seed)
    size = leaf.value.size
    samples = rng.choice(size, size=min(n_samples, size), replace=False)

    worst = 0.0
    for flat in samples:
        index = np.unravel_index(flat, leaf.value.shape)
        original = leaf.value[index]
        try:
            leaf.value[index] = original + h
            plus = _evaluate(f)
            leaf.value[index] = original - h
            minus = _evaluate(f)
        finally:
            leaf.value[index] = original
        fd = (plus - minus) / (2.0 * h)
        ad = float(analytic[index])
        error = abs(fd - ad) / max(1e-8, abs(fd), abs(ad))
        logger.debug('entry %s: fd=%.6e ad=%.6e rel=%.2e', index, fd, ad, error)
        worst = max(worst, error)
    return worst
