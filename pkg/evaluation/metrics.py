"""
Geodesic correspondence error, normalized by the square root of the target's
surface area.
"""
import logging
import math

import numpy as np

from meshes.mesh import CorrespondenceError
from methodmap.registry import implements
from specmatch.exceptions import ConfigError

logger = logging.getLogger(__name__)

PCK_THRESHOLDS = (0.01, 0.05, 0.10)


def normalized_errors(pred, gt, table, area):
    """dist(pred(x), gt(x)) / sqrt(area) per source vertex."""
    if len(pred) != len(gt):
        raise CorrespondenceError(f'prediction has {len(pred)} entries, ground truth {len(gt)}')
    p, g = pred.source_to_target, gt.source_to_target
    if max(p.max(initial=0), g.max(initial=0)) >= table.n_vertices:
        raise CorrespondenceError(f'target index outside the {table.n_vertices}-vertex geodesic table')
    if not area > 0:
        raise ConfigError(f'target area must be positive, got {area}')
    return table.dist[p, g] / math.sqrt(area)


@implements('geodesic_error')
def mean_geo_error(pred, gt, table, area):
    """Mean normalized geodesic error, times 100."""
    return 100.0 * float(np.mean(normalized_errors(pred, gt, table, area)))


def pck_curve(pred, gt, table, area, thresholds=PCK_THRESHOLDS):
    """[(threshold, fraction of vertices with normalized error <= threshold)]."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError(f'PCK thresholds must be ascending, got {thresholds}')
    errors = normalized_errors(pred, gt, table, area)
    return [(t, float(np.mean(errors <= t))) for t in thresholds]
