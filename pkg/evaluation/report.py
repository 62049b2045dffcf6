"""
Evaluation of predicted correspondences listed in a pair manifest: one CSV
row per pair plus an aggregate row, and an optional SVG plot of the PCK
curves.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib as mpl
mpl.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from meshes.mesh_utils import load_correspondence, load_mesh, total_area  # noqa: E402
from specmatch.exceptions import DataError  # noqa: E402
from specmatch.storage import atomic_write  # noqa: E402
from .geodesics import geodesic_table  # noqa: E402
from .manifest import prediction_filename  # noqa: E402
from .metrics import PCK_THRESHOLDS, mean_geo_error, pck_curve  # noqa: E402

logger = logging.getLogger(__name__)

AGGREGATE_LABEL = 'mean'
PLOT_THRESHOLDS = np.linspace(0.0, 0.25, 51)

mpl.rcParams.update({
    'svg.hashsalt': 'specmatch',
    'axes.spines.top': False,
    'axes.spines.right': False,
    'font.size': 9,
})


class MissingPredictionError(DataError):
    pass


@dataclass(frozen=True)
class PairReport:
    pair: str
    mean_error: float
    pck: tuple
    curve: tuple


def report_header(thresholds=PCK_THRESHOLDS):
    return ['pair', 'mean_geo_error_x100'] + [f'pck@{t:.2f}' for t in thresholds]


def check_predictions(manifest, predictions_dir):
    """Every manifest pair needs a prediction file; raised before any work."""
    predictions_dir = Path(predictions_dir)
    missing = [prediction_filename(e) for e in manifest.pairs if not (predictions_dir / prediction_filename(e)).exists()]
    if missing:
        raise MissingPredictionError(f'{predictions_dir}: missing predictions {missing[:5]}')


def evaluate_manifest(manifest, predictions_dir, thresholds=PCK_THRESHOLDS, threads=None):
    check_predictions(manifest, predictions_dir)
    predictions_dir = Path(predictions_dir)
    meshes = {}
    tables = {}
    reports = []
    for entry in manifest.pairs:
        for path in (entry.source, entry.target):
            if path not in meshes:
                meshes[path] = load_mesh(path)
        source, target = meshes[entry.source], meshes[entry.target]
        if entry.target not in tables:
            tables[entry.target] = geodesic_table(target, threads)

        gt = load_correspondence(entry.gt, source.n_vertices, target.n_vertices, source.name, target.name)
        pred = load_correspondence(
            predictions_dir / prediction_filename(entry), source.n_vertices, target.n_vertices,
            source.name, target.name,
        )
        area = total_area(target)
        table = tables[entry.target]
        report = PairReport(
            entry.label,
            mean_geo_error(pred, gt, table, area),
            tuple(pck_curve(pred, gt, table, area, thresholds)),
            tuple(pck_curve(pred, gt, table, area, PLOT_THRESHOLDS)),
        )
        logger.info('%s: mean geodesic error x100 = %.4f', report.pair, report.mean_error)
        reports.append(report)
    return reports


def _fmt(value):
    return format(float(value), '.17g')


def aggregate(reports):
    """(mean error, mean PCK per threshold) over pairs."""
    mean_error = float(np.mean([r.mean_error for r in reports]))
    fractions = np.mean([[f for _, f in r.pck] for r in reports], axis=0)
    return mean_error, [float(f) for f in fractions]


def write_report(reports, path, thresholds=PCK_THRESHOLDS):
    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(report_header(thresholds))
        for r in reports:
            writer.writerow([r.pair, _fmt(r.mean_error)] + [_fmt(f) for _, f in r.pck])
        mean_error, fractions = aggregate(reports)
        writer.writerow([AGGREGATE_LABEL, _fmt(mean_error)] + [_fmt(f) for f in fractions])
    return Path(path)


def write_pck_plot(reports, path):
    """Static SVG: one thin line per pair and the mean curve on top."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    try:
        curves = np.array([[f for _, f in r.curve] for r in reports])
        for curve in curves:
            ax.plot(PLOT_THRESHOLDS, curve, color='0.75', linewidth=0.6)
        ax.plot(PLOT_THRESHOLDS, curves.mean(axis=0), color='C0', linewidth=1.8, label=f'mean of {len(reports)} pairs')
        ax.set_xlabel('normalized geodesic error')
        ax.set_ylabel('fraction of correspondences')
        ax.set_xlim(0.0, PLOT_THRESHOLDS[-1])
        ax.set_ylim(0.0, 1.01)
        ax.legend(loc='lower right', frameon=False)
        fig.tight_layout()
        with atomic_write(path) as fh:
            fig.savefig(fh, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)
    return Path(path)
