"""
Registry tying each step of the matching method to the function that
implements it. `docs/method_map.md` is generated from it, and generation fails
when an in-scope step has no implementation or more than one.

Every step carries the formula it computes and a status:

    method      on the default training or inference path
    baseline    classical functional-map machinery kept for comparison
    ablation    used only by an ablation switch of the trainer
    evaluation  scoring of predicted maps
"""
import importlib
import inspect
import logging
from collections import OrderedDict, namedtuple

from specmatch.exceptions import ConfigError

logger = logging.getLogger(__name__)

STATUSES = ('method', 'baseline', 'ablation', 'evaluation')

MethodStep = namedtuple('MethodStep', ['description', 'formula', 'status'])

IN_SCOPE = OrderedDict([
    ('operators', MethodStep(
        'Cotangent Laplacian, lumped mass and truncated eigenbasis per shape',
        'L phi_i = lambda_i M phi_i, Phi^+ = Phi^T M', 'method')),
    ('hks', MethodStep(
        'Heat kernel signature input descriptor',
        'HKS(x, t) = sum_i exp(-lambda_i t) phi_i(x)^2', 'method')),
    ('features', MethodStep(
        'Learned per-vertex features by spectral diffusion blocks',
        'F = F_theta(HKS)', 'method')),
    ('similarity_split', MethodStep(
        'Hybrid similarity generation: top-p positives, remaining negatives',
        'S = norm(F_X) norm(F_Y)^T, top-p per row', 'method')),
    ('cross_contrastive', MethodStep(
        'Cross-contrastive loss between the two shapes',
        'L_cross over S_XY / tau_c', 'method')),
    ('self_contrastive', MethodStep(
        'Self-contrastive loss within one shape',
        'L_self over S_XX / tau_s', 'method')),
    ('soft_map', MethodStep(
        'Soft pointwise map from feature dot products',
        'Pi_XY = softmax(F_X F_Y^T / alpha)', 'method')),
    ('spectral_projection', MethodStep(
        'Functional map by spectral projection of the soft map',
        'C_YX = Phi_X^+ Pi_XY Phi_Y', 'method')),
    ('alignment', MethodStep(
        'Alignment loss between soft map and functional map',
        'L_align = \\|\\|Phi_X - Pi_XY Phi_Y C_YX^T\\|\\|_F^2', 'method')),
    ('total_loss', MethodStep(
        'Weighted total loss',
        'theta_cross L_cross + theta_self L_self + theta_align L_align', 'method')),
    ('map_recovery', MethodStep(
        'Pointwise map recovery by nearest neighbours in the aligned basis',
        'T(x) = argmin_y \\|\\|Phi_X[x] - (Phi_Y C_YX^T)[y]\\|\\|', 'method')),
    ('optimizer', MethodStep(
        'Adam parameter update',
        'bias-corrected Adam, lr 1e-3', 'method')),
    ('solver_fmap', MethodStep(
        'Regularized least-squares functional map',
        '\\|\\|C A - B\\|\\|^2 + lambda sum_ij C_ij^2 (lambda^X_i - lambda^Y_j)^2', 'baseline')),
    ('structural_losses', MethodStep(
        'Bijectivity, orthogonality and coupling losses',
        'L_bi, L_or, L_co = \\|\\|C_YX - Phi_X^+ Pi_XY Phi_Y\\|\\|^2', 'baseline')),
    ('structural_penalty', MethodStep(
        'Functional-map penalty replacing the alignment loss',
        'L_fmap = theta_bi L_bi + theta_or L_or', 'ablation')),
    ('geodesic_error', MethodStep(
        'Mean geodesic error normalized by sqrt(area)',
        '(100 / \\|V_X\\|) sum_x d(T(x), T*(x)) / sqrt(area)', 'evaluation')),
])

# modules whose import registers the implementations
IMPLEMENTING_MODULES = [
    'spectral.operators',
    'features.network',
    'contrastive.losses',
    'fmaps.maps',
    'fmaps.baseline',
    'training.optim',
    'training.trainer',
    'evaluation.metrics',
]

REGISTRY = OrderedDict()


class UnregisteredStepError(ConfigError):
    pass


class DuplicateStepError(ConfigError):
    pass


def implements(step):
    """Mark the decorated function as the implementation of `step`."""
    if step not in IN_SCOPE:
        raise UnregisteredStepError(f'{step!r} is not a known method step')

    def register(func):
        target = f'{func.__module__}.{func.__qualname__}'
        existing = REGISTRY.get(step)
        if existing is not None and existing is not func and _target(existing) != target:
            raise DuplicateStepError(f'{step!r} is implemented by both {_target(existing)} and {target}')
        REGISTRY[step] = func
        return func
    return register


def _target(func):
    return f'{func.__module__}.{func.__qualname__}'


def load_implementations():
    for name in IMPLEMENTING_MODULES:
        importlib.import_module(name)
    return REGISTRY


def _summary(func):
    """First sentence of the docstring's first paragraph."""
    doc = inspect.getdoc(func) or ''
    paragraph = ' '.join(line.strip() for line in doc.split('\n\n')[0].splitlines())
    sentence = paragraph.split('. ')[0].rstrip('.:')
    return sentence.replace('|', '\\|')


def generate_method_map(registry=None):
    """Markdown table of method steps and implementing functions."""
    registry = load_implementations() if registry is None else registry
    missing = [step for step in IN_SCOPE if step not in registry]
    if missing:
        raise UnregisteredStepError(f'method steps without an implementation: {", ".join(missing)}')

    lines = [
        '# Method map',
        '',
        'Generated by `python manage.py methodmap` from `methodmap/registry.py`; do not edit by hand.',
        '',
        '| step | description | formula | status | implementation | notes |',
        '|------|-------------|---------|--------|----------------|-------|',
    ]
    for step, entry in IN_SCOPE.items():
        func = registry[step]
        lines.append(
            f'| `{step}` | {entry.description} | {entry.formula} | {entry.status} '
            f'| `{_target(func)}` | {_summary(func)} |'
        )
    logger.debug('Method map covers %d steps', len(IN_SCOPE))
    return '\n'.join(lines) + '\n'
