"""
Classical functional-map machinery, kept for comparison and ablations.

The regularized solver minimizes

    || C A - B ||_F^2 + lambda_reg * sum_ij C_ij^2 (evals_x[i] - evals_y[j])^2

with A = Phi_Y^+ F_Y and B = Phi_X^+ F_X. The commutativity mask is diagonal
per row of C, so row i solves (A A^T + lambda_reg D_i) c_i = A B_i^T.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from autodiff import engine as ad
from methodmap.registry import implements
from specmatch.exceptions import ConfigError, NumericalError
from .maps import fmap_from_pmap

logger = logging.getLogger(__name__)

ILL_CONDITIONED = 1e10
SINGULAR = 1e14


class SingularSystemError(NumericalError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    lambda_reg: float = 1e-3
    theta_bi: float = 1.0
    theta_or: float = 1.0

    def __post_init__(self):
        if min(self.lambda_reg, self.theta_bi, self.theta_or) < 0:
            raise ConfigError('baseline weights must be non-negative')

    def as_dict(self):
        return asdict(self)


def descriptor_coefficients(ops, descriptors):
    """Spectral coefficients Phi^+ F of per-vertex descriptors."""
    return ops.project(np.asarray(descriptors, dtype=np.float64))


@implements('solver_fmap')
def baseline_solve_fmap(desc_x, desc_y, evals_x, evals_y, lambda_reg):
    """
    Row-decoupled regularized least squares for C_YX (k_x x k_y).

    Systems whose condition number exceeds ILL_CONDITIONED are solved with
    lstsq instead of a Cholesky factor, with a warning. A rank-deficient
    A A^T with lambda_reg == 0 raises SingularSystemError.
    """
    b = np.asarray(desc_x, dtype=np.float64)
    a = np.asarray(desc_y, dtype=np.float64)
    evals_x = np.asarray(evals_x, dtype=np.float64)
    evals_y = np.asarray(evals_y, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ad.ShapeMismatchError(f'descriptor counts differ: {a.shape} vs {b.shape}')
    if a.shape[0] != evals_y.shape[0] or b.shape[0] != evals_x.shape[0]:
        raise ad.ShapeMismatchError('descriptor coefficient rows must match the eigenvalue counts')

    gram = a @ a.T
    rhs = b @ a.T
    if lambda_reg == 0:
        return _solve_shared(gram, rhs, a, b)

    penalty = (evals_x[:, None] - evals_y[None, :]) ** 2
    c = np.empty((b.shape[0], a.shape[0]))
    for i in range(b.shape[0]):
        system = gram + lambda_reg * np.diag(penalty[i])
        try:
            factor = cho_factor(system, lower=True, check_finite=False)
        except LinAlgError as e:
            raise SingularSystemError(f'row {i}: system is not positive definite (lambda_reg={lambda_reg})') from e
        pivots = np.abs(np.diag(factor[0]))
        if (pivots.max() / pivots.min()) ** 2 > ILL_CONDITIONED:
            logger.warning('Row %d: ill-conditioned system (lambda_reg=%g), solving with lstsq', i, lambda_reg)
            c[i] = np.linalg.lstsq(system, rhs[i], rcond=None)[0]
        else:
            c[i] = cho_solve(factor, rhs[i], check_finite=False)
    if not np.isfinite(c).all():
        raise SingularSystemError('functional map solve produced non-finite entries')
    return c


def _solve_shared(gram, rhs, a, b):
    """lambda_reg == 0: every row shares A A^T, so C A = B is one least-squares problem."""
    singular = np.linalg.svd(gram, compute_uv=False)
    if singular[-1] <= singular[0] / SINGULAR:
        raise SingularSystemError(f'system is singular (lambda_reg=0, rank(A A^T) < {gram.shape[0]})')
    condition = singular[0] / singular[-1]
    if condition > ILL_CONDITIONED:
        logger.warning('A A^T has condition number %.3g with lambda_reg=0, solving with lstsq', condition)
        c = np.linalg.lstsq(a.T, b.T, rcond=None)[0].T
    else:
        c = cho_solve(cho_factor(gram, lower=True, check_finite=False), rhs.T, check_finite=False).T
    if not np.isfinite(c).all():
        raise SingularSystemError('functional map solve produced non-finite entries')
    return c


def _identity(k):
    return ad.constant(np.eye(k))


@implements('structural_losses')
def baseline_losses(c_xy, c_yx, soft, ops_x, ops_y):
    """
    (L_bi, L_or, L_co):
        L_bi = ||C_YX C_XY - I||^2
        L_or = ||C_YX C_YX^T - I||^2
        L_co = ||C_YX - Phi_X^+ Pi_XY Phi_Y||^2
    """
    c_xy = ad.as_node(getattr(c_xy, 'c', c_xy))
    c_yx = ad.as_node(getattr(c_yx, 'c', c_yx))
    k = c_yx.shape[0]
    bijectivity = ad.frobenius_sq(ad.sub(ad.matmul(c_yx, c_xy), _identity(k)))
    orthogonality = ad.frobenius_sq(ad.sub(ad.matmul(c_yx, ad.transpose(c_yx)), _identity(k)))
    coupling = ad.frobenius_sq(ad.sub(c_yx, fmap_from_pmap(soft, ops_x, ops_y).c))
    return bijectivity, orthogonality, coupling
