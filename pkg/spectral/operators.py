"""
Discrete Laplace-Beltrami operators on triangle meshes.

L is the cotangent Laplacian (positive semidefinite, off-diagonal
w_ij = -(cot a_ij + cot b_ij) / 2), A the lumped (barycentric) mass. The
truncated generalized eigensystem L phi = lambda A phi is computed with
shift-invert Lanczos, and the basis comes with its pseudo-inverse
phi^+ = phi^T A.
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from meshes.mesh import Mesh
from methodmap.registry import implements
from specmatch.exceptions import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

COT_CLAMP = 1e4
SHIFT = -1e-8
EIG_TOL = 1e-8
RESIDUAL_TOL = 1e-6
ORTHONORMALITY_TOL = 1e-6
HKS_TIME_CONSTANT = 4.0 * np.log(10.0)
HKS_SCALINGS = ('standardize', 'l2', 'none')
# columns whose surface RMS falls below this fraction of their mean magnitude are treated as constant
FLAT_COLUMN = 1e-12


class SpectralError(NumericalError):
    """Eigensolver failure; `residual` holds the best residual reached, if known."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DisconnectedMeshError(DataError):
    pass


@dataclass(frozen=True)
class SpectralConfig:
    k: int = 200
    n_hks: int = 16
    hks_scaling: str = 'standardize'
    eig_seed: int = 0

    def __post_init__(self):
        if self.hks_scaling not in HKS_SCALINGS:
            raise ConfigError(f'hks_scaling must be one of {HKS_SCALINGS}, got {self.hks_scaling!r}')


@dataclass(frozen=True, eq=False)
class SpectralOperators:
    phi: np.ndarray
    evals: np.ndarray
    mass: np.ndarray
    phi_pinv: np.ndarray
    name: str = 'mesh'

    @property
    def k(self):
        return int(self.evals.shape[0])

    @property
    def n_vertices(self):
        return int(self.phi.shape[0])

    @classmethod
    def from_basis(cls, phi, evals, mass, name='mesh'):
        phi = np.ascontiguousarray(phi, dtype=np.float64)
        mass = np.ascontiguousarray(mass, dtype=np.float64)
        evals = np.ascontiguousarray(evals, dtype=np.float64)
        phi_pinv = np.ascontiguousarray(phi.T * mass[None, :])
        for array in (phi, evals, mass, phi_pinv):
            array.setflags(write=False)
        return cls(phi, evals, mass, phi_pinv, name)

    def permuted(self, order):
        """Operators of the same shape with vertices reordered: new vertex i is old vertex order[i]."""
        return SpectralOperators.from_basis(self.phi[order], self.evals, self.mass[order], self.name)

    def project(self, values):
        """Spectral coefficients phi^+ @ values."""
        return self.phi_pinv @ values

    def __str__(self):
        return f'{self.name} spectra (|V|={self.n_vertices}, k={self.k})'


def _corner_cotangents(mesh):
    """(m, 3) cotangents of the angle at each triangle corner, clamped."""
    v = mesh.vertices
    t = mesh.triangles
    cots = np.empty(t.shape, dtype=np.float64)
    for corner in range(3):
        a = v[t[:, corner]]
        b = v[t[:, (corner + 1) % 3]]
        c = v[t[:, (corner + 2) % 3]]
        e1 = b - a
        e2 = c - a
        dot = np.einsum('ij,ij->i', e1, e2)
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        cots[:, corner] = dot / cross
    return np.clip(cots, -COT_CLAMP, COT_CLAMP)


def cotan_laplacian(mesh):
    """
    Sparse symmetric cotangent Laplacian (CSR). The corner opposite edge (i, j)
    contributes -cot/2 to w_ij; diagonal entries are minus the off-diagonal row sums.
    """
    n = mesh.n_vertices
    t = mesh.triangles
    cots = _corner_cotangents(mesh)

    rows = []
    cols = []
    vals = []
    for corner in range(3):
        i = t[:, (corner + 1) % 3]
        j = t[:, (corner + 2) % 3]
        w = -0.5 * cots[:, corner]
        rows.extend([i, j])
        cols.extend([j, i])
        vals.extend([w, w])

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    diagonal = -np.asarray(off.sum(axis=1)).ravel()
    laplacian = (off + sp.diags(diagonal)).tocsr()
    laplacian.sort_indices()
    return laplacian


def is_symmetric(matrix, tol=0.0):
    difference = abs(matrix - matrix.T)
    return difference.nnz == 0 or difference.max() <= tol


def lumped_mass(mesh):
    """Barycentric lumped areas: a third of every incident triangle's area."""
    areas = mesh.triangle_areas / 3.0
    t = mesh.triangles
    return (
        np.bincount(t[:, 0], weights=areas, minlength=mesh.n_vertices)
        + np.bincount(t[:, 1], weights=areas, minlength=mesh.n_vertices)
        + np.bincount(t[:, 2], weights=areas, minlength=mesh.n_vertices)
    )


def _fix_signs(phi):
    """Flip each column so its largest-magnitude entry is positive (lowest index wins ties)."""
    pivots = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[pivots, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs[None, :]


def eigen_residuals(laplacian, mass, phi, evals):
    """
    (absolute residual of the first pair, relative residual of the rest) for
    L phi = A phi diag(evals).
    """
    lhs = laplacian @ phi
    rhs = mass[:, None] * phi * evals[None, :]
    first = float(np.linalg.norm(lhs[:, 0] - rhs[:, 0]))
    if phi.shape[1] == 1:
        return first, 0.0
    rest_den = np.linalg.norm(rhs[:, 1:])
    rest = float(np.linalg.norm(lhs[:, 1:] - rhs[:, 1:]) / rest_den) if rest_den > 0 else float('inf')
    return first, rest


def _dense_eigensystem(laplacian, mass, k):
    evals, phi = scipy.linalg.eigh(laplacian.toarray(), np.diag(mass))
    return evals[:k], phi[:, :k]


def eig_k(laplacian, mass, k, seed=0, name='mesh'):
    """
    First k generalized eigenpairs of (L, diag(mass)) in ascending order.

    Shift-invert Lanczos around a tiny negative shift; falls back to a dense
    solver only when ARPACK cannot run (k >= |V| - 1).
    """
    n = laplacian.shape[0]
    if k >= n:
        raise SpectralError(f'{name}: k={k} must be smaller than the vertex count {n}')
    if k < 1:
        raise SpectralError(f'{name}: k must be positive, got {k}')
    mass = np.asarray(mass, dtype=np.float64)
    if (mass <= 0).any():
        raise DataError(f'{name}: {int((mass <= 0).sum())} vertices have no area (isolated vertices?)')

    if k >= n - 1:
        evals, phi = _dense_eigensystem(laplacian, mass, k)
    else:
        rng = np.random.default_rng(seed)
        start = rng.standard_normal(n)
        try:
            evals, phi = eigsh(
                laplacian.tocsc(), k=k, M=sp.diags(mass).tocsc(), sigma=SHIFT, which='LM',
                v0=start, tol=EIG_TOL, maxiter=100 * k,
            )
        except ArpackNoConvergence as e:
            residual = None
            if e.eigenvalues.size:
                _, residual = eigen_residuals(laplacian, mass, e.eigenvectors, e.eigenvalues)
            raise SpectralError(
                f'{name}: eigensolver did not converge after {100 * k} iterations '
                f'({e.eigenvalues.size}/{k} pairs, residual {residual})', residual
            ) from e
        except (ArpackError, RuntimeError) as e:
            raise SpectralError(f'{name}: eigensolver failed: {e}') from e

    order = np.argsort(evals, kind='stable')
    evals = evals[order]
    phi = phi[:, order]

    if evals[0] < -1e-8 * max(1.0, abs(evals[-1])):
        raise SpectralError(f'{name}: negative eigenvalue {evals[0]:.3e}; Laplacian is not PSD')
    evals = np.maximum(evals, 0.0)
    if k >= 2 and evals[1] <= 1e-6 * max(evals[-1], 1e-12):
        raise DisconnectedMeshError(
            f'{name}: second eigenvalue {evals[1]:.3e} is ~0; the mesh looks disconnected'
        )

    # re-normalize in the A inner product; ARPACK's normalization is not exact
    norms = np.sqrt(np.einsum('ij,i,ij->j', phi, mass, phi))
    phi = _fix_signs(phi / norms[None, :])

    # the kernel of L is the constant function; snap the first pair onto it
    constant = 1.0 / np.sqrt(mass.sum())
    if evals[0] <= 1e-8 * max(1.0, evals[-1]) and np.max(np.abs(phi[:, 0] - constant)) < 1e-4 * constant:
        phi[:, 0] = constant
        evals[0] = 0.0

    first, rest = eigen_residuals(laplacian, mass, phi, evals)
    if first > 1e-8 or rest > RESIDUAL_TOL:
        raise SpectralError(
            f'{name}: eigenpair residual too large (first {first:.2e}, rest {rest:.2e})',
            max(first, rest),
        )
    gram = phi.T @ (mass[:, None] * phi)
    drift = float(np.max(np.abs(gram - np.eye(k))))
    if drift > ORTHONORMALITY_TOL:
        raise SpectralError(f'{name}: basis is not A-orthonormal (max drift {drift:.2e})', drift)

    logger.debug('%s: k=%d, lambda in [%.3e, %.3e]', name, k, evals[0], evals[-1])
    return SpectralOperators.from_basis(phi, evals, mass, name)


@implements('operators')
def compute_spectra(mesh: Mesh, k, seed=0):
    """Laplacian, mass and truncated eigensystem for one mesh."""
    return eig_k(cotan_laplacian(mesh), lumped_mass(mesh), k, seed=seed, name=mesh.name)


def hks_times(ops, n_times):
    if ops.k < 2:
        raise SpectralError(f'{ops.name}: HKS needs k >= 2, got {ops.k}')
    lambda_2 = ops.evals[1]
    if lambda_2 <= 0:
        raise DisconnectedMeshError(f'{ops.name}: second eigenvalue {lambda_2:.3e} <= 0 (disconnected mesh?)')
    t_min = HKS_TIME_CONSTANT / ops.evals[-1]
    t_max = HKS_TIME_CONSTANT / lambda_2
    return np.exp(np.linspace(np.log(t_min), np.log(t_max), n_times))


def standardize_columns(values, mass):
    """
    Zero area-weighted mean and unit surface RMS per column, then a common
    1/sqrt(columns) factor so rows have unit mean squared norm over the
    surface. Constant columns become zero.
    """
    area = mass.sum()
    centered = values - (mass @ values) / area
    rms = np.sqrt((mass @ centered ** 2) / area)
    flat = rms <= FLAT_COLUMN * np.maximum((mass @ np.abs(values)) / area, np.finfo(np.float64).tiny)
    if flat.any():
        logger.debug('%d constant HKS column(s) set to zero', int(flat.sum()))
    scaled = np.where(flat, 0.0, centered / np.where(flat, 1.0, rms))
    return scaled / np.sqrt(values.shape[1])


@implements('hks')
def hks(ops, n_times, scaling='standardize'):
    """
    Heat kernel signature sum_i exp(-lambda_i t) phi_i(x)^2 at log-spaced times,
    one column per time.

    `scaling` is applied per column afterwards: 'standardize' (see
    standardize_columns), 'l2' for unit Euclidean norm over vertices, or
    'none' for the raw signature.
    """
    if n_times < 1:
        raise ConfigError(f'HKS needs at least one diffusion time, got {n_times}')
    if scaling not in HKS_SCALINGS:
        raise ConfigError(f'hks scaling must be one of {HKS_SCALINGS}, got {scaling!r}')
    times = hks_times(ops, n_times)
    signature = (ops.phi ** 2) @ np.exp(-np.outer(ops.evals, times))
    if scaling == 'standardize':
        return standardize_columns(signature, ops.mass)
    if scaling == 'l2':
        return signature / np.linalg.norm(signature, axis=0, keepdims=True)
    return signature
