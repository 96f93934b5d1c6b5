"""Information preserving analysis dictionary: learning and small thresholds."""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .manifold_opt import (ObjectiveSpec, SubspaceBasis, optimize,
                           soft_threshold)

DEAD_SIGMA = 1e-12


@dataclass
class LaplacianStats:
    """Per-atom Laplacian scale estimates; `dead` marks atoms with no response."""
    sigmas: np.ndarray
    dead: np.ndarray


@dataclass
class ThresholdSearchGrid:
    rho_values: np.ndarray

    def __post_init__(self):
        self.rho_values = np.asarray(self.rho_values, dtype=np.float64)
        if self.rho_values.size == 0:
            raise ValueError("empty threshold grid")
        if np.any(np.diff(self.rho_values) <= 0) or self.rho_values[0] <= 0:
            raise ValueError("grid must be positive and strictly increasing")


def default_grid(lo=1e-4, hi=90.0):
    """The search grid {1,...,9} x 10^e for e in -4..1, clipped to [lo, hi]."""
    vals = np.array([d * 10.0 ** e for e in range(-4, 2) for d in range(1, 10)])
    vals = vals[(vals >= lo) & (vals <= hi)]
    return ThresholdSearchGrid(vals)


@dataclass
class ThresholdSearchResult:
    rho: float
    lam: np.ndarray
    score: float


def compute_subspace(x, rel_tol=1e-5, rank=None):
    """Signal subspace of the columns of x via the Gram eigendecomposition.

    The numerical rank K counts singular values above rel_tol times the
    largest; `rank` overrides the count (used for propagated deep-layer
    data where K is pinned from the first layer).
    """
    x = np.asarray(x, dtype=np.float64)
    gram = x @ x.T
    evals, evecs = np.linalg.eigh(gram)
    evals = np.maximum(evals[::-1], 0.0)
    evecs = evecs[:, ::-1]
    svals = np.sqrt(evals)
    if svals[0] <= 0:
        raise NumericalError("cannot span a subspace from all-zero data")
    if rank is None:
        k = int(np.count_nonzero(svals > rel_tol * svals[0]))
    else:
        k = int(rank)
        if not (1 <= k <= x.shape[0]):
            raise ValueError("rank override out of range")
    return SubspaceBasis(w=np.ascontiguousarray(evecs[:, :k]),
                         u=np.ascontiguousarray(evecs[:, k:]), k=k)


def learn_ipad(x_prev, d_i, basis, config, rng=None, init=None):
    """Learn d_i unit-norm atoms spanning the signal subspace of x_prev.

    Minimizes the sparsity term plus the rank barrier on `basis`. Returns
    the OptimizeResult; the dictionary is its .omega.
    """
    if d_i < basis.k:
        raise ValueError("need at least K=%d atoms, got %d" % (basis.k, d_i))
    if init is None:
        rng = rng or np.random.default_rng()
        init = rng.standard_normal((d_i, x_prev.shape[0]))
    spec = ObjectiveSpec(x=x_prev, basis=basis, nu=config.nu, kappa=config.kappa)
    return optimize(spec, init, basis, config)


def estimate_sigmas(omega, x):
    """Laplacian scale per atom: mean absolute response over the samples."""
    sig = np.mean(np.abs(omega @ x), axis=1)
    return LaplacianStats(sigmas=sig, dead=sig < DEAD_SIGMA)


def ls_fit(y, z, ridge_scale=1e-8):
    """Least-squares map G minimizing ||y - G z||_F.

    Solves the normal equations; when the coefficient Gram is not
    positive definite a small ridge (ridge_scale * mean diagonal) makes
    the solve total. z must not be all zero.
    """
    zz = z @ z.T
    rhs = z @ y.T
    try:
        np.linalg.cholesky(zz)
        return np.linalg.solve(zz, rhs).T
    except np.linalg.LinAlgError:
        eps = ridge_scale * np.trace(zz) / zz.shape[0]
        return np.linalg.solve(zz + eps * np.eye(zz.shape[0]), rhs).T


def _search_rho(omega, x, y, lam_base, grid):
    """Exhaustive grid argmin of the thresholded-LS fit score.

    score(rho) = ||y - G S_{rho*lam_base}(omega x)||_F^2 with G refit for
    each rho; all-zero coefficient matrices score ||y||_F^2 with G = 0.
    Smallest rho wins ties. Fails only if every rho kills every
    coefficient.
    """
    a = omega @ x
    best_rho = None
    best_score = np.inf
    any_alive = False
    for rho in grid.rho_values:
        z = soft_threshold(a, rho * lam_base)
        if np.any(z):
            any_alive = True
            g = ls_fit(y, z)
            resid = y - g @ z
        else:
            resid = y
        score = float(np.sum(resid * resid))
        if score < best_score:
            best_score = score
            best_rho = float(rho)
    if not any_alive:
        raise NumericalError("thresholds annihilate every coefficient on the whole grid")
    return ThresholdSearchResult(rho=best_rho, lam=best_rho * lam_base, score=best_score)


def search_rho_ipad(omega_i, x_prev, y, sigmas, grid):
    """Pick the threshold scale for an IPAD; lambda_j = rho / sigma_j, dead atoms 0."""
    lam_base = np.zeros_like(sigmas.sigmas)
    alive = ~sigmas.dead
    lam_base[alive] = 1.0 / sigmas.sigmas[alive]
    return _search_rho(omega_i, x_prev, y, lam_base, grid)
