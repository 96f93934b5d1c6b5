"""Clustering analysis dictionary: per-layer synthesis map, joint-sparsifying
atom learning on the prediction/residual pair, reparameterization to the
layer input domain, and the large-threshold search."""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .ipad import _search_rho, ls_fit
from .manifold_opt import ObjectiveSpec, optimize, soft_threshold


@dataclass
class LayerSynthesis:
    """Ridge LS map d from layer input to HR targets, with ymid = d @ x and e = y - ymid."""
    d: np.ndarray
    ymid: np.ndarray
    e: np.ndarray


def layer_synthesis(x_prev, y):
    """Closed-form ridge regression of the HR targets on the layer input."""
    n = x_prev.shape[0]
    d = np.linalg.solve(x_prev @ x_prev.T + np.eye(n), x_prev @ y.T).T
    e = y - d @ x_prev
    # Fast2Sum compensation: storing ymid as the exact complement of e keeps
    # ymid + e == y bitwise (it moves ymid by at most one ulp of y). The one
    # case this misses is a prediction that overshoots y so badly that the
    # residual lands in a binade above the target and the complement loses
    # y's low bit; there the prediction is junk, and flooring it to zero both
    # restores the exact split and shrinks the pointwise prediction error.
    ymid = y - e
    bad = (ymid + e) != y
    if np.any(bad):
        ymid[bad] = 0.0
        e[bad] = y[bad]
    return LayerSynthesis(d=d, ymid=ymid, e=e)


def learn_psi(ymid, e, d_c, basis_y, config, rng=None, init=None):
    """Learn d_c atoms that respond sparsely and jointly on (ymid, e).

    basis_y spans the signal subspace of the HR targets (the rank barrier
    for psi lives there). Returns the OptimizeResult.
    """
    if d_c < 1:
        raise ValueError("need at least one atom")
    if init is None:
        rng = rng or np.random.default_rng()
        init = rng.standard_normal((d_c, ymid.shape[0]))
    spec = ObjectiveSpec(x=ymid, basis=basis_y, nu=config.nu, kappa=config.kappa,
                         mu=config.mu, ymid=ymid, e=e)
    return optimize(spec, init, basis_y, config)


def reparam_cad(psi, d_i):
    """Pull psi back to the layer input domain: rows of psi @ d_i, renormalized.

    Rows that vanish (atoms orthogonal to the range of d_i) are dropped
    with a warning; an entirely vanishing product is an error.
    """
    omega_c = psi @ d_i
    norms = np.linalg.norm(omega_c, axis=1)
    keep = norms > 1e-12
    if not np.any(keep):
        raise NumericalError("every reparameterized atom is zero")
    if not np.all(keep):
        warnings.warn("dropping %d zero atoms orthogonal to the synthesis range"
                      % int(np.count_nonzero(~keep)))
    return omega_c[keep] / norms[keep, None]


def ipad_residual(omega_i, lam_i, x_prev, y):
    """HR components the thresholded IPAD features fail to explain.

    Refits the LS map on S_lam(omega_i x_prev); with all features zeroed
    the map is 0 and the residual is y itself.
    """
    z = soft_threshold(omega_i @ x_prev, lam_i)
    if not np.any(z):
        return y.copy()
    g = ls_fit(y, z)
    return y - g @ z


def search_rho_cad(omega_c, x_prev, y_r, sigmas, grid):
    """Pick the threshold scale for a CAD; lambda_j = rho * sigma_j."""
    lam_base = np.where(sigmas.dead, 0.0, sigmas.sigmas)
    return _search_rho(omega_c, x_prev, y_r, lam_base, grid)
