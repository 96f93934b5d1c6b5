"""Conjugate-gradient dictionary learning on the oblique manifold.

Dictionaries live on the feasible set: every row has unit norm and is
orthogonal to a forbidden subspace spanned by the columns of U. The
composite objective is

    f(Omega) = g(Omega) + kappa * h(Omega) + mu * p(Omega)

with g a log-square sparsity measure of the analysis coefficients, h a
scaled negative log-determinant of the row Gram restricted to the signal
subspace W (rank preservation barrier), and p a joint sparsity measure
tying responses on predictions to responses on residuals.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass
class SubspaceBasis:
    """Orthonormal signal-subspace basis W (n x K) and complement U (n x (n-K))."""
    w: np.ndarray
    u: np.ndarray
    k: int


@dataclass
class GoalPlusConfig:
    nu: float
    kappa: float
    mu: float = 0.0
    max_iters: int = 100
    armijo_c: float = 1e-4
    shrink_factor: float = 0.5
    restart_every: int = 20
    grad_tol: float = 1e-7
    max_backtracks: int = 30
    step0: float = 1.0

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.kappa < 0 or self.mu < 0:
            raise ValueError("term weights must be nonnegative")
        if not (0 < self.armijo_c < 1 and 0 < self.shrink_factor < 1):
            raise ValueError("line-search parameters out of range")
        if self.max_iters < 0 or self.restart_every < 1:
            raise ValueError("iteration settings out of range")


@dataclass
class ObjectiveSpec:
    """Data the objective terms read, plus their weights.

    x feeds g; basis.w feeds h; (ymid, e) feed p when mu > 0. For the
    joint-sparsity problem x is the prediction matrix itself.
    """
    x: np.ndarray
    basis: SubspaceBasis
    nu: float
    kappa: float
    mu: float = 0.0
    ymid: np.ndarray = None
    e: np.ndarray = None


@dataclass
class OptimizeResult:
    omega: np.ndarray
    objective_trace: list
    converged: bool
    iterations: int


def soft_threshold(a, lam):
    """Elementwise shrinkage sgn(a) * max(|a| - lam, 0).

    For a matrix `a` and a vector `lam`, thresholds apply per row.
    """
    a = np.asarray(a, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("thresholds must be nonnegative")
    if a.ndim == 2 and lam.ndim == 1:
        if lam.shape[0] != a.shape[0]:
            raise ValueError("threshold length %d does not match %d rows"
                             % (lam.shape[0], a.shape[0]))
        lam = lam[:, None]
    return np.sign(a) * np.maximum(np.abs(a) - lam, 0.0)


def _logdet_norm(k):
    # the 1/(K log K) normalization degenerates at K=1; treat the constant as 1 there
    return 1.0 / (k * math.log(k)) if k > 1 else 1.0


def term_logdet(omega, basis, m=None):
    """Rank-preservation barrier on the signal subspace.

    -(1/(K log K)) * log det((1/m) W^T Omega^T Omega W). Returns math.inf
    when the restricted Gram is singular (rank-deficient dictionary).
    m defaults to the atom count of omega.
    """
    ow = omega @ basis.w
    if m is None:
        m = omega.shape[0]
    gram = (ow.T @ ow) / m
    sign, logdet = np.linalg.slogdet(gram)
    if sign <= 0 or not np.isfinite(logdet):
        return math.inf
    return -_logdet_norm(basis.k) * logdet


def term_sparsify(omega, x, nu):
    """Normalized log-square sparsity of the analysis coefficients Omega x."""
    a = omega @ x
    m, n_samples = a.shape
    return float(np.log1p(nu * a * a).sum()) / (n_samples * m * math.log1p(nu))


def term_joint_sparsify(psi, ymid, e, nu):
    """Joint sparsity of responses on predictions vs. residuals.

    Zero exactly when (psi_l^T y_j)^2 = (psi_l^T e_j)^2 for every atom l
    and sample j.
    """
    a = psi @ ymid
    b = psi @ e
    t = a * a - b * b
    d_c, n_samples = a.shape
    return float(np.log1p(nu * t * t).sum()) / (n_samples * d_c * math.log1p(nu))


def objective_value(spec, omega):
    """f = g + kappa*h (+ mu*p); math.inf when the h barrier is singular."""
    val = term_sparsify(omega, spec.x, spec.nu)
    if spec.kappa > 0:
        h = term_logdet(omega, spec.basis)
        if not math.isfinite(h):
            return math.inf
        val += spec.kappa * h
    if spec.mu > 0:
        val += spec.mu * term_joint_sparsify(omega, spec.ymid, spec.e, spec.nu)
    return val


def _grad_sparsify(omega, x, nu):
    a = omega @ x
    m, n_samples = a.shape
    b = (2.0 * nu) * a / (1.0 + nu * a * a)
    return (b @ x.T) / (n_samples * m * math.log1p(nu))


def _grad_logdet(omega, basis):
    ow = omega @ basis.w
    m = omega.shape[0]
    gram = (ow.T @ ow) / m
    try:
        sol = np.linalg.solve(gram, ow.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular Gram in the log-det term") from exc
    return (-2.0 * _logdet_norm(basis.k) / m) * (sol.T @ basis.w.T)


def _grad_joint_sparsify(psi, ymid, e, nu):
    a = psi @ ymid
    b = psi @ e
    t = a * a - b * b
    f = (4.0 * nu) * t / (1.0 + nu * t * t)
    d_c, n_samples = a.shape
    return ((f * a) @ ymid.T - (f * b) @ e.T) / (n_samples * d_c * math.log1p(nu))


def gradient(spec, omega):
    """Analytic gradient of the composite objective at Omega (unprojected)."""
    grad = _grad_sparsify(omega, spec.x, spec.nu)
    if spec.kappa > 0:
        grad = grad + spec.kappa * _grad_logdet(omega, spec.basis)
    if spec.mu > 0:
        grad = grad + spec.mu * _grad_joint_sparsify(omega, spec.ymid, spec.e, spec.nu)
    return grad


def tangent_project(g, omega, basis):
    """Project each row of g onto the tangent space at the matching row of Omega.

    The tangent space at a feasible row w is the orthogonal complement of
    span(w) + span(U); rows of the result are orthogonal to both.
    """
    g = np.asarray(g, dtype=np.float64)
    u = basis.u
    if u.size:
        g = g - (g @ u) @ u.T
        dirs = omega - (omega @ u) @ u.T
    else:
        g = g.copy()
        dirs = omega
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    dirs = dirs / safe
    g -= np.sum(g * dirs, axis=1, keepdims=True) * dirs
    return g


def tangent_projector(omega_row, basis):
    """Explicit n x n projector for a single feasible row; mainly for diagnostics."""
    n = omega_row.shape[0]
    p = np.eye(n)
    if basis.u.size:
        p -= basis.u @ basis.u.T
        w = omega_row - basis.u @ (basis.u.T @ omega_row)
    else:
        w = omega_row.copy()
    nrm = np.linalg.norm(w)
    if nrm > 0:
        w = w / nrm
        p -= np.outer(w, w)
    return p


def project_rows(omega, basis):
    """Map rows onto the feasible set: remove U components, renormalize."""
    omega = np.asarray(omega, dtype=np.float64)
    if basis.u.size:
        omega = omega - (omega @ basis.u) @ basis.u.T
    norms = np.linalg.norm(omega, axis=1, keepdims=True)
    if np.any(norms <= 1e-300):
        raise NumericalError("dictionary row lies entirely in the forbidden subspace")
    return omega / norms


def optimize(spec, init, basis, config):
    """Riemannian conjugate gradient with Armijo backtracking.

    The search direction uses the Polak-Ribiere+ coefficient with a
    periodic restart to steepest descent; the previous direction and
    gradient are transported by re-projection onto the tangent space at
    the new iterate. Retraction is row renormalization (plus removal of
    any U drift). Non-convergence within max_iters is reported, not
    raised.
    """
    omega = project_rows(init, basis)
    f = objective_value(spec, omega)
    if not math.isfinite(f):
        raise NumericalError("objective not finite at the initial dictionary")
    trace = [f]
    prev_grad = None
    prev_dir = None
    since_restart = 0
    converged = False
    iterations = 0

    for _ in range(config.max_iters):
        grad = tangent_project(gradient(spec, omega), omega, basis)
        gnorm = math.sqrt(float(np.sum(grad * grad)))
        if gnorm <= config.grad_tol:
            converged = True
            break

        steepest = prev_dir is None or since_restart >= config.restart_every
        if steepest:
            direction = -grad
            since_restart = 0
        else:
            transported_grad = tangent_project(prev_grad, omega, basis)
            denom = float(np.sum(prev_grad * prev_grad))
            beta = max(0.0, float(np.sum(grad * (grad - transported_grad))) / denom)
            direction = -grad + beta * tangent_project(prev_dir, omega, basis)
            if beta == 0.0 or float(np.sum(grad * direction)) >= 0:
                direction = -grad
                since_restart = 0
                steepest = True

        slope = float(np.sum(grad * direction))
        step = config.step0
        accepted = False
        for _ in range(config.max_backtracks + 1):
            candidate = project_rows(omega + step * direction, basis)
            fc = objective_value(spec, candidate)
            if fc <= f + config.armijo_c * step * slope:
                accepted = True
                break
            step *= config.shrink_factor
        if not accepted:
            if not steepest:
                # conjugate direction stalled; retry from steepest descent
                prev_dir = None
                prev_grad = None
                since_restart = 0
                continue
            break

        omega = candidate
        f = fc
        trace.append(f)
        prev_grad = grad
        prev_dir = direction
        since_restart += 1
        iterations += 1

    return OptimizeResult(omega=omega, objective_trace=trace,
                          converged=converged, iterations=iterations)
