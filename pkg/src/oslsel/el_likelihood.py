"""Empirical likelihood over the pooled sample.

Profiling out the baseline distribution leaves, for fixed tilts gamma, a
K-dimensional dual problem in lambda: maximize sum_i log A_i(lambda)
where A_i = 1 + sum_k lambda_k (t_ik - 1) and t_ik = exp(gamma_k' phi_e(x_i))
over the pooled sample i = 1..N. The per-observation mass is then
p_i = 1 / (N A_i). This module solves that dual, evaluates the profile
log empirical likelihood, and builds the fitted baseline distribution
function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oslsel.drm_core import (
    BasisSpec,
    ExpClampCounter,
    OslsDataset,
    SolverError,
    Theta,
    exp_tilts,
    expand_basis,
    mixture_log_density_term,
)


class NoFeasibleLambdaError(SolverError):
    """The dual problem has no interior solution for these tilts.

    Happens when some moment constraint cannot be balanced, e.g. a tilt
    whose values are above 1 on every pooled observation. The message
    names an observation certifying the failure.
    """


# ---------------------------------------------------------------------------
# dual solver
# ---------------------------------------------------------------------------

LAMBDA_GRAD_TOL = 1e-12
LAMBDA_MAX_ITER = 100
LAMBDA_DIVERGENCE_NORM = 1e8


@dataclass(frozen=True)
class LambdaSolution:
    """Solved dual variables and diagnostics.

    lam: dual vector, shape (K,)
    a: per-observation denominators A_i(lam), shape (N,)
    grad_norm: max-norm of the dual gradient at lam
    iterations: Newton steps taken
    """

    lam: np.ndarray
    a: np.ndarray
    grad_norm: float
    iterations: int


def solve_lambda(
    dataset: OslsDataset,
    gamma: np.ndarray,
    basis: BasisSpec,
    lam0: np.ndarray | None = None,
    counter: ExpClampCounter | None = None,
) -> LambdaSolution:
    """Solve the dual moment equations for lambda at fixed tilts.

    The objective f(lam) = -(1/N) sum_i log A_i(lam) is convex on the
    feasible region {lam : A_i(lam) > 0 for all i} and blows up at its
    boundary, so damped Newton from a feasible start cannot escape it.
    lam = 0 gives A_i = 1 and is always feasible.

    Args:
        dataset: pooled sample supplying the observations.
        gamma: tilt matrix, shape (K, q+1).
        basis: basis specification.
        lam0: optional feasible warm start.
        counter: overflow-clamp diagnostics.

    Returns:
        LambdaSolution with the dual gradient driven to the absolute
        tolerance or its rounding floor, whichever is larger.

    Raises:
        NoFeasibleLambdaError: iterates diverge or stall at the boundary;
            the message carries the index of a certifying observation.
    """
    phi_e = expand_basis(dataset.pooled_x(), basis)
    t = exp_tilts(phi_e, gamma, counter)
    return solve_lambda_tilts(t, lam0)


def solve_lambda_tilts(t: np.ndarray, lam0: np.ndarray | None = None) -> LambdaSolution:
    """Dual solve taking precomputed tilt values t[i, k] directly."""
    big_n = t.shape[0]
    q_mat = t - 1.0  # (N, K) moment functions

    k = q_mat.shape[1]
    # Tilts numerically constant at 1 contribute a zero moment column;
    # their lambda is indeterminate, fixed at 0, and dropped from Newton.
    active = np.flatnonzero(np.abs(q_mat).max(axis=0) > 0.0)
    lam = np.zeros(k)
    if lam0 is not None:
        lam0 = np.asarray(lam0, dtype=float).ravel()
        if lam0.shape[0] != k:
            raise SolverError(f"warm start has {lam0.shape[0]} entries, expected {k}")
        if np.all(1.0 + q_mat @ lam0 > 0.0):
            lam = lam0.copy()
    lam[np.setdiff1d(np.arange(k), active)] = 0.0

    if active.size == 0:
        a = np.ones(big_n)
        return LambdaSolution(lam=lam, a=a, grad_norm=0.0, iterations=0)

    qa = q_mat[:, active]
    la = lam[active]
    a = 1.0 + qa @ la
    eps = np.finfo(float).eps

    def grad_and_scale(avec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # gradient of f: -(1/N) sum_i Q_i / A_i; scale bounds its fp noise
        w = qa / avec[:, None]
        return -w.mean(axis=0), np.abs(w).mean(axis=0)

    g, scale = grad_and_scale(a)
    it = 0
    while True:
        # the gradient sum cannot be resolved below its rounding noise,
        # so the target is the absolute tolerance or that floor
        tol_vec = np.maximum(LAMBDA_GRAD_TOL, 8.0 * eps * scale)
        if np.all(np.abs(g) <= tol_vec):
            break
        if it >= LAMBDA_MAX_ITER or np.linalg.norm(la) > LAMBDA_DIVERGENCE_NORM:
            worst = int(np.argmin(a))
            raise NoFeasibleLambdaError(
                "dual solve failed to converge; observation "
                f"{worst} pins the feasible boundary (A={a[worst]:.3e}, "
                f"grad norm {np.max(np.abs(g)):.3e})"
            )
        w = qa / a[:, None]
        # near the feasible boundary the Gram can overflow to inf; the
        # nan step that results fails the line search, which then raises
        with np.errstate(over="ignore"):
            h = (w.T @ w) / big_n  # (1/N) sum Q Q' / A^2, positive semidefinite
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, -g, rcond=None)[0]
        f_cur = -np.log(a).mean()
        # predicted decrease below the objective's fp resolution cannot
        # be verified by any line search; the point is converged
        if abs(g @ step) <= 16.0 * eps * (1.0 + abs(f_cur)):
            break
        # stay strictly inside the region where all A_i remain positive
        dq = qa @ step
        neg = dq < 0.0
        sigma = 1.0
        if np.any(neg):
            sigma = min(1.0, 0.99 * np.min(-a[neg] / dq[neg]))
        improved = False
        for _ in range(60):
            trial = la + sigma * step
            a_trial = 1.0 + qa @ trial
            if np.all(a_trial > 0.0):
                f_trial = -np.log(a_trial).mean()
                if f_trial < f_cur + 1e-4 * sigma * (g @ step):
                    improved = True
                    break
            sigma *= 0.5
        if not improved:
            worst = int(np.argmin(a))
            raise NoFeasibleLambdaError(
                f"dual line search stalled; observation {worst} pins the "
                f"feasible boundary (A={a[worst]:.3e})"
            )
        la, a = trial, a_trial
        g, scale = grad_and_scale(a)
        it += 1

    # Guarded descent stops once objective changes fall below fp
    # resolution, which can leave the gradient around 1e-9. A few raw
    # Newton steps (no objective check, feasibility and contraction
    # checks only) push it to the rounding floor.
    for _ in range(3):
        if np.max(np.abs(g)) <= np.maximum(LAMBDA_GRAD_TOL, 8.0 * eps * scale).min():
            break
        w = qa / a[:, None]
        with np.errstate(over="ignore"):
            h = (w.T @ w) / big_n
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            break
        trial = la + step
        a_trial = 1.0 + qa @ trial
        if not np.all(a_trial > 0.0):
            break
        g_trial, scale_trial = grad_and_scale(a_trial)
        if np.max(np.abs(g_trial)) >= np.max(np.abs(g)):
            break
        la, a, g, scale = trial, a_trial, g_trial, scale_trial
        it += 1

    lam = lam.copy()
    lam[active] = la
    a_full = 1.0 + q_mat @ lam
    return LambdaSolution(lam=lam, a=a_full, grad_norm=float(np.max(np.abs(g))), iterations=it)


# ---------------------------------------------------------------------------
# EL masses and profile value
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ElWeights:
    """Baseline probability masses p_i = 1/(N A_i) over the pooled sample."""

    p: np.ndarray
    lam: np.ndarray

    def total_mass(self) -> float:
        return float(self.p.sum())

    def constraint_residual(self, dataset: OslsDataset, gamma: np.ndarray, basis: BasisSpec) -> np.ndarray:
        """Moment constraints sum_i p_i (t_ik - 1), zero at the solution."""
        phi_e = expand_basis(dataset.pooled_x(), basis)
        t = exp_tilts(phi_e, gamma)
        return self.p @ (t - 1.0)


def el_weights(
    dataset: OslsDataset,
    gamma: np.ndarray,
    basis: BasisSpec,
    lam_solution: LambdaSolution | None = None,
) -> ElWeights:
    """Per-observation baseline masses at fixed tilts.

    Args:
        dataset: pooled sample.
        gamma: tilt matrix (K, q+1).
        basis: basis specification.
        lam_solution: reuse an already-solved dual; solved fresh if None.

    Returns:
        ElWeights whose masses are positive and sum to 1 up to solver
        tolerance.
    """
    sol = lam_solution if lam_solution is not None else solve_lambda(dataset, gamma, basis)
    p = 1.0 / (dataset.total * sol.a)
    return ElWeights(p=p, lam=sol.lam)


def profile_log_el(
    dataset: OslsDataset,
    theta: Theta,
    basis: BasisSpec,
    lam_solution: LambdaSolution | None = None,
    counter: ExpClampCounter | None = None,
) -> float:
    """Profile log empirical likelihood at theta, up to a constant.

    Value returned:

        sum_train gamma_{y_i}' phi_e(x_i)
        + sum_test log B(x_j; theta)
        - sum_pooled log A_i(lambda(gamma))

    where B is the mixture density factor and lambda solves the dual at
    gamma. The additive constant -N log N from the raw masses is
    dropped; only differences of this value are ever interpreted.

    Args:
        dataset: pooled sample.
        theta: model parameters.
        basis: basis specification.
        lam_solution: reuse an already-solved dual for theta.gamma.
        counter: overflow-clamp diagnostics.

    Returns:
        Scalar profile value.

    Raises:
        NoFeasibleLambdaError: no interior dual solution at these tilts.
        DegenerateParameterError: B(x) <= 0 at a test observation.
    """
    sol = lam_solution if lam_solution is not None else solve_lambda(
        dataset, theta.gamma, basis, counter=counter
    )
    train_phi = expand_basis(dataset.train_x, basis)
    # class-0 rows contribute 0 since gamma_0 = 0
    y = dataset.train_y
    pos = y > 0
    tilt_terms = float(np.einsum("ij,ij->", train_phi[pos], theta.gamma[y[pos] - 1]))
    test_term = 0.0
    if dataset.m > 0:
        b = mixture_log_density_term(dataset.test_x, theta, basis, counter)
        test_term = float(np.log(b).sum())
    return tilt_terms + test_term - float(np.log(sol.a).sum())


# ---------------------------------------------------------------------------
# fitted baseline distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalCdf:
    """Weighted empirical distribution over pooled observations.

    Evaluation is coordinatewise: cdf(t) sums the masses of observations
    x_i with x_i <= t in every coordinate.
    """

    support: np.ndarray
    weights: np.ndarray

    def __call__(self, t: np.ndarray) -> float | np.ndarray:
        t = np.asarray(t, dtype=float)
        single = t.ndim <= 1
        pts = np.atleast_2d(t)
        if pts.shape[1] != self.support.shape[1]:
            raise ValueError(
                f"query dimension {pts.shape[1]} does not match support "
                f"dimension {self.support.shape[1]}"
            )
        hits = np.all(self.support[None, :, :] <= pts[:, None, :], axis=2)
        vals = hits @ self.weights
        return float(vals[0]) if single else vals


def fitted_cdf(
    dataset: OslsDataset,
    theta: Theta,
    basis: BasisSpec,
    k: int = 0,
    lam_solution: LambdaSolution | None = None,
) -> EmpiricalCdf:
    """Estimated distribution function of class k on the pooled support.

    Class 0 uses the EL masses directly; class k >= 1 tilts them by
    t_ik and renormalizes, matching the density-ratio link.
    """
    sol = lam_solution if lam_solution is not None else solve_lambda(dataset, theta.gamma, basis)
    w = el_weights(dataset, theta.gamma, basis, lam_solution=sol)
    if k == 0:
        weights = w.p
    else:
        if k > theta.k_known:
            raise SolverError(f"class index {k} outside 0..{theta.k_known}")
        phi_e = expand_basis(dataset.pooled_x(), basis)
        t = exp_tilts(phi_e, theta.gamma)
        weights = w.p * t[:, k - 1]
        weights = weights / weights.sum()
    return EmpiricalCdf(support=dataset.pooled_x(), weights=weights)
