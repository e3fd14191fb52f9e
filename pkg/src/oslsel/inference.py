"""Likelihood-ratio inference for the mixture proportions.

For component k, the empirical log-likelihood ratio at a candidate
value v is R(v) = 2 (log-EL at the unconstrained fit minus log-EL at
the best fit with pi_k pinned to v). Theory gives R a chi-square(1)
limit at the true value, so {v : R(v) <= quantile} is a confidence
set; its outermost crossings are reported as the interval. A plug-in
covariance estimate built from the fitted baseline masses provides
Wald intervals as a secondary cross-check.

The unconstrained fit is shared state for every R evaluation, so the
ProfileInference helper polishes it once and caches it; the free
functions wrap that helper for one-off use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from oslsel.drm_core import (
    BasisSpec,
    OslsDataset,
    SolverError,
    Theta,
    ValidationError,
    exp_tilts,
    expand_basis,
)
from oslsel.em_estimator import ElSolution, EmConfig, fit, fit_with_fixed_pi, fit_with_known_pi
from oslsel.el_likelihood import NoFeasibleLambdaError

logger = logging.getLogger(__name__)

POLISH_TOL = 1e-10
BRACKET_STEP = 0.02
BISECTION_ITER = 60
BISECTION_WIDTH = 1e-10


class CovarianceSingularError(SolverError):
    """Plug-in covariance assembly hit a numerically singular matrix."""

    def __init__(self, message: str, condition_number: float) -> None:
        super().__init__(message)
        self.condition_number = condition_number


def chi2_quantile(level: float) -> float:
    """Quantile of the chi-square distribution with one degree of freedom.

    A chi-square(1) variable is a squared standard normal, so the
    quantile is the squared normal quantile of (1 + level) / 2.
    """
    if not 0.0 <= level < 1.0:
        raise ValidationError("level must lie in [0, 1)")
    if level == 0.0:
        return 0.0
    z = ndtri((1.0 + level) / 2.0)
    return float(z * z)


@dataclass(frozen=True)
class ElrCurve:
    """R values over a grid of candidate proportions for one component."""

    k: int
    values: np.ndarray
    r_values: np.ndarray
    mele_value: float


@dataclass(frozen=True)
class ConfidenceInterval:
    """Interval for one proportion component at one confidence level."""

    k: int
    level: float
    lower: float
    upper: float
    mele_value: float
    boundary_lower: bool = False
    boundary_upper: bool = False


@dataclass(frozen=True)
class CovarianceEstimate:
    """Plug-in asymptotic covariance of the parameter estimates.

    sigma_hat is the covariance of sqrt(N) (theta_hat - theta); divide
    by N (theta_variance) for the variance of theta_hat itself. Row and
    column order is gamma rows flattened first, then the proportions;
    index_map names each position.
    """

    w_star_hat: np.ndarray
    sigma_hat: np.ndarray
    index_map: tuple[str, ...]
    condition_number: float
    blocks: dict = field(repr=False)

    @property
    def theta_variance(self) -> np.ndarray:
        return self.sigma_hat / self.blocks["n_total"]

    def pi_standard_errors(self) -> np.ndarray:
        """Standard errors of the fitted proportions."""
        k = self.blocks["k_known"]
        diag = np.diag(self.theta_variance)[-k:]
        return np.sqrt(np.maximum(diag, 0.0))


@dataclass(frozen=True)
class AssumptionReport:
    """Empirical checks behind the identification conditions."""

    min_eigenvalue: float
    beta_distances: dict
    eigenvalue_flagged: bool
    beta_flagged: bool

    @property
    def flagged(self) -> bool:
        return self.eigenvalue_flagged or self.beta_flagged


class ProfileInference:
    """Shared state for repeated likelihood-ratio evaluations.

    Polishes (or computes) the unconstrained fit once, then serves R
    evaluations, curves, intervals, and the plug-in covariance from it.
    Constrained solutions are cached per component so that nearby pins
    warm-start each other.

    If a constrained fit ever lands above the stored unconstrained
    optimum (possible when both stopped at slightly different points),
    the unconstrained fit is re-polished from that constrained solution
    before R is reported, which keeps every returned R nonnegative up
    to solver noise.
    """

    def __init__(
        self,
        dataset: OslsDataset,
        basis: BasisSpec,
        config: EmConfig = EmConfig(),
        solution: ElSolution | None = None,
        polish_tol: float = POLISH_TOL,
    ) -> None:
        if dataset.m == 0:
            raise ValidationError("proportion inference needs a nonempty test block")
        self.dataset = dataset
        self.basis = basis
        self.config = config
        self.polish_tol = polish_tol
        base = solution if solution is not None else fit(dataset, basis, config)
        # elementwise max of |sum p - 1|, moment residual, dual residual,
        # and the lambda vs class-weight gap over every fit made here
        self.residual_max = np.zeros(4)
        self._note_residuals(base)
        self.solution = self._polish(base.theta)
        self._constrained: dict[int, ElSolution] = {}
        # constrained optima keyed by (k, pin); values outlive rebases
        # because R is reassembled from the stored unconstrained optimum
        self._pinned: dict[tuple[int, float], tuple[float, Theta]] = {}
        self._covariance: CovarianceEstimate | None = None

    def _note_residuals(self, sol: ElSolution) -> None:
        diag = sol.diagnostics
        # the dual vs class-weight identity holds at stationary points;
        # a stalled or cap-exhausted run reports it as zero rather than
        # polluting the max with a value the theory does not promise
        lam_gap = (
            diag.get("lambda_vs_class_weights", 0.0)
            if diag.get("converged", True)
            else 0.0
        )
        vec = np.array(
            [
                abs(diag.get("sum_p_minus_one", 0.0)),
                diag.get("moment_residual", 0.0),
                diag.get("lambda_grad_norm", 0.0),
                lam_gap,
            ]
        )
        self.residual_max = np.maximum(self.residual_max, vec)

    def _polish(self, theta: Theta) -> ElSolution:
        cfg = replace(self.config, n_starts=1, tol=self.polish_tol)
        sol = fit(self.dataset, self.basis, cfg, init_theta=theta)
        self._note_residuals(sol)
        return sol

    @property
    def mele(self) -> Theta:
        return self.solution.theta

    @property
    def log_el(self) -> float:
        return self.solution.log_el

    def _constrained_fit(self, k: int, value: float) -> ElSolution:
        cached = self._constrained.get(k)
        init = self.solution.theta
        if cached is not None:
            pinned = cached.theta.pi[k - 1] if k >= 1 else cached.theta.pi0
            if abs(pinned - value) < abs(self._component(k) - value):
                init = cached.theta
        cfg = replace(self.config, n_starts=1, tol=self.polish_tol)
        sol = fit_with_fixed_pi(self.dataset, self.basis, k, value, cfg, init_theta=init)
        self._note_residuals(sol)
        self._constrained[k] = sol
        return sol

    def _component(self, k: int) -> float:
        return self.solution.theta.pi0 if k == 0 else float(self.solution.theta.pi[k - 1])

    def elr(self, k: int, value: float) -> float:
        """Likelihood-ratio statistic R for pinning component k at value."""
        key = (k, round(float(value), 12))
        hit = self._pinned.get(key)
        if hit is not None:
            log_el_c, theta_c = hit
        else:
            constrained = self._constrained_fit(k, value)
            log_el_c, theta_c = constrained.log_el, constrained.theta
            self._pinned[key] = (log_el_c, theta_c)
        if log_el_c > self.solution.log_el:
            # the constrained point dominates the stored optimum; rebase
            logger.debug(
                "rebasing unconstrained fit: %.3e above stored optimum",
                log_el_c - self.solution.log_el,
            )
            repolished = self._polish(theta_c)
            if repolished.log_el > self.solution.log_el:
                self.solution = repolished
                self._covariance = None
        return 2.0 * (self.solution.log_el - log_el_c)

    def elr_curve(self, k: int, values: np.ndarray) -> ElrCurve:
        """R evaluated over a grid, sweeping outward from the optimum."""
        values = np.asarray(values, dtype=float).ravel()
        center = self._component(k)
        r = np.empty(values.shape)
        # sweep each side moving away from the center so warm starts
        # always come from the adjacent grid point
        order = np.argsort(np.abs(values - center))
        below = [i for i in order if values[i] <= center]
        above = [i for i in order if values[i] > center]
        for side in (below, above):
            self._constrained.pop(k, None)
            for i in side:
                r[i] = self.elr(k, float(values[i]))
        return ElrCurve(k=k, values=values, r_values=r, mele_value=center)

    def confidence_interval(self, k: int, level: float = 0.95) -> ConfidenceInterval:
        """Outermost crossings of R with the chi-square threshold.

        Brackets expand from the optimum in fixed steps until R exceeds
        the threshold or the parameter range ends; bisection then pins
        each endpoint.
        """
        threshold = chi2_quantile(level)
        center = self._component(k)
        lo, lo_open = self._scan(k, center, -BRACKET_STEP, threshold)
        hi, hi_open = self._scan(k, center, +BRACKET_STEP, threshold)
        return ConfidenceInterval(
            k=k,
            level=level,
            lower=lo,
            upper=hi,
            mele_value=center,
            boundary_lower=lo_open,
            boundary_upper=hi_open,
        )

    def _scan(self, k: int, center: float, step: float, threshold: float) -> tuple[float, bool]:
        limit = 0.0 if step < 0 else 1.0 - 1e-9
        self._constrained.pop(k, None)
        inside = center
        v = center
        while True:
            v = v + step
            if (step < 0 and v <= limit) or (step > 0 and v >= limit):
                v = limit
            try:
                r = self.elr(k, v)
            except (NoFeasibleLambdaError, SolverError):
                # treat an infeasible pin like an exceeded threshold
                r = np.inf
            if r > threshold:
                outside = v
                break
            inside = v
            if v == limit:
                # threshold never exceeded: one-sided interval
                return (1.0 if step > 0 else 0.0), True
        for _ in range(BISECTION_ITER):
            if abs(outside - inside) < BISECTION_WIDTH:
                break
            mid = 0.5 * (inside + outside)
            try:
                r = self.elr(k, mid)
            except (NoFeasibleLambdaError, SolverError):
                r = np.inf
            if r > threshold:
                outside = mid
            else:
                inside = mid
        return inside, False

    def wald_interval(self, k: int, level: float = 0.95) -> ConfidenceInterval:
        """Normal-approximation interval from the plug-in covariance."""
        if k == 0:
            raise ValidationError("Wald intervals are reported for components 1..K")
        cov = self.plugin_covariance()
        se = cov.pi_standard_errors()[k - 1]
        z = float(ndtri((1.0 + level) / 2.0))
        center = self._component(k)
        lo, hi = center - z * se, center + z * se
        return ConfidenceInterval(
            k=k,
            level=level,
            lower=max(lo, 0.0),
            upper=min(hi, 1.0),
            mele_value=center,
            boundary_lower=lo < 0.0,
            boundary_upper=hi > 1.0,
        )

    def plugin_covariance(self) -> CovarianceEstimate:
        if self._covariance is None:
            self._covariance = plugin_covariance(self.solution, self.dataset, self.basis)
        return self._covariance


# ---------------------------------------------------------------------------
# free-function wrappers
# ---------------------------------------------------------------------------


def elr(
    dataset: OslsDataset,
    basis: BasisSpec,
    config: EmConfig,
    k: int,
    value: float,
    prefitted: ProfileInference | None = None,
) -> float:
    """R statistic for pinning component k at value.

    Pass a ProfileInference as prefitted when evaluating more than one
    point; otherwise the unconstrained fit is recomputed each call.
    """
    prof = prefitted if prefitted is not None else ProfileInference(dataset, basis, config)
    return prof.elr(k, value)


def elr_curve(
    dataset: OslsDataset,
    basis: BasisSpec,
    config: EmConfig,
    k: int,
    values: np.ndarray,
    prefitted: ProfileInference | None = None,
) -> ElrCurve:
    """R over a grid of candidate values for component k."""
    prof = prefitted if prefitted is not None else ProfileInference(dataset, basis, config)
    return prof.elr_curve(k, values)


def elr_confidence_interval(
    dataset: OslsDataset,
    basis: BasisSpec,
    config: EmConfig,
    k: int,
    level: float = 0.95,
    prefitted: ProfileInference | None = None,
) -> ConfidenceInterval:
    """Likelihood-ratio confidence interval for component k."""
    if not 0.0 < level < 1.0:
        raise ValidationError("level must lie in (0, 1)")
    prof = prefitted if prefitted is not None else ProfileInference(dataset, basis, config)
    return prof.confidence_interval(k, level)


def wald_interval(
    dataset: OslsDataset,
    basis: BasisSpec,
    config: EmConfig,
    k: int,
    level: float = 0.95,
    prefitted: ProfileInference | None = None,
) -> ConfidenceInterval:
    """Secondary normal-approximation interval; the ratio interval is
    the recommended one."""
    prof = prefitted if prefitted is not None else ProfileInference(dataset, basis, config)
    return prof.wald_interval(k, level)


# ---------------------------------------------------------------------------
# plug-in covariance
# ---------------------------------------------------------------------------


def plugin_covariance(
    solution: ElSolution, dataset: OslsDataset, basis: BasisSpec
) -> CovarianceEstimate:
    """Covariance estimate from the fitted baseline masses.

    Population expectations in the asymptotic variance formula are
    replaced by sums over all pooled observations weighted by the
    fitted masses, with the fitted tilts, proportions, and dual vector
    plugged in. The tilt block is corrected by a Schur complement in
    the dual-direction block before inversion.

    Raises:
        CovarianceSingularError: a required matrix is numerically
            singular; the condition number rides on the exception.
    """
    theta = solution.theta
    k = theta.k_known
    q1 = theta.q + 1
    phi = expand_basis(dataset.pooled_x(), basis)
    t = exp_tilts(phi, theta.gamma)  # (N, K) tilt values
    qmat = t - 1.0
    lam = solution.lam
    pi = theta.pi
    c = dataset.test_fraction
    p = solution.p
    a = 1.0 + qmat @ lam
    b = 1.0 + qmat @ pi

    u = t * lam  # lambda_k S_k per observation
    v = t * pi  # pi_k S_k
    pa = p / a
    pb = p / b

    w11 = np.einsum("i,ik,il,ij,im->kjlm", pa, u, u, phi, phi)
    w11 -= c * np.einsum("i,ik,il,ij,im->kjlm", pb, v, v, phi, phi)
    diag_w = (lam - c * pi) * t  # (N, K)
    diag_blocks = np.einsum("i,ik,ij,im->kjm", p, diag_w, phi, phi)
    for j in range(k):
        w11[j, :, j, :] -= diag_blocks[j]
    w11 = w11.reshape(k * q1, k * q1)

    s_phi = np.einsum("i,ik,ij->kj", p, t, phi)  # E0[S_k phi_e]
    w12 = -c * np.einsum("i,ik,il,ij->kjl", pb, v, qmat, phi)
    for j in range(k):
        w12[j, :, j] += c * s_phi[j]
    w12 = w12.reshape(k * q1, k)

    w13 = np.einsum("i,ik,il,ij->kjl", pa, u, qmat, phi)
    for j in range(k):
        w13[j, :, j] -= s_phi[j]
    w13 = w13.reshape(k * q1, k)

    w22 = -c * np.einsum("i,ik,il->kl", pb, qmat, qmat)
    w33 = np.einsum("i,ik,il->kl", pa, qmat, qmat)
    w23 = np.zeros((k, k))

    cond33 = float(np.linalg.cond(w33))
    if not np.isfinite(cond33) or cond33 > 1e12:
        raise CovarianceSingularError(
            f"dual-direction block is numerically singular (cond={cond33:.3e})", cond33
        )
    corr = w13 @ np.linalg.solve(w33, w13.T)
    top = np.hstack([w11 - corr, w12])
    bottom = np.hstack([w12.T, w22])
    w_star = -np.vstack([top, bottom])
    w_star = 0.5 * (w_star + w_star.T)

    cond = float(np.linalg.cond(w_star))
    if not np.isfinite(cond) or cond > 1e12:
        raise CovarianceSingularError(
            f"information matrix is numerically singular (cond={cond:.3e})", cond
        )
    sigma = np.linalg.inv(w_star)
    sigma = 0.5 * (sigma + sigma.T)

    index_map = tuple(
        f"gamma[{j + 1},{i}]" for j in range(k) for i in range(q1)
    ) + tuple(f"pi[{j + 1}]" for j in range(k))
    blocks = {
        "W11": w11,
        "W12": w12,
        "W13": w13,
        "W22": w22,
        "W23": w23,
        "W33": w33,
        "schur_correction": corr,
        "n_total": dataset.total,
        "k_known": k,
    }
    return CovarianceEstimate(
        w_star_hat=w_star,
        sigma_hat=sigma,
        index_map=index_map,
        condition_number=cond,
        blocks=blocks,
    )


# ---------------------------------------------------------------------------
# identification diagnostics
# ---------------------------------------------------------------------------


def assumption_diagnostics(
    dataset: OslsDataset,
    basis: BasisSpec,
    solution: ElSolution | None = None,
    config: EmConfig = EmConfig(),
    eig_tol: float = 1e-8,
    beta_tol: float = 0.1,
) -> AssumptionReport:
    """Empirical checks of the identification conditions.

    Reports the smallest eigenvalue of (1/N) sum phi_e phi_e' (must be
    positive for a well-posed tilt parameterization) and the pairwise
    distances between fitted slope vectors including the zero baseline
    slope (identification needs them distinct). Purely diagnostic:
    nothing is raised.
    """
    phi = expand_basis(dataset.pooled_x(), basis)
    moment = phi.T @ phi / dataset.total
    min_eig = float(np.linalg.eigvalsh(moment)[0])

    if solution is None:
        solution = fit(dataset, basis, config)
    betas = np.vstack([np.zeros(solution.theta.q), solution.theta.beta])
    distances = {}
    for i in range(betas.shape[0]):
        for j in range(i + 1, betas.shape[0]):
            distances[(i, j)] = float(np.linalg.norm(betas[i] - betas[j]))
    beta_flagged = any(d < beta_tol for d in distances.values())
    return AssumptionReport(
        min_eigenvalue=min_eig,
        beta_distances=distances,
        eigenvalue_flagged=min_eig < eig_tol,
        beta_flagged=beta_flagged,
    )
