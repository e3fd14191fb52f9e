"""Maximum empirical likelihood estimation by EM.

The test-block mixture term makes direct maximization awkward, so the
fit alternates an E-step (posterior responsibilities of test points
over classes 0..K) with an M-step that updates the mixture proportions
in closed form and the tilts through a weighted multinomial logit whose
intercepts absorb the class-weight offsets. Profiling the baseline
masses out of the M-step is exact, so every accepted iteration can only
raise the profile log empirical likelihood; the trace is monitored on
that scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from oslsel.drm_core import (
    BasisSpec,
    DegenerateParameterError,
    ExpClampCounter,
    OslsDataset,
    SolverError,
    Theta,
    expand_basis,
)
from oslsel.el_likelihood import (
    LambdaSolution,
    NoFeasibleLambdaError,
    solve_lambda_tilts,
)

logger = logging.getLogger(__name__)

PI_FLOOR = 1e-10
CLASS_WEIGHT_FLOOR = 1e-280


@dataclass(frozen=True)
class EmConfig:
    """Tuning knobs for the EM fit.

    tol: stop when the trace increment falls below this.
    max_iter: EM iteration cap per start.
    n_starts: number of starting points (first is structured, rest are
        seeded perturbations of it).
    seed: base seed for the perturbed starts.
    gamma_grad_tol: max-norm gradient target of the inner logit solve.
    gamma_max_iter: Newton cap of the inner logit solve.
    """

    tol: float = 1e-5
    max_iter: int = 2000
    n_starts: int = 5
    seed: int = 0
    gamma_grad_tol: float = 1e-10
    gamma_max_iter: int = 200


@dataclass(frozen=True)
class EmTrace:
    """Profile log-EL values per iteration (index 0 is the start)."""

    values: np.ndarray
    converged: bool
    n_iter: int


@dataclass(frozen=True)
class ElSolution:
    """Fitted model with its empirical-likelihood side products.

    theta: fitted parameters.
    basis: basis the fit used.
    lam: dual vector at the fitted tilts.
    p: baseline masses over the pooled sample.
    responsibilities: test-block class weights (m, K+1) feeding the
        final M-step; column k of 1..K averages exactly to pi[k-1].
    s: pooled class weights n_k + sum_j w_jk, k = 0..K.
    log_el: profile log empirical likelihood at theta.
    trace: per-iteration profile values.
    diagnostics: solver counters and flags.
    """

    theta: Theta
    basis: BasisSpec
    lam: np.ndarray
    p: np.ndarray
    responsibilities: np.ndarray
    s: np.ndarray
    log_el: float
    trace: EmTrace
    diagnostics: dict = field(repr=False)

    @property
    def pi0(self) -> float:
        return self.theta.pi0


# ---------------------------------------------------------------------------
# EM building blocks (public, recompute phi_e; fit() uses cached variants)
# ---------------------------------------------------------------------------


def e_step(dataset: OslsDataset, theta: Theta, basis: BasisSpec) -> np.ndarray:
    """Test-block responsibilities w[j, k] over classes k = 0..K.

    Args:
        dataset: data; only the test block enters.
        theta: current parameters.
        basis: basis specification.

    Returns:
        (m, K+1) array; rows are posterior class probabilities and sum
        to 1.
    """
    if dataset.m == 0:
        return np.zeros((0, theta.k_known + 1))
    phi_e = expand_basis(dataset.test_x, basis)
    return _e_step_cached(phi_e, theta.gamma, theta.pi)


def _e_step_cached(phi_test: np.ndarray, gamma: np.ndarray, pi: np.ndarray) -> np.ndarray:
    if phi_test.shape[0] == 0:
        return np.zeros((0, gamma.shape[0] + 1))
    return _responsibilities(phi_test @ gamma.T, pi)


def _responsibilities(log_t_test: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Softmax responsibilities from test-block log tilts, shape (m, K+1)."""
    logits = np.hstack([np.zeros((log_t_test.shape[0], 1)), log_t_test])
    full_pi = np.concatenate([[max(1.0 - pi.sum(), 0.0)], pi])
    with np.errstate(divide="ignore"):
        scores = logits + np.log(full_pi)
    top = scores.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateParameterError("all mixture weights vanish in E-step")
    w = np.exp(scores - top)
    return w / w.sum(axis=1, keepdims=True)


def m_step_pi(w: np.ndarray) -> np.ndarray:
    """Closed-form proportion update: pi_k = mean_j w[j, k], k >= 1.

    Args:
        w: (m, K+1) responsibilities.

    Returns:
        (K,) proportions, floored away from 0.
    """
    if w.shape[0] == 0:
        raise SolverError("proportion update needs a nonempty test block")
    pi = w[:, 1:].mean(axis=0)
    return np.maximum(pi, PI_FLOOR)


def m_step_pi_fixed(w: np.ndarray, k: int, value: float) -> np.ndarray:
    """Proportion update with component k pinned at value.

    Maximizes sum_l t_l log pi_l on the simplex subject to pi_k = value,
    where t_l = sum_j w[j, l]; the free entries scale as
    (1 - value) t_l / (m - t_k). Index 0 pins the baseline proportion.

    Args:
        w: (m, K+1) responsibilities.
        k: pinned component, 0..K.
        value: pinned proportion in [0, 1).

    Returns:
        (K,) proportions pi_1..pi_K (baseline entry is implied).
    """
    if w.shape[0] == 0:
        raise SolverError("proportion update needs a nonempty test block")
    m = w.shape[0]
    t = w.sum(axis=0)
    denom = max(m - t[k], 1e-12)
    full = np.maximum((1.0 - value) * t / denom, PI_FLOOR)
    full[k] = value  # the pinned entry is exact, never floored
    return full[1:]


@dataclass(frozen=True)
class GammaStep:
    """Result of the weighted-logit tilt update."""

    gamma: np.ndarray
    alpha_star: np.ndarray
    s: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    eta: np.ndarray = field(repr=False, default=None)


def m_step_gamma(
    dataset: OslsDataset,
    w: np.ndarray,
    basis: BasisSpec,
    gamma_init: np.ndarray,
    grad_tol: float = 1e-10,
    max_iter: int = 200,
    counter: ExpClampCounter | None = None,
) -> GammaStep:
    """Tilt update: weighted multinomial logit over the pooled sample.

    Training rows enter with one-hot class weights, test rows with the
    responsibilities. The logit intercepts alpha*_k equal
    alpha_k + log(s_k / s_0) with s_k the pooled class weight, so the
    tilt intercepts are recovered by subtracting the offsets.

    Args:
        dataset: pooled sample.
        w: (m, K+1) responsibilities.
        basis: basis specification.
        gamma_init: warm start in tilt parameterization, shape (K, q+1).
        grad_tol: max-norm gradient target.
        max_iter: Newton iteration cap.
        counter: overflow-clamp diagnostics.

    Returns:
        GammaStep; the achieved objective never falls below the warm
        start's.
    """
    phi_e = expand_basis(dataset.pooled_x(), basis)
    v = _class_weight_matrix(dataset, w)
    return _m_step_gamma_cached(phi_e, v, dataset, np.asarray(gamma_init, float), grad_tol, max_iter, counter)


def _class_weight_matrix(dataset: OslsDataset, w: np.ndarray) -> np.ndarray:
    k1 = dataset.k_known + 1
    v = np.zeros((dataset.total, k1))
    v[np.arange(dataset.n), dataset.train_y] = 1.0
    if dataset.m:
        if w.shape != (dataset.m, k1):
            raise SolverError(f"responsibilities shaped {w.shape}, expected {(dataset.m, k1)}")
        v[dataset.n :] = w
    return v


def _m_step_gamma_cached(
    phi_e: np.ndarray,
    v: np.ndarray,
    dataset: OslsDataset,
    gamma_init: np.ndarray,
    grad_tol: float,
    max_iter: int,
    counter: ExpClampCounter | None,
) -> GammaStep:
    s = np.maximum(v.sum(axis=0), CLASS_WEIGHT_FLOOR)
    offsets = np.log(s[1:] / s[0])
    z0 = gamma_init.copy()
    z0[:, 0] += offsets
    z, value, gnorm, iters, eta = _weighted_logit(phi_e, v, z0, grad_tol, max_iter, counter)
    gamma = z.copy()
    gamma[:, 0] -= offsets
    return GammaStep(
        gamma=gamma,
        alpha_star=z[:, 0].copy(),
        s=s,
        objective=value,
        grad_norm=gnorm,
        iterations=iters,
        eta=eta,
    )


def _weighted_logit(
    phi_e: np.ndarray,
    v: np.ndarray,
    z0: np.ndarray,
    grad_tol: float,
    max_iter: int,
    counter: ExpClampCounter | None,
) -> tuple[np.ndarray, float, float, int, np.ndarray]:
    """Maximize the row-weighted multinomial log likelihood by Newton.

    Concave objective; steps are accepted only when they improve it, so
    the returned value is at least the warm start's value. Also returns
    the class-score matrix eta at the final point (leading zero column
    for the baseline class) so callers can reuse it.
    """
    n_rows, p = phi_e.shape
    k = z0.shape[0]
    z = z0.copy()

    def evaluate(zm: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        eta = np.hstack([np.zeros((n_rows, 1)), phi_e @ zm.T])
        if counter is not None:
            counter.count += int(np.count_nonzero(np.abs(eta) > 700.0))
        top = eta.max(axis=1)
        ex = np.exp(eta - top[:, None])
        denom = ex.sum(axis=1)
        val = float(np.einsum("ik,ik->", v[:, 1:], eta[:, 1:]) - top.sum() - np.log(denom).sum())
        prob = ex / denom[:, None]
        return val, prob, eta

    val, prob, eta = evaluate(z)
    it = 0
    gnorm = np.inf
    while it < max_iter:
        resid = v[:, 1:] - prob[:, 1:]
        grad = (resid.T @ phi_e).ravel()  # (K, p) flattened row-major
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= grad_tol:
            break
        p1 = prob[:, 1:]
        cross = p1[:, :, None] * p1[:, None, :]
        cross[:, np.arange(k), np.arange(k)] -= p1
        neg_h = -np.einsum("ikl,ij,im->kjlm", cross, phi_e, phi_e).reshape(k * p, k * p)
        step = None
        ridge = 0.0
        for _ in range(8):
            try:
                step = np.linalg.solve(neg_h + ridge * np.eye(k * p), grad)
                break
            except np.linalg.LinAlgError:
                ridge = max(ridge * 10.0, 1e-10 * (np.trace(neg_h) / (k * p) + 1.0))
        if step is None:
            break
        direction = step.reshape(k, p)
        slope = float(grad @ step)
        # predicted gain below the objective's fp resolution: converged
        if slope <= 16.0 * np.finfo(float).eps * (1.0 + abs(val)):
            break
        sigma = 1.0
        improved = False
        for _ in range(50):
            trial = z + sigma * direction
            val_t, prob_t, eta_t = evaluate(trial)
            if np.isfinite(val_t) and val_t >= val + 1e-4 * sigma * slope and val_t > val:
                z, val, prob, eta = trial, val_t, prob_t, eta_t
                improved = True
                break
            sigma *= 0.5
        it += 1
        if not improved:
            # stalled at numerical precision; current point is returned
            break
    return z, val, gnorm, it, eta


def m_step_p(
    alpha_star: np.ndarray,
    beta: np.ndarray,
    dataset: OslsDataset,
    basis: BasisSpec,
    normalize: bool = True,
) -> np.ndarray:
    """Baseline-mass update from the logit parameterization.

    Raw masses N^-1 [1 + sum_k exp(alpha*_k + beta_k' phi(x_i))]^-1 sum
    to s_0/N, not 1; with normalize=True (default) they are rescaled to
    a probability vector, matching the masses the dual solve produces
    at the updated tilts.

    Args:
        alpha_star: offset intercepts, shape (K,).
        beta: slopes, shape (K, q).
        dataset: pooled sample.
        basis: basis specification.
        normalize: rescale to sum 1.

    Returns:
        (N,) masses.
    """
    phi_e = expand_basis(dataset.pooled_x(), basis)
    z = np.column_stack([np.asarray(alpha_star, float), np.atleast_2d(np.asarray(beta, float))])
    eta = np.hstack([np.zeros((phi_e.shape[0], 1)), phi_e @ z.T])
    top = eta.max(axis=1)
    lse = top + np.log(np.exp(eta - top[:, None]).sum(axis=1))
    raw = np.exp(-lse) / dataset.total
    return raw / raw.sum() if normalize else raw


# ---------------------------------------------------------------------------
# full fits
# ---------------------------------------------------------------------------


def fit(
    dataset: OslsDataset,
    basis: BasisSpec,
    config: EmConfig = EmConfig(),
    init_theta: Theta | None = None,
) -> ElSolution:
    """Maximum empirical likelihood fit with multiple starts.

    Args:
        dataset: labeled training block plus unlabeled test block.
        basis: basis specification.
        config: EM controls.
        init_theta: optional replacement for the structured first start;
            remaining starts perturb it.

    Returns:
        ElSolution from the best start by profile log-EL.

    Raises:
        SolverError: every start failed to produce a feasible fit.
    """
    return _fit_dispatch(dataset, basis, config, init_theta, mode="free", pin=None)


def fit_with_fixed_pi(
    dataset: OslsDataset,
    basis: BasisSpec,
    k: int,
    value: float,
    config: EmConfig = EmConfig(),
    init_theta: Theta | None = None,
) -> ElSolution:
    """Constrained fit with proportion component k pinned at value.

    Args:
        dataset: data.
        basis: basis specification.
        k: component index 0..K (0 pins the baseline proportion).
        value: pinned value in [0, 1).
        config: EM controls.
        init_theta: optional warm start (its pi is projected onto the
            constraint before use).
    """
    if not 0 <= k <= dataset.k_known:
        raise SolverError(f"component index {k} outside 0..{dataset.k_known}")
    if not 0.0 <= value < 1.0:
        raise SolverError("pinned proportion must lie in [0, 1)")
    return _fit_dispatch(dataset, basis, config, init_theta, mode="fixed", pin=(k, float(value)))


def fit_with_known_pi(
    dataset: OslsDataset,
    basis: BasisSpec,
    pi: np.ndarray,
    config: EmConfig = EmConfig(),
    init_theta: Theta | None = None,
) -> ElSolution:
    """Fit the tilts with the proportion vector held at a known value."""
    pi = np.asarray(pi, dtype=float).ravel()
    if pi.shape[0] != dataset.k_known:
        raise SolverError(f"pi has {pi.shape[0]} entries, expected {dataset.k_known}")
    if np.any(pi < 0) or pi.sum() > 1.0 + 1e-12:
        raise SolverError("pi entries must be nonnegative with sum at most 1")
    return _fit_dispatch(dataset, basis, config, init_theta, mode="known", pin=pi)


def _fit_dispatch(dataset, basis, config, init_theta, mode, pin) -> ElSolution:
    phi_pooled = expand_basis(dataset.pooled_x(), basis)
    phi_test = phi_pooled[dataset.n :]
    starts = _starting_points(dataset, basis, phi_pooled, config, init_theta, mode, pin)
    best: ElSolution | None = None
    start_values: list[float | None] = []
    for idx, theta0 in enumerate(starts):
        try:
            sol = _run_em(dataset, basis, phi_pooled, phi_test, theta0, config, mode, pin, idx)
        except (NoFeasibleLambdaError, DegenerateParameterError) as exc:
            logger.debug("start %d failed: %s", idx, exc)
            start_values.append(None)
            continue
        start_values.append(sol.log_el)
        if best is None or sol.log_el > best.log_el:
            best = sol
    if best is None:
        raise SolverError(f"all {len(starts)} starts failed to produce a feasible fit")
    best.diagnostics["start_values"] = start_values
    return best


def _starting_points(dataset, basis, phi_pooled, config, init_theta, mode, pin) -> list[Theta]:
    k = dataset.k_known
    q = phi_pooled.shape[1] - 1
    if init_theta is not None:
        base_gamma = np.asarray(init_theta.gamma, float)
        base_pi = np.asarray(init_theta.pi, float)
    else:
        base_gamma = _train_logit_init(dataset, phi_pooled, config)
        # with no test block the proportions never enter the likelihood
        base_pi = np.full(k, 1.0 / (k + 1)) if dataset.m else np.zeros(k)
    if dataset.m == 0:
        if mode == "known":
            base_pi = np.asarray(pin, float)
        return [Theta(gamma=base_gamma, pi=base_pi)]
    base_pi = _project_pi(base_pi, mode, pin, k)
    out = [Theta(gamma=base_gamma, pi=base_pi)]
    for r in range(1, config.n_starts):
        rng = np.random.default_rng([config.seed, r])
        g = base_gamma + rng.normal(0.0, 0.1, size=base_gamma.shape)
        g[-1] += rng.normal(0.0, 0.5, size=q + 1)
        if mode == "known":
            p = base_pi
        else:
            p = rng.dirichlet(np.full(k + 1, 2.0))[1:]
            p = _project_pi(p, mode, pin, k)
        out.append(Theta(gamma=g, pi=p))
    return out


def _project_pi(pi: np.ndarray, mode: str, pin, k: int) -> np.ndarray:
    pi = np.clip(np.asarray(pi, float).ravel(), PI_FLOOR, 1.0)
    if pi.sum() > 1.0 - PI_FLOOR:
        pi = pi * (1.0 - (k + 1) * PI_FLOOR) / pi.sum()
    if mode == "known":
        return np.asarray(pin, float)
    if mode == "fixed":
        j, v = pin
        full = np.concatenate([[max(1.0 - pi.sum(), PI_FLOOR)], pi])
        rest = 1.0 - v
        scale = rest / max(full.sum() - full[j], 1e-12)
        full = full * scale
        full[j] = v
        return np.maximum(full[1:], 0.0)
    return pi


def _train_logit_init(dataset: OslsDataset, phi_pooled: np.ndarray, config: EmConfig) -> np.ndarray:
    """Structured start: train-block logit for rows 1..K-1, novel row near their mean."""
    k = dataset.k_known
    q1 = phi_pooled.shape[1]
    gamma = np.zeros((k, q1))
    if k > 1:
        phi_train = phi_pooled[: dataset.n]
        v = np.zeros((dataset.n, k))
        v[np.arange(dataset.n), dataset.train_y] = 1.0
        z0 = np.zeros((k - 1, q1))
        z, _, _, _, _ = _weighted_logit(phi_train, v, z0, 1e-8, 100, None)
        counts = dataset.class_counts
        z[:, 0] -= np.log(counts[1:] / counts[0])
        gamma[: k - 1] = z
        gamma[k - 1] = z.mean(axis=0)
    rng = np.random.default_rng([config.seed, 0])
    gamma[k - 1] += rng.normal(0.0, 0.25, size=q1)
    return gamma


def _run_em(
    dataset: OslsDataset,
    basis: BasisSpec,
    phi_pooled: np.ndarray,
    phi_test: np.ndarray,
    theta0: Theta,
    config: EmConfig,
    mode: str,
    pin,
    start_index: int,
) -> ElSolution:
    counter = ExpClampCounter()
    gamma = theta0.gamma.copy()
    pi = theta0.pi.copy()
    k = dataset.k_known
    n = dataset.n
    y = dataset.train_y
    pos = y > 0
    phi_pos = phi_pooled[:n][pos]
    y_pos = y[pos] - 1

    def linear_term(gam: np.ndarray) -> float:
        # sum over labeled rows of gamma_{y_i}' phi_e(x_i); class 0 drops
        return float(np.einsum("ij,ij->", phi_pos, gam[y_pos])) if phi_pos.size else 0.0

    def profile_value(gam: np.ndarray, pivec: np.ndarray, t: np.ndarray, lam_sol: LambdaSolution) -> float:
        test_term = 0.0
        if dataset.m:
            b = 1.0 + (t[n:] - 1.0) @ pivec
            if np.any(b <= 0.0):
                raise DegenerateParameterError("mixture density factor is nonpositive")
            test_term = float(np.log(b).sum())
        return linear_term(gam) + test_term - float(np.log(lam_sol.a).sum())

    log_t = phi_pooled @ gamma.T
    counter.count += int(np.count_nonzero(np.abs(log_t) > 700.0))
    t_mat = np.exp(np.clip(log_t, -700.0, 700.0))
    try:
        lam_sol = solve_lambda_tilts(t_mat)
        trace = [profile_value(gamma, pi, t_mat, lam_sol)]
    except NoFeasibleLambdaError:
        # the starting tilts put the moment target outside the convex
        # hull, so the start has log-EL -inf; every M-step output is
        # feasible (the logit stationarity pins an interior dual at
        # s/N), so begin the trace at the first iterate instead
        trace = []
    converged = False
    stalled = False
    pi_boundary = False
    w = np.zeros((0, k + 1))
    gstep = None
    iters_done = 0

    for _ in range(config.max_iter):
        iters_done += 1
        if dataset.m:
            w_new = _responsibilities(log_t[n:], pi)
            if mode == "free":
                pi_new = m_step_pi(w_new)
            elif mode == "fixed":
                pi_new = m_step_pi_fixed(w_new, pin[0], pin[1])
            else:
                pi_new = pi
            if mode != "known":
                pi_boundary = pi_boundary or bool(
                    np.any(pi_new <= PI_FLOOR) or pi_new.sum() >= 1.0 - 1e-8
                )
                if pi_new.sum() > 1.0 - PI_FLOOR:
                    pi_new = pi_new * (1.0 - (k + 1) * PI_FLOOR) / pi_new.sum()
        else:
            w_new = w
            pi_new = pi
        v = _class_weight_matrix(dataset, w_new)
        gstep_new = _m_step_gamma_cached(
            phi_pooled, v, dataset, gamma, config.gamma_grad_tol, config.gamma_max_iter, counter
        )
        # tilts come from the logit scores minus the intercept offsets
        log_t_new = gstep_new.eta[:, 1:] - (gstep_new.alpha_star - gstep_new.gamma[:, 0])
        counter.count += int(np.count_nonzero(np.abs(log_t_new) > 700.0))
        t_new = np.exp(np.clip(log_t_new, -700.0, 700.0))
        try:
            lam_new = solve_lambda_tilts(t_new, lam0=gstep_new.s[1:] / dataset.total)
            value_new = profile_value(gstep_new.gamma, pi_new, t_new, lam_new)
        except (NoFeasibleLambdaError, DegenerateParameterError):
            if gstep is None:
                raise
            stalled = True
            break
        if trace and gstep is not None and value_new < trace[-1]:
            # generalized EM guard: the inner Newton improved its
            # surrogate without reaching stationarity (degenerate
            # geometry), which can lower the actual profile; keep the
            # previous iterate and stop rather than record a descent
            stalled = True
            break
        trace.append(value_new)
        pi_moved = dataset.m > 0 and mode != "known"
        pi_change = float(np.max(np.abs(pi_new - pi))) if pi_moved else None
        gamma, pi = gstep_new.gamma, pi_new
        log_t, t_mat, gstep, w = log_t_new, t_new, gstep_new, w_new
        if len(trace) >= 2 and (
            trace[-1] - trace[-2] < config.tol
            or (pi_change is not None and pi_change < config.tol / 10.0)
        ):
            converged = True
            break

    if not trace:
        raise NoFeasibleLambdaError(
            "no feasible iterate produced; increase max_iter above zero"
        )
    theta = Theta(gamma=gamma, pi=pi)
    s = gstep.s if gstep is not None else np.maximum(
        _class_weight_matrix(dataset, w).sum(axis=0), CLASS_WEIGHT_FLOOR
    )
    lam_sol = solve_lambda_tilts(t_mat, lam0=s[1:] / dataset.total)
    p_mass = 1.0 / (dataset.total * lam_sol.a)
    log_el = profile_value(gamma, pi, t_mat, lam_sol)
    lam_vs_s = float(np.max(np.abs(lam_sol.lam - s[1:] / dataset.total)))
    if lam_vs_s > 1e-3:
        logger.debug("dual vector drifted %.2e from class-weight ratios", lam_vs_s)
    diagnostics = {
        "clamp_count": counter.count,
        "pi_boundary": pi_boundary,
        "start_index": start_index,
        "mode": mode,
        "lambda_grad_norm": lam_sol.grad_norm,
        "lambda_vs_class_weights": lam_vs_s,
        "gamma_grad_norm": gstep.grad_norm if gstep is not None else 0.0,
        "sum_p_minus_one": float(p_mass.sum() - 1.0),
        "moment_residual": float(np.max(np.abs(p_mass @ t_mat - 1.0))),
        "n_iter": iters_done,
        "converged": converged,
        "stalled": stalled,
    }
    return ElSolution(
        theta=theta,
        basis=basis,
        lam=lam_sol.lam,
        p=p_mass,
        responsibilities=w,
        s=s,
        log_el=log_el,
        trace=EmTrace(values=np.asarray(trace), converged=converged, n_iter=iters_done),
        diagnostics=diagnostics,
    )
