"""Monte Carlo studies of the estimator on Gaussian mixture designs.

Replicates are generated from counter-based RNG streams keyed by
(seed, replicate index), so results are bit-reproducible no matter how
the work is scheduled. Aggregation orders results by replicate index
before reducing.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from oslsel.classify import CostMatrix, optimal_assign
from oslsel.drm_core import (
    BasisSpec,
    OslsDataset,
    OslsError,
    Theta,
    ValidationError,
)
from oslsel.em_estimator import ElSolution, EmConfig, fit, fit_with_known_pi
from oslsel.inference import ProfileInference, chi2_quantile

logger = logging.getLogger(__name__)

# train-block make-up for the two reference scenarios: baseline class
# takes n0_fraction of n, the other trained classes split the rest evenly
REFERENCE_MEANS = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 2.0, 0.0, 0.0],
        [-1.0, -2.0, -1.0, 2.0, 0.0, 0.0],
        [0.0, -1.0, -1.0, 1.0, 0.0, 0.0],
    ]
)


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete recipe for one simulation scenario."""

    means: np.ndarray
    pi: np.ndarray
    n: int
    m: int
    m_star: int
    train_fractions: np.ndarray
    replications: int = 400
    seed: int = 0
    level: float = 0.95
    chol: np.ndarray | None = None

    def __post_init__(self) -> None:
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        pi = np.asarray(self.pi, dtype=float).ravel()
        fr = np.asarray(self.train_fractions, dtype=float).ravel()
        k = means.shape[0] - 1
        if k < 1:
            raise ValidationError("need means for the baseline and at least one more class")
        if pi.shape != (k,):
            raise ValidationError(f"pi must have {k} entries, one per nonbaseline class")
        if np.any(pi < 0) or pi.sum() > 1.0 + 1e-12:
            raise ValidationError("pi must be nonnegative with sum at most 1")
        if fr.shape != (k,):
            raise ValidationError(f"train_fractions must have {k} entries (classes 0..K-1)")
        if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
            raise ValidationError("train_fractions must be positive and sum to 1")
        if self.n < k or self.m < 0 or self.m_star < 0:
            raise ValidationError("sample sizes out of range")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")
        chol = self.chol
        if chol is not None:
            chol = np.asarray(chol, dtype=float)
            d = means.shape[1]
            if chol.shape != (d, d) or np.any(np.triu(chol, 1) != 0.0):
                raise ValidationError("chol must be a lower-triangular d x d factor")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "train_fractions", fr)
        object.__setattr__(self, "chol", chol)

    @property
    def k_known(self) -> int:
        return self.means.shape[0] - 1

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def train_counts(self) -> np.ndarray:
        """Integer class sizes: floors first, remainder to largest residuals."""
        raw = self.train_fractions * self.n
        counts = np.floor(raw).astype(int)
        short = self.n - counts.sum()
        if short > 0:
            order = np.argsort(-(raw - counts), kind="stable")
            counts[order[:short]] += 1
        return counts

    def true_theta(self) -> Theta:
        """Closed-form tilt parameters of the Gaussian family."""
        mu0 = self.means[0]
        delta = self.means[1:] - mu0
        if self.chol is None:
            beta = delta
        else:
            from scipy.linalg import cho_solve

            beta = cho_solve((self.chol, True), delta.T).T
        alpha = -0.5 * (self.means[1:] + mu0) @ beta.T
        alpha = np.diag(alpha) if alpha.ndim == 2 else np.atleast_1d(alpha)
        gamma = np.column_stack([alpha, beta])
        return Theta(gamma=gamma, pi=self.pi.copy())


def reference_scenario(
    n0_fraction: float = 1.0 / 3.0,
    pi3: float = 0.4,
    n: int = 1200,
    m: int = 1200,
    m_star: int = 1200,
    replications: int = 400,
    seed: int = 0,
    level: float = 0.95,
) -> ScenarioSpec:
    """Three trained Gaussian classes in six dimensions plus a novel class.

    Nonbaseline known-class weights stay at 0.2 each; the novel-class
    weight is ``pi3`` and the baseline absorbs the rest.
    """
    rest = (1.0 - n0_fraction) / 2.0
    return ScenarioSpec(
        means=REFERENCE_MEANS,
        pi=np.array([0.2, 0.2, pi3]),
        n=n,
        m=m,
        m_star=m_star,
        train_fractions=np.array([n0_fraction, rest, rest]),
        replications=replications,
        seed=seed,
        level=level,
    )


def _stream(seed: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, replicate]))


def _box_muller(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    total = rows * cols
    if total == 0:
        return np.zeros((rows, cols))
    pairs = (total + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps the log finite
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:total].reshape(rows, cols)


def _categorical(rng: np.random.Generator, probs: np.ndarray, size: int) -> np.ndarray:
    edges = np.cumsum(probs)
    draws = np.searchsorted(edges, rng.random(size), side="right")
    return np.minimum(draws, probs.size - 1)


def _mixture_block(
    rng: np.random.Generator, spec: ScenarioSpec, size: int
) -> tuple[np.ndarray, np.ndarray]:
    full_pi = np.concatenate([[1.0 - spec.pi.sum()], spec.pi])
    comps = _categorical(rng, full_pi, size)
    z = _box_muller(rng, size, spec.d)
    if spec.chol is not None:
        z = z @ spec.chol.T
    return spec.means[comps] + z, comps


def generate_replicate(
    spec: ScenarioSpec, replicate: int
) -> tuple[OslsDataset, tuple[np.ndarray, np.ndarray], Theta]:
    """One dataset draw: fixed-size training classes, mixture test and
    validation blocks, and the generating parameter value.

    Draw order is fixed (training classes in order, then test, then
    validation) so streams replay identically.
    """
    rng = _stream(spec.seed, replicate)
    counts = spec.train_counts()
    xs, ys = [], []
    for k, size in enumerate(counts):
        z = _box_muller(rng, size, spec.d)
        if spec.chol is not None:
            z = z @ spec.chol.T
        xs.append(spec.means[k] + z)
        ys.append(np.full(size, k, dtype=int))
    test_x, _ = _mixture_block(rng, spec, spec.m)
    val_x, val_y = _mixture_block(rng, spec, spec.m_star)
    dataset = OslsDataset(
        train_x=np.vstack(xs),
        train_y=np.concatenate(ys),
        test_x=test_x,
        k_known=spec.k_known,
    )
    return dataset, (val_x, val_y), spec.true_theta()


@dataclass(frozen=True)
class MetricsTable:
    """Aggregated estimation metrics, one row per mixture component."""

    components: list
    rb: np.ndarray
    rmse: np.ndarray
    cp: np.ndarray
    n_effective: int
    n_failed: int
    level: float
    pi_samples: np.ndarray = field(repr=False)
    r_at_truth: np.ndarray = field(repr=False)
    min_r: float
    # max over replicates of (|sum p - 1|, moment, dual, lambda-vs-s)
    residual_max: np.ndarray = field(repr=False, default=None)

    def to_csv_text(self, label: str = "") -> str:
        lines = ["scenario,component,rb_x100,rmse_x100,cp_x100,n_effective,n_failed"]
        for i, name in enumerate(self.components):
            lines.append(
                f"{label},{name},{self.rb[i]:.17g},{self.rmse[i]:.17g},"
                f"{self.cp[i]:.17g},{self.n_effective},{self.n_failed}"
            )
        return "\n".join(lines) + "\n"


def _resolve_jobs(n_jobs: int | None) -> int:
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get("OSLSEL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_replicates(worker, indices, n_jobs):
    jobs = _resolve_jobs(n_jobs)
    if jobs == 1:
        results = [worker(r) for r in indices]
    else:
        results = Parallel(n_jobs=jobs)(delayed(worker)(r) for r in indices)
    # joblib preserves submission order, but sort anyway so the reduction
    # never depends on scheduling
    return sorted(results, key=lambda item: item["replicate"])


def _table1_replicate(
    spec: ScenarioSpec,
    replicate: int,
    config: EmConfig,
    polish_tol: float,
) -> dict:
    dataset, _, theta_true = generate_replicate(spec, replicate)
    basis = BasisSpec.identity(spec.d)
    threshold = chi2_quantile(spec.level)
    out = {"replicate": replicate, "ok": False, "error": ""}
    try:
        solution = fit(dataset, basis, config)
        prof = ProfileInference(
            dataset, basis, config, solution=solution, polish_tol=polish_tol
        )
        r_values = np.array(
            [prof.elr(k, float(theta_true.pi[k - 1])) for k in range(1, spec.k_known + 1)]
        )
        out.update(
            ok=True,
            pi_hat=prof.mele.pi.copy(),
            r_at_truth=r_values,
            covered=r_values <= threshold,
            log_el=prof.log_el,
            residuals=prof.residual_max.copy(),
        )
    except OslsError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
        logger.warning("replicate %d failed: %s", replicate, out["error"])
    return out


def run_table1(
    spec: ScenarioSpec,
    config: EmConfig | None = None,
    polish_tol: float = 1e-5,
    n_jobs: int | None = None,
) -> MetricsTable:
    """Relative bias, RMSE, and interval coverage across replicates.

    Failed replicates are dropped from the aggregates and counted in
    ``n_failed``.
    """
    cfg = config if config is not None else EmConfig(n_starts=1, tol=1e-5, seed=spec.seed)
    worker = lambda r: _table1_replicate(spec, r, cfg, polish_tol)
    results = _run_replicates(worker, range(spec.replications), n_jobs)
    good = [res for res in results if res["ok"]]
    n_failed = len(results) - len(good)
    if not good:
        raise ValidationError("every replicate failed; nothing to aggregate")
    pi_hat = np.vstack([res["pi_hat"] for res in good])
    covered = np.vstack([res["covered"] for res in good])
    r_at_truth = np.vstack([res["r_at_truth"] for res in good])
    pi_true = spec.pi
    err = pi_hat - pi_true
    return MetricsTable(
        components=[f"pi_{k}" for k in range(1, spec.k_known + 1)],
        rb=100.0 * err.mean(axis=0) / pi_true,
        rmse=100.0 * np.sqrt((err**2).mean(axis=0)),
        cp=100.0 * covered.mean(axis=0),
        n_effective=len(good),
        n_failed=n_failed,
        level=spec.level,
        pi_samples=pi_hat,
        r_at_truth=r_at_truth,
        min_r=float(r_at_truth.min()),
        residual_max=np.vstack([res["residuals"] for res in good]).max(axis=0),
    )


@dataclass(frozen=True)
class AccuracyCurve:
    """Mean validation accuracy per novel-class weight, per method."""

    pi3_grid: np.ndarray
    methods: list
    accuracy: np.ndarray  # (len(grid), len(methods))
    std_error: np.ndarray
    n_effective: np.ndarray
    n_failed: int
    residual_max: np.ndarray = field(repr=False, default=None)

    def to_csv_text(self, label: str = "") -> str:
        header = ["scenario", "pi3"]
        for name in self.methods:
            header += [f"acc_{name}", f"se_{name}"]
        lines = [",".join(header)]
        for i, v in enumerate(self.pi3_grid):
            cells = [label, f"{v:.17g}"]
            for j in range(len(self.methods)):
                cells += [f"{self.accuracy[i, j]:.17g}", f"{self.std_error[i, j]:.17g}"]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _solution_residuals(sol) -> np.ndarray:
    """Identity residual four-vector; the dual vs class-weight gap is
    only meaningful at converged stationary points and reads as zero
    otherwise."""
    diag = sol.diagnostics
    lam_gap = diag["lambda_vs_class_weights"] if diag.get("converged", True) else 0.0
    return np.array(
        [
            abs(diag["sum_p_minus_one"]),
            diag["moment_residual"],
            diag["lambda_grad_norm"],
            lam_gap,
        ]
    )


def _figure2_replicate(
    spec: ScenarioSpec,
    replicate: int,
    config: EmConfig,
    misspec_pi: np.ndarray,
) -> dict:
    dataset, (val_x, val_y), theta_true = generate_replicate(spec, replicate)
    basis = BasisSpec.identity(spec.d)
    cost = CostMatrix.uniform(spec.k_known)
    out = {"replicate": replicate, "ok": False, "error": ""}

    def acc(theta: Theta) -> float:
        return float(np.mean(optimal_assign(val_x, theta, cost, basis) == val_y))

    try:
        fitted = fit(dataset, basis, config)
        oracle = fit_with_known_pi(dataset, basis, theta_true.pi, config)
        wrong = fit_with_known_pi(dataset, basis, misspec_pi, config)
        resid = np.max(
            [_solution_residuals(sol) for sol in (fitted, oracle, wrong)],
            axis=0,
        )
        out.update(
            ok=True,
            accuracy=np.array([acc(fitted.theta), acc(oracle.theta), acc(wrong.theta)]),
            residuals=resid,
        )
    except OslsError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
        logger.warning("replicate %d failed: %s", replicate, out["error"])
    return out


def run_figure2(
    spec: ScenarioSpec,
    pi3_grid: np.ndarray,
    replications: int | None = None,
    config: EmConfig | None = None,
    misspec_known_pi: tuple = (0.1, 0.1),
    n_jobs: int | None = None,
) -> AccuracyCurve:
    """Accuracy of the fitted classifier against two fixed-weight baselines.

    At each grid value the novel-class weight is set and the baseline
    class absorbs the change; the same replicate data feeds all three
    methods. The misspecified baseline keeps the true novel-class weight
    but distorts the known-class weights to ``misspec_known_pi``.
    """
    grid = np.asarray(pi3_grid, dtype=float).ravel()
    reps = replications if replications is not None else spec.replications
    cfg = config if config is not None else EmConfig(n_starts=1, tol=1e-5, seed=spec.seed)
    methods = ["fitted", "known_pi", "misspec_pi"]
    acc = np.zeros((grid.size, 3))
    se = np.zeros((grid.size, 3))
    n_eff = np.zeros(grid.size, dtype=int)
    n_failed = 0
    residual_max = np.zeros(4)
    for i, pi3 in enumerate(grid):
        point = replace(spec, pi=np.array([0.2, 0.2, float(pi3)]), seed=spec.seed + 100000 * i)
        mis = np.array([*misspec_known_pi, float(pi3)])
        worker = lambda r: _figure2_replicate(point, r, cfg, mis)
        results = _run_replicates(worker, range(reps), n_jobs)
        ok_rows = [res for res in results if res["ok"]]
        n_failed += len(results) - len(ok_rows)
        if not ok_rows:
            raise ValidationError(f"every replicate failed at pi3={pi3}")
        good = np.vstack([res["accuracy"] for res in ok_rows])
        residual_max = np.maximum(
            residual_max, np.vstack([res["residuals"] for res in ok_rows]).max(axis=0)
        )
        acc[i] = good.mean(axis=0)
        se[i] = good.std(axis=0, ddof=1) / np.sqrt(good.shape[0]) if good.shape[0] > 1 else 0.0
        n_eff[i] = good.shape[0]
    return AccuracyCurve(
        pi3_grid=grid,
        methods=methods,
        accuracy=acc,
        std_error=se,
        n_effective=n_eff,
        n_failed=n_failed,
        residual_max=residual_max,
    )


@dataclass(frozen=True)
class RateStudy:
    """Posterior-gap decay against total sample size."""

    totals: np.ndarray
    mean_distance: np.ndarray
    slope: float

    def to_csv_text(self, label: str = "") -> str:
        lines = ["scenario,n_total,mean_l1_distance"]
        for n, d in zip(self.totals, self.mean_distance):
            lines.append(f"{label},{int(n)},{d:.17g}")
        return "\n".join(lines) + "\n"


def _rate_replicate(spec: ScenarioSpec, replicate: int, config: EmConfig) -> dict:
    from oslsel.classify import accuracy_vs_theta_distance

    dataset, (val_x, val_y), theta_true = generate_replicate(spec, replicate)
    basis = BasisSpec.identity(spec.d)
    out = {"replicate": replicate, "ok": False, "error": ""}
    try:
        solution = fit(dataset, basis, config)
        dist, _ = accuracy_vs_theta_distance(
            solution.theta, theta_true, val_x, val_y, basis
        )
        out.update(ok=True, distance=dist)
    except OslsError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
        logger.warning("replicate %d failed: %s", replicate, out["error"])
    return out


def run_rate_study(
    base: ScenarioSpec,
    totals: tuple = (600, 1200, 2400, 4800),
    replications: int = 50,
    config: EmConfig | None = None,
    n_jobs: int | None = None,
) -> RateStudy:
    """Mean posterior gap at several sample sizes and its log-log slope.

    Each total is split evenly between the training and test blocks, as
    in the reference design.
    """
    cfg = config if config is not None else EmConfig(n_starts=1, tol=1e-5, seed=base.seed)
    means = np.zeros(len(totals))
    for i, total in enumerate(totals):
        half = int(total) // 2
        spec = replace(base, n=half, m=half, seed=base.seed + 100000 * i)
        worker = lambda r: _rate_replicate(spec, r, cfg)
        results = _run_replicates(worker, range(replications), n_jobs)
        good = [res["distance"] for res in results if res["ok"]]
        if not good:
            raise ValidationError(f"every replicate failed at n_total={total}")
        means[i] = float(np.mean(good))
    slope = float(np.polyfit(np.log(np.asarray(totals, float)), np.log(means), 1)[0])
    return RateStudy(totals=np.asarray(totals, float), mean_distance=means, slope=slope)
