"""Domain types and density-ratio primitives for open-set label shift.

A labeled training sample covers classes ``0..K-1``; an unlabeled test
sample is drawn from a mixture of those classes plus a novel class ``K``.
Class densities are tied to the class-0 baseline through exponential
tilts ``f_k(x) = f_0(x) * exp(gamma_k' phi_e(x))`` with ``gamma_0 = 0``,
where ``phi_e(x) = (1, phi(x))`` prepends a constant to a user-chosen
basis map. This module holds the dataset/parameter containers, the basis
expansion, and the pointwise quantities (log density ratios, mixture
density factor, class posteriors) that the estimation, inference, and
classification layers consume.

All containers are immutable after construction and every function here
is pure, so concurrent use on shared objects is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXP_CLAMP = 700.0


class OslsError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(OslsError):
    """Invalid input data, shapes, labels, or configuration."""


class DegenerateParameterError(OslsError):
    """Parameter values at which a required quantity is undefined."""


class SolverError(OslsError):
    """A numerical solver failed to produce a usable result."""


class ExpClampCounter:
    """Counts how many exponent evaluations hit the overflow clamp.

    Inner solvers can wander through extreme parameter values; silent
    infinities would corrupt downstream linear algebra, so exponents are
    clamped to ``[-700, 700]`` and the event is recorded here.
    """

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def __repr__(self) -> str:  # pragma: no cover
        return f"ExpClampCounter(count={self.count})"


def clamped_exp(z: np.ndarray, counter: ExpClampCounter | None = None) -> np.ndarray:
    """Exponential with overflow protection.

    Parameters
    ----------
    z : np.ndarray
        Exponents.
    counter : ExpClampCounter, optional
        Diagnostic counter incremented by the number of clamped entries.

    Returns
    -------
    np.ndarray
        ``exp(clip(z, -700, 700))``, elementwise.
    """
    z = np.asarray(z, dtype=float)
    if counter is not None:
        counter.count += int(np.count_nonzero(np.abs(z) > EXP_CLAMP))
    return np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP))


@dataclass(frozen=True)
class OslsDataset:
    """Labeled training features plus unlabeled test features.

    Parameters
    ----------
    train_x : np.ndarray
        Training features, shape ``(n, d)``.
    train_y : np.ndarray
        Integer labels in ``{0..k_known-1}``, shape ``(n,)``.
    test_x : np.ndarray
        Unlabeled test features, shape ``(m, d)``. May be empty
        (``m = 0``), in which case the model reduces to a plain
        multinomial logit on the training block.
    k_known : int
        Number of classes present in training; the novel class has
        index ``k_known``.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    k_known: int

    def __post_init__(self) -> None:
        tx = np.atleast_2d(np.asarray(self.train_x, dtype=float))
        ty = np.asarray(self.train_y, dtype=int).ravel()
        ux = np.asarray(self.test_x, dtype=float)
        if ux.size == 0:
            ux = ux.reshape(0, tx.shape[1])
        ux = np.atleast_2d(ux)
        k = int(self.k_known)
        if k < 1:
            raise ValidationError("k_known must be at least 1")
        if tx.ndim != 2 or ux.ndim != 2:
            raise ValidationError("feature blocks must be 2-dimensional")
        if tx.shape[0] != ty.shape[0]:
            raise ValidationError(
                f"train_x has {tx.shape[0]} rows but train_y has {ty.shape[0]} labels"
            )
        if ux.shape[1] != tx.shape[1]:
            raise ValidationError(
                f"train and test feature dimensions differ: {tx.shape[1]} vs {ux.shape[1]}"
            )
        if not np.all(np.isfinite(tx)) or not np.all(np.isfinite(ux)):
            raise ValidationError("features must be finite")
        if ty.size and (ty.min() < 0 or ty.max() >= k):
            raise ValidationError(f"labels must lie in 0..{k - 1}")
        counts = np.bincount(ty, minlength=k)
        if np.any(counts[:k] == 0):
            missing = np.flatnonzero(counts[:k] == 0).tolist()
            raise ValidationError(f"training classes with no rows: {missing}")
        object.__setattr__(self, "train_x", tx)
        object.__setattr__(self, "train_y", ty)
        object.__setattr__(self, "test_x", ux)
        object.__setattr__(self, "k_known", k)

    @property
    def n(self) -> int:
        return self.train_x.shape[0]

    @property
    def m(self) -> int:
        return self.test_x.shape[0]

    @property
    def total(self) -> int:
        """N = n + m, the pooled sample size."""
        return self.n + self.m

    @property
    def d(self) -> int:
        return self.train_x.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        """Training count n_k per class k = 0..k_known-1."""
        return np.bincount(self.train_y, minlength=self.k_known)

    @property
    def class_fractions(self) -> np.ndarray:
        """c_k = n_k / N for the known classes."""
        return self.class_counts / self.total

    @property
    def test_fraction(self) -> float:
        """c = m / N."""
        return self.m / self.total

    def pooled_x(self) -> np.ndarray:
        """Training rows stacked above test rows, shape ``(N, d)``."""
        return np.vstack([self.train_x, self.test_x])


@dataclass(frozen=True)
class BasisSpec:
    """Specification of the basis map ``phi`` and its extended form.

    ``phi_e(x) = (1, phi(x))`` always has a leading constant 1 and
    output dimension ``q + 1``.

    Parameters
    ----------
    kind : str
        One of ``"identity"``, ``"polynomial"``, ``"precomputed"``.
    q : int
        Output dimension of ``phi``.
    degree : int
        Polynomial degree; per-coordinate monomial powers are stacked,
        no cross terms. Ignored for other kinds.
    phi : np.ndarray, optional
        Precomputed ``phi`` values, one row per observation; required
        for kind ``"precomputed"``. The library never recomputes these
        (they typically come from an external embedding), so indexing
        is positional.
    """

    kind: str
    q: int
    degree: int = 1
    phi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "polynomial", "precomputed"):
            raise ValidationError(f"unknown basis kind: {self.kind!r}")
        if self.q < 1:
            raise ValidationError("basis output dimension q must be positive")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValidationError("polynomial degree must be at least 1")
        if self.kind == "precomputed":
            if self.phi is None:
                raise ValidationError("precomputed basis requires stored phi rows")
            p = np.atleast_2d(np.asarray(self.phi, dtype=float))
            if p.shape[1] != self.q:
                raise ValidationError(
                    f"stored phi has {p.shape[1]} columns, expected q={self.q}"
                )
            object.__setattr__(self, "phi", p)

    @staticmethod
    def identity(d: int) -> "BasisSpec":
        """phi(x) = x."""
        return BasisSpec(kind="identity", q=d)

    @staticmethod
    def polynomial(d: int, degree: int) -> "BasisSpec":
        """phi(x) = (x, x**2, ..., x**degree), stacked per coordinate."""
        return BasisSpec(kind="polynomial", q=d * degree, degree=degree)

    @staticmethod
    def precomputed(phi: np.ndarray) -> "BasisSpec":
        """phi rows supplied externally; observations index into them."""
        p = np.atleast_2d(np.asarray(phi, dtype=float))
        return BasisSpec(kind="precomputed", q=p.shape[1], phi=p)

    def input_dim(self) -> int | None:
        """Feature dimension d this spec accepts, or None for precomputed."""
        if self.kind == "identity":
            return self.q
        if self.kind == "polynomial":
            return self.q // self.degree
        return None


def expand_basis(x: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Evaluate the extended basis ``phi_e(x) = (1, phi(x))``.

    Parameters
    ----------
    x : np.ndarray
        A single feature vector ``(d,)`` or a matrix ``(rows, d)``.
        For a precomputed basis, integer row indices into the stored
        phi matrix instead.
    spec : BasisSpec
        Basis specification.

    Returns
    -------
    np.ndarray
        ``(q+1,)`` for a single vector, else ``(rows, q+1)``; the first
        column is identically 1.

    Raises
    ------
    ValidationError
        Dimension mismatch between ``x`` and the spec.
    """
    if spec.kind == "precomputed":
        idx = np.asarray(x)
        single = idx.ndim == 0
        if idx.ndim == 2:
            # datasets carry indices as a single feature column
            if idx.shape[1] != 1:
                raise ValidationError("precomputed basis expects one index column")
            idx = idx[:, 0]
        if not np.issubdtype(idx.dtype, np.integer):
            if not np.all(idx == np.round(idx)):
                raise ValidationError("precomputed basis expects integer row indices")
            idx = idx.astype(int)
        if idx.size and (idx.min() < 0 or idx.max() >= spec.phi.shape[0]):
            raise ValidationError(
                f"row index outside stored phi range 0..{spec.phi.shape[0] - 1}"
            )
        rows = spec.phi[idx]
        if single:
            return np.concatenate([[1.0], rows])
        return np.hstack([np.ones((rows.shape[0], 1)), np.atleast_2d(rows)])

    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    d = spec.input_dim()
    if arr.shape[1] != d:
        raise ValidationError(f"feature dimension {arr.shape[1]} does not match basis (d={d})")
    if spec.kind == "identity":
        out = np.hstack([np.ones((arr.shape[0], 1)), arr])
    else:
        powers = [arr**j for j in range(1, spec.degree + 1)]
        out = np.hstack([np.ones((arr.shape[0], 1))] + powers)
    return out[0] if single else out


@dataclass(frozen=True)
class Theta:
    """Finite-dimensional model parameters.

    Parameters
    ----------
    gamma : np.ndarray
        Tilt coefficients, shape ``(K, q+1)``; row k holds
        ``(alpha_k, beta_k)`` for class k = 1..K. The class-0 tilt is
        identically zero and never stored.
    pi : np.ndarray
        Test-mixture proportions ``(pi_1..pi_K)``; ``pi_0`` is derived
        as ``1 - sum(pi)``.
    """

    gamma: np.ndarray
    pi: np.ndarray

    def __post_init__(self) -> None:
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        p = np.asarray(self.pi, dtype=float).ravel()
        if g.shape[0] != p.shape[0]:
            raise ValidationError(
                f"gamma has {g.shape[0]} tilt rows but pi has {p.shape[0]} entries"
            )
        if g.shape[1] < 2:
            raise ValidationError("each gamma row needs an intercept and at least one slope")
        if not np.all(np.isfinite(g)):
            raise ValidationError("gamma must be finite")
        if np.any(p < -1e-12) or p.sum() > 1.0 + 1e-12:
            raise ValidationError("pi entries must be nonnegative with sum at most 1")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "pi", np.clip(p, 0.0, 1.0))

    @property
    def k_known(self) -> int:
        return self.gamma.shape[0]

    @property
    def q(self) -> int:
        return self.gamma.shape[1] - 1

    @property
    def pi0(self) -> float:
        """Derived baseline-class proportion 1 - sum(pi)."""
        return float(1.0 - self.pi.sum())

    @property
    def alpha(self) -> np.ndarray:
        return self.gamma[:, 0]

    @property
    def beta(self) -> np.ndarray:
        return self.gamma[:, 1:]

    def full_pi(self) -> np.ndarray:
        """(pi_0, pi_1, ..., pi_K) including the derived baseline entry."""
        return np.concatenate([[self.pi0], self.pi])

    def flat(self) -> np.ndarray:
        """Parameters stacked as (gamma_1, ..., gamma_K, pi_1, ..., pi_K)."""
        return np.concatenate([self.gamma.ravel(), self.pi])


def log_density_ratio(
    x: np.ndarray, theta: Theta, k: int, basis: BasisSpec
) -> float | np.ndarray:
    """Log density ratio ``log f_k(x) / f_0(x) = gamma_k' phi_e(x)``.

    Parameters
    ----------
    x : np.ndarray
        Feature vector ``(d,)`` or matrix ``(rows, d)``; precomputed
        bases take row indices.
    theta : Theta
        Model parameters.
    k : int
        Class index in ``0..K``; class 0 returns exactly 0.
    basis : BasisSpec
        Basis specification.

    Returns
    -------
    float or np.ndarray
        Scalar for a single vector, else one value per row.
    """
    if k < 0 or k > theta.k_known:
        raise ValidationError(f"class index {k} outside 0..{theta.k_known}")
    phi_e = expand_basis(x, basis)
    if k == 0:
        return 0.0 if phi_e.ndim == 1 else np.zeros(phi_e.shape[0])
    vals = phi_e @ theta.gamma[k - 1]
    return float(vals) if phi_e.ndim == 1 else vals


def _tilt_logits(phi_e: np.ndarray, theta: Theta) -> np.ndarray:
    """gamma_k' phi_e(x) stacked over k = 0..K, shape (rows, K+1)."""
    phi_e = np.atleast_2d(phi_e)
    body = phi_e @ theta.gamma.T
    return np.hstack([np.zeros((phi_e.shape[0], 1)), body])


def posterior(x: np.ndarray, theta: Theta, basis: BasisSpec) -> np.ndarray:
    """Class posterior probabilities on the test distribution.

    Computes ``pi_k exp(gamma_k' phi_e(x)) / sum_j pi_j exp(gamma_j' phi_e(x))``
    for k = 0..K through a shared max-shift so extreme tilts cannot
    overflow.

    Parameters
    ----------
    x : np.ndarray
        Feature vector ``(d,)`` or matrix ``(rows, d)``.
    theta : Theta
        Model parameters.
    basis : BasisSpec
        Basis specification.

    Returns
    -------
    np.ndarray
        ``(K+1,)`` or ``(rows, K+1)``; entries nonnegative, rows sum
        to 1.

    Raises
    ------
    DegenerateParameterError
        Every mixture component with positive weight has zero density
        at some row, leaving an all-zero denominator.
    """
    phi_e = expand_basis(x, basis)
    single = phi_e.ndim == 1
    logits = _tilt_logits(phi_e, theta)
    with np.errstate(divide="ignore"):
        log_pi = np.log(theta.full_pi())
    scores = logits + log_pi
    top = scores.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateParameterError("all mixture weights vanish; posterior undefined")
    w = np.exp(scores - top)
    out = w / w.sum(axis=1, keepdims=True)
    return out[0] if single else out


def mixture_log_density_term(
    x: np.ndarray, theta: Theta, basis: BasisSpec, counter: ExpClampCounter | None = None
) -> float | np.ndarray:
    """Mixture-to-baseline density factor ``B(x) = 1 + sum_k pi_k (t_k(x) - 1)``.

    Here ``t_k(x) = exp(gamma_k' phi_e(x))`` and the test density is
    ``f_0(x) B(x)``. ``B`` is bounded below by the baseline proportion,
    so it stays positive whenever ``pi_0 > 0``.

    Parameters
    ----------
    x : np.ndarray
        Feature vector or matrix.
    theta : Theta
        Model parameters.
    basis : BasisSpec
        Basis specification.
    counter : ExpClampCounter, optional
        Overflow-clamp diagnostics.

    Returns
    -------
    float or np.ndarray

    Raises
    ------
    DegenerateParameterError
        ``B <= 0`` at some row (possible only with ``pi_0 = 0`` at
        degenerate tilts); signals an invalid parameter point.
    """
    phi_e = expand_basis(x, basis)
    single = phi_e.ndim == 1
    tilts = clamped_exp(np.atleast_2d(phi_e) @ theta.gamma.T, counter)
    b = 1.0 + (tilts - 1.0) @ theta.pi
    if np.any(b <= 0.0):
        raise DegenerateParameterError("mixture density factor is nonpositive")
    return float(b[0]) if single else b


def exp_tilts(
    phi_e: np.ndarray, gamma: np.ndarray, counter: ExpClampCounter | None = None
) -> np.ndarray:
    """Tilt values ``t_k(x) = exp(gamma_k' phi_e(x))``, shape (rows, K).

    Shared workhorse for the likelihood layers; exponents are clamped.
    """
    return clamped_exp(np.atleast_2d(phi_e) @ np.atleast_2d(gamma).T, counter)
