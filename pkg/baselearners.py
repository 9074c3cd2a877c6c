"""
Baselearners for grbLMM: one simple linear regression per fixed covariate
and a single corrected ridge (BLUP) learner for all random effects.
"""

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as linalg
from scipy.sparse.linalg import LinearOperator

from constants import DEGENERATE_TOL
from errors import DegenerateDesignWarning, NumericalError
from longitudinal_data import CLUSTER_CONSTANT, INTERCEPT, DesignBundle, LongitudinalDataset


def _is_degenerate(x: np.ndarray, sxx: float) -> bool:
    return np.ptp(x) == 0 or sxx <= DEGENERATE_TOL * float(x @ x)


@dataclass(frozen=True)
class FixedBaselearner:
    """h_r(x) = b0 + b·x_r fitted by least squares; solved in centered form"""

    covariate_index: int
    x: np.ndarray
    x_mean: float
    x_centered: np.ndarray
    sxx: float

    @classmethod
    def for_column(cls, X: np.ndarray, r: int) -> "FixedBaselearner":
        x = X[:, r]
        mean = float(x.mean())
        xc = x - mean
        return cls(covariate_index=r, x=x, x_mean=mean, x_centered=xc, sxx=float(xc @ xc))

    @property
    def degenerate(self) -> bool:
        return _is_degenerate(self.x, self.sxx)

    def fit(self, u: np.ndarray) -> Tuple[float, float, np.ndarray, float]:
        if self.degenerate:
            raise NumericalError(f"covariate {self.covariate_index} is constant; slope undefined")
        u_mean = float(u.mean())
        slope = float(self.x_centered @ u) / self.sxx
        intercept = u_mean - slope * self.x_mean
        fitted = u_mean + slope * self.x_centered
        resid = u - fitted
        return intercept, slope, fitted, float(resid @ resid)

    def hat_apply(self, V: np.ndarray) -> np.ndarray:
        """S_βr·V with S_βr = x̃(x̃ᵀx̃)⁻¹x̃ᵀ = J/N + x_c x_cᵀ/sxx"""
        V = np.asarray(V, dtype=float)
        return V.mean(axis=0) + np.multiply.outer(self.x_centered, self.x_centered @ V) / self.sxx

    def hat_operator(self) -> LinearOperator:
        N = self.x.shape[0]
        return LinearOperator((N, N), matvec=self.hat_apply, matmat=self.hat_apply, dtype=float)


def fit_fixed(bl: FixedBaselearner, u: np.ndarray) -> Tuple[float, float, np.ndarray, float]:
    """Fit residuals u to one fixed baselearner: (intercept, slope, fitted, sse)"""
    return bl.fit(np.asarray(u, dtype=float))


class FixedBaselearnerSet:
    """All p fixed baselearners, fitted together for the selection in step 1"""

    def __init__(self, X: np.ndarray, names: Optional[Sequence[str]] = None, warn: bool = True):
        self.X = np.asarray(X, dtype=float)
        self.learners = [FixedBaselearner.for_column(self.X, r) for r in range(self.X.shape[1])]
        self.x_mean = np.array([bl.x_mean for bl in self.learners])
        self.sxx = np.array([bl.sxx for bl in self.learners])
        self.Xc = self.X - self.x_mean if self.learners else self.X
        self.degenerate = np.array([bl.degenerate for bl in self.learners], dtype=bool)
        names = list(names) if names is not None else [f"x{r + 1}" for r in range(self.p)]
        if warn and self.degenerate.any():
            dropped = [names[r] for r in np.flatnonzero(self.degenerate)]
            warnings.warn(
                f"constant covariate(s) excluded from selection: {', '.join(dropped)}",
                DegenerateDesignWarning,
            )

    @property
    def p(self) -> int:
        return len(self.learners)

    @property
    def active(self) -> bool:
        return bool(self.p) and not self.degenerate.all()

    def sse_all(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Residual sums of squares of every learner (inf where degenerate) and the slopes"""
        uc = u - u.mean()
        cross = self.Xc.T @ uc
        safe_sxx = np.where(self.degenerate, 1.0, self.sxx)
        slopes = np.where(self.degenerate, 0.0, cross / safe_sxx)
        sse = np.where(self.degenerate, np.inf, float(uc @ uc) - slopes * cross)
        return sse, slopes

    def select(self, u: np.ndarray) -> Optional[Tuple[int, float, float, np.ndarray]]:
        """Best fitting learner r* (ties to the smallest index) with its fit, or None"""
        if not self.active:
            return None
        sse, _ = self.sse_all(u)
        r = int(np.argmin(sse))
        intercept, slope, fitted, _ = self.learners[r].fit(u)
        return r, intercept, slope, fitted


@dataclass(frozen=True)
class CorrectionMatrix:
    """C = P⁻¹(I − C̃)P, stored as orthonormal bases of the column spaces of X_cs"""

    design_sets: Tuple[np.ndarray, ...]
    bases: Tuple[np.ndarray, ...]
    n: int
    q: int

    @property
    def permutation(self) -> np.ndarray:
        """Index map with γ̃ = γ[permutation] (cluster-major to effect-major)"""
        return np.arange(self.n * self.q).reshape(self.n, self.q).T.ravel()

    @property
    def per_effect_projections(self) -> List[np.ndarray]:
        return [U @ U.T for U in self.bases]

    def apply(self, gamma: np.ndarray) -> np.ndarray:
        """C·γ for cluster-major γ"""
        G = np.array(gamma, dtype=float).reshape(self.n, self.q)
        for s, U in enumerate(self.bases):
            G[:, s] -= U @ (U.T @ G[:, s])
        return G.ravel()

    def apply_columns(self, B: np.ndarray) -> np.ndarray:
        """C·B for an (n·q, k) matrix B"""
        B3 = np.array(B, dtype=float).reshape(self.n, self.q, -1)
        for s, U in enumerate(self.bases):
            B3[:, s, :] -= U @ (U.T @ B3[:, s, :])
        return B3.reshape(self.n * self.q, -1)

    def matrix(self) -> np.ndarray:
        """Dense C, for checks on small problems"""
        nq = self.n * self.q
        P = np.eye(nq)[self.permutation]
        C_tilde = linalg.block_diag(*self.per_effect_projections)
        return P.T @ (np.eye(nq) - C_tilde) @ P


def orthonormal_basis(A: np.ndarray) -> np.ndarray:
    """Orthonormal basis of col(A) from a column-pivoted QR (rank revealing)"""
    Qm, R, _ = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros((A.shape[0], 0))
    tol = max(A.shape) * np.finfo(float).eps * diag[0]
    return Qm[:, : int(np.sum(diag > tol))]


def correction_design_sets(
    data: LongitudinalDataset, slope_interactions: bool = False
) -> List[np.ndarray]:
    """X_cs per random effect: ones plus cluster-constant covariates for the intercept"""
    first_rows = [sl.start for sl in data.cluster_slices]
    constant = [r for r, kind in enumerate(data.covariate_kind) if kind == CLUSTER_CONSTANT]
    reps = data.X[np.ix_(first_rows, constant)]
    ones = np.ones((data.n, 1))

    sets = []
    for term in data.z_terms:
        if term == INTERCEPT or slope_interactions:
            sets.append(np.hstack([ones, reps]))
        else:
            sets.append(ones)
    return sets


def build_correction(
    data: LongitudinalDataset, bundle: DesignBundle, slope_interactions: bool = False
) -> CorrectionMatrix:
    """Correction removing from each random effect its projection onto X_cs"""
    sets = correction_design_sets(data, slope_interactions)
    return CorrectionMatrix(
        design_sets=tuple(sets),
        bases=tuple(orthonormal_basis(Xcs) for Xcs in sets),
        n=bundle.n,
        q=bundle.q,
    )


class RandomBaselearner:
    """Corrected BLUP learner h_γ with hat matrix Z·C·(ZᵀZ + σ²Q_b⁻¹)⁻¹·Zᵀ

    The ridge system is block diagonal, so it is solved as n independent
    q×q systems Z_iᵀZ_i + σ²Q⁻¹. The factorization is cached and refreshed
    whenever σ² or Q changes.
    """

    def __init__(self, bundle: DesignBundle, correction: CorrectionMatrix):
        self.bundle = bundle
        self.correction = correction
        self.sigma2: Optional[float] = None
        self.Q: Optional[np.ndarray] = None
        self.ridge_inverse: Optional[np.ndarray] = None

    def refresh(self, sigma2: float, Q: np.ndarray) -> None:
        """Refactor (Z_iᵀZ_i + σ²Q⁻¹) for a new variance state"""
        Q = np.asarray(Q, dtype=float)
        if self.ridge_inverse is not None and sigma2 == self.sigma2 and np.array_equal(Q, self.Q):
            return
        q = self.bundle.q
        if not (np.isfinite(sigma2) and sigma2 > 0):
            raise NumericalError(f"ill-conditioned variance state: sigma2={sigma2}")
        if Q.shape != (q, q) or not np.all(np.isfinite(Q)):
            raise NumericalError(f"ill-conditioned variance state: Q must be a finite {q}x{q} matrix")
        try:
            Q_inv = linalg.cho_solve(linalg.cho_factor(Q), np.eye(q))
        except linalg.LinAlgError:
            raise NumericalError("ill-conditioned variance state: Q is not positive definite")

        M = self.bundle.ZtZ + sigma2 * Q_inv
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise NumericalError("ill-conditioned variance state: ridge system not positive definite")
        L_inv = np.linalg.inv(L)
        self.ridge_inverse = np.einsum("nji,njk->nik", L_inv, L_inv)
        self.sigma2 = float(sigma2)
        self.Q = Q.copy()

    def solve_uncorrected(self, u: np.ndarray) -> np.ndarray:
        """(ZᵀZ + σ²Q_b⁻¹)⁻¹Zᵀu as an (n, q) array"""
        rhs = self.bundle.Zt_times(u)
        return np.einsum("nij,nj->ni", self.ridge_inverse, rhs)

    def fit(self, u: np.ndarray, sigma2: float, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        self.refresh(sigma2, Q)
        increment = self.correction.apply(self.solve_uncorrected(np.asarray(u, dtype=float)).ravel())
        return increment, self.bundle.Z_times(increment)

    def coefficient_operator(self) -> np.ndarray:
        """Dense C·(ZᵀZ + σ²Q_b⁻¹)⁻¹·Zᵀ of shape (n·q, N)"""
        n, q = self.bundle.n, self.bundle.q
        Zt = self.bundle.Z_block.T.toarray().reshape(n, q, -1)
        B = np.einsum("nij,njk->nik", self.ridge_inverse, Zt).reshape(n * q, -1)
        return self.correction.apply_columns(B)

    def hat_operator(self) -> LinearOperator:
        """S_γ for the current variance state, as a LinearOperator"""
        B = self.coefficient_operator()
        Z = self.bundle.Z_block
        N = self.bundle.N
        return LinearOperator(
            (N, N), matvec=lambda v: Z @ (B @ v), matmat=lambda V: Z @ (B @ V), dtype=float
        )

    def hat_matrix(self) -> np.ndarray:
        return np.asarray(self.bundle.Z_block @ self.coefficient_operator())


def fit_random(
    bl: RandomBaselearner, u: np.ndarray, sigma2: float, Q: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Corrected ridge fit of u: (γ increment of length n·q, fitted values of length N)"""
    return bl.fit(u, sigma2, Q)
