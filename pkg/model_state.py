"""
Model state and fit trace for grbLMM
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
import scipy.linalg as linalg
from scipy.stats import norm

from errors import NumericalError
from longitudinal_data import LongitudinalDataset


@dataclass(frozen=True)
class ModelState:
    """Coefficients (β₀, β, γ), variance components (σ², Q) and fitted predictors"""

    beta0: float
    beta: np.ndarray
    gamma: np.ndarray
    sigma2: float
    Q: np.ndarray
    m: int
    eta_beta: np.ndarray
    eta_gamma: np.ndarray

    @classmethod
    def zeros(cls, N: int, p: int, n: int, q: int) -> "ModelState":
        return cls(
            beta0=0.0,
            beta=np.zeros(p),
            gamma=np.zeros(n * q),
            sigma2=1.0,
            Q=np.eye(q),
            m=0,
            eta_beta=np.zeros(N),
            eta_gamma=np.zeros(N),
        )

    @property
    def eta(self) -> np.ndarray:
        return self.eta_beta + self.eta_gamma

    @property
    def q(self) -> int:
        return self.Q.shape[0]

    def gamma_blocks(self) -> np.ndarray:
        """γ as an (n, q) array, row i = γ_i"""
        return self.gamma.reshape(-1, self.q)

    def evolve(self, **changes) -> "ModelState":
        return replace(self, **changes)


def training_loss(y: np.ndarray, eta: np.ndarray) -> float:
    """Σ ρ(y, η) with ρ = ½(y − η)²"""
    r = y - eta
    return 0.5 * float(r @ r)


def penalized_loglik(state: ModelState, data: LongitudinalDataset) -> float:
    """Σ log f(y_i | θ, φ) − ½ Σ γ_iᵀQ⁻¹γ_i (diagnostic only)"""
    if not state.sigma2 > 0:
        raise NumericalError(f"penalized log-likelihood needs sigma2 > 0, got {state.sigma2}")
    try:
        factor = linalg.cho_factor(state.Q)
    except linalg.LinAlgError:
        raise NumericalError("penalized log-likelihood needs a positive definite Q")
    resid = data.y - state.eta
    log_density = float(norm.logpdf(resid, scale=np.sqrt(state.sigma2)).sum())
    G = state.gamma_blocks()
    penalty = float(np.sum(G * linalg.cho_solve(factor, G.T).T))
    return log_density - 0.5 * penalty


class FitTrace:
    """Per-iteration record of a boosting run (iterations 1..m_stop)"""

    def __init__(self, initial: ModelState, initial_loss: float, gamma_every: int = 1):
        self.initial = initial
        self.initial_loss = initial_loss
        self.gamma_every = max(int(gamma_every), 1)

        self.beta_rows: List[np.ndarray] = []
        self.loss: List[float] = []
        self.loss_step1: List[float] = []
        self.sigma2: List[float] = []
        self.Q: List[np.ndarray] = []
        self.selected: List[int] = []
        self.checkpoints: Dict[int, ModelState] = {0: initial}
        self.loss_violations: List[int] = []

        # Filled by the stopping rules
        self.df0: Optional[float] = None
        self.df_path: Optional[np.ndarray] = None
        self.aic_path: Optional[np.ndarray] = None
        self.cv_risk: Optional[np.ndarray] = None
        self.stopping = "none"
        self.m_star: Optional[int] = None
        self.error: Optional[str] = None

    @property
    def m_stop(self) -> int:
        return len(self.loss)

    def record(self, state: ModelState, selected: int, loss_step1: float, loss: float) -> None:
        """Append iteration state.m (must be the next iteration)"""
        if state.m != self.m_stop + 1:
            raise ValueError(f"trace expects iteration {self.m_stop + 1}, got {state.m}")
        self.beta_rows.append(np.concatenate(([state.beta0], state.beta)))
        self.loss.append(loss)
        self.loss_step1.append(loss_step1)
        self.sigma2.append(state.sigma2)
        self.Q.append(state.Q.copy())
        self.selected.append(selected)
        if state.m % self.gamma_every == 0:
            self.checkpoints[state.m] = state

    @property
    def beta_path(self) -> np.ndarray:
        """(m_stop, p+1) array of (β₀, β₁..β_p) per iteration"""
        if not self.beta_rows:
            return np.zeros((0, self.initial.beta.shape[0] + 1))
        return np.vstack(self.beta_rows)

    @property
    def loss_path(self) -> np.ndarray:
        return np.asarray(self.loss)

    @property
    def sigma2_path(self) -> np.ndarray:
        return np.asarray(self.sigma2)

    @property
    def selected_path(self) -> np.ndarray:
        return np.asarray(self.selected, dtype=int)

    def latest_checkpoint(self, m: int) -> int:
        """Largest iteration ≤ m whose full state was stored"""
        return max(k for k in self.checkpoints if k <= m)
