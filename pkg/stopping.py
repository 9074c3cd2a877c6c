"""
Stopping rules for grbLMM: cluster-wise k-fold cross-validation and the
corrected AIC with hat-matrix degrees of freedom.
"""

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator

from boost_engine import BoostConfig, BoostContext, boost_path
from errors import AicDomainWarning, ConfigError, StoppingError
from longitudinal_data import LongitudinalDataset
from model_state import ModelState


@dataclass(frozen=True)
class CvPlan:
    """Assignment of every cluster to one of k folds"""

    k: int
    fold_of_cluster: np.ndarray
    seed: int = 0

    def clusters_in(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_cluster == fold)

    def clusters_outside(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_cluster != fold)


def make_cv_plan(data: LongitudinalDataset, k: int, seed: int = 0) -> CvPlan:
    """Shuffle the clusters and deal them round-robin into k folds"""
    if not 2 <= k <= data.n:
        raise ConfigError(f"k must lie in [2, {data.n}] for {data.n} clusters, got {k}")
    rng = np.random.default_rng(seed)
    fold = np.empty(data.n, dtype=int)
    fold[rng.permutation(data.n)] = np.arange(data.n) % k
    return CvPlan(k=k, fold_of_cluster=fold, seed=seed)


def _fold_risk(args) -> np.ndarray:
    """Held-out MSE per iteration for one fold (runs in worker processes too)"""
    data, config, plan, fold = args
    train_clusters = plan.clusters_outside(fold)
    if train_clusters.size == 0:
        raise StoppingError(f"fold {fold} leaves no training clusters")
    train = data.subset(train_clusters)
    test = data.subset(plan.clusters_in(fold))

    trace, _, _ = boost_path(train, config)
    path = trace.beta_path
    predictions = path[:, 0][None, :] + test.X @ path[:, 1:].T
    return np.mean((test.y[:, None] - predictions) ** 2, axis=0)


def cv_risk(
    data: LongitudinalDataset,
    config: BoostConfig,
    plan: CvPlan,
    workers: Optional[int] = None,
) -> np.ndarray:
    """CV_k risk for m = 1..m_stop (held-out rows predicted by β₀ + Xβ, γ at 0)"""
    fold_config = replace(config, stopping="none", workers=1)
    jobs = [(data, fold_config, plan, fold) for fold in range(plan.k)]
    workers = config.workers if workers is None else workers

    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, plan.k)) as executor:
            curves = list(executor.map(_fold_risk, jobs))
    else:
        curves = [_fold_risk(job) for job in jobs]
    return np.mean(np.vstack(curves), axis=0)


def cv_argmin(curve: np.ndarray) -> int:
    """m* (1-based) of a risk curve; ties go to the smallest m"""
    curve = np.asarray(curve, dtype=float)
    if curve.size == 0 or not np.any(np.isfinite(curve)):
        raise StoppingError("cross-validation risk is undefined at every iteration")
    return int(np.nanargmin(np.where(np.isfinite(curve), curve, np.nan))) + 1


@dataclass(frozen=True)
class HatState:
    """Running product (I − S^[m])···(I − S^[0]) and the df history"""

    product: np.ndarray
    df: List[float] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.product.shape[0]

    @property
    def current_df(self) -> float:
        return float(self.N - np.trace(self.product))


def init_hat(S0) -> HatState:
    """Hat state after the initial fit: product = I − S^[0]"""
    S0 = np.asarray(S0 @ np.eye(S0.shape[0]) if isinstance(S0, LinearOperator) else S0, dtype=float)
    product = np.eye(S0.shape[0]) - S0
    hat = HatState(product=product)
    hat.df.append(hat.current_df)
    return hat


def initial_hat_operator(random_bl, N: int) -> np.ndarray:
    """S^[0] = J/N + S_γ^[0](I − J/N): intercept mean, then corrected BLUP of the centered data"""
    centering = np.eye(N) - np.full((N, N), 1.0 / N)
    return np.full((N, N), 1.0 / N) + random_bl.hat_operator() @ centering


def update_hat(hat: HatState, S_beta_selected, S_gamma, nu: float) -> HatState:
    """Multiply the running product by (I − νS_γ)(I − νS_β)

    Either operator may be None (a skipped step). Operators may be dense
    arrays or LinearOperators.
    """
    product = hat.product
    if S_beta_selected is not None:
        product = product - nu * np.asarray(S_beta_selected @ product)
    if S_gamma is not None:
        product = product - nu * np.asarray(S_gamma @ product)
    updated = HatState(product=product, df=list(hat.df))
    updated.df.append(updated.current_df)
    return updated


class HatTracker:
    """Accumulates the hat product during a boosting run (AIC stopping)"""

    def __init__(self):
        self.hat: Optional[HatState] = None

    def __call__(self, context: BoostContext, state: ModelState, selected: Optional[int]) -> None:
        context.random.refresh(state.sigma2, state.Q)
        if self.hat is None:
            self.hat = init_hat(initial_hat_operator(context.random, context.data.N))
            return
        S_beta = None if selected is None else context.fixed.learners[selected].hat_operator()
        self.hat = update_hat(self.hat, S_beta, context.random.hat_operator(), context.config.nu)

    @property
    def df0(self) -> float:
        return self.hat.df[0]

    @property
    def df_path(self) -> List[float]:
        """df^[m] for m = 1..m_stop"""
        return self.hat.df[1:]


@dataclass(frozen=True)
class AicResult:
    aic: np.ndarray
    m_star: int
    excluded: np.ndarray


def corrected_aic(df, sigma2, N: int) -> np.ndarray:
    """log σ² + (1 + df/N) / (1 − (df + 2)/N), NaN where df + 2 ≥ N"""
    df = np.asarray(df, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    valid = df + 2 < N
    with np.errstate(divide="ignore", invalid="ignore"):
        aic = np.log(sigma2) + (1 + df / N) / (1 - (df + 2) / N)
    return np.where(valid, aic, np.nan)


def aic_curve(df_history, sigma2_history, N: int) -> AicResult:
    """Corrected AIC per iteration and its argmin m* (1-based, ties to the smallest m)"""
    df = np.asarray(df_history, dtype=float)
    aic = corrected_aic(df, sigma2_history, N)
    excluded = np.flatnonzero(np.isnan(aic))
    if excluded.size == aic.size:
        raise StoppingError(
            f"AIC undefined at every iteration (df + 2 >= N = {N}); use more data or --stop cv"
        )
    if excluded.size:
        warnings.warn(
            f"{excluded.size} iteration(s) with df + 2 >= N excluded from AIC minimization",
            AicDomainWarning,
        )
    return AicResult(aic=aic, m_star=int(np.nanargmin(aic)) + 1, excluded=excluded + 1)
