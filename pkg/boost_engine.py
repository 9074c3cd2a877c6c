"""
Component-wise gradient boosting for linear mixed models (grbLMM)

Every iteration runs three steps:

1. fit the residuals to each fixed baselearner and update the best one
2. fit the residuals (recomputed after step 1) to the corrected random
   effects learner
3. update σ² and Q with the EM-type formulas

The state at the stopping iteration m* is restored from the recorded trace.
"""

import numbers
import warnings
from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import scipy.linalg as linalg

from constants import (
    BOOST,
    INIT_MAX_ROUNDS,
    INIT_TOL,
    MONOTONICITY_TOL,
    Q_FLOOR,
    SIGMA2_FLOOR,
    STOPPING_RULES,
    VARIANCE_ESTIMATORS,
)
from baselearners import FixedBaselearnerSet, RandomBaselearner, build_correction
from errors import (
    ConfigError,
    ConvergenceWarning,
    DegenerateDesignWarning,
    FitAborted,
    GrbLmmError,
    MonotonicityWarning,
    NumericalError,
    VarianceFloorWarning,
)
from longitudinal_data import DesignBundle, LongitudinalDataset, assemble_designs
from model_state import FitTrace, ModelState, training_loss


def _coerce_number(name: str, value: Any, integer: bool):
    """Whole-number floats become ints; bools, strings and fractions are rejected"""
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, numbers.Real):
        kind = "an integer" if integer else "a number"
        raise ConfigError(f"{name} must be {kind}, got {value!r}")
    if not integer:
        return float(value)
    if isinstance(value, numbers.Integral):
        return int(value)
    if not float(value).is_integer():
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return int(value)


def coerce_numeric_fields(config: Any, integers: Tuple[str, ...], reals: Tuple[str, ...] = ()) -> None:
    """Normalize the numeric fields of a frozen config dataclass in place"""
    for name in integers:
        object.__setattr__(config, name, _coerce_number(name, getattr(config, name), True))
    for name in reals:
        object.__setattr__(config, name, _coerce_number(name, getattr(config, name), False))


@dataclass(frozen=True)
class BoostConfig:
    """Tuning parameters of a boosting run; defaults come from config/grblmm.toon"""

    nu: float = BOOST["nu"]
    m_stop: int = BOOST["m_stop"]
    stopping: str = BOOST["stopping"]
    k: int = BOOST["k"]
    seed: int = BOOST["seed"]
    variance_estimator: str = BOOST["variance_estimator"]
    slope_interactions: bool = BOOST["slope_interactions"]
    gamma_every: int = BOOST["gamma_every"]
    workers: int = BOOST["workers"]
    sigma2_floor: float = SIGMA2_FLOOR
    q_floor: float = Q_FLOOR
    init_tol: float = INIT_TOL
    init_max_rounds: int = INIT_MAX_ROUNDS
    monotonicity_tol: float = MONOTONICITY_TOL

    def __post_init__(self):
        coerce_numeric_fields(
            self,
            ("m_stop", "k", "seed", "gamma_every", "workers", "init_max_rounds"),
            ("nu", "sigma2_floor", "q_floor", "init_tol", "monotonicity_tol"),
        )
        if not isinstance(self.slope_interactions, (bool, np.bool_)):
            raise ConfigError(f"slope_interactions must be true or false, got {self.slope_interactions!r}")
        if not 0.0 < self.nu <= 1.0:
            raise ConfigError(f"nu must lie in (0, 1], got {self.nu}")
        if self.m_stop < 1:
            raise ConfigError(f"m_stop must be an integer >= 1, got {self.m_stop}")
        if self.stopping not in STOPPING_RULES:
            raise ConfigError(f"stopping must be one of {', '.join(STOPPING_RULES)}, got {self.stopping!r}")
        if self.stopping == "cv" and self.k < 2:
            raise ConfigError(f"cross-validation needs k >= 2, got {self.k}")
        if self.variance_estimator not in VARIANCE_ESTIMATORS:
            raise ConfigError(
                f"variance_estimator must be one of {', '.join(VARIANCE_ESTIMATORS)}, "
                f"got {self.variance_estimator!r}"
            )
        if self.gamma_every < 1:
            raise ConfigError(f"gamma_every must be >= 1, got {self.gamma_every}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not (self.sigma2_floor > 0 and self.q_floor > 0):
            raise ConfigError("variance floors must be positive")
        if self.init_max_rounds < 1 or not self.init_tol > 0:
            raise ConfigError("initial fit needs init_max_rounds >= 1 and init_tol > 0")

    @classmethod
    def from_mapping(cls, boost: Mapping[str, Any], numerics: Optional[Mapping[str, Any]] = None) -> "BoostConfig":
        """Build from parsed TOON sections; unknown keys are rejected"""
        known = {f.name for f in fields(cls)}
        values: Dict[str, Any] = {}
        for section in (numerics or {}, boost):
            for key, value in section.items():
                if key in ("degenerate_tol",):
                    continue
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r}")
                values[key] = value
        return cls(**values)

    def check_against(self, data: LongitudinalDataset) -> None:
        if self.stopping == "cv" and self.k > data.n:
            raise ConfigError(f"k = {self.k} folds exceed the {data.n} clusters")


@dataclass
class BoostContext:
    """Designs and baselearners shared by every iteration of one fit"""

    data: LongitudinalDataset
    config: BoostConfig
    bundle: DesignBundle
    fixed: FixedBaselearnerSet
    random: RandomBaselearner

    @classmethod
    def build(cls, data: LongitudinalDataset, config: BoostConfig) -> "BoostContext":
        bundle = assemble_designs(data)
        correction = build_correction(data, bundle, config.slope_interactions)
        return cls(
            data=data,
            config=config,
            bundle=bundle,
            fixed=FixedBaselearnerSet(data.X, data.covariate_names),
            random=RandomBaselearner(bundle, correction),
        )


def residual_variance(r: np.ndarray, estimator: str = "mean_square", floor: float = SIGMA2_FLOOR) -> float:
    """σ̂² from residuals, clamped at the floor"""
    if estimator == "centered" and r.shape[0] > 1:
        sigma2 = float(np.var(r, ddof=1))
    else:
        sigma2 = float(r @ r) / r.shape[0]
    if not np.isfinite(sigma2):
        raise NumericalError("non-finite residual variance")
    if sigma2 < floor:
        warnings.warn(f"residual variance {sigma2:.3g} clamped to {floor:g}", VarianceFloorWarning)
        sigma2 = floor
    return sigma2


def em_update_Q(
    ZtZ: np.ndarray,
    gamma_blocks: np.ndarray,
    sigma2: float,
    Q_prev: np.ndarray,
    floor: float = Q_FLOOR,
) -> np.ndarray:
    """Q = (1/n) Σ (F_i⁻¹ + γ_iγ_iᵀ) with F_i = Z_iᵀZ_i/σ² + Q_prev⁻¹"""
    q = Q_prev.shape[0]
    try:
        Q_prev_inv = linalg.cho_solve(linalg.cho_factor(Q_prev), np.eye(q))
    except linalg.LinAlgError:
        raise NumericalError("ill-conditioned variance state: previous Q is not positive definite")
    F = ZtZ / sigma2 + Q_prev_inv
    try:
        F_inv = np.linalg.inv(F)
    except np.linalg.LinAlgError:
        raise NumericalError("ill-conditioned variance state: singular posterior curvature")
    G = gamma_blocks
    Q = np.mean(F_inv + G[:, :, None] * G[:, None, :], axis=0)
    Q = 0.5 * (Q + Q.T)

    diag = np.diag(Q).copy()
    if np.any(diag < floor):
        warnings.warn(f"Q diagonal clamped to {floor:g}", VarianceFloorWarning)
        Q[np.diag_indices(q)] = np.maximum(diag, floor)
    if not np.all(np.isfinite(Q)):
        raise NumericalError("non-finite random-effects covariance")
    return Q


def _relative_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), np.finfo(float).tiny)


def initial_fit(bundle: DesignBundle, data: LongitudinalDataset, context: Optional[BoostContext] = None) -> ModelState:
    """Intercept-and-random-effects model the boosting starts from

    Alternates β₀ = mean(y − Zγ), a corrected ridge solve for γ and the
    EM-type variance updates until σ² and Q change by less than init_tol.
    """
    if context is None:
        context = BoostContext.build(data, BoostConfig(stopping="none"))
    config = context.config
    y = data.y
    n, q = bundle.n, bundle.q

    centered = y - y.mean()
    start = max(float(centered @ centered) / data.N, config.sigma2_floor)
    sigma2 = max(start / 2.0, config.sigma2_floor)
    Q = np.eye(q) * max(start / 2.0, config.q_floor)
    gamma = np.zeros(n * q)
    eta_gamma = np.zeros(data.N)
    beta0 = float(y.mean())

    converged = False
    with warnings.catch_warnings():
        # Floors hit while iterating are reported once below
        warnings.simplefilter("ignore", VarianceFloorWarning)
        for _ in range(config.init_max_rounds):
            beta0 = float(np.mean(y - eta_gamma))
            gamma, eta_gamma = context.random.fit(y - beta0, sigma2, Q)
            r = y - beta0 - eta_gamma
            sigma2_new = residual_variance(r, config.variance_estimator, config.sigma2_floor)
            Q_new = em_update_Q(bundle.ZtZ, gamma.reshape(n, q), sigma2_new, Q, config.q_floor)

            change = max(
                _relative_change(sigma2_new, sigma2),
                float(np.linalg.norm(Q_new - Q)) / max(float(np.linalg.norm(Q)), np.finfo(float).tiny),
            )
            sigma2, Q = sigma2_new, Q_new
            if change < config.init_tol:
                converged = True
                break

    if not converged:
        warnings.warn(
            f"initial fit did not converge in {config.init_max_rounds} rounds; using the last iterate",
            ConvergenceWarning,
        )
    if sigma2 <= config.sigma2_floor:
        warnings.warn(f"residual variance clamped to {config.sigma2_floor:g}", VarianceFloorWarning)

    return ModelState(
        beta0=beta0,
        beta=np.zeros(data.p),
        gamma=gamma,
        sigma2=sigma2,
        Q=Q,
        m=0,
        eta_beta=np.full(data.N, beta0),
        eta_gamma=eta_gamma,
    )


def negative_gradient(state: ModelState, y: np.ndarray) -> np.ndarray:
    """u = y − η̂ (the residuals, since ρ is the quadratic loss)"""
    return np.asarray(y, dtype=float) - state.eta


def step1_update_fixed(
    state: ModelState, u: np.ndarray, baselearners: FixedBaselearnerSet, nu: float
) -> Tuple[ModelState, Optional[int]]:
    """Update β₀ and the single best-fitting β_r*"""
    best = baselearners.select(u)
    if best is None:
        warnings.warn("no non-degenerate fixed baselearner; step 1 skipped", DegenerateDesignWarning)
        return state, None
    r, intercept, slope, fitted = best
    beta = state.beta.copy()
    beta[r] += nu * slope
    return (
        state.evolve(
            beta0=state.beta0 + nu * intercept,
            beta=beta,
            eta_beta=state.eta_beta + nu * fitted,
        ),
        r,
    )


def step2_update_random(state: ModelState, u: np.ndarray, random_bl: RandomBaselearner, nu: float) -> ModelState:
    """γ += ν·C(ZᵀZ + σ²Q_b⁻¹)⁻¹Zᵀu using the variance state of the previous iteration"""
    increment, fitted = random_bl.fit(u, state.sigma2, state.Q)
    return state.evolve(
        gamma=state.gamma + nu * increment,
        eta_gamma=state.eta_gamma + nu * fitted,
    )


def step3_update_variances(
    state: ModelState,
    y: np.ndarray,
    bundle: DesignBundle,
    estimator: str = "mean_square",
    sigma2_floor: float = SIGMA2_FLOOR,
    q_floor: float = Q_FLOOR,
) -> ModelState:
    """σ² from the current residuals, then Q with the new σ² and the previous Q"""
    sigma2 = residual_variance(negative_gradient(state, y), estimator, sigma2_floor)
    Q = em_update_Q(bundle.ZtZ, state.gamma_blocks(), sigma2, state.Q, q_floor)
    return state.evolve(sigma2=sigma2, Q=Q)


def iterate(context: BoostContext, state: ModelState) -> Tuple[ModelState, Optional[int], float, float]:
    """One boosting iteration: (state at m+1, r*, loss after step 1, loss after step 2)"""
    config = context.config
    y = context.data.y
    u = negative_gradient(state, y)
    state, r = step1_update_fixed(state, u, context.fixed, config.nu)
    u = negative_gradient(state, y)
    loss_step1 = 0.5 * float(u @ u)
    state = step2_update_random(state, u, context.random, config.nu)
    loss = training_loss(y, state.eta)
    state = step3_update_variances(
        state, y, context.bundle, config.variance_estimator, config.sigma2_floor, config.q_floor
    )
    return state.evolve(m=state.m + 1), r, loss_step1, loss


def boost_path(data: LongitudinalDataset, config: BoostConfig, hat_tracker=None) -> Tuple[FitTrace, ModelState, BoostContext]:
    """initial_fit followed by m_stop iterations, every iteration recorded

    hat_tracker, if given, is called once as hat_tracker(context, state, None)
    for the initial fit and then after every iteration with the state the
    iteration started from and its r*.
    """
    context = BoostContext.build(data, config)
    state = initial_fit(context.bundle, data, context)
    trace = FitTrace(state, training_loss(data.y, state.eta), config.gamma_every)
    if hat_tracker is not None:
        hat_tracker(context, state, None)

    tol_step1 = 1e-12
    tol_total = config.monotonicity_tol * data.N
    previous = trace.initial_loss
    for m in range(1, config.m_stop + 1):
        try:
            previous_state = state
            state, r, loss_step1, loss = iterate(context, state)
            if hat_tracker is not None:
                # S_γ of iteration m uses the variance state of iteration m-1
                hat_tracker(context, previous_state, r)
        except GrbLmmError as e:
            trace.error = f"iteration {m}: {e}"
            raise FitAborted(trace.error, trace=trace) from e

        if loss_step1 > previous + tol_step1 * max(previous, 1.0) or loss > previous + tol_total:
            trace.loss_violations.append(m)
            warnings.warn(
                f"training loss increased at iteration {m}: {previous:.6g} -> {loss:.6g}",
                MonotonicityWarning,
            )
        trace.record(state, -1 if r is None else r, loss_step1, loss)
        previous = loss
    return trace, state, context


def restore_state(context: BoostContext, trace: FitTrace, m: int) -> ModelState:
    """State after iteration m, replayed from the nearest checkpoint when needed"""
    if not 0 <= m <= trace.m_stop:
        raise ValueError(f"iteration {m} outside the recorded 0..{trace.m_stop}")
    state = trace.checkpoints[trace.latest_checkpoint(m)]
    while state.m < m:
        state, _, _, _ = iterate(context, state)
    return state


def run(data: LongitudinalDataset, config: BoostConfig) -> Tuple[FitTrace, ModelState]:
    """Fit the path, choose m* with the configured stopping rule, return the state at m*"""
    import stopping

    config.check_against(data)
    hat = None
    if config.stopping == "aic":
        hat = stopping.HatTracker()
    trace, last, context = boost_path(data, config, hat_tracker=hat)

    trace.stopping = config.stopping
    if config.stopping == "none":
        trace.m_star = trace.m_stop
    elif config.stopping == "aic":
        trace.df0 = hat.df0
        trace.df_path = np.asarray(hat.df_path)
        result = stopping.aic_curve(trace.df_path, trace.sigma2_path, data.N)
        trace.aic_path = result.aic
        trace.m_star = result.m_star
    else:
        plan = stopping.make_cv_plan(data, config.k, config.seed)
        trace.cv_risk = stopping.cv_risk(data, config, plan)
        trace.m_star = stopping.cv_argmin(trace.cv_risk)

    if trace.m_star == trace.m_stop:
        return trace, last
    return trace, restore_state(context, trace, trace.m_star)
