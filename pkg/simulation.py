"""
Simulation designs and benchmark harness for grbLMM

Designs:
    random_intercepts   β = (1; 2, 4, 3, 5, 0, ...), x1 and x2 cluster-constant,
                        γ_0i ~ N(0, τ²)
    random_slopes       same fixed part, random intercept plus slopes on x3
                        and x4 with Q = τ²(0.4·I + 0.6·J)
    constant_covariate  y_ij = x_i + γ_i + ε_ij with one cluster-constant
                        covariate (the selection-bias experiment)
"""

import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from boost_engine import BoostConfig, coerce_numeric_fields, run
from constants import (
    DESIGNS,
    SIMULATION,
    SLOPE_CORRELATION,
    STOPPING_RULES,
    TRUE_INTERCEPT,
    TRUE_SLOPES,
)
from errors import ConfigError, GrbLmmError
from longitudinal_data import (
    CLUSTER_CONSTANT,
    CLUSTER_VARYING,
    INTERCEPT,
    LongitudinalDataset,
    random_design_rows,
)
from model_state import ModelState

METRICS = (
    "mse_beta", "mse_gamma", "mse_sigma", "mse_tau", "mse_Q",
    "fp_rate", "fn_rate", "m_star", "beta1_hat", "min_eig_Q",
)


@dataclass(frozen=True)
class SimulationConfig:
    """One grid cell of a simulation study"""

    design: str = SIMULATION["design"]
    n: int = SIMULATION["n"]
    n_i: int = SIMULATION["n_i"]
    p: int = SIMULATION["p"]
    tau: float = SIMULATION["tau"]
    sigma: float = SIMULATION["sigma"]
    replications: int = SIMULATION["replications"]
    seed: int = SIMULATION["seed"]
    m_stop: int = SIMULATION["m_stop"]
    nu: float = SIMULATION["nu"]
    k: int = SIMULATION["k"]

    def __post_init__(self):
        coerce_numeric_fields(self, ("n", "n_i", "p", "replications", "seed", "m_stop", "k"), ("tau", "sigma", "nu"))
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; choose from {', '.join(DESIGNS)}")
        if self.n < 2:
            raise ConfigError(f"invalid grid cell: n = {self.n} (need at least 2 clusters)")
        if self.n_i < 1:
            raise ConfigError(f"invalid grid cell: n_i = {self.n_i}")
        if self.design != "constant_covariate" and self.p < len(TRUE_SLOPES):
            raise ConfigError(f"invalid grid cell: p = {self.p} (design {self.design} needs p >= {len(TRUE_SLOPES)})")
        if not self.tau >= 0:
            raise ConfigError(f"invalid grid cell: tau = {self.tau}")
        if not self.sigma > 0:
            raise ConfigError(f"invalid grid cell: sigma = {self.sigma}")
        if self.replications < 1:
            raise ConfigError(f"invalid grid cell: replications = {self.replications}")

    @property
    def n_covariates(self) -> int:
        return 1 if self.design == "constant_covariate" else self.p

    def boost_config(self, stopping: str, seed: int = 0, workers: int = 1) -> BoostConfig:
        return BoostConfig(nu=self.nu, m_stop=self.m_stop, stopping=stopping, k=self.k, seed=seed, workers=workers)


@dataclass(frozen=True)
class SimulationTruth:
    """Parameters the data were generated from"""

    beta0: float
    beta: np.ndarray
    gamma: np.ndarray
    sigma: float
    tau: float
    Q: np.ndarray
    informative: Tuple[int, ...]


def true_covariance(design: str, tau: float) -> np.ndarray:
    """Q of a design: τ² for random intercepts, τ²(0.4·I + 0.6·J) for random slopes"""
    if design == "random_slopes":
        return tau ** 2 * ((1 - SLOPE_CORRELATION) * np.eye(3) + SLOPE_CORRELATION * np.ones((3, 3)))
    return np.array([[tau ** 2]])


def replication_seed(config: SimulationConfig, replication: int) -> np.random.SeedSequence:
    """Counter-based seed: depends only on the cell and the replication number"""
    return np.random.SeedSequence(
        [config.seed, DESIGNS.index(config.design), config.p, int(round(config.tau * 1e6)), replication]
    )


def generate(design: str, config: SimulationConfig, rep_seed) -> Tuple[LongitudinalDataset, SimulationTruth]:
    """Draw one dataset of a design together with its ground truth"""
    if design != config.design:
        config = replace(config, design=design)
    rng = np.random.default_rng(rep_seed)
    n, n_i = config.n, config.n_i
    N = n * n_i
    cluster_ids = np.repeat(np.arange(n), n_i)

    if design == "constant_covariate":
        X = np.repeat(rng.standard_normal((n, 1)), n_i, axis=0)
        kinds = (CLUSTER_CONSTANT,)
        beta0, beta = 0.0, np.array([1.0])
        z_terms: Sequence = (INTERCEPT,)
        informative: Tuple[int, ...] = (0,)
    else:
        p = config.p
        X = rng.standard_normal((N, p))
        X[:, :2] = np.repeat(rng.standard_normal((n, 2)), n_i, axis=0)
        kinds = (CLUSTER_CONSTANT,) * 2 + (CLUSTER_VARYING,) * (p - 2)
        beta0 = TRUE_INTERCEPT
        beta = np.zeros(p)
        beta[: len(TRUE_SLOPES)] = TRUE_SLOPES
        z_terms = (INTERCEPT, 2, 3) if design == "random_slopes" else (INTERCEPT,)
        informative = tuple(range(len(TRUE_SLOPES)))

    Q = true_covariance(design, config.tau)
    q = Q.shape[0]
    draws = rng.standard_normal((n, q))
    if config.tau > 0:
        G = draws @ np.linalg.cholesky(Q).T
    else:
        G = np.zeros((n, q))
    eps = config.sigma * rng.standard_normal(N)

    Z_rows = random_design_rows(X, z_terms)
    y = beta0 + X @ beta + np.sum(Z_rows * G[cluster_ids], axis=1) + eps

    data = LongitudinalDataset.from_arrays(cluster_ids, y, X, z_terms=z_terms, covariate_kind=kinds)
    truth = SimulationTruth(
        beta0=beta0,
        beta=beta,
        gamma=G.ravel(),
        sigma=config.sigma,
        tau=config.tau,
        Q=Q,
        informative=informative,
    )
    return data, truth


def clustered_data(
    n=8,
    n_i=5,
    p=4,
    tau=0.5,
    sigma=0.3,
    seed=0,
    z_terms=(INTERCEPT,),
    constant_cols=(0,),
    beta=None,
    beta0=1.0,
):
    """Small balanced dataset with known coefficients (x1 cluster-constant by default)

    Used by the tests, benchmarks and acceptance checks; β defaults to (2, -1, 0, ...).
    """
    rng = np.random.default_rng(seed)
    N = n * n_i
    cluster_ids = np.repeat(np.arange(n), n_i)
    X = rng.standard_normal((N, p))
    for r in constant_cols:
        X[:, r] = np.repeat(rng.standard_normal(n), n_i)
    if beta is None:
        beta = np.zeros(p)
        beta[: min(p, 2)] = (2.0, -1.0)[: min(p, 2)]
    q = len(z_terms)
    G = tau * rng.standard_normal((n, q))
    Z = random_design_rows(X, z_terms)
    y = beta0 + X @ np.asarray(beta) + np.sum(Z * G[cluster_ids], axis=1) + sigma * rng.standard_normal(N)
    return LongitudinalDataset.from_arrays(cluster_ids, y, X, z_terms=z_terms)


def evaluate(truth: SimulationTruth, state: ModelState) -> Dict[str, float]:
    """Estimation errors and selection rates of one fitted model"""
    if state.beta.shape != truth.beta.shape or state.gamma.shape != truth.gamma.shape:
        raise ValueError("fitted state and truth have different dimensions")
    beta_true = np.concatenate(([truth.beta0], truth.beta))
    beta_hat = np.concatenate(([state.beta0], state.beta))

    selected = state.beta != 0
    informative = np.zeros(truth.beta.shape[0], dtype=bool)
    informative[list(truth.informative)] = True
    noise = ~informative

    return {
        "mse_beta": float(np.sum((beta_true - beta_hat) ** 2)),
        "mse_gamma": float(np.sum((truth.gamma - state.gamma) ** 2)),
        "mse_sigma": float((truth.sigma ** 2 - state.sigma2) ** 2),
        "mse_tau": float((truth.Q[0, 0] - state.Q[0, 0]) ** 2),
        "mse_Q": float(np.sum((truth.Q - state.Q) ** 2)),
        "fp_rate": float(selected[noise].mean()) if noise.any() else 0.0,
        "fn_rate": float((~selected[informative]).mean()) if informative.any() else 0.0,
        "beta1_hat": float(state.beta[0]),
        "min_eig_Q": float(np.linalg.eigvalsh(state.Q).min()),
    }


def run_replication(job) -> List[Dict[str, Any]]:
    """Generate one dataset and fit it with every variant (one row per variant)"""
    config, variants, replication = job
    seed = replication_seed(config, replication)
    data, truth = generate(config.design, config, seed)

    rows = []
    for variant in variants:
        row: Dict[str, Any] = {
            "design": config.design,
            "tau": config.tau,
            "p": config.n_covariates,
            "variant": variant,
            "replication": replication,
        }
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                trace, state = run(data, config.boost_config(variant, seed=replication))
            row.update(evaluate(truth, state))
            row["m_star"] = trace.m_star
            row["error"] = ""
        except GrbLmmError as e:
            row.update({metric: float("nan") for metric in METRICS})
            row["error"] = f"{e.code}: {e}"
        rows.append(row)
    return rows


@dataclass
class SimulationReport:
    """Per-replication rows and per-cell aggregates of a benchmark run"""

    rows: List[Dict[str, Any]]
    aggregates: List[Dict[str, Any]]

    @property
    def failures(self) -> List[Dict[str, Any]]:
        return [row for row in self.rows if row["error"]]

    def frame(self) -> pd.DataFrame:
        columns = ["design", "tau", "p", "variant", "replication", *METRICS, "error"]
        return pd.DataFrame(self.rows, columns=columns)

    def write_csv(self, path: str) -> None:
        self.frame().to_csv(path, index=False, float_format="%.17g", encoding="utf-8")

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"cells": self.aggregates}, f, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
            f.write("\n")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def aggregate(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Mean of every metric per (design, tau, p, variant), ignoring failed replications"""
    if not rows:
        return []
    frame = pd.DataFrame(list(rows))
    frame = frame.sort_values(["design", "tau", "p", "variant", "replication"], kind="stable")
    cells = []
    for (design, tau, p, variant), group in frame.groupby(["design", "tau", "p", "variant"], sort=True):
        ok = group[group["error"] == ""]
        cell: Dict[str, Any] = {
            "design": design,
            "tau": float(tau),
            "p": int(p),
            "variant": variant,
            "replications": int(len(group)),
            "failed": int(len(group) - len(ok)),
        }
        for metric in METRICS:
            cell[metric] = float(ok[metric].mean()) if len(ok) else None
        cells.append(cell)
    return cells


def grid_cells(grid: Mapping[str, Any]) -> List[SimulationConfig]:
    """Expand a grid section (scalars or lists for tau and p) into cell configs"""
    known = set(SimulationConfig.__dataclass_fields__)
    extra = set(grid) - known - {"variants"}
    if extra:
        raise ConfigError(f"unknown grid key(s): {', '.join(sorted(extra))}")

    taus = grid.get("tau", SIMULATION["tau"])
    ps = grid.get("p", SIMULATION["p"])
    taus = taus if isinstance(taus, list) else [taus]
    ps = ps if isinstance(ps, list) else [ps]
    base = {key: value for key, value in grid.items() if key in known and key not in ("tau", "p")}
    return [SimulationConfig(tau=tau, p=p, **base) for tau, p in product(taus, ps)]


def bench_grid(
    grid: Mapping[str, Any],
    workers: int = 1,
    progress: Optional[bool] = None,
) -> SimulationReport:
    """Run every variant on every cell × replication of a grid

    Failed replications are recorded with their error and the grid continues.
    """
    variants = list(grid.get("variants", ["cv", "aic"]))
    for variant in variants:
        if variant not in STOPPING_RULES:
            raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(STOPPING_RULES)}")
    cells = grid_cells(grid)
    jobs = [(cell, variants, rep) for cell in cells for rep in range(cell.replications)]

    if progress is None:
        progress = sys.stderr.isatty()
    bar = tqdm(total=len(jobs), desc="simulate", unit="rep", disable=not progress, file=sys.stderr)

    rows: List[Dict[str, Any]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            for result in executor.map(run_replication, jobs):
                rows.extend(result)
                bar.update(1)
    else:
        for job in jobs:
            rows.extend(run_replication(job))
            bar.update(1)
    bar.close()

    return SimulationReport(rows=rows, aggregates=aggregate(rows))


def write_report(report: SimulationReport, out_dir: str, stem: str = "simulation") -> Tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    report.write_csv(csv_path)
    report.write_json(json_path)
    return csv_path, json_path