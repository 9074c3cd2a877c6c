"""
Fit artifacts for grbLMM: fit.json, trace.csv, manifest.json and predictions
"""

import hashlib
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from constants import FIT_FORMAT_VERSION, VERSION
from errors import DataError
from longitudinal_data import INTERCEPT, LongitudinalDataset
from model_state import FitTrace, ModelState, penalized_loglik as state_loglik


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: str, text: str) -> None:
    """Write via a temp file, keeping the previous version as .backup until done"""
    backup_file = path + ".backup"
    temp_file = path + ".tmp"
    try:
        with open(temp_file, "w", encoding="utf-8") as f:
            f.write(text)
        if os.path.exists(path):
            os.replace(path, backup_file)
        os.replace(temp_file, path)
        if os.path.exists(backup_file):
            os.remove(backup_file)
    except OSError:
        # Restore from backup if something went wrong
        if os.path.exists(backup_file) and not os.path.exists(path):
            os.replace(backup_file, path)
        raise


def scale_factors(data: LongitudinalDataset) -> np.ndarray:
    """Per-covariate standard deviations used by --scale (1 for constant columns)"""
    sd = data.X.std(axis=0)
    return np.where(sd > 0, sd, 1.0)


def effect_scales(z_terms: Sequence, sd: Optional[np.ndarray]) -> np.ndarray:
    """Divisors mapping random effects fitted on scaled covariates back to raw units"""
    if sd is None:
        return np.ones(len(z_terms))
    return np.array([1.0 if t == INTERCEPT else sd[t] for t in z_terms])


def _optional_float(value: Any) -> Optional[float]:
    return None if value is None else float(value)


@dataclass
class FitArtifact:
    """Everything needed to report and reuse a fitted model"""

    beta0: float
    beta: Dict[str, float]
    gamma: Dict[str, List[float]]
    sigma2: float
    Q: List[List[float]]
    m_star: int
    stopping: str
    random_terms: List[str]
    penalized_loglik: Optional[float] = None
    response_name: str = "y"
    cluster_name: str = "cluster"
    scale: Optional[Dict[str, float]] = None
    format_version: str = FIT_FORMAT_VERSION
    software_version: str = VERSION

    @classmethod
    def from_state(
        cls,
        data: LongitudinalDataset,
        state: ModelState,
        trace: FitTrace,
        sd: Optional[np.ndarray] = None,
    ) -> "FitArtifact":
        """Coefficients of state in raw covariate units (sd undoes --scale)"""
        beta = state.beta if sd is None else state.beta / sd
        d = effect_scales(data.z_terms, sd)
        gamma = state.gamma_blocks() / d
        Q = state.Q / np.outer(d, d)
        return cls(
            beta0=float(state.beta0),
            beta={name: float(b) for name, b in zip(data.covariate_names, beta)},
            gamma={str(c): [float(g) for g in row] for c, row in zip(data.clusters, gamma)},
            sigma2=float(state.sigma2),
            Q=[[float(v) for v in row] for row in Q],
            m_star=int(trace.m_star if trace.m_star is not None else state.m),
            stopping=trace.stopping,
            random_terms=list(data.random_terms),
            penalized_loglik=state_loglik(state, data),
            response_name=data.response_name,
            cluster_name=data.cluster_name,
            scale=None if sd is None else {n: float(s) for n, s in zip(data.covariate_names, sd)},
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "software_version": self.software_version,
            "stopping": self.stopping,
            "m_star": self.m_star,
            "response": self.response_name,
            "cluster": self.cluster_name,
            "random_terms": self.random_terms,
            "penalized_loglik": self.penalized_loglik,
            "beta0": self.beta0,
            "beta": self.beta,
            "gamma": self.gamma,
            "sigma2": self.sigma2,
            "Q": self.Q,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, save_data: Dict[str, Any]) -> "FitArtifact":
        version = save_data.get("format_version")
        if version != FIT_FORMAT_VERSION:
            raise DataError(f"unsupported fit format version {version!r} (expected {FIT_FORMAT_VERSION})")
        try:
            return cls(
                beta0=float(save_data["beta0"]),
                beta={k: float(v) for k, v in save_data["beta"].items()},
                gamma={k: [float(g) for g in v] for k, v in save_data["gamma"].items()},
                sigma2=float(save_data["sigma2"]),
                Q=[[float(v) for v in row] for row in save_data["Q"]],
                m_star=int(save_data["m_star"]),
                stopping=save_data["stopping"],
                random_terms=list(save_data["random_terms"]),
                penalized_loglik=_optional_float(save_data.get("penalized_loglik")),
                response_name=save_data.get("response", "y"),
                cluster_name=save_data.get("cluster", "cluster"),
                scale=save_data.get("scale"),
                software_version=save_data.get("software_version", VERSION),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed fit file: {e}")

    @property
    def covariate_names(self) -> List[str]:
        return list(self.beta)


def save_fit(artifact: FitArtifact, path: str) -> None:
    _atomic_write(path, json.dumps(artifact.to_dict(), indent=2, allow_nan=False) + "\n")


def load_fit(path: str) -> FitArtifact:
    if not os.path.exists(path):
        raise DataError(f"fit file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            save_data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read fit file {path}: {e}")
    return FitArtifact.from_dict(save_data)


def file_fingerprint(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    path: str,
    command: str,
    config: Dict[str, Any],
    seed: int,
    started: str,
    input_path: Optional[str] = None,
    outputs: Sequence[str] = (),
) -> Dict[str, Any]:
    """manifest.json beside the outputs: resolved config, input hash, version, seed, timestamps"""
    manifest = {
        "command": command,
        "software_version": VERSION,
        "config": config,
        "seed": seed,
        "input": None if input_path is None else {
            "path": os.path.abspath(input_path),
            "sha256": file_fingerprint(input_path),
        },
        "outputs": [os.path.basename(o) for o in outputs],
        "started": started,
        "finished": utc_now(),
    }
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def trace_frame(trace: FitTrace, data: LongitudinalDataset, sd: Optional[np.ndarray] = None) -> pd.DataFrame:
    """One row per iteration m = 1..m_stop: coefficient paths, loss, variances, stopping curves"""
    path = trace.beta_path
    names = list(data.covariate_names)
    selected = trace.selected_path
    frame = pd.DataFrame({
        "m": np.arange(1, trace.m_stop + 1),
        "selected": [names[r] if r >= 0 else "" for r in selected],
        "loss": trace.loss_path,
        "loss_step1": np.asarray(trace.loss_step1),
        "sigma2": trace.sigma2_path,
    })

    d = effect_scales(data.z_terms, sd)
    Q_path = np.array(trace.Q).reshape(trace.m_stop, data.q, data.q) / np.outer(d, d)
    terms = data.random_terms
    for s in range(data.q):
        for t in range(s, data.q):
            frame[f"Q[{terms[s]},{terms[t]}]"] = Q_path[:, s, t]

    frame["beta0"] = path[:, 0]
    coefficients = path[:, 1:] if sd is None else path[:, 1:] / sd
    for r, name in enumerate(names):
        frame[f"beta:{name}"] = coefficients[:, r]

    if trace.cv_risk is not None:
        frame["cv_risk"] = trace.cv_risk
    if trace.df_path is not None:
        frame["df"] = trace.df_path
        frame["aic"] = trace.aic_path
    return frame


def write_trace(trace: FitTrace, data: LongitudinalDataset, path: str, sd: Optional[np.ndarray] = None) -> None:
    trace_frame(trace, data, sd).to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


@dataclass
class PredictionResult:
    predictions: pd.DataFrame
    mspe: Optional[float]


def predict(artifact: FitArtifact, frame: pd.DataFrame) -> PredictionResult:
    """β₀ + xᵀβ (+ zᵀγ_i when the row's cluster was fitted), in input row order

    frame holds raw new data; the response column is optional and, when
    present, the mean squared prediction error is returned as well.
    """
    frame = frame.rename(columns=lambda c: str(c).strip())
    names = artifact.covariate_names
    needed = [artifact.cluster_name, *names]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DataError(f"new data lacks column(s) {missing}; fit expects {needed}")

    X = _numeric_block(frame, names)
    clusters = frame[artifact.cluster_name].astype(str).str.strip().to_numpy()
    eta = artifact.beta0 + X @ np.array([artifact.beta[n] for n in names])

    seen = np.array([c in artifact.gamma for c in clusters], dtype=bool)
    if seen.any():
        columns = [np.ones(len(frame)) if t == INTERCEPT else X[:, names.index(t[len("slope:"):])]
                   for t in artifact.random_terms]
        Z = np.column_stack(columns)
        G = np.array([artifact.gamma[c] for c in clusters[seen]])
        eta[seen] += np.sum(Z[seen] * G, axis=1)

    out = pd.DataFrame({
        artifact.cluster_name: clusters,
        "prediction": eta,
        "random_effects": np.where(seen, "cluster", "prior_mean"),
    })
    mspe = None
    if artifact.response_name in frame.columns:
        y = _numeric_block(frame, [artifact.response_name])[:, 0]
        out[artifact.response_name] = y
        mspe = float(np.mean((y - eta) ** 2))
    return PredictionResult(predictions=out, mspe=mspe)


def _numeric_block(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    cells = frame[list(columns)].astype(str).apply(lambda col: col.str.strip())
    values = cells.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise DataError(
            f"row {row + 1}: non-numeric value {cells.iat[row, col]!r} in column {columns[col]!r}",
            row=int(row + 1),
        )
    return values.to_numpy(dtype=float)


def read_new_data(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}")


def write_predictions(result: PredictionResult, path: str) -> None:
    result.predictions.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
