"""
Clustered longitudinal data and design matrices for grbLMM
"""

import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sparse

from errors import DataError

INTERCEPT = "intercept"
CLUSTER_CONSTANT = "cluster-constant"
CLUSTER_VARYING = "cluster-varying"

ZTerm = Union[str, int]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _cluster_starts(sizes: np.ndarray) -> np.ndarray:
    return np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.intp)


def infer_covariate_kind(X: np.ndarray, sizes: np.ndarray) -> Tuple[str, ...]:
    """Flag each column cluster-constant or cluster-varying (rows grouped by cluster)"""
    if X.shape[1] == 0:
        return ()
    starts = _cluster_starts(sizes)
    lo = np.minimum.reduceat(X, starts, axis=0)
    hi = np.maximum.reduceat(X, starts, axis=0)
    constant = np.all(lo == hi, axis=0)
    return tuple(CLUSTER_CONSTANT if c else CLUSTER_VARYING for c in constant)


@dataclass(frozen=True)
class LongitudinalDataset:
    """Clustered observations, rows stored grouped by cluster in first-appearance order"""

    cluster_ids: np.ndarray
    y: np.ndarray
    X: np.ndarray
    z_terms: Tuple[ZTerm, ...]
    covariate_kind: Tuple[str, ...]
    covariate_names: Tuple[str, ...]
    clusters: np.ndarray
    cluster_sizes: np.ndarray
    codes: np.ndarray
    source_rows: np.ndarray
    response_name: str = "y"
    cluster_name: str = "cluster"

    @classmethod
    def from_arrays(
        cls,
        cluster_ids: Sequence,
        y: Sequence[float],
        X,
        z_terms: Sequence[ZTerm] = (INTERCEPT,),
        covariate_names: Optional[Sequence[str]] = None,
        covariate_kind: Optional[Sequence[str]] = None,
        clusters: Optional[Sequence] = None,
        response_name: str = "y",
        cluster_name: str = "cluster",
    ) -> "LongitudinalDataset":
        """Validate raw arrays and group rows by cluster (stable, first-appearance order)"""
        cluster_ids = np.asarray(cluster_ids)
        y = np.asarray(y, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        N = y.shape[0]

        if N == 0:
            raise DataError("dataset has no observations")
        if cluster_ids.shape != (N,) or X.shape[0] != N:
            raise DataError(
                f"length mismatch: {cluster_ids.shape[0]} cluster ids, {N} responses, {X.shape[0]} covariate rows"
            )
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise DataError("non-finite value in response or covariates")

        codes, uniques = pd.factorize(cluster_ids, sort=False)
        uniques = np.asarray(uniques)
        if clusters is not None:
            clusters = list(clusters)
            present = set(uniques.tolist())
            empty = [c for c in clusters if c not in present]
            if empty:
                raise DataError(f"empty cluster(s) without observations: {empty}")
            unknown = present.difference(clusters)
            if unknown:
                raise DataError(f"observations for undeclared cluster(s): {sorted(map(str, unknown))}")

        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        sizes = np.bincount(codes, minlength=len(uniques))

        p = X.shape[1]
        if covariate_names is None:
            covariate_names = tuple(f"x{r + 1}" for r in range(p))
        covariate_names = tuple(str(c) for c in covariate_names)
        if len(covariate_names) != p:
            raise DataError(f"{len(covariate_names)} covariate names for {p} columns")

        X = X[order]
        inferred = infer_covariate_kind(X, sizes)
        if covariate_kind is None:
            covariate_kind = inferred
        else:
            covariate_kind = tuple(covariate_kind)
            if len(covariate_kind) != p:
                raise DataError(f"{len(covariate_kind)} covariate kinds for {p} columns")
            for r, (given, actual) in enumerate(zip(covariate_kind, inferred)):
                if given not in (CLUSTER_CONSTANT, CLUSTER_VARYING):
                    raise DataError(f"unknown covariate kind {given!r}")
                if given == CLUSTER_CONSTANT and actual != CLUSTER_CONSTANT:
                    raise DataError(
                        f"covariate {covariate_names[r]!r} flagged cluster-constant but varies within a cluster"
                    )

        z_terms = tuple(z_terms)
        if not z_terms:
            raise DataError("at least one random effect is required")
        for term in z_terms:
            if term == INTERCEPT:
                continue
            if isinstance(term, (int, np.integer)) and not isinstance(term, bool) and 0 <= term < p:
                continue
            raise DataError(f"random-effect term {term!r} is neither 'intercept' nor a covariate index")
        z_terms = tuple(t if t == INTERCEPT else int(t) for t in z_terms)

        return cls(
            cluster_ids=_readonly(cluster_ids[order]),
            y=_readonly(y[order]),
            X=_readonly(X),
            z_terms=z_terms,
            covariate_kind=tuple(covariate_kind),
            covariate_names=covariate_names,
            clusters=_readonly(uniques),
            cluster_sizes=_readonly(sizes),
            codes=_readonly(codes),
            source_rows=_readonly(order),
            response_name=response_name,
            cluster_name=cluster_name,
        )

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def n(self) -> int:
        return self.clusters.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return len(self.z_terms)

    @property
    def cluster_slices(self) -> List[slice]:
        starts = _cluster_starts(self.cluster_sizes)
        return [slice(s, s + k) for s, k in zip(starts, self.cluster_sizes)]

    @property
    def random_terms(self) -> List[str]:
        """Random-effect descriptors as strings ('intercept', 'slope:NAME')"""
        return [t if t == INTERCEPT else f"slope:{self.covariate_names[t]}" for t in self.z_terms]

    def take_rows(self, mask: np.ndarray) -> "LongitudinalDataset":
        """Dataset restricted to the stored rows selected by a boolean mask"""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DataError("row selection is empty")
        return LongitudinalDataset.from_arrays(
            self.cluster_ids[mask],
            self.y[mask],
            self.X[mask],
            z_terms=self.z_terms,
            covariate_names=self.covariate_names,
            response_name=self.response_name,
            cluster_name=self.cluster_name,
        )

    def subset(self, cluster_indices: Sequence[int]) -> "LongitudinalDataset":
        """Dataset containing only the given clusters (indices into self.clusters)"""
        keep = np.zeros(self.n, dtype=bool)
        keep[np.asarray(cluster_indices, dtype=np.intp)] = True
        return self.take_rows(keep[self.codes])

    def with_covariates(self, X: np.ndarray) -> "LongitudinalDataset":
        """Same rows with rescaled covariate values (stored row order, kinds unchanged)"""
        X = np.array(X, dtype=float)
        if X.shape != self.X.shape or not np.all(np.isfinite(X)):
            raise DataError(f"replacement covariates must be finite with shape {self.X.shape}")
        return replace(self, X=_readonly(X))


@dataclass(frozen=True)
class DesignBundle:
    """Fixed-effect matrix and block-diagonal random-effect design"""

    X_full: np.ndarray
    Z_block: sparse.csr_matrix
    Z_rows: np.ndarray
    ZtZ: np.ndarray
    cluster_slices: Tuple[slice, ...]
    codes: np.ndarray
    n: int
    q: int

    @property
    def N(self) -> int:
        return self.X_full.shape[0]

    def Z_times(self, gamma: np.ndarray) -> np.ndarray:
        """Z·γ for cluster-major γ of length n·q"""
        return self.Z_block @ gamma

    def Zt_times(self, u: np.ndarray) -> np.ndarray:
        """Zᵀu as an (n, q) array (row i = Z_iᵀu_i)"""
        return (self.Z_block.T @ u).reshape(self.n, self.q)


def random_design_rows(X: np.ndarray, z_terms: Sequence[ZTerm]) -> np.ndarray:
    """Per-row random-effect covariates z_ij, shape (N, q)"""
    cols = [np.ones(X.shape[0]) if t == INTERCEPT else X[:, t] for t in z_terms]
    return np.column_stack(cols)


def assemble_designs(data: LongitudinalDataset) -> DesignBundle:
    """Build X and the block-diagonal Z = dg(Z_1, ..., Z_n) with cluster-major columns"""
    if np.any(data.cluster_sizes < 1):
        raise DataError("empty cluster in dataset")
    for t in data.z_terms:
        if t != INTERCEPT and not np.any(data.X[:, t] != 0):
            raise DataError(
                f"random slope on covariate {data.covariate_names[t]!r} which is identically zero"
            )

    N, n, q = data.N, data.n, data.q
    Z_rows = random_design_rows(data.X, data.z_terms)

    rows = np.repeat(np.arange(N), q)
    cols = (data.codes[:, None] * q + np.arange(q)[None, :]).ravel()
    Z_block = sparse.csr_matrix((Z_rows.ravel(), (rows, cols)), shape=(N, n * q))

    outer = Z_rows[:, :, None] * Z_rows[:, None, :]
    ZtZ = np.add.reduceat(outer, _cluster_starts(data.cluster_sizes), axis=0)

    return DesignBundle(
        X_full=data.X,
        Z_block=Z_block,
        Z_rows=_readonly(Z_rows),
        ZtZ=_readonly(ZtZ),
        cluster_slices=tuple(data.cluster_slices),
        codes=data.codes,
        n=n,
        q=q,
    )


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of an input CSV"""

    cluster_col: str
    response_col: str
    fixed_cols: Tuple[str, ...]
    random_terms: Tuple[str, ...] = (INTERCEPT,)

    def z_terms(self) -> Tuple[ZTerm, ...]:
        """Translate 'intercept' / 'slope:NAME' into dataset descriptors"""
        terms: List[ZTerm] = []
        for term in self.random_terms:
            term = term.strip()
            if term == INTERCEPT:
                terms.append(INTERCEPT)
            elif term.startswith("slope:"):
                name = term[len("slope:"):]
                if name not in self.fixed_cols:
                    raise DataError(f"random slope on {name!r} which is not a fixed covariate column")
                terms.append(self.fixed_cols.index(name))
            else:
                raise DataError(f"unknown random term {term!r}; use 'intercept' or 'slope:NAME'")
        return tuple(terms)


def ingest_csv(path: str, schema: CsvSchema, drop_missing: bool = False) -> LongitudinalDataset:
    """Read a CSV into a LongitudinalDataset

    Rows are numbered from 1 (first data row after the header) in error
    messages. Rows with missing response or covariates raise a DataError
    listing them; with drop_missing they are dropped with a warning instead.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}")

    frame = frame.fillna("")
    frame.columns = [c.strip() for c in frame.columns]
    wanted = [schema.cluster_col, schema.response_col, *schema.fixed_cols]
    unknown = [c for c in wanted if c not in frame.columns]
    if unknown:
        raise DataError(f"unknown column(s) {unknown}; header has {list(frame.columns)}")
    if not schema.fixed_cols:
        raise DataError("at least one covariate column is required")
    z_terms = schema.z_terms()

    numeric_cols = [schema.response_col, *schema.fixed_cols]
    cells = frame[numeric_cols].apply(lambda col: col.str.strip())
    blank = cells.eq("").to_numpy()
    blank_cluster = frame[schema.cluster_col].str.strip().eq("").to_numpy()
    values = cells.apply(pd.to_numeric, errors="coerce")

    bad = values.isna().to_numpy() & ~blank
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise DataError(
            f"row {row + 1}: non-numeric value {cells.iat[row, col]!r} in column {numeric_cols[col]!r}",
            row=int(row + 1),
        )

    missing_rows = np.flatnonzero(blank.any(axis=1) | blank_cluster)
    if missing_rows.size:
        names = [schema.cluster_col, *numeric_cols]
        flags = np.column_stack([blank_cluster, blank])
        report = ", ".join(
            f"row {r + 1} ({', '.join(c for c, b in zip(names, flags[r]) if b)})"
            for r in missing_rows[:20]
        )
        if not drop_missing:
            raise DataError(f"missing values: {report}", row=int(missing_rows[0] + 1))
        if missing_rows.size == frame.shape[0]:
            raise DataError("all rows rejected because of missing values")
        warnings.warn(f"dropped {missing_rows.size} row(s) with missing values: {report}")

    keep = np.ones(frame.shape[0], dtype=bool)
    keep[missing_rows] = False
    if not keep.any():
        raise DataError("all rows rejected: file has no data rows")

    return LongitudinalDataset.from_arrays(
        frame[schema.cluster_col].str.strip().to_numpy()[keep],
        values[schema.response_col].to_numpy()[keep],
        values[list(schema.fixed_cols)].to_numpy()[keep],
        z_terms=z_terms,
        covariate_names=schema.fixed_cols,
        response_name=schema.response_col,
        cluster_name=schema.cluster_col,
    )


def export_csv(data: LongitudinalDataset, path: str) -> None:
    """Write a dataset as CSV in stored row order (inverse of ingest_csv)"""
    frame = pd.DataFrame({data.cluster_name: data.cluster_ids, data.response_name: data.y})
    for r, name in enumerate(data.covariate_names):
        frame[name] = data.X[:, r]
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


def split_train_test(
    data: LongitudinalDataset, fraction: float = 2.0 / 3.0, seed: int = 0
) -> Tuple[LongitudinalDataset, LongitudinalDataset]:
    """Random row split; clusters may appear in both parts"""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"train fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    n_train = int(round(fraction * data.N))
    if n_train < 1 or n_train >= data.N:
        raise DataError(f"split of {data.N} rows at {fraction} leaves an empty part")
    train_mask = np.zeros(data.N, dtype=bool)
    train_mask[rng.permutation(data.N)[:n_train]] = True
    return data.take_rows(train_mask), data.take_rows(~train_mask)
