"""Clinical characteristic selection and inverse-frequency sampling weights.

Characteristics with complete data are encoded into a normalized design
matrix, a LASSO path is fit against per-case tumor Dice with 5-fold
cross-validation, the one-standard-error lambda picks the sparse support,
and the selected characteristics are turned into per-case draw weights
for retraining.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import ClinicalRecord
from .train import SamplingWeights


@dataclass
class Column:
    """One design-matrix column and how to evaluate it on a record.

    `kind` is "binary" (truthy entry, or equality with `level` for one-hot
    categorical levels) or "continuous". mean/std hold the normalization.
    """

    name: str
    source: str
    kind: str
    level: str | None = None
    mean: float = 0.0
    std: float = 1.0


@dataclass
class DesignMatrix:
    columns: list[Column]
    X: np.ndarray
    y: np.ndarray
    case_ids: list[str]

    @property
    def column_means(self) -> np.ndarray:
        return np.array([c.mean for c in self.columns])

    @property
    def column_stds(self) -> np.ndarray:
        return np.array([c.std for c in self.columns])

    def to_original_scale(self, intercept: float, beta: np.ndarray) -> tuple[float, np.ndarray]:
        """Map standardized-scale coefficients back to raw characteristic units."""
        beta = np.asarray(beta, dtype=float)
        beta_orig = beta / self.column_stds
        intercept_orig = intercept - float(beta_orig @ self.column_means)
        return intercept_orig, beta_orig


def _raw_value(column: Column, record: ClinicalRecord) -> float:
    value = record.entries.get(column.source)
    if value is None:
        raise ValueError(f"record {record.case_id!r} is missing {column.source!r}")
    if column.level is not None:
        return 1.0 if str(value) == column.level else 0.0
    if column.kind == "binary":
        return 1.0 if value else 0.0
    return float(value)


def is_carrier(column: Column, record: ClinicalRecord, threshold: float | None = None) -> bool:
    """Whether a record possesses the characteristic the column encodes.

    Continuous characteristics are dichotomized: the carrier set is
    "value above `threshold`" (the training-split median).
    """
    if column.kind == "continuous":
        if threshold is None:
            raise ValueError(f"continuous column {column.name!r} needs a threshold")
        return _raw_value(column, record) > threshold
    return _raw_value(column, record) == 1.0


def build_design_matrix(records: list[ClinicalRecord], dice: dict[str, float]) -> DesignMatrix:
    """Encode complete-case clinical characteristics against per-case Dice.

    Characteristics missing in any record are dropped, categorical entries
    are one-hot encoded with one binary column per level, zero-variance
    columns are dropped, and every surviving column is z-normalized.
    """
    missing = [r.case_id for r in records if r.case_id not in dice]
    if missing:
        raise ValueError(f"no Dice outcome for cases {missing}")
    records = sorted(records, key=lambda r: r.case_id)
    if len(records) < 10:
        raise ValueError(f"need at least 10 cases for selection, got {len(records)}")

    keys = sorted({k for r in records for k in r.entries})
    complete = [k for k in keys if all(r.entries.get(k) is not None for r in records)]

    columns: list[Column] = []
    for key in complete:
        values = [r.entries[key] for r in records]
        if all(isinstance(v, bool) for v in values):
            columns.append(Column(name=key, source=key, kind="binary"))
        elif all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            columns.append(Column(name=key, source=key, kind="continuous"))
        else:
            for level in sorted({str(v) for v in values}):
                columns.append(Column(name=f"{key}={level}", source=key, kind="binary", level=level))

    raw = np.array([[_raw_value(c, r) for c in columns] for r in records], dtype=float)
    raw = raw.reshape(len(records), len(columns))
    stds = raw.std(axis=0)
    keep = stds > 0
    columns = [c for c, k in zip(columns, keep) if k]
    raw = raw[:, keep]
    if not columns:
        raise ValueError("no characteristics survive filtering")

    X = np.empty_like(raw)
    for j, col in enumerate(columns):
        col.mean = float(raw[:, j].mean())
        col.std = float(raw[:, j].std())
        X[:, j] = (raw[:, j] - col.mean) / col.std

    y = np.array([dice[r.case_id] for r in records], dtype=float)
    return DesignMatrix(columns=columns, X=X, y=y, case_ids=[r.case_id for r in records])


# ---------------------------------------------------------------------------
# LASSO
# ---------------------------------------------------------------------------


def _soft_threshold(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def lasso_objective(X, y, intercept, beta, lam) -> float:
    r = y - intercept - X @ beta
    n = len(y)
    return float((r @ r) / (2 * n) + lam * np.abs(beta).sum())


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty with an all-zero solution: max_j |x_j . (y - mean(y))| / n."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    n = len(y)
    # column-wise dots mirror the first descent sweep bit for bit, so a fit
    # at exactly this penalty cannot round one correlation past the threshold
    return float(max(abs(Xc[:, j] @ yc) / n for j in range(X.shape[1])))


def lasso_coordinate_descent(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
    beta0: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Minimize (1/2n)||y - b0 - X b||^2 + lam * ||b||_1 by cyclic descent.

    Columns are centered internally so the intercept is exact for any X;
    for standardized X it equals mean(y). Converges when the largest
    coefficient change in a sweep drops below `tol`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError(f"X {X.shape} does not match y of length {len(y)}")
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least 2 observations")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")

    col_means = X.mean(axis=0)
    Xc = X - col_means
    yc = y - y.mean()
    z = (Xc * Xc).sum(axis=0) / n
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    residual = yc - Xc @ beta

    objective = lasso_objective(Xc, yc, 0.0, beta, lam)
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            if z[j] == 0.0:
                continue
            old = beta[j]
            rho = (Xc[:, j] @ residual) / n + z[j] * old
            new = _soft_threshold(rho, lam) / z[j]
            if new != old:
                residual += Xc[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        previous, objective = objective, lasso_objective(Xc, yc, 0.0, beta, lam)
        # descent property: a sweep can never make the penalized loss worse
        assert objective <= previous + 1e-10 * max(1.0, previous)
        if max_delta < tol:
            break
    else:
        raise RuntimeError(f"coordinate descent did not converge in {max_sweeps} sweeps")

    intercept = float(y.mean() - beta @ col_means)
    return intercept, beta


def default_lambda_grid(
    X: np.ndarray, y: np.ndarray, size: int = 100, min_ratio: float = 1e-3
) -> np.ndarray:
    """Log-spaced penalties from lambda_max down to min_ratio * lambda_max."""
    top = lambda_max(X, y)
    if top <= 0:
        raise ValueError("lambda_max is zero; outcome carries no signal to regularize")
    return np.geomspace(top, min_ratio * top, size)


@dataclass
class LassoPath:
    lambdas: np.ndarray
    intercepts: np.ndarray
    coefficients: np.ndarray
    intercepts_std: np.ndarray
    coefficients_std: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    lambda_min: float
    lambda_1se: float
    column_names: list[str]

    def index_of(self, lam: float) -> int:
        return int(np.argmin(np.abs(self.lambdas - lam)))

    def to_dict(self) -> dict:
        return {
            "lambdas": self.lambdas.tolist(),
            "intercepts": self.intercepts.tolist(),
            "coefficients": self.coefficients.tolist(),
            "intercepts_std": self.intercepts_std.tolist(),
            "coefficients_std": self.coefficients_std.tolist(),
            "cv_mean": self.cv_mean.tolist(),
            "cv_se": self.cv_se.tolist(),
            "lambda_min": self.lambda_min,
            "lambda_1se": self.lambda_1se,
            "column_names": self.column_names,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LassoPath":
        return cls(
            lambdas=np.array(data["lambdas"]),
            intercepts=np.array(data["intercepts"]),
            coefficients=np.array(data["coefficients"]),
            intercepts_std=np.array(data["intercepts_std"]),
            coefficients_std=np.array(data["coefficients_std"]),
            cv_mean=np.array(data["cv_mean"]),
            cv_se=np.array(data["cv_se"]),
            lambda_min=data["lambda_min"],
            lambda_1se=data["lambda_1se"],
            column_names=list(data["column_names"]),
        )


def _fit_path(X, y, grid, tol, max_sweeps):
    """Warm-started fits along a decreasing penalty grid."""
    betas = np.empty((len(grid), X.shape[1]))
    intercepts = np.empty(len(grid))
    beta = np.zeros(X.shape[1])
    for i, lam in enumerate(grid):
        intercepts[i], beta = lasso_coordinate_descent(
            X, y, lam, tol=tol, max_sweeps=max_sweeps, beta0=beta
        )
        betas[i] = beta
    return intercepts, betas


def cv_select(
    X: np.ndarray,
    y: np.ndarray,
    n_folds: int = 5,
    lambda_grid: np.ndarray | None = None,
    seed: int = 0,
    column_names: list[str] | None = None,
    column_means: np.ndarray | None = None,
    column_stds: np.ndarray | None = None,
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
) -> LassoPath:
    """Cross-validated LASSO path with the one-standard-error rule.

    Fold assignment shuffles row indices with the seed and deals them
    round-robin, so the split is deterministic. Path coefficients come
    from full-data fits; the CV curve from per-fold refits.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < n_folds:
        raise ValueError(f"need at least {n_folds} cases, got {n}")
    if lambda_grid is None:
        grid = default_lambda_grid(X, y)
    else:
        grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
        if grid.size == 0:
            raise ValueError("lambda grid is empty")

    order = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % n_folds

    fold_mse = np.empty((n_folds, len(grid)))
    for fold in range(n_folds):
        held = fold_of == fold
        ic, bc = _fit_path(X[~held], y[~held], grid, tol, max_sweeps)
        predictions = ic[:, None] + bc @ X[held].T
        fold_mse[fold] = ((predictions - y[held]) ** 2).mean(axis=1)
    cv_mean = fold_mse.mean(axis=0)
    cv_se = fold_mse.std(axis=0, ddof=1) / np.sqrt(n_folds)

    best = int(np.argmin(cv_mean))
    lambda_min = float(grid[best])
    ceiling = cv_mean[best] + cv_se[best]
    one_se = int(np.argmax(cv_mean <= ceiling))  # grid is decreasing: first hit = largest lambda
    lambda_1se = float(grid[one_se])

    intercepts_std, betas_std = _fit_path(X, y, grid, tol, max_sweeps)
    if column_means is None or column_stds is None:
        intercepts, betas = intercepts_std.copy(), betas_std.copy()
    else:
        stds = np.asarray(column_stds, dtype=float)
        means = np.asarray(column_means, dtype=float)
        betas = betas_std / stds
        intercepts = intercepts_std - betas @ means
    names = column_names if column_names is not None else [f"x{j}" for j in range(p)]
    return LassoPath(
        lambdas=grid,
        intercepts=intercepts,
        coefficients=betas,
        intercepts_std=intercepts_std,
        coefficients_std=betas_std,
        cv_mean=cv_mean,
        cv_se=cv_se,
        lambda_min=lambda_min,
        lambda_1se=lambda_1se,
        column_names=names,
    )


# ---------------------------------------------------------------------------
# Selection result and sampling weights
# ---------------------------------------------------------------------------


@dataclass
class SelectedCharacteristic:
    name: str
    source: str
    kind: str
    coefficient: float
    sign: str
    level: str | None = None
    threshold: float | None = None

    def as_column(self) -> Column:
        return Column(name=self.name, source=self.source, kind=self.kind, level=self.level)


@dataclass
class SelectionResult:
    """Nonzero characteristics at the one-standard-error lambda."""

    intercept: float
    selected: list[SelectedCharacteristic]
    frequencies: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "selected": [
                {
                    "name": s.name,
                    "source": s.source,
                    "kind": s.kind,
                    "coefficient": s.coefficient,
                    "sign": s.sign,
                    "level": s.level,
                    "threshold": s.threshold,
                }
                for s in self.selected
            ],
            "frequencies": self.frequencies,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionResult":
        return cls(
            intercept=data["intercept"],
            selected=[SelectedCharacteristic(**s) for s in data["selected"]],
            frequencies=dict(data["frequencies"]),
        )


def make_selection_result(
    design: DesignMatrix,
    path: LassoPath,
    train_records: list[ClinicalRecord],
) -> SelectionResult:
    """Extract the support at lambda_1se and its training-split frequencies.

    Continuous characteristics get their dichotomization threshold (the
    training-split median) fixed here, so downstream weighting is a pure
    function of the stored result.
    """
    idx = path.index_of(path.lambda_1se)
    coefs = path.coefficients_std[idx]
    selected: list[SelectedCharacteristic] = []
    frequencies: dict[str, float] = {}
    for j, column in enumerate(design.columns):
        # anti-correlated one-hot partners sit exactly on the soft-threshold
        # boundary and can leave +-1ulp residues; those are numerical zeros
        if abs(coefs[j]) <= 1e-10:
            continue
        threshold = None
        if column.kind == "continuous":
            threshold = float(np.median([_raw_value(column, r) for r in train_records]))
        item = SelectedCharacteristic(
            name=column.name,
            source=column.source,
            kind=column.kind,
            coefficient=float(coefs[j]),
            sign="+" if coefs[j] > 0 else "-",
            level=column.level,
            threshold=threshold,
        )
        selected.append(item)
        carriers = [is_carrier(column, r, threshold) for r in train_records]
        frequencies[column.name] = float(np.mean(carriers))
    return SelectionResult(
        intercept=float(path.intercepts_std[idx]), selected=selected, frequencies=frequencies
    )


def compute_sampling_weights(
    selection: SelectionResult, train_records: list[ClinicalRecord]
) -> SamplingWeights:
    """Inverse-frequency draw weights from the selected characteristics.

    Positive coefficient: cases lacking the characteristic get factor
    1/frequency, carriers get 1. Negative coefficient swaps the roles.
    Factors multiply across characteristics; the result is normalized to
    mean 1. Selecting nothing leaves every weight at 1.
    """
    weights = {r.case_id: 1.0 for r in train_records}
    if not weights:
        raise ValueError("no training records")
    for item in selection.selected:
        column = item.as_column()
        carrier = {r.case_id: is_carrier(column, r, item.threshold) for r in train_records}
        freq = sum(carrier.values()) / len(train_records)
        if freq in (0.0, 1.0):
            raise ValueError(
                f"characteristic {item.name!r} has frequency {freq} in the training split; "
                "inverse-frequency weighting is undefined"
            )
        for cid, has in carrier.items():
            # positive coefficient boosts non-carriers, negative boosts carriers
            if (item.coefficient > 0 and not has) or (item.coefficient < 0 and has):
                weights[cid] *= 1.0 / freq
    return SamplingWeights(weights)
