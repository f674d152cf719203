"""Ridge regression from voxel patterns to feature vectors, plus decoding metrics.

The decoder solves

    min_W,b  ||Z - (X W + b)||^2 + alpha ||W||^2

with the bias left unpenalized by centering. Voxel columns are optionally
z-scored with training statistics before the penalty is applied; the
stored ``W`` and ``b`` are folded back to raw voxel units so that
``predict_features`` is exactly ``X @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors

DEFAULT_ALPHA = 0.7
# stands in for alpha = 0 when the normal equations are singular
LINEAR_BASELINE_ALPHA = 1e-6


class SingularSystemError(np.linalg.LinAlgError):
    pass


class UndefinedR2Error(ValueError):
    pass


@dataclass
class RidgeModel:
    W: np.ndarray  # [V, F], raw voxel units
    b: np.ndarray  # [F]
    alpha: float
    x_mean: np.ndarray  # [V]
    x_scale: np.ndarray  # [V]; ones when standardization is off
    standardize: bool = True
    solver: str = "primal"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("ridge model has non-finite entries")

    @property
    def voxel_dim(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    @property
    def penalized_weights(self) -> np.ndarray:
        """The weights the L2 penalty acts on (standardized voxel units)."""
        return self.W * self.x_scale[:, None]

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        meta = {
            "alpha": self.alpha,
            "voxel_dim": self.voxel_dim,
            "feature_dim": self.feature_dim,
            "standardize": self.standardize,
            "solver": self.solver,
        }
        meta.update(extra or {})
        save_tensors(directory, {"W": self.W, "b": self.b, "x_mean": self.x_mean, "x_scale": self.x_scale}, meta)

    @classmethod
    def load(cls, directory: str | Path) -> "RidgeModel":
        t, meta = load_tensors(directory)
        return cls(
            t["W"].astype(np.float64), t["b"].astype(np.float64), float(meta["alpha"]),
            t["x_mean"].astype(np.float64), t["x_scale"].astype(np.float64),
            bool(meta["standardize"]), meta["solver"],
        )


def _cholesky_solve(A: np.ndarray, B: np.ndarray, alpha: float) -> np.ndarray:
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"normal matrix is not positive definite at alpha={alpha}; use alpha > 0"
        ) from exc
    y = np.linalg.solve(L, B)
    return np.linalg.solve(L.T, y)


def fit_ridge(X, Z, alpha: float, *, standardize: bool = True, solver: str = "auto") -> RidgeModel:
    """Closed-form multi-output ridge fit.

    ``solver="auto"`` uses the primal normal equations when ``V <= N`` and
    the dual (kernel) form ``Xc.T (Xc Xc.T + alpha I)^-1 Zc`` otherwise.
    With ``alpha == 0`` a rank-deficient centered design raises
    :class:`SingularSystemError`.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if X.ndim != 2 or Z.ndim != 2:
        raise ValueError("X and Z must be 2-D")
    N, V = X.shape
    if Z.shape[0] != N:
        raise ValueError(f"row count mismatch: X has {N}, Z has {Z.shape[0]}")
    if N < 2:
        raise ValueError("need at least 2 samples")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if solver == "auto":
        solver = "dual" if V > N else "primal"
    if solver not in ("primal", "dual"):
        raise ValueError(f"unknown solver {solver!r}")

    x_mean = X.mean(axis=0)
    z_mean = Z.mean(axis=0)
    x_scale = np.ones(V)
    if standardize:
        sd = X.std(axis=0)
        x_scale = np.where(sd > 0, sd, 1.0)
    Xc = (X - x_mean) / x_scale
    Zc = Z - z_mean

    if alpha == 0:
        needed = V if solver == "primal" else N
        if np.linalg.matrix_rank(Xc) < needed:
            raise SingularSystemError(
                f"centered design has rank {np.linalg.matrix_rank(Xc)} < {needed}; "
                "unregularized least squares is singular, use alpha > 0"
            )
    if solver == "primal":
        G = Xc.T @ Xc
        G[np.diag_indices_from(G)] += alpha
        Ws = _cholesky_solve(G, Xc.T @ Zc, alpha)
    else:
        K = Xc @ Xc.T
        K[np.diag_indices_from(K)] += alpha
        Ws = Xc.T @ _cholesky_solve(K, Zc, alpha)

    W = Ws / x_scale[:, None]
    b = z_mean - x_mean @ W
    return RidgeModel(W, b, float(alpha), x_mean, x_scale, standardize, solver)


def predict_features(model: RidgeModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.voxel_dim:
        raise ValueError(f"X has {X.shape[1]} columns, model expects {model.voxel_dim}")
    return X @ model.W + model.b


@dataclass
class RegressionMetrics:
    r_squared: float
    rmse: float
    excluded_dims: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"r_squared": self.r_squared, "rmse": self.rmse, "excluded_dims": self.excluded_dims}


def regression_metrics(Z_true, Z_hat) -> RegressionMetrics:
    """Uniform-average per-dimension R^2 and overall RMSE.

    Output dimensions whose true values are constant have no defined R^2;
    they are skipped and listed in ``excluded_dims``.
    """
    Zt = np.asarray(Z_true, dtype=np.float64)
    Zh = np.asarray(Z_hat, dtype=np.float64)
    if Zt.shape != Zh.shape:
        raise ValueError(f"shape mismatch {Zt.shape} vs {Zh.shape}")
    if Zt.ndim == 1:
        Zt, Zh = Zt[:, None], Zh[:, None]
    if Zt.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    resid = Zt - Zh
    ss_res = (resid**2).sum(axis=0)
    ss_tot = ((Zt - Zt.mean(axis=0)) ** 2).sum(axis=0)
    ok = ss_tot > 0
    if not ok.any():
        raise UndefinedR2Error("every output dimension has zero variance; R^2 is undefined")
    r2 = float(np.mean(1.0 - ss_res[ok] / ss_tot[ok]))
    rmse = float(np.sqrt(np.mean(resid**2)))
    return RegressionMetrics(r2, rmse, [int(i) for i in np.flatnonzero(~ok)])


def cv_select_alpha(X, Z, alphas, folds: int = 5, seed: int = 0, standardize: bool = True) -> tuple[float, list[float]]:
    """Pick the alpha with the best mean K-fold R^2 using training data only."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    N = X.shape[0]
    order = np.random.default_rng(seed).permutation(N)
    chunks = np.array_split(order, folds)
    scores = []
    for a in alphas:
        fold_scores = []
        for k in range(folds):
            val = chunks[k]
            tr = np.concatenate([chunks[j] for j in range(folds) if j != k])
            m = fit_ridge(X[tr], Z[tr], a, standardize=standardize)
            fold_scores.append(regression_metrics(Z[val], predict_features(m, X[val])).r_squared)
        scores.append(float(np.mean(fold_scores)))
    best = int(np.argmax(scores))
    return float(alphas[best]), scores


def fit_category_classifier(X, labels, num_categories: int, alpha: float = 1.0) -> RidgeModel:
    """Ridge regression onto one-hot category targets; predict with argmax."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((labels.size, num_categories))
    onehot[np.arange(labels.size), labels] = 1.0
    return fit_ridge(X, onehot, alpha)


def predict_categories(model: RidgeModel, X) -> np.ndarray:
    return np.argmax(predict_features(model, X), axis=1)
