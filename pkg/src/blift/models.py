"""Response-surface models used to estimate the outcome functions.

Three families, all supporting row weights (bootstrap multiplicities):

* ``PolynomialModel``: least squares on a second-order basis in the exposure pair
  plus linear terms in the remaining columns.
* ``KernelRidgeModel``: Gaussian-kernel ridge regression on standardized features
  with an unpenalized linear drift, (bandwidth, ridge) chosen by k-fold CV. The
  drift interacts with binary columns, so each group gets its own linear trend;
  far outside the data the Gaussian part vanishes and predictions follow the drift.
  Exact dense solve up to ``max_exact`` rows, Nystrom with landmarks drawn from the
  distinct rows above that.
* ``BoostedTreesModel``: depth-limited squared-loss boosting (scikit-learn trees),
  stored as plain arrays so predictions replay without scikit-learn objects.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import EstimationError

METHODS = ("lp", "krr", "gbt")


@dataclass(frozen=True)
class KrrConfig:
    bandwidth_factors: tuple[float, ...] = tuple(2.0**k for k in range(-3, 4))
    ridge_grid: tuple[float, ...] = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    folds: int = 5
    max_exact: int = 500
    landmarks: int = 300
    # fixed hyperparameters skip the corresponding CV search
    bandwidth: float | None = None
    ridge: float | None = None
    drift: bool = True
    drift_interactions: bool = True


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1


@dataclass(frozen=True)
class LpConfig:
    max_condition: float = 1e12


def config_from_dict(method: str, d: dict | None):
    d = dict(d or {})
    cls = {"lp": LpConfig, "krr": KrrConfig, "gbt": GbtConfig}[method]
    for key in ("bandwidth_factors", "ridge_grid"):
        if key in d:
            d[key] = tuple(float(x) for x in d[key])
    return cls(**d)


# -- shared helpers -----------------------------------------------------------------


def _prepare(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise EstimationError("feature matrix and target have inconsistent shapes")
    w = np.ones(y.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise EstimationError("weights must be finite, non-negative and one per row")
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise EstimationError("features and targets must be finite")
    if y.size == 0:
        raise EstimationError("no rows with positive weight")
    return X, y, w / w.mean()


class ResponseModel:
    method: str
    columns: tuple[str, ...]
    diagnostics: dict

    def predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "ResponseModel":
        cls = {"lp": PolynomialModel, "krr": KernelRidgeModel, "gbt": BoostedTreesModel}[d["method"]]
        return cls._from_dict(d)

    def with_fixed_hyperparameters(self):
        """Config that refits this model without repeating the CV search."""
        return None


# -- linear polynomial ----------------------------------------------------------------


def polynomial_basis(X: np.ndarray, poly: Sequence[int], linear: Sequence[int]) -> np.ndarray:
    cols = [np.ones(X.shape[0])]
    if len(poly) == 2:
        a, b = X[:, poly[0]], X[:, poly[1]]
        cols += [a, b, a * b, a * a, b * b]
    elif len(poly) == 1:
        a = X[:, poly[0]]
        cols += [a, a * a]
    cols += [X[:, k] for k in linear]
    return np.column_stack(cols)


@dataclass
class PolynomialModel(ResponseModel):
    columns: tuple[str, ...]
    poly: tuple[int, ...]
    linear: tuple[int, ...]
    coef: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    method: str = "lp"

    def predict(self, X):
        return polynomial_basis(np.asarray(X, dtype=float), self.poly, self.linear) @ self.coef

    def to_dict(self):
        return {
            "method": "lp",
            "columns": list(self.columns),
            "poly": list(self.poly),
            "linear": list(self.linear),
            "coef": self.coef.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def _from_dict(cls, d):
        return cls(tuple(d["columns"]), tuple(d["poly"]), tuple(d["linear"]), np.array(d["coef"], dtype=float),
                   d.get("diagnostics", {}))


def fit_polynomial(X, y, columns, poly, linear, weights=None, config: LpConfig | None = None) -> PolynomialModel:
    cfg = config or LpConfig()
    X, y, w = _prepare(X, y, weights)
    B = polynomial_basis(X, poly, linear)
    if B.shape[0] < max(10, B.shape[1]):
        raise EstimationError(f"LP needs at least {max(10, B.shape[1])} rows, got {B.shape[0]}")
    scale = np.abs(B).max(axis=0)
    scale[scale == 0] = 1.0
    sw = np.sqrt(w)
    Bs = B / scale * sw[:, None]
    sv = np.linalg.svd(Bs, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if cond > cfg.max_condition:
        raise EstimationError(f"LP design is singular (condition number {cond:.3g}, {B.shape[1]} terms)")
    coef, *_ = np.linalg.lstsq(Bs, y * sw, rcond=None)
    coef = coef / scale
    resid = y - B @ coef
    return PolynomialModel(
        tuple(columns), tuple(poly), tuple(linear), coef,
        {"condition_number": cond, "train_mse": float(np.average(resid**2, weights=w))},
    )


# -- kernel ridge -----------------------------------------------------------------------


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(d, 0.0, out=d)
    return d


def gaussian_kernel(A: np.ndarray, B: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-_sqdist(A, B) / (2.0 * bandwidth * bandwidth))


def median_distance(Xs: np.ndarray, rng: np.random.Generator, cap: int = 500) -> float:
    U = np.unique(Xs, axis=0)
    if U.shape[0] > cap:
        U = U[np.sort(rng.choice(U.shape[0], cap, replace=False))]
    if U.shape[0] < 2:
        return 1.0
    d = np.sqrt(_sqdist(U, U)[np.triu_indices(U.shape[0], 1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


@dataclass
class KernelRidgeModel(ResponseModel):
    columns: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    bandwidth: float
    ridge: float
    centers: np.ndarray
    dual: np.ndarray
    drift_terms: np.ndarray
    drift_coef: np.ndarray
    solver: str
    diagnostics: dict = field(default_factory=dict)
    method: str = "krr"

    def _standardize(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def _drift(self, Xs):
        return drift_basis(Xs, self.drift_terms)

    def predict(self, X):
        Xs = self._standardize(X)
        out = gaussian_kernel(Xs, self.centers, self.bandwidth) @ self.dual
        if self.drift_coef.size:
            out = out + self._drift(Xs) @ self.drift_coef
        return out

    def with_fixed_hyperparameters(self):
        return KrrConfig(bandwidth=self.bandwidth, ridge=self.ridge,
                         drift=bool(self.drift_coef.size), **self.diagnostics.get("solver_limits", {}))

    def to_dict(self):
        return {
            "method": "krr",
            "columns": list(self.columns),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "bandwidth": self.bandwidth,
            "ridge": self.ridge,
            "centers": self.centers.tolist(),
            "dual": self.dual.tolist(),
            "drift_terms": self.drift_terms.tolist(),
            "drift_coef": self.drift_coef.tolist(),
            "solver": self.solver,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def _from_dict(cls, d):
        centers = np.array(d["centers"], dtype=float).reshape(-1, len(d["columns"]))
        return cls(
            tuple(d["columns"]), np.array(d["mean"], dtype=float), np.array(d["scale"], dtype=float),
            float(d["bandwidth"]), float(d["ridge"]), centers, np.array(d["dual"], dtype=float),
            np.array(d["drift_terms"], dtype=np.int64).reshape(-1, 2), np.array(d["drift_coef"], dtype=float),
            d["solver"], d.get("diagnostics", {}),
        )


def _is_binary(x: np.ndarray) -> bool:
    lo, hi = x.min(), x.max()
    return bool(lo < hi and np.all((x == lo) | (x == hi)))


def unique_rows(X: np.ndarray) -> np.ndarray:
    """Distinct rows in lexicographic order."""
    if X.shape[0] == 0:
        return X
    order = np.lexsort(X.T[::-1])
    S = X[order]
    keep = np.ones(S.shape[0], dtype=bool)
    keep[1:] = np.any(S[1:] != S[:-1], axis=1)
    return S[keep]


def drift_basis(Xs: np.ndarray, terms: np.ndarray) -> np.ndarray:
    """Columns Xs[:, a] * Xs[:, b] per term (a, b); index -1 stands for the constant 1."""
    ext = np.column_stack([Xs, np.ones(Xs.shape[0])])
    return ext[:, terms[:, 0]] * ext[:, terms[:, 1]]


def select_drift_terms(Xs: np.ndarray, cols: np.ndarray, interactions: bool) -> np.ndarray:
    """Intercept, linear terms and binary-by-other interactions, pruned to a full-rank set."""
    terms = [(-1, -1)] + [(int(c), -1) for c in cols]
    if interactions:
        binary = [int(c) for c in cols if _is_binary(Xs[:, c])]
        terms += [(b, int(c)) for b in binary for c in cols if c != b and (int(c) not in binary or c > b)]
    terms = np.array(terms, dtype=np.int64)
    P = drift_basis(Xs, terms)
    norms = np.linalg.norm(P, axis=0)
    _, R, piv = linalg.qr(P / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > 1e-8 * diag[0]))
    return terms[np.sort(piv[:rank])]


_POTRF, _POTRS = linalg.get_lapack_funcs(("potrf", "potrs"), (np.zeros(1),))


def _small_solve(A, r):
    try:
        return np.linalg.solve(A, r)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, r, rcond=None)[0]


def _solve_exact(K, P, y, w, lam):
    """Minimise sum w (y - Pb - Ka)^2 + n lam a'Ka; returns (a, b)."""
    n = y.size
    M = K.copy()
    M.flat[:: n + 1] += (n * lam) / w
    R = y[:, None] if P is None else np.column_stack([y, P])
    L, info = _POTRF(M, lower=True, overwrite_a=True, clean=False)
    if info == 0:
        sol, info = _POTRS(L, R, lower=True)
    if info != 0:
        sol = linalg.lu_solve(linalg.lu_factor(K + np.diag((n * lam) / w), check_finite=False), R, check_finite=False)
    My = sol[:, 0]
    if P is None:
        return My, np.zeros(0)
    MP = sol[:, 1:]
    b = _small_solve(P.T @ MP, P.T @ My)
    return My - MP @ b, b


def _solve_normal(G, r, m, KLL, n, lam):
    """Nystrom normal equations: (G + blockdiag(n lam K_LL, 0)) theta = r."""
    A = G.copy()
    A[:m, :m] += (n * lam) * KLL
    A.flat[: m * A.shape[1] : A.shape[1] + 1] += 1e-10 * max(np.trace(A[:m, :m]) / m, 1e-300)
    return _small_solve(A, r)


def fit_kernel_ridge(X, y, columns, weights=None, config: KrrConfig | None = None, seed: int = 0) -> KernelRidgeModel:
    cfg = config or KrrConfig()
    X, y, w = _prepare(X, y, weights)
    n, d = X.shape
    if n < max(10, d + 1):
        raise EstimationError(f"KRR needs at least {max(10, d + 1)} rows, got {n}")
    rng = np.random.default_rng(seed)
    mean = np.average(X, axis=0, weights=w)
    scale = np.sqrt(np.average((X - mean) ** 2, axis=0, weights=w))
    constant = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale[constant] = 1.0
    Xs = (X - mean) / scale
    if cfg.drift:
        drift_terms = select_drift_terms(Xs, np.flatnonzero(~constant), cfg.drift_interactions)
        P = drift_basis(Xs, drift_terms)
    else:
        drift_terms, P = np.zeros((0, 2), dtype=np.int64), None

    exact = n <= cfg.max_exact
    if exact:
        centers = Xs
    else:
        U = unique_rows(Xs)
        if U.shape[0] > cfg.landmarks:
            U = U[np.sort(rng.choice(U.shape[0], cfg.landmarks, replace=False))]
        centers = U
    m = centers.shape[0]

    med = median_distance(Xs, rng) if cfg.bandwidth is None else None
    bws = [cfg.bandwidth] if cfg.bandwidth is not None else [med * f for f in cfg.bandwidth_factors]
    ridges = [cfg.ridge] if cfg.ridge is not None else list(cfg.ridge_grid)
    grid = [(h, lam) for h in bws for lam in ridges]

    cv_table = []
    if len(grid) > 1:
        k = cfg.folds
        if n < k or k < 2:
            raise EstimationError(f"cannot form {k} non-empty CV folds from {n} rows")
        fold = np.empty(n, dtype=np.int64)
        fold[rng.permutation(n)] = np.arange(n) % k
        scores = np.zeros(len(grid))
        for h_idx, h in enumerate(bws):
            if exact:
                Kfull = gaussian_kernel(Xs, Xs, h)
            else:
                C = gaussian_kernel(Xs, centers, h)
                D = C if P is None else np.hstack([C, P])
                KLL = gaussian_kernel(centers, centers, h)
                Dw = D * w[:, None]
                G_all, r_all = D.T @ Dw, Dw.T @ y
            for f in range(k):
                va = fold == f
                tr = ~va
                if exact:
                    Ktr = Kfull[np.ix_(tr, tr)]
                    Kva = Kfull[np.ix_(va, tr)]
                    Ptr = None if P is None else P[tr]
                    wtr = w[tr] / w[tr].mean()
                else:
                    Gv = D[va].T @ Dw[va]
                    rv = Dw[va].T @ y[va]
                    G_tr, r_tr = G_all - Gv, r_all - rv
                    n_tr = int(tr.sum())
                for l_idx, lam in enumerate(ridges):
                    if exact:
                        a, b = _solve_exact(Ktr, Ptr, y[tr], wtr, lam)
                        pred = Kva @ a + (P[va] @ b if P is not None else 0.0)
                    else:
                        theta = _solve_normal(G_tr, r_tr, m, KLL, n_tr, lam)
                        pred = D[va] @ theta
                    scores[h_idx * len(ridges) + l_idx] += float(np.sum(w[va] * (y[va] - pred) ** 2))
        scores /= w.sum()
        cv_table = [{"bandwidth": h, "ridge": lam, "cv_mse": s} for (h, lam), s in zip(grid, scores)]
        best = int(np.argmin(scores))
        h, lam = grid[best]
    else:
        h, lam = grid[0]

    if exact:
        K = gaussian_kernel(Xs, Xs, h)
        a, b = _solve_exact(K, P, y, w, lam)
        solver = "exact"
    else:
        C = gaussian_kernel(Xs, centers, h)
        D = C if P is None else np.hstack([C, P])
        KLL = gaussian_kernel(centers, centers, h)
        theta = _solve_normal(D.T @ (D * w[:, None]), (D * w[:, None]).T @ y, m, KLL, n, lam)
        a, b = theta[:m], theta[m:]
        solver = "nystrom"
    model = KernelRidgeModel(
        tuple(columns), mean, scale, float(h), float(lam), centers.copy(), a, drift_terms, b, solver,
        {
            "cv": cv_table,
            "median_distance": med,
            "n_rows": int(n),
            "n_centers": int(m),
            "solver_limits": {"max_exact": cfg.max_exact, "landmarks": cfg.landmarks},
        },
    )
    resid = y - model.predict(X)
    model.diagnostics["train_mse"] = float(np.average(resid**2, weights=w))
    return model


# -- gradient boosted trees ----------------------------------------------------------------


@dataclass
class BoostedTreesModel(ResponseModel):
    columns: tuple[str, ...]
    init: float
    learning_rate: float
    trees: list[dict]
    diagnostics: dict = field(default_factory=dict)
    method: str = "gbt"

    def predict(self, X):
        # trees split on float32-cast features
        X = np.asarray(X, dtype=np.float32).astype(np.float64)
        out = np.full(X.shape[0], self.init)
        rows = np.arange(X.shape[0])
        for t in self.trees:
            left, right, feat, thr, val = t["left"], t["right"], t["feature"], t["threshold"], t["value"]
            node = np.zeros(X.shape[0], dtype=np.int64)
            active = left[node] != -1
            while active.any():
                idx = rows[active]
                nd = node[idx]
                go_left = X[idx, feat[nd]] <= thr[nd]
                node[idx] = np.where(go_left, left[nd], right[nd])
                active = left[node] != -1
            out += self.learning_rate * val[node]
        return out

    def to_dict(self):
        return {
            "method": "gbt",
            "columns": list(self.columns),
            "init": self.init,
            "learning_rate": self.learning_rate,
            "trees": [{k: v.tolist() for k, v in t.items()} for t in self.trees],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def _from_dict(cls, d):
        trees = [
            {
                "left": np.array(t["left"], dtype=np.int64),
                "right": np.array(t["right"], dtype=np.int64),
                "feature": np.array(t["feature"], dtype=np.int64),
                "threshold": np.array(t["threshold"], dtype=float),
                "value": np.array(t["value"], dtype=float),
            }
            for t in d["trees"]
        ]
        return cls(tuple(d["columns"]), float(d["init"]), float(d["learning_rate"]), trees, d.get("diagnostics", {}))


def fit_boosted_trees(X, y, columns, weights=None, config: GbtConfig | None = None, seed: int = 0) -> BoostedTreesModel:
    from sklearn.ensemble import GradientBoostingRegressor

    cfg = config or GbtConfig()
    X, y, w = _prepare(X, y, weights)
    if X.shape[0] < 10:
        raise EstimationError(f"GBT needs at least 10 rows, got {X.shape[0]}")
    est = GradientBoostingRegressor(
        loss="squared_error",
        n_estimators=cfg.n_rounds,
        max_depth=cfg.max_depth,
        learning_rate=cfg.learning_rate,
        subsample=1.0,
        random_state=seed,
    )
    est.fit(X, y, sample_weight=w)
    trees = []
    for (tree,) in est.estimators_:
        t = tree.tree_
        trees.append(
            {
                "left": t.children_left.astype(np.int64),
                "right": t.children_right.astype(np.int64),
                "feature": np.maximum(t.feature, 0).astype(np.int64),
                "threshold": t.threshold.astype(float),
                "value": t.value[:, 0, 0].astype(float),
            }
        )
    init = float(est.init_.constant_.ravel()[0])
    model = BoostedTreesModel(tuple(columns), init, cfg.learning_rate, trees,
                              {"config": asdict(cfg), "train_mse": float(np.average((y - est.predict(X)) ** 2, weights=w))})
    return model
