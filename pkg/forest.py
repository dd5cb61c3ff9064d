#!/usr/bin/env python3
"""
Regression and quantile regression forests

A from-scratch random forest over the stacked design:
- CART regression trees grown on weight-proportional bootstrap resamples
- mtry features sampled per node, split chosen by weighted SSE reduction
- Mean prediction, Meinshausen quantile prediction, out-of-bag variance explained
- Partial dependence with the other predictors held at their training means
- Portable .npz persistence so a model is trained once and rolled over many days

Version: 1.0.0
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse

from core import FEATURE_NAMES, DomainError, TrainingError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    mtry: Optional[int] = None
    min_leaf: int = 5
    max_depth: Optional[int] = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise DomainError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.mtry is not None and self.mtry < 1:
            raise DomainError(f"mtry must be >= 1, got {self.mtry}")
        if self.min_leaf < 1:
            raise DomainError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_depth is not None and self.max_depth < 0:
            raise DomainError(f"max_depth must be >= 0, got {self.max_depth}")

    def resolved_mtry(self, n_features: int) -> int:
        mtry = self.mtry if self.mtry is not None else max(1, n_features // 3)
        if mtry > n_features:
            raise DomainError(f"mtry={mtry} exceeds the number of features ({n_features})")
        return mtry


@dataclass(frozen=True, eq=False)
class TrainingTable:
    """Generic (X, y, w) training data"""
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    feature_names: Tuple[str, ...]

    @classmethod
    def from_arrays(cls, X, y, w=None, feature_names: Optional[Sequence[str]] = None) -> "TrainingTable":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(y, dtype=np.float64).ravel()
        w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64).ravel()
        if feature_names is None:
            feature_names = tuple(f"x{i}" for i in range(X.shape[1]))
        if X.shape[0] != y.shape[0] or w.shape[0] != y.shape[0]:
            raise DomainError("X, y and w must have the same number of rows")
        if len(feature_names) != X.shape[1]:
            raise DomainError("feature_names must match the number of columns of X")
        return cls(X=X, y=y, w=w, feature_names=tuple(feature_names))

    @classmethod
    def from_design(cls, rows) -> "TrainingTable":
        rows = list(rows)
        X = np.array([r.features for r in rows], dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
        y = np.array([r.response_q95_k for r in rows], dtype=np.float64)
        w = np.array([r.weight for r in rows], dtype=np.float64)
        return cls(X=X, y=y, w=w, feature_names=FEATURE_NAMES)

    def __len__(self) -> int:
        return self.y.shape[0]


def as_training_table(data) -> TrainingTable:
    if isinstance(data, TrainingTable):
        return data
    if isinstance(data, tuple):
        return TrainingTable.from_arrays(*data)
    return TrainingTable.from_design(data)


@dataclass(eq=False)
class RegressionTree:
    """Array-backed binary tree; leaves keep their in-bag rows in CSR layout"""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_ptr: np.ndarray
    leaf_rows: np.ndarray
    leaf_weight: np.ndarray
    oob_rows: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by every row of X"""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while active.size:
            current = node[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return node

    def membership(self, n_train: int) -> sparse.csr_matrix:
        """(n_nodes x n_train) matrix of normalized in-bag leaf weights"""
        return sparse.csr_matrix(
            (self.leaf_weight, self.leaf_rows, self.leaf_ptr), shape=(self.n_nodes, n_train)
        )


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def tree_seed(seed: int, tree_index: int) -> int:
    return _splitmix64((seed & _MASK64) ^ tree_index)


def _best_split(Xn: np.ndarray, yc: np.ndarray, ws: np.ndarray, cs: np.ndarray,
                min_leaf: int, features: np.ndarray) -> Optional[Tuple[int, float]]:
    # Ties: lowest feature index first, then smallest threshold.
    total_count = cs.sum()
    best_gain = -np.inf
    best: Optional[Tuple[int, float]] = None
    for f in np.sort(features):
        xs = Xn[:, f]
        order = np.argsort(xs, kind="mergesort")
        xs_sorted = xs[order]
        cum_w = np.cumsum(ws[order])
        cum_wy = np.cumsum((ws * yc)[order])
        cum_c = np.cumsum(cs[order])
        valid = ((xs_sorted[:-1] < xs_sorted[1:])
                 & (cum_c[:-1] >= min_leaf)
                 & (total_count - cum_c[:-1] >= min_leaf))
        if not valid.any():
            continue
        wl = cum_w[:-1]
        sl = cum_wy[:-1]
        wr = cum_w[-1] - wl
        sr = cum_wy[-1] - sl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(valid, sl * sl / wl + sr * sr / wr, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best_gain:
            lo, hi = xs_sorted[k], xs_sorted[k + 1]
            threshold = 0.5 * lo + 0.5 * hi
            # adjacent floats have nothing strictly between; lo still separates them
            if threshold >= hi:
                threshold = lo
            best_gain = gain[k]
            best = (int(f), float(threshold))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, w: np.ndarray, params: ForestParams,
               mtry: int, seed: int) -> RegressionTree:
    rng = np.random.default_rng(seed)
    n, p = X.shape
    if params.bootstrap:
        if np.all(w == w[0]):
            draws = rng.integers(0, n, size=n)
        else:
            draws = rng.choice(n, size=n, replace=True, p=w / w.sum())
        counts = np.bincount(draws, minlength=n)
    else:
        counts = np.ones(n, dtype=np.int64)
    sample_weight = counts * w

    feature: List[int] = [-1]
    threshold: List[float] = [0.0]
    left: List[int] = [-1]
    right: List[int] = [-1]
    value: List[float] = [0.0]
    members: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    stack = [(0, np.nonzero(counts)[0], 0)]
    while stack:
        node, rows, depth = stack.pop()
        ys = y[rows]
        ws = sample_weight[rows]
        total_w = ws.sum()
        pure = ys.min() == ys.max()
        node_value = float(ys[0]) if pure else float(np.clip(np.dot(ws, ys) / total_w, ys.min(), ys.max()))
        value[node] = node_value

        split = None
        can_split = (not pure
                     and counts[rows].sum() >= 2 * params.min_leaf
                     and (params.max_depth is None or depth < params.max_depth))
        if can_split:
            features = rng.choice(p, size=mtry, replace=False)
            split = _best_split(X[rows], ys - node_value, ws, counts[rows], params.min_leaf, features)

        if split is None:
            members[node] = (rows, ws / total_w)
            continue

        f, thr = split
        go_left = X[rows, f] <= thr
        children = []
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            children.append(len(feature) - 1)
        feature[node], threshold[node] = f, thr
        left[node], right[node] = children
        stack.append((children[1], rows[~go_left], depth + 1))
        stack.append((children[0], rows[go_left], depth + 1))

    n_nodes = len(feature)
    leaf_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    for node, (rows, _) in members.items():
        leaf_ptr[node + 1] = rows.shape[0]
    leaf_ptr = np.cumsum(leaf_ptr)
    ordered = sorted(members)
    leaf_rows = np.concatenate([members[k][0] for k in ordered]).astype(np.int64)
    leaf_weight = np.concatenate([members[k][1] for k in ordered])

    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        leaf_ptr=leaf_ptr,
        leaf_rows=leaf_rows,
        leaf_weight=leaf_weight,
        oob_rows=np.nonzero(counts == 0)[0].astype(np.int64),
    )


@dataclass(frozen=True)
class OOBSummary:
    variance_explained: float
    mse_oob: float
    var_y: float
    n_excluded: int


def explained_fraction(mse: float, var_y: float) -> float:
    if var_y <= 0:
        raise DomainError("variance explained is undefined for a constant response")
    return 1.0 - mse / var_y


@dataclass(eq=False)
class ForestModel:
    """Trained ensemble plus the training data it needs for OOB and quantile prediction"""
    trees: List[RegressionTree]
    feature_names: Tuple[str, ...]
    params: ForestParams
    X_train: np.ndarray
    y_train: np.ndarray
    w_train: np.ndarray

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    @property
    def training_meta(self) -> Dict[str, object]:
        return {
            "params": asdict(self.params),
            "n_rows": int(self.y_train.shape[0]),
            "response_mean": float(np.mean(self.y_train)),
            "response_variance": float(np.var(self.y_train)),
        }

    @property
    def oob_membership(self) -> List[np.ndarray]:
        return [t.oob_rows for t in self.trees]

    def _check(self, X) -> Tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = X.reshape(1, -1) if single else X
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DomainError(f"expected {self.n_features} features, got shape {np.shape(X)}")
        if not np.all(np.isfinite(X)):
            raise DomainError("feature values must be finite")
        return X, single

    def _tree_values(self, X: np.ndarray) -> np.ndarray:
        return np.stack([t.value[t.apply(X)] for t in self.trees])

    def predict_mean(self, X) -> Union[float, np.ndarray]:
        """Mean over trees of the leaf mean reached by each row"""
        X, single = self._check(X)
        values = self._tree_values(X)
        mean = np.clip(values.sum(axis=0) / len(self.trees), values.min(axis=0), values.max(axis=0))
        return float(mean[0]) if single else mean

    def quantile_weights(self, X) -> np.ndarray:
        """Meinshausen weights (n_points x n_train); each row sums to one"""
        X, _ = self._check(X)
        n_train = self.y_train.shape[0]
        total = sparse.csr_matrix((X.shape[0], n_train))
        for tree in self.trees:
            total = total + tree.membership(n_train)[tree.apply(X)]
        return total.toarray() / len(self.trees)

    def predict_quantiles(self, X, probs: Sequence[float]) -> np.ndarray:
        """Weighted left-continuous inverse CDF of training responses

        Returns shape (len(probs),) for a single point, else (n_points, len(probs)).
        """
        probs = np.asarray(probs, dtype=np.float64)
        if np.any((probs <= 0) | (probs >= 1)):
            raise DomainError("quantile probabilities must lie in (0, 1)")
        X, single = self._check(X)
        weights = self.quantile_weights(X)
        order = np.argsort(self.y_train, kind="mergesort")
        y_sorted = self.y_train[order]
        cum = np.cumsum(weights[:, order], axis=1)
        out = np.empty((X.shape[0], probs.shape[0]))
        for i in range(X.shape[0]):
            total = cum[i, -1]
            idx = np.searchsorted(cum[i], probs * total - 1e-12 * total, side="left")
            out[i] = y_sorted[np.minimum(idx, y_sorted.shape[0] - 1)]
        return out[0] if single else out

    def oob_predictions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-row mean of out-of-bag tree predictions and the number of OOB trees"""
        n = self.y_train.shape[0]
        sums = np.zeros(n)
        hits = np.zeros(n, dtype=np.int64)
        for tree in self.trees:
            rows = tree.oob_rows
            if rows.size:
                sums[rows] += tree.value[tree.apply(self.X_train[rows])]
                hits[rows] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            return sums / hits, hits

    def fitted_values(self) -> np.ndarray:
        """Out-of-bag predictions for the training rows, in-sample where a row was never OOB"""
        preds, hits = self.oob_predictions()
        never = hits == 0
        if never.any():
            preds[never] = self.predict_mean(self.X_train[never])
        return preds

    def oob_summary(self) -> OOBSummary:
        if not self.params.bootstrap:
            raise DomainError("out-of-bag estimates need a forest trained with bootstrap")
        var_y = float(np.var(self.y_train))
        if var_y <= 0:
            raise DomainError("variance explained is undefined for a constant response")
        preds, hits = self.oob_predictions()
        used = hits > 0
        n_excluded = int((~used).sum())
        if n_excluded:
            logger.warning(f"{n_excluded} rows were never out-of-bag and are excluded")
        if not used.any():
            raise DomainError("no row was ever out-of-bag")
        mse = float(np.mean((self.y_train[used] - preds[used]) ** 2))
        return OOBSummary(explained_fraction(mse, var_y), mse, var_y, n_excluded)

    def variance_explained(self) -> float:
        return self.oob_summary().variance_explained

    def feature_index(self, feature: Union[str, int]) -> int:
        if isinstance(feature, (int, np.integer)):
            if not 0 <= feature < self.n_features:
                raise DomainError(f"feature index out of range: {feature}")
            return int(feature)
        try:
            return self.feature_names.index(feature)
        except ValueError:
            raise DomainError(f"unknown feature: {feature!r}") from None

    def partial_dependence(self, feature: Union[str, int], grid: Sequence[float],
                           training_table: Optional[TrainingTable] = None) -> List[Tuple[float, float]]:
        """Fitted mean along one feature with every other feature at its training mean"""
        j = self.feature_index(feature)
        grid = np.asarray(grid, dtype=np.float64).ravel()
        if grid.size == 0:
            raise DomainError("partial dependence grid is empty")
        X_ref = self.X_train if training_table is None else training_table.X
        points = np.tile(X_ref.mean(axis=0), (grid.size, 1))
        points[:, j] = grid
        fitted = self.predict_mean(points)
        return [(float(v), float(f)) for v, f in zip(grid, fitted)]


def train(data, params: ForestParams = ForestParams(), n_jobs: int = 1) -> ForestModel:
    """Grow params.n_trees CART trees; identical output for any n_jobs"""
    table = as_training_table(data)
    X, y, w = table.X, table.y, table.w
    if X.shape[0] < 2:
        raise TrainingError(f"need at least 2 rows to train, got {X.shape[0]}")
    if X.shape[1] < 1:
        raise TrainingError("need at least one feature")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise DomainError("training data must be finite")
    if not np.all(w > 0) or not np.all(np.isfinite(w)):
        raise DomainError("case weights must be positive and finite")

    mtry = params.resolved_mtry(X.shape[1])
    seeds = [tree_seed(params.seed, t) for t in range(params.n_trees)]
    if n_jobs == 1:
        trees = [_grow_tree(X, y, w, params, mtry, s) for s in seeds]
    else:
        trees = Parallel(n_jobs=n_jobs)(delayed(_grow_tree)(X, y, w, params, mtry, s) for s in seeds)
    logger.info(f"Trained {len(trees)} trees on {X.shape[0]} rows x {X.shape[1]} features (mtry={mtry})")
    return ForestModel(
        trees=list(trees), feature_names=table.feature_names, params=params,
        X_train=X.copy(), y_train=y.copy(), w_train=w.copy(),
    )


def predict_mean(model: ForestModel, x) -> Union[float, np.ndarray]:
    return model.predict_mean(x)


def predict_quantiles(model: ForestModel, x, probs: Sequence[float]) -> np.ndarray:
    return model.predict_quantiles(x, probs)


def variance_explained(model: ForestModel) -> float:
    return model.variance_explained()


def partial_dependence(model: ForestModel, training_table, feature, grid) -> List[Tuple[float, float]]:
    table = None if training_table is None else as_training_table(training_table)
    return model.partial_dependence(feature, grid, table)


def pdp_grid(values: Sequence[float], n_bins: int = 20) -> np.ndarray:
    """Midpoints of equal-count bins of a feature's observed values"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or n_bins < 1:
        raise DomainError("pdp_grid needs values and at least one bin")
    edges = np.quantile(values, np.linspace(0.0, 1.0, n_bins + 1))
    return np.unique(0.5 * (edges[:-1] + edges[1:]))


_TREE_ARRAYS = ("feature", "threshold", "left", "right", "value")
_MEMBER_ARRAYS = ("leaf_rows", "leaf_weight")


def save_model(model: ForestModel, path: Union[str, Path]) -> Path:
    """Write a versioned .npz archive (no pickled objects)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "feature_names": list(model.feature_names),
        "params": asdict(model.params),
        "n_trees": len(model.trees),
    }
    arrays = {
        "meta": np.array(json.dumps(meta, sort_keys=True)),
        "X_train": model.X_train,
        "y_train": model.y_train,
        "w_train": model.w_train,
        "node_counts": np.array([t.n_nodes for t in model.trees], dtype=np.int64),
        "member_counts": np.array([t.leaf_rows.shape[0] for t in model.trees], dtype=np.int64),
        "oob_counts": np.array([t.oob_rows.shape[0] for t in model.trees], dtype=np.int64),
        "leaf_ptr": np.concatenate([t.leaf_ptr for t in model.trees]),
        "oob_rows": np.concatenate([t.oob_rows for t in model.trees]),
    }
    for name in _TREE_ARRAYS + _MEMBER_ARRAYS:
        arrays[name] = np.concatenate([getattr(t, name) for t in model.trees])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    logger.info(f"Saved model with {len(model.trees)} trees to {path}")
    return path


def load_model(path: Union[str, Path]) -> ForestModel:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise DomainError(f"unsupported model format version: {meta.get('format_version')}")
        data = {k: archive[k] for k in archive.files if k != "meta"}

    params = ForestParams(**meta["params"])
    node_split = np.cumsum(data["node_counts"])[:-1]
    member_split = np.cumsum(data["member_counts"])[:-1]
    oob_split = np.cumsum(data["oob_counts"])[:-1]
    ptr_split = np.cumsum(data["node_counts"] + 1)[:-1]
    per_tree = {name: np.split(data[name], node_split) for name in _TREE_ARRAYS}
    per_tree.update({name: np.split(data[name], member_split) for name in _MEMBER_ARRAYS})
    per_tree["leaf_ptr"] = np.split(data["leaf_ptr"], ptr_split)
    per_tree["oob_rows"] = np.split(data["oob_rows"], oob_split)

    trees = [RegressionTree(**{name: arrays[i] for name, arrays in per_tree.items()})
             for i in range(meta["n_trees"])]
    return ForestModel(
        trees=trees, feature_names=tuple(meta["feature_names"]), params=params,
        X_train=data["X_train"], y_train=data["y_train"], w_train=data["w_train"],
    )
