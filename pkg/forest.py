# Random forest classifier on numpy arrays (Gini, bootstrap, sqrt(p) features per split)
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import get_config

logger = logging.getLogger(__name__)

# Impurities closer than this count as equal; the lower feature, then the lower threshold wins
TIE_TOLERANCE = 1e-12
LEAF = -1


class ForestError(ValueError):
    """Unusable training data or a model/input mismatch"""


class ForestConfig(BaseModel):
    n_trees: int = 500
    min_samples_split: int = 2
    seed: int = 0
    # Resample rows with replacement per tree
    bootstrap: bool = True

    @classmethod
    def from_config(cls, run_config, seed: Optional[int] = None) -> "ForestConfig":
        section = run_config.forest
        return cls(n_trees=section.n_trees, min_samples_split=section.min_samples_split,
                   seed=run_config.seed if seed is None else seed)


class DecisionTree(BaseModel):
    """Flat node arrays; feature == -1 marks a leaf, counts holds each node's class histogram"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    seed: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row; x <= threshold goes left"""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != LEAF
        rows = np.arange(len(X))
        while active.any():
            idx = rows[active]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        hist = self.counts[self.apply(X)].astype(np.float64)
        return hist / hist.sum(axis=1, keepdims=True)


class ForestModel(BaseModel):
    trees: List[DecisionTree]
    n_classes: int
    n_features: int
    max_features: int
    min_samples_split: int
    seed: int


def gini(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def max_features_for(p: int) -> int:
    return max(1, int(math.isqrt(p)))


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int],
               n_classes: int) -> Optional[Tuple[int, float, float]]:
    """
    Lowest weighted child Gini over (feature, midpoint threshold) pairs

    Thresholds are midpoints between consecutive distinct sorted values.

    Returns:
        (feature, threshold, weighted impurity), or None when every candidate
        feature is constant on these rows
    """
    features = np.sort(np.asarray(features, dtype=np.int64))
    n = len(y)
    if n < 2 or len(features) == 0:
        return None
    values = X[:, features]
    order = np.argsort(values, axis=0, kind="stable")
    xs = np.take_along_axis(values, order, axis=0)
    onehot = np.eye(n_classes)[y]
    left = np.cumsum(onehot[order], axis=0)[:-1]          # (n-1, m, K)
    total = onehot.sum(axis=0)
    right = total - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    impurity = (n - (left ** 2).sum(axis=-1) / n_left - (right ** 2).sum(axis=-1) / n_right) / n
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None
    impurity = np.where(valid, impurity, np.inf)
    lowest = impurity.min()
    # column-major scan: lower feature first, then lower threshold
    hits = np.argwhere((impurity <= lowest + TIE_TOLERANCE).T)
    col, pos = hits[0]
    lo, hi = xs[pos, col], xs[pos + 1, col]
    threshold = (lo + hi) / 2.0
    if threshold >= hi:
        threshold = lo
    return int(features[col]), float(threshold), float(impurity[pos, col])


def _grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_features: int,
               min_samples_split: int, tree_seed: int, bootstrap: bool = True) -> DecisionTree:
    rng = np.random.default_rng(tree_seed)
    n, p = X.shape
    sample = rng.integers(0, n, n) if bootstrap else np.arange(n)
    Xb, yb = X[sample], y[sample]

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(rows: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        counts.append(np.bincount(yb[rows], minlength=n_classes))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n))]
    while stack:
        node, rows = stack.pop()
        hist = counts[node]
        if len(rows) < min_samples_split or np.count_nonzero(hist) <= 1:
            continue
        sampled = rng.choice(p, size=max_features, replace=False)
        split = best_split(Xb[rows], yb[rows], sampled, n_classes)
        if split is None and max_features < p:
            remaining = np.setdiff1d(np.arange(p), sampled)
            split = best_split(Xb[rows], yb[rows], remaining, n_classes)
        if split is None:
            continue
        f, t, _ = split
        goes_left = Xb[rows, f] <= t
        left_rows, right_rows = rows[goes_left], rows[~goes_left]
        feature[node] = f
        threshold[node] = t
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        stack.append((right[node], right_rows))
        stack.append((left[node], left_rows))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        counts=np.array(counts, dtype=np.int64).reshape(-1, n_classes),
        seed=tree_seed,
    )


def tree_seed(master: int, index: int) -> int:
    """Per-tree seed derived from the master seed and the tree index"""
    return int(np.random.SeedSequence([master, index]).generate_state(1, dtype=np.uint64)[0])


def _grow_chunk(args) -> List[DecisionTree]:
    X, y, n_classes, max_features, min_samples_split, bootstrap, seeds = args
    return [_grow_tree(X, y, n_classes, max_features, min_samples_split, s, bootstrap) for s in seeds]


def _check_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ForestError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ForestError("feature matrix contains NaN or infinite values; impute first")
    return X


def rf_fit(X: np.ndarray, y: np.ndarray, config: ForestConfig, n_classes: Optional[int] = None,
           n_jobs: Optional[int] = None) -> ForestModel:
    """
    Grow config.n_trees trees on bootstrap resamples

    Each tree's seed comes from (master seed, tree index), so the forest is
    identical whatever the number of worker processes.

    Args:
        X: (n, p) finite features
        y: Class ids
        config: Tree count, minimum split size and master seed
        n_jobs: Worker processes; defaults to PHENOCLASS_THREADS

    Raises:
        ForestError: Single-class labels, NaN features or mismatched lengths
    """
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(X):
        raise ForestError(f"{len(X)} rows but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise ForestError(f"random forest needs at least two classes, got {np.unique(y).tolist()}")
    n_classes = n_classes or int(y.max()) + 1
    max_features = max_features_for(X.shape[1])
    seeds = [tree_seed(config.seed, i) for i in range(config.n_trees)]

    n_jobs = n_jobs or get_config().threads
    n_jobs = max(1, min(n_jobs, config.n_trees))
    if n_jobs == 1:
        trees = _grow_chunk((X, y, n_classes, max_features, config.min_samples_split, config.bootstrap, seeds))
    else:
        chunks = [seeds[i::n_jobs] for i in range(n_jobs)]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            grown = list(pool.map(_grow_chunk, [
                (X, y, n_classes, max_features, config.min_samples_split, config.bootstrap, c) for c in chunks]))
        by_seed = {t.seed: t for chunk in grown for t in chunk}
        trees = [by_seed[s] for s in seeds]

    logger.info(f"Grew {len(trees)} trees on {X.shape[0]}x{X.shape[1]} features "
                f"(max_features={max_features}, jobs={n_jobs})")
    return ForestModel(trees=trees, n_classes=n_classes, n_features=X.shape[1],
                       max_features=max_features, min_samples_split=config.min_samples_split,
                       seed=config.seed)


def rf_predict(model: ForestModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(labels, probabilities) from the mean of the trees' leaf distributions"""
    X = _check_matrix(X)
    if X.shape[1] != model.n_features:
        raise ForestError(f"model expects {model.n_features} features, got {X.shape[1]}")
    probabilities = np.zeros((len(X), model.n_classes))
    for tree in model.trees:
        probabilities += tree.predict_proba(X)
    probabilities /= len(model.trees)
    return np.argmax(probabilities, axis=1), probabilities


def dump_forest(model: ForestModel) -> str:
    """Plain-text node list per tree under a config header"""
    lines = [
        "# random forest",
        f"n_trees {len(model.trees)}",
        f"n_classes {model.n_classes}",
        f"n_features {model.n_features}",
        f"max_features {model.max_features}",
        f"min_samples_split {model.min_samples_split}",
        f"seed {model.seed}",
    ]
    for i, tree in enumerate(model.trees):
        lines.append(f"tree {i} seed {tree.seed} nodes {tree.n_nodes}")
        for node in range(tree.n_nodes):
            hist = ",".join(str(c) for c in tree.counts[node])
            lines.append(f"{node} {tree.feature[node]} {float(tree.threshold[node])!r} "
                         f"{tree.left[node]} {tree.right[node]} {hist}")
    return "\n".join(lines) + "\n"


def load_forest_text(text: str) -> ForestModel:
    lines = [l for l in text.splitlines() if l.strip() and not l.startswith("#")]
    header = {}
    pos = 0
    while pos < len(lines) and not lines[pos].startswith("tree "):
        key, value = lines[pos].split()
        header[key] = int(value)
        pos += 1
    trees = []
    try:
        while pos < len(lines):
            _, _, _, seed, _, n_nodes = lines[pos].split()
            rows = [l.split() for l in lines[pos + 1:pos + 1 + int(n_nodes)]]
            pos += 1 + int(n_nodes)
            trees.append(DecisionTree(
                feature=np.array([int(r[1]) for r in rows], dtype=np.int64),
                threshold=np.array([float(r[2]) for r in rows], dtype=np.float64),
                left=np.array([int(r[3]) for r in rows], dtype=np.int64),
                right=np.array([int(r[4]) for r in rows], dtype=np.int64),
                counts=np.array([[int(c) for c in r[5].split(",")] for r in rows], dtype=np.int64),
                seed=int(seed),
            ))
        return ForestModel(trees=trees, n_classes=header["n_classes"], n_features=header["n_features"],
                           max_features=header["max_features"],
                           min_samples_split=header["min_samples_split"], seed=header["seed"])
    except (KeyError, ValueError, IndexError) as e:
        raise ForestError(f"malformed forest dump: {e}") from e


def save_forest(model: ForestModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_forest(model))
    logger.info(f"Saved {len(model.trees)}-tree forest to {path}")
    return path


def load_forest(path: Union[str, Path]) -> ForestModel:
    path = Path(path)
    if not path.exists():
        raise ForestError(f"forest file not found: {path}")
    return load_forest_text(path.read_text())
