"""Tabular surrogate: a from-scratch random-forest regressor plus
cross-dataset target normalization.

Trees are CART regression trees with axis-aligned splits chosen by variance
reduction over all features, each fitted on a bootstrap resample of the same
size.  The split search runs on a numba-compiled kernel using presorted
feature orders (sorted slices are maintained through splits by stable
partitioning), which keeps refitting cheap inside the search loop.  Ties in
split gain break toward the lowest feature index, then the lowest threshold,
so fitting is fully deterministic given the bootstrap draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DataError, SchemaError
from .features import FeatureVector

DEFAULT_N_TREES = 100
DEFAULT_MIN_SAMPLES_LEAF = 1

MINMAX = "minmax"
PERCENTILE = "percentile"
NONE = "none"
NORMALIZATION_METHODS = (NONE, MINMAX, PERCENTILE)


@dataclass(frozen=True)
class TrainingRow:
    x: object  # FeatureVector for tabular models, encoding text for external ones
    y: float
    dataset: str = "default"


@dataclass
class TrainingSet:
    rows: list[TrainingRow]

    def validate(self) -> None:
        schema = None
        for i, row in enumerate(self.rows):
            if not math.isfinite(row.y):
                raise DataError(f"row {i}: target {row.y!r} is not finite")
            if isinstance(row.x, FeatureVector):
                if schema is None:
                    schema = row.x.schema
                elif row.x.schema != schema:
                    raise SchemaError(f"row {i}: feature schema differs from row 0")

    def feature_matrix(self) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
        self.validate()
        if not self.rows:
            raise DataError("training set is empty")
        if not isinstance(self.rows[0].x, FeatureVector):
            raise DataError("training rows do not carry feature vectors")
        schema = self.rows[0].x.schema
        X = np.array([row.x.values for row in self.rows], dtype=float)
        y = np.array([row.y for row in self.rows], dtype=float)
        return X, y, schema

    def tags(self) -> list[str]:
        return sorted({row.dataset for row in self.rows})


@njit(cache=True)
def _build_tree(svals, sy, sidx, min_samples_leaf, feature, threshold, left, right, value):
    # svals/sy/sidx are (F, n): per feature, the node's values, targets and
    # sample ids in ascending value order.  The sorted order is maintained
    # through splits by stable partitioning, so every split scan is a single
    # sequential pass and the raw feature matrix is never touched again.
    n_features, n = svals.shape
    node_count = 1
    stack_node = np.empty(2 * n + 1, dtype=np.int64)
    stack_start = np.empty(2 * n + 1, dtype=np.int64)
    stack_end = np.empty(2 * n + 1, dtype=np.int64)
    top = 0
    stack_node[top] = 0
    stack_start[top] = 0
    stack_end[top] = n
    top += 1
    go_left = np.zeros(n, dtype=np.uint8)
    tmp_i = np.empty(n, dtype=np.int64)
    tmp_v = np.empty(n, dtype=np.float64)
    tmp_y = np.empty(n, dtype=np.float64)
    inv = np.empty(n + 1, dtype=np.float64)  # reciprocal table: splits do no divides
    inv[0] = 0.0
    for i in range(1, n + 1):
        inv[i] = 1.0 / i

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        m = end - start

        total = 0.0
        y_min = np.inf
        y_max = -np.inf
        for pos in range(start, end):
            yy = sy[0, pos]
            total += yy
            if yy < y_min:
                y_min = yy
            if yy > y_max:
                y_max = yy
        # pure leaves carry the target itself, exactly
        value[node] = y_min if y_min == y_max else total / m
        feature[node] = -1

        if m < 2 * min_samples_leaf or y_min == y_max:
            continue

        best_gain = -np.inf
        best_feature = -1
        best_threshold = 0.0
        best_nl = 0
        lo = start + min_samples_leaf - 1
        hi = end - min_samples_leaf
        for f in range(n_features):
            vrow = svals[f]
            yrow = sy[f]
            left_sum = 0.0
            for pos in range(start, lo):
                left_sum += yrow[pos]
            for pos in range(lo, hi):
                left_sum += yrow[pos]
                v_cur = vrow[pos]
                if v_cur == vrow[pos + 1]:
                    continue
                nl = pos - start + 1
                right_sum = total - left_sum
                gain = left_sum * left_sum * inv[nl] + right_sum * right_sum * inv[m - nl]
                if gain > best_gain:
                    best_gain = gain
                    best_feature = f
                    best_threshold = 0.5 * (v_cur + vrow[pos + 1])
                    best_nl = nl

        if best_feature < 0:
            continue

        # Split candidates sit between distinct values, so position order on
        # the split feature agrees exactly with the value comparison.
        pivot = start + best_nl
        for pos in range(start, end):
            go_left[sidx[best_feature, pos]] = 1 if pos < pivot else 0
        for f in range(n_features):
            lpos = 0
            rpos = best_nl
            for pos in range(start, end):
                idx = sidx[f, pos]
                if go_left[idx] == 1:
                    tmp_i[lpos] = idx
                    tmp_v[lpos] = svals[f, pos]
                    tmp_y[lpos] = sy[f, pos]
                    lpos += 1
                else:
                    tmp_i[rpos] = idx
                    tmp_v[rpos] = svals[f, pos]
                    tmp_y[rpos] = sy[f, pos]
                    rpos += 1
            for off in range(m):
                sidx[f, start + off] = tmp_i[off]
                svals[f, start + off] = tmp_v[off]
                sy[f, start + off] = tmp_y[off]

        lid = node_count
        rid = node_count + 1
        node_count += 2
        feature[node] = best_feature
        threshold[node] = best_threshold
        left[node] = lid
        right[node] = rid
        stack_node[top] = rid
        stack_start[top] = start + best_nl
        stack_end[top] = end
        top += 1
        stack_node[top] = lid
        stack_start[top] = start
        stack_end[top] = start + best_nl
        top += 1

    return node_count


@njit(cache=True)
def _predict_trees(feature, threshold, left, right, value, offsets, X):
    n = X.shape[0]
    n_trees = len(offsets) - 1
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        # running mean over trees: exact when every tree agrees
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += (value[base + node] - acc) / (t + 1)
        out[i] = acc
    return out


@dataclass
class ForestModel:
    schema: tuple[str, ...]
    n_trees: int
    min_samples_leaf: int
    seed: int | None
    feature: np.ndarray = field(repr=False)
    threshold: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    value: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise SchemaError(
                f"expected {len(self.schema)} features, got shape {X.shape}"
            )
        if len(X) == 0:
            return np.zeros(0)
        return _predict_trees(
            self.feature, self.threshold, self.left, self.right, self.value,
            self.offsets, np.ascontiguousarray(X),
        )

    def predict(self, inputs: list[FeatureVector]) -> list[float]:
        for i, fv in enumerate(inputs):
            if fv.schema != self.schema:
                raise SchemaError(f"input {i}: feature schema does not match the model")
        if not inputs:
            return []
        X = np.array([fv.values for fv in inputs], dtype=float)
        return [float(v) for v in self.predict_matrix(X)]

    def to_json(self) -> str:
        trees = []
        for t in range(self.n_trees):
            a, b = int(self.offsets[t]), int(self.offsets[t + 1])
            trees.append(
                {
                    "feature": self.feature[a:b].tolist(),
                    "threshold": self.threshold[a:b].tolist(),
                    "left": self.left[a:b].tolist(),
                    "right": self.right[a:b].tolist(),
                    "value": self.value[a:b].tolist(),
                }
            )
        return json.dumps(
            {
                "format": "gramevo-forest",
                "version": 1,
                "schema": list(self.schema),
                "n_trees": self.n_trees,
                "min_samples_leaf": self.min_samples_leaf,
                "seed": self.seed,
                "trees": trees,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format") != "gramevo-forest":
            raise DataError("not a serialized forest model")
        feature, threshold, left, right, value = [], [], [], [], []
        offsets = [0]
        for tree in doc["trees"]:
            feature.extend(tree["feature"])
            threshold.extend(tree["threshold"])
            left.extend(tree["left"])
            right.extend(tree["right"])
            value.extend(tree["value"])
            offsets.append(len(feature))
        return cls(
            schema=tuple(doc["schema"]),
            n_trees=doc["n_trees"],
            min_samples_leaf=doc["min_samples_leaf"],
            seed=doc["seed"],
            feature=np.asarray(feature, dtype=np.int64),
            threshold=np.asarray(threshold, dtype=np.float64),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            value=np.asarray(value, dtype=np.float64),
            offsets=np.asarray(offsets, dtype=np.int64),
        )


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def fit_forest(
    data: TrainingSet,
    n_trees: int = DEFAULT_N_TREES,
    min_samples_leaf: int = DEFAULT_MIN_SAMPLES_LEAF,
    rng: np.random.Generator | int | None = 0,
    bootstrap_indices: list[np.ndarray] | None = None,
) -> ForestModel:
    """Fit a bagged ensemble of CART regression trees.

    ``bootstrap_indices`` overrides the resampling draws (one index array per
    tree); it exists so tests can pin the randomness independently of row
    order.
    """
    if n_trees < 1 or min_samples_leaf < 1:
        raise DataError("n_trees and min_samples_leaf must be positive")
    X, y, schema = data.feature_matrix()
    n = len(X)
    if n < 2:
        raise DataError(f"need at least 2 training rows, got {n}")
    seed = rng if isinstance(rng, int) else None
    gen = _as_rng(rng)
    if bootstrap_indices is None:
        bootstrap_indices = [gen.integers(0, n, size=n) for _ in range(n_trees)]
    elif len(bootstrap_indices) != n_trees:
        raise DataError("bootstrap_indices must have one entry per tree")

    features, thresholds, lefts, rights, values = [], [], [], [], []
    offsets = [0]
    for t in range(n_trees):
        idx = np.asarray(bootstrap_indices[t], dtype=np.int64)
        Xb = X[idx]
        yb = y[idx]
        order = np.argsort(Xb, axis=0, kind="stable")
        sidx = np.ascontiguousarray(order.T)
        svals = np.ascontiguousarray(np.take_along_axis(Xb, order, axis=0).T)
        sy = np.ascontiguousarray(yb[order].T)
        cap = 2 * n + 1
        f_arr = np.full(cap, -1, dtype=np.int64)
        t_arr = np.zeros(cap, dtype=np.float64)
        l_arr = np.full(cap, -1, dtype=np.int64)
        r_arr = np.full(cap, -1, dtype=np.int64)
        v_arr = np.zeros(cap, dtype=np.float64)
        count = _build_tree(
            svals, sy, sidx, min_samples_leaf, f_arr, t_arr, l_arr, r_arr, v_arr
        )
        features.append(f_arr[:count])
        thresholds.append(t_arr[:count])
        lefts.append(l_arr[:count])
        rights.append(r_arr[:count])
        values.append(v_arr[:count])
        offsets.append(offsets[-1] + count)

    return ForestModel(
        schema=schema,
        n_trees=n_trees,
        min_samples_leaf=min_samples_leaf,
        seed=seed,
        feature=np.concatenate(features),
        threshold=np.concatenate(thresholds),
        left=np.concatenate(lefts),
        right=np.concatenate(rights),
        value=np.concatenate(values),
        offsets=np.asarray(offsets, dtype=np.int64),
    )


@dataclass
class Normalizer:
    """Per-dataset target normalization applied before merging datasets."""

    method: str
    stats: dict[str, object]

    def transform_value(self, tag: str, y: float) -> float:
        if self.method == NONE:
            return y
        if tag not in self.stats:
            raise DataError(f"unknown dataset tag {tag!r} at normalize time")
        if self.method == MINMAX:
            lo, hi = self.stats[tag]
            if hi == lo:
                return 0.5
            return (y - lo) / (hi - lo)
        targets = self.stats[tag]
        n = len(targets)
        if n == 1:
            return 0.5
        less = int(np.searchsorted(targets, y, side="left"))
        equal = int(np.searchsorted(targets, y, side="right")) - less
        if equal > 0:
            rank = less + (equal - 1) / 2
        else:
            rank = less - 0.5
        return float(min(max(rank / (n - 1), 0.0), 1.0))


def fit_normalizer(data: TrainingSet, method: str) -> Normalizer:
    if method not in NORMALIZATION_METHODS:
        raise DataError(f"unknown normalization method {method!r}")
    stats: dict[str, object] = {}
    if method == NONE:
        return Normalizer(method=method, stats=stats)
    groups: dict[str, list[float]] = {}
    for row in data.rows:
        groups.setdefault(row.dataset, []).append(row.y)
    for tag, ys in groups.items():
        if method == MINMAX:
            stats[tag] = (min(ys), max(ys))
        else:
            stats[tag] = np.sort(np.asarray(ys, dtype=float))
    return Normalizer(method=method, stats=stats)


def normalize(nrm: Normalizer, data: TrainingSet) -> TrainingSet:
    """Return a new training set with per-dataset normalized targets."""
    rows = [
        TrainingRow(x=row.x, y=nrm.transform_value(row.dataset, row.y), dataset=row.dataset)
        for row in data.rows
    ]
    return TrainingSet(rows=rows)


def normalize_merge(data: TrainingSet, method: str) -> TrainingSet:
    """Convenience: fit a normalizer on the data and apply it in one step."""
    return normalize(fit_normalizer(data, method), data)
