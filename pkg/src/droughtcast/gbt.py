"""Gradient-boosted regression trees for per-cell PDSI forecasting.

Two featurizations: pointwise (a cell's own ``p`` lags) and spatial (own lags
plus the same lags of the eight 3x3 neighbours, zero-filled off the grid).
Trees are least-squares CART with exhaustive midpoint thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSeries

# (row offset, col offset), fixed feature-block order
NEIGHBOURS = {
    "NW": (-1, -1), "N": (-1, 0), "NE": (-1, 1),
    "W": (0, -1), "E": (0, 1),
    "SW": (1, -1), "S": (1, 0), "SE": (1, 1),
}


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    t: np.ndarray  # index of the last input month of each row


def _check_cell(gs: GridSeries, cell, p: int, k: int):
    r, c = cell
    if not (0 <= r < gs.H and 0 <= c < gs.W):
        raise IndexError(f"cell {cell} outside {gs.H}x{gs.W} grid")
    if not gs.mask[r, c]:
        raise ValueError(f"cell {cell} is masked out")
    if p < 1 or k < 1:
        raise ValueError("lags and horizon must be >= 1")
    if gs.T < p + k:
        raise ValueError(f"series of length {gs.T} too short for {p} lags at horizon {k}")


def _lag_block(series: np.ndarray, p: int, k: int) -> np.ndarray:
    n = series.size - p - k + 1
    return np.stack([series[j:j + n] for j in range(p)], axis=1)


def build_features_pointwise(gs: GridSeries, cell, p: int, k: int) -> FeatureMatrix:
    """Rows ``(x[t-p+1], ..., x[t])`` with target ``x[t+k]``."""
    _check_cell(gs, cell, p, k)
    series = gs.values[:, cell[0], cell[1]]
    X = _lag_block(series, p, k)
    y = series[p - 1 + k:]
    names = [f"lag_{p - j}" for j in range(p)]
    return FeatureMatrix(X, y.copy(), names, np.arange(p - 1, gs.T - k))


def build_features_spatial(gs: GridSeries, cell, p: int, k: int) -> FeatureMatrix:
    """Pointwise block followed by one block per neighbour in ``NEIGHBOURS`` order.

    Neighbours off the grid, or masked out, contribute all-zero columns.
    """
    own = build_features_pointwise(gs, cell, p, k)
    blocks, names = [own.X], list(own.names)
    r, c = cell
    for d, (dr, dc) in NEIGHBOURS.items():
        rr, cc = r + dr, c + dc
        if 0 <= rr < gs.H and 0 <= cc < gs.W and gs.mask[rr, cc]:
            blocks.append(_lag_block(gs.values[:, rr, cc], p, k))
        else:
            blocks.append(np.zeros_like(own.X))
        names += [f"nbr_{d}_lag_{p - j}" for j in range(p)]
    return FeatureMatrix(np.concatenate(blocks, axis=1), own.y, names, own.t)


@dataclass
class Node:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: Node | None = None
    right: Node | None = None
    n_samples: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class RegressionTree:
    root: Node
    max_depth: int
    min_samples_leaf: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape[0])
        self._fill(self.root, X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, node: Node, X, idx, out):
        if node.is_leaf:
            out[idx] = node.value
            return
        go_left = X[idx, node.feature] <= node.threshold
        self._fill(node.left, X, idx[go_left], out)
        self._fill(node.right, X, idx[~go_left], out)

    def n_leaves(self) -> int:
        def count(n):
            return 1 if n.is_leaf else count(n.left) + count(n.right)
        return count(self.root)

    def depth(self) -> int:
        def d(n):
            return 0 if n.is_leaf else 1 + max(d(n.left), d(n.right))
        return d(self.root)


def best_split(X: np.ndarray, y: np.ndarray, min_samples_leaf: int):
    """Least-squares split ``(feature, threshold, sse)`` or ``None``.

    Ties go to the lowest feature index, then the smallest threshold.
    """
    n, n_feat = X.shape
    total = y.sum()
    best = None
    best_score = -np.inf
    for j in range(n_feat):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        csum = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        ok = (xs[1:] > xs[:-1]) & (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        if not ok.any():
            continue
        nl = n_left[ok]
        sl = csum[ok]
        # SSE = sum(y^2) - score, so maximizing score minimizes SSE
        score = sl * sl / nl + (total - sl) ** 2 / (n - nl)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = score[i]
            pos = np.flatnonzero(ok)[i]
            best = (j, 0.5 * (xs[pos] + xs[pos + 1]))
    if best is None:
        return None
    return best[0], best[1], float(np.sum(y * y) - best_score)


def fit_tree(X: np.ndarray, residuals: np.ndarray, max_depth: int = 3, min_samples_leaf: int = 5) -> RegressionTree:
    X = np.asarray(X, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a tree on zero rows")
    if X.shape[0] != residuals.shape[0]:
        raise ValueError("X and residuals disagree on row count")

    def grow(idx, depth):
        ys = residuals[idx]
        node = Node(value=float(ys.mean()), n_samples=idx.size)
        if depth >= max_depth or idx.size < 2 * min_samples_leaf or np.all(ys == ys[0]):
            return node
        split = best_split(X[idx], ys, min_samples_leaf)
        if split is None:
            return node
        j, thr, sse = split
        if not sse < float(np.sum((ys - node.value) ** 2)):
            return node
        left = X[idx, j] <= thr
        node.feature, node.threshold = j, thr
        node.left = grow(idx[left], depth + 1)
        node.right = grow(idx[~left], depth + 1)
        return node

    return RegressionTree(grow(np.arange(X.shape[0]), 0), max_depth, min_samples_leaf)


@dataclass
class GBTModel:
    base: float
    shrinkage: float
    trees: list[RegressionTree] = field(default_factory=list)
    n_features: int = 0
    train_mse: list[float] = field(default_factory=list)  # after base, then after each tree

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict_gbt(self, X)


def fit_gbt(X, y, n_trees: int = 200, shrinkage: float = 0.1, max_depth: int = 3,
            min_samples_leaf: int = 5) -> GBTModel:
    """Boost least-squares trees on residuals until ``n_trees`` or a split-less tree."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit on zero rows")
    if not 0.0 < shrinkage <= 1.0:
        raise ValueError(f"shrinkage must lie in (0, 1], got {shrinkage}")
    model = GBTModel(float(y.mean()), shrinkage, n_features=X.shape[1])
    pred = np.full(y.shape, model.base)
    model.train_mse.append(float(np.mean((y - pred) ** 2)))
    for _ in range(n_trees):
        tree = fit_tree(X, y - pred, max_depth, min_samples_leaf)
        if tree.root.is_leaf:
            break
        model.trees.append(tree)
        pred = pred + shrinkage * tree.predict(X)
        model.train_mse.append(float(np.mean((y - pred) ** 2)))
    return model


def predict_gbt(model: GBTModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got array of shape {X.shape}")
    out = np.full(X.shape[0], model.base)
    for tree in model.trees:
        out += model.shrinkage * tree.predict(X)
    return out


@dataclass
class TreeParams:
    n_trees: int = 200
    shrinkage: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 5


@dataclass
class GridGBT:
    """One boosted model per valid cell."""

    H: int
    W: int
    p: int
    k: int
    spatial: bool
    models: dict[tuple[int, int], GBTModel]

    def features(self, gs: GridSeries, cell) -> FeatureMatrix:
        build = build_features_spatial if self.spatial else build_features_pointwise
        return build(gs, cell, self.p, self.k)

    def predict_cell_lags(self, gs: GridSeries, cell, t: int) -> float:
        """Forecast for ``t + k`` from the ``p`` months ending at ``t``."""
        r, c = cell
        window = gs.slice(t - self.p + 1, t + 1)
        row = _feature_row(window, cell, self.p, self.spatial)
        return float(predict_gbt(self.models[(r, c)], row[None])[0])


def _feature_row(window: GridSeries, cell, p: int, spatial: bool) -> np.ndarray:
    r, c = cell
    parts = [window.values[:, r, c]]
    if spatial:
        for dr, dc in NEIGHBOURS.values():
            rr, cc = r + dr, c + dc
            if 0 <= rr < window.H and 0 <= cc < window.W and window.mask[rr, cc]:
                parts.append(window.values[:, rr, cc])
            else:
                parts.append(np.zeros(p))
    return np.concatenate(parts)


def train_grid_gbt(gs: GridSeries, spatial: bool, p: int = 12, k: int = 1,
                   params: TreeParams | None = None) -> GridGBT:
    params = params or TreeParams()
    build = build_features_spatial if spatial else build_features_pointwise
    models = {}
    for r in range(gs.H):
        for c in range(gs.W):
            if not gs.mask[r, c]:
                continue
            fm = build(gs, (r, c), p, k)
            models[(r, c)] = fit_gbt(fm.X, fm.y, params.n_trees, params.shrinkage,
                                     params.max_depth, params.min_samples_leaf)
    return GridGBT(gs.H, gs.W, p, k, spatial, models)


def predict_grid_gbt(model: GridGBT, gs: GridSeries, t: int) -> np.ndarray:
    """H x W forecast for month ``t + k`` (NaN at cells without a model)."""
    if t < model.p - 1 or t >= gs.T:
        raise ValueError(f"need months {t - model.p + 1}..{t} of a series with T={gs.T}")
    if (gs.H, gs.W) != (model.H, model.W):
        raise ValueError(f"grid {gs.H}x{gs.W} does not match model {model.H}x{model.W}")
    window = gs.slice(t - model.p + 1, t + 1)
    out = np.full((gs.H, gs.W), np.nan)
    for (r, c), m in model.models.items():
        if gs.mask[r, c]:
            out[r, c] = predict_gbt(m, _feature_row(window, (r, c), model.p, model.spatial)[None])[0]
    return out


def _dump_tree(node: Node, lines: list[str]):
    if node.is_leaf:
        lines.append("leaf %.17g" % node.value)
        return
    lines.append("node %d %.17g" % (node.feature, node.threshold))
    _dump_tree(node.left, lines)
    _dump_tree(node.right, lines)


def save_grid_gbt(model: GridGBT, path) -> None:
    """GBT1 text file: header, then per cell ``cell r c base shrinkage n_features n_trees``
    followed by each tree as ``tree`` and its preorder ``node``/``leaf`` lines."""
    lines = [f"GBT1 {model.H} {model.W} {model.p} {int(model.spatial)}"]
    for (r, c), m in sorted(model.models.items()):
        lines.append("cell %d %d %.17g %.17g %d %d" % (r, c, m.base, m.shrinkage, m.n_features, len(m.trees)))
        for tree in m.trees:
            lines.append(f"tree {tree.max_depth} {tree.min_samples_leaf}")
            _dump_tree(tree.root, lines)
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid_gbt(path, k: int = 1) -> GridGBT:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[0] != "GBT1":
        raise ValueError(f"{path}: not a GBT1 file")
    H, W, p, spatial = int(head[1]), int(head[2]), int(head[3]), head[4] == "1"
    pos = 1

    def read_node():
        nonlocal pos
        toks = lines[pos].split()
        pos += 1
        if toks[0] == "leaf":
            return Node(value=float(toks[1]))
        if toks[0] != "node":
            raise ValueError(f"{path}: line {pos}: expected node/leaf, found {toks[0]!r}")
        node = Node(feature=int(toks[1]), threshold=float(toks[2]))
        node.left = read_node()
        node.right = read_node()
        return node

    models = {}
    try:
        while pos < len(lines):
            toks = lines[pos].split()
            pos += 1
            if not toks:
                continue
            if toks[0] != "cell":
                raise ValueError(f"{path}: line {pos}: expected 'cell', found {toks[0]!r}")
            r, c = int(toks[1]), int(toks[2])
            m = GBTModel(float(toks[3]), float(toks[4]), n_features=int(toks[5]))
            for _ in range(int(toks[6])):
                tt = lines[pos].split()
                pos += 1
                if tt[0] != "tree":
                    raise ValueError(f"{path}: line {pos}: expected 'tree'")
                m.trees.append(RegressionTree(read_node(), int(tt[1]), int(tt[2])))
            models[(r, c)] = m
    except IndexError:
        raise ValueError(f"{path}: truncated GBT1 file") from None
    return GridGBT(H, W, p, k, spatial, models)
