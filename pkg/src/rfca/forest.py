"""Bagged CART ensemble used to mine conversion rules.

Trees are grown greedily on Gini impurity with a random feature subset at
every node. A bootstrap draw is kept as integer weights on the distinct rows
it touched, which is equivalent to growing on the expanded multiset.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .sampling import TrainingSet

MAGIC = b"RFCAFRST"
FORMAT_VERSION = 1


class ForestError(ValueError):
    pass


@dataclass
class DecisionTree:
    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray  # float64, go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray  # majority class code of each node
    max_depth: int
    min_leaf: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.label[self.apply(np.asarray(X, dtype=np.float64))]


def _best_split(x, y_onehot, min_leaf):
    """Best threshold on one feature. Returns (score, threshold) or None.

    ``y_onehot`` holds weighted class counts per row; the score
    ``sum(cl^2)/nl + sum(cr^2)/nr`` is maximal where weighted Gini is minimal.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cum = np.cumsum(y_onehot[order], axis=0)
    total = cum[-1]
    n_left = cum.sum(axis=1)[:-1]
    n_all = total.sum()
    n_right = n_all - n_left
    ok = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    left = cum[:-1]
    right = total - left
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (left**2).sum(axis=1) / n_left + (right**2).sum(axis=1) / n_right
    score = np.where(ok, score, -np.inf)
    i = int(np.argmax(score))
    thr = 0.5 * (xs[i] + xs[i + 1])
    if not xs[i] <= thr < xs[i + 1]:
        thr = xs[i]
    return float(score[i]), float(thr)


def grow_tree(X: np.ndarray, y: np.ndarray, weights: np.ndarray, n_classes: int,
              rng: np.random.Generator, max_features: int, max_depth: int = 25,
              min_leaf: int = 1) -> DecisionTree:
    """Grow one tree on rows ``X`` with class indices ``y`` (0-based) and
    integer multiplicities ``weights``."""
    X = np.asarray(X, dtype=np.float64)
    S = X.shape[1]
    keep = np.flatnonzero(weights > 0)
    onehot = np.zeros((len(X), n_classes))
    onehot[np.arange(len(X)), y] = weights

    feature, threshold, left, right, label = [], [], [], [], []

    def new_node(rows):
        counts = onehot[rows].sum(axis=0)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(int(np.argmax(counts)) + 1)  # ties -> lowest class code
        return len(feature) - 1, counts

    root, counts = new_node(keep)
    stack = [(root, keep, counts, 0)]
    while stack:
        node, rows, counts, depth = stack.pop()
        n = counts.sum()
        if depth >= max_depth or n < 2 * min_leaf or counts.max() == n:
            continue
        best = None
        tried = 0
        for f in rng.permutation(S):
            col = X[rows, f]
            if col.min() == col.max():
                continue
            tried += 1
            found = _best_split(col, onehot[rows], min_leaf)
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], found[1], int(f))
            if tried >= max_features:
                break
        if best is None:
            continue
        _, thr, f = best
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        feature[node] = f
        threshold[node] = thr
        lnode, lcounts = new_node(lrows)
        rnode, rcounts = new_node(rrows)
        left[node], right[node] = lnode, rnode
        stack.append((rnode, rrows, rcounts, depth + 1))
        stack.append((lnode, lrows, lcounts, depth + 1))

    return DecisionTree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                        np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                        np.array(label, dtype=np.int32), max_depth, min_leaf)


@dataclass
class VoteVector:
    votes: np.ndarray  # integer tree votes per class code 1..C
    m: int

    @property
    def probs(self) -> np.ndarray:
        return self.votes / self.m

    def fractions(self) -> list[Fraction]:
        return [Fraction(int(v), self.m) for v in self.votes]

    def __getitem__(self, code: int) -> float:
        return self.votes[code - 1] / self.m


@dataclass
class Forest:
    trees: list[DecisionTree]
    oob_indices: list[np.ndarray]
    n_rows: int
    feature_names: list[str]
    class_count: int = 9
    seed: int = 0
    sample_fraction: float = 0.6
    max_features: int = 1
    report: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def degenerate(self) -> bool:
        return all(t.n_nodes == 1 for t in self.trees)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def vote_counts(self, X) -> np.ndarray:
        """(n, class_count) integer votes for each row of ``X``."""
        X = self._check(X)
        votes = np.zeros((len(X), self.class_count), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            votes[rows, tree.predict(X) - 1] += 1
        return votes

    def class_votes(self, X, code: int) -> np.ndarray:
        """Vote fraction for one class code, for every row of ``X``."""
        X = self._check(X)
        hits = np.zeros(len(X), dtype=np.int64)
        for tree in self.trees:
            hits += tree.predict(X) == code
        return hits / self.m

    def predict_votes(self, x) -> VoteVector:
        return VoteVector(self.vote_counts(x)[0], self.m)

    def classify(self, X) -> np.ndarray:
        """Majority vote; ties go to the lowest class code."""
        return np.argmax(self.vote_counts(X), axis=1) + 1

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<IIIIIqdI", FORMAT_VERSION, self.m, self.n_features, self.class_count,
                              self.n_rows, self.seed, self.sample_fraction, self.max_features))
        for name in self.feature_names:
            raw = name.encode("utf-8")
            out.write(struct.pack("<I", len(raw)) + raw)
        for tree, oob in zip(self.trees, self.oob_indices):
            out.write(struct.pack("<III", tree.n_nodes, tree.max_depth, tree.min_leaf))
            out.write(tree.feature.astype("<i4").tobytes())
            out.write(tree.threshold.astype("<f8").tobytes())
            out.write(tree.left.astype("<i4").tobytes())
            out.write(tree.right.astype("<i4").tobytes())
            out.write(tree.label.astype("<i4").tobytes())
            out.write(struct.pack("<I", len(oob)))
            out.write(np.asarray(oob).astype("<u4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Forest":
        buf = io.BytesIO(data)
        if buf.read(len(MAGIC)) != MAGIC:
            raise ForestError("not a forest file (bad magic)")
        head = struct.Struct("<IIIIIqdI")
        version, m, s, c, n_rows, seed, frac, mtry = head.unpack(buf.read(head.size))
        if version != FORMAT_VERSION:
            raise ForestError(f"unsupported forest format version {version}")

        def arr(dtype, count):
            width = np.dtype(dtype).itemsize
            return np.frombuffer(buf.read(width * count), dtype=dtype).astype(dtype[1:])

        names = []
        for _ in range(s):
            (length,) = struct.unpack("<I", buf.read(4))
            names.append(buf.read(length).decode("utf-8"))
        trees, oobs = [], []
        for _ in range(m):
            n, max_depth, min_leaf = struct.unpack("<III", buf.read(12))
            feature, thr, left, right, label = (arr("<i4", n), arr("<f8", n), arr("<i4", n),
                                                arr("<i4", n), arr("<i4", n))
            trees.append(DecisionTree(feature, thr, left, right, label, max_depth, min_leaf))
            (k,) = struct.unpack("<I", buf.read(4))
            oobs.append(arr("<u4", k).astype(np.int64))
        return cls(trees, oobs, n_rows, names, c, seed, frac, mtry)

    def dump_text(self) -> str:
        """Human-readable JSON listing of every tree."""
        doc = {
            "format_version": FORMAT_VERSION,
            "class_count": self.class_count,
            "feature_names": self.feature_names,
            "seed": self.seed,
            "sample_fraction": self.sample_fraction,
            "max_features": self.max_features,
            "trees": [
                {
                    "nodes": [
                        {"feature": int(t.feature[i]), "threshold": float(t.threshold[i]),
                         "left": int(t.left[i]), "right": int(t.right[i]), "label": int(t.label[i])}
                        for i in range(t.n_nodes)
                    ],
                    "oob": [int(j) for j in oob],
                }
                for t, oob in zip(self.trees, self.oob_indices)
            ],
        }
        return json.dumps(doc, indent=1)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def train(data: TrainingSet, m_trees: int = 80, sample_fraction: float = 0.6, seed: int = 0,
          max_depth: int = 25, min_leaf: int = 1, max_features: int | None = None,
          class_count: int = 9) -> Forest:
    """Train a forest of ``m_trees`` CART trees.

    Each tree sees ``ceil(sample_fraction * N)`` rows drawn with replacement;
    the rows it never drew form its out-of-bag set.
    """
    X, labels = data.features, data.labels
    n, S = X.shape
    if n == 0:
        raise ForestError("cannot train on an empty training set")
    if m_trees < 1:
        raise ForestError("m_trees must be at least 1")
    if labels.min() < 1 or labels.max() > class_count:
        raise ForestError(f"labels must lie in 1..{class_count}")
    mtry = max_features or max(1, math.ceil(math.sqrt(S)))
    draw = max(1, math.ceil(sample_fraction * n))
    y = labels - 1
    trees, oobs = [], []
    for k in range(m_trees):
        rng = tree_rng(seed, k)
        counts = np.bincount(rng.integers(0, n, size=draw), minlength=n)
        trees.append(grow_tree(X, y, counts, class_count, rng, mtry, max_depth, min_leaf))
        oobs.append(np.flatnonzero(counts == 0))
    forest = Forest(trees, oobs, n, list(data.feature_names), class_count, seed, sample_fraction, mtry)
    forest.report = {"rows": n, "classes_present": sorted(int(c) for c in np.unique(labels)),
                     "degenerate": len(np.unique(labels)) < 2}
    return forest


def oob_error(forest: Forest, data: TrainingSet) -> tuple[float, int]:
    """Out-of-bag misclassification rate.

    Returns ``(error, excluded)`` where ``excluded`` counts rows that were
    drawn by every tree and therefore have no out-of-bag vote.
    """
    X, labels = forest._check(data.features), data.labels
    if len(X) != forest.n_rows:
        raise ForestError("training set does not match the forest's rows")
    votes = np.zeros((len(X), forest.class_count), dtype=np.int64)
    for tree, oob in zip(forest.trees, forest.oob_indices):
        if len(oob):
            votes[oob, tree.predict(X[oob]) - 1] += 1
    covered = votes.sum(axis=1) > 0
    if not covered.any():
        return float("nan"), len(X)
    pred = np.argmax(votes[covered], axis=1) + 1
    return float(np.mean(pred != labels[covered])), int((~covered).sum())


def average_error(forest: Forest, X: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(forest.classify(X) != labels))


def variable_contribution(forest: Forest, data: TrainingSet, seed: int = 0,
                          mode: str = "reevaluate", **train_kwargs) -> np.ndarray:
    """Share of error inflation caused by replacing each feature with noise.

    In ``'reevaluate'`` mode the trained forest predicts the training set
    with feature *i* replaced by uniform [0, 1) noise. In ``'retrain'`` mode a
    new forest is grown on the corrupted data and scored on the original
    rows. The result is ``|AE_i - AE_true|`` normalized to sum to one.
    """
    X, y = data.features, data.labels
    ae_true = average_error(forest, X, y)
    rng = np.random.default_rng(seed)
    deltas = np.zeros(X.shape[1])
    for i in range(X.shape[1]):
        noisy = X.copy()
        noisy[:, i] = rng.random(len(X))
        if mode == "reevaluate":
            ae = average_error(forest, noisy, y)
        elif mode == "retrain":
            params = dict(m_trees=forest.m, sample_fraction=forest.sample_fraction, seed=forest.seed,
                          max_features=forest.max_features, class_count=forest.class_count)
            params.update(train_kwargs)
            alt = train(TrainingSet(noisy, y, data.feature_names), **params)
            ae = average_error(alt, X, y)
        else:
            raise ForestError(f"unknown contribution mode {mode!r}")
        deltas[i] = abs(ae - ae_true)
    total = deltas.sum()
    if total == 0:
        raise ForestError("no feature changes the forest's error; contribution undefined")
    return deltas / total
