"""Knowledge base and random-forest execution predictor.

Multi-label classification is done by binary relevance: one independent
forest of CART-style trees per error-tolerant step. A step's positive class
means "the output error would exceed the step's bound, execute it". The
fraction of trees voting positive is compared against a vote threshold;
lowering the threshold trades saved executions for fewer missed violations
(recall bias).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_TREES = 100
DEFAULT_VOTE_THRESHOLD = 0.5
RECALL_BIASED_VOTE_THRESHOLD = 0.3


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingExample:
    """One wave's knowledge-base row: impact per tolerant step and whether
    each step's simulated error exceeded its bound."""

    wave: int
    features: Tuple[float, ...]
    labels: Tuple[bool, ...]


@dataclass
class Tree:
    """Binary decision tree stored as flat node arrays.

    ``feature`` is -1 at leaves; ``leaf`` holds the class (0/1) and is only
    meaningful at leaf nodes. Children index into the same arrays.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray

    def predict_one(self, x: Sequence[float]) -> bool:
        i = 0
        feature = self.feature
        while feature[i] >= 0:
            i = self.left[i] if x[feature[i]] <= self.threshold[i] else self.right[i]
        return bool(self.leaf[i])


@dataclass
class Forest:
    """Bagged trees for one label; ``constant`` short-circuits single-class
    training columns."""

    trees: List[Tree] = field(default_factory=list)
    constant: Optional[bool] = None

    def vote_fraction(self, x: Sequence[float]) -> float:
        if self.constant is not None:
            return 1.0 if self.constant else 0.0
        pos = sum(1 for t in self.trees if t.predict_one(x))
        return pos / len(self.trees)


@dataclass
class ForestModel:
    forests: List[Forest]
    label_names: Tuple[str, ...]
    n_features: int
    trees_per_forest: int
    vote_threshold: float
    seed: int
    constant_labels: Tuple[str, ...] = ()

    def vote_fractions(self, features: Sequence[float]) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.shape != (self.n_features,):
            raise ValueError(
                f"expected {self.n_features} features, got shape {x.shape}"
            )
        return np.array([f.vote_fraction(x) for f in self.forests])

    def classify(self, features: Sequence[float]) -> List[bool]:
        """Per label: execute when the positive vote fraction reaches the
        vote threshold."""
        fractions = self.vote_fractions(features)
        return [bool(f >= self.vote_threshold) for f in fractions]


def _gini_split_scores(n_left, pos_left, n_total, pos_total):
    """Weighted Gini impurity for every candidate prefix split, vectorized."""
    n_right = n_total - n_left
    pos_right = pos_total - pos_left
    pl = pos_left / n_left
    pr = pos_right / n_right
    gini_left = 2.0 * pl * (1.0 - pl)
    gini_right = 2.0 * pr * (1.0 - pr)
    return (n_left * gini_left + n_right * gini_right) / n_total


def _best_split(X: np.ndarray, y: np.ndarray, feature_ids: np.ndarray):
    """Best (feature, threshold) by Gini over midpoint candidates.

    Candidates sit halfway between consecutive distinct sorted values of a
    feature. Returns None when no feature admits a split.
    """
    n = len(y)
    pos_total = int(y.sum())
    best = None  # (score, feature, threshold)
    for f in feature_ids:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        ys = y[order]
        boundaries = np.nonzero(xs[:-1] < xs[1:])[0]
        if len(boundaries) == 0:
            continue
        n_left = boundaries + 1
        pos_left = np.cumsum(ys)[boundaries]
        scores = _gini_split_scores(n_left, pos_left, n, pos_total)
        k = int(np.argmin(scores))
        score = float(scores[k])
        if best is None or score < best[0]:
            b = boundaries[k]
            threshold = (xs[b] + xs[b + 1]) / 2.0
            best = (score, int(f), float(threshold))
    return best


def _build_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                n_split_features: int) -> Tree:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    leaf: List[int] = []

    d = X.shape[1]

    def majority(labels: np.ndarray) -> int:
        pos = int(labels.sum())
        neg = len(labels) - pos
        # Ties fall to the positive (execute) class: the safe side.
        return 1 if pos >= neg else 0

    def add_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(0)
        return len(feature) - 1

    # (node index, sample indices)
    root = add_node()
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        labels = y[idx]
        pos = int(labels.sum())
        if len(idx) < 2 or pos == 0 or pos == len(idx):
            leaf[node] = majority(labels)
            continue
        subset = rng.choice(d, size=min(n_split_features, d), replace=False)
        split = _best_split(X[idx], labels, subset)
        if split is None:
            leaf[node] = majority(labels)
            continue
        _, f, t = split
        mask = X[idx, f] <= t
        left_idx = idx[mask]
        right_idx = idx[~mask]
        feature[node] = f
        threshold[node] = t
        lnode = add_node()
        rnode = add_node()
        left[node] = lnode
        right[node] = rnode
        stack.append((rnode, right_idx))
        stack.append((lnode, left_idx))

    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        leaf=np.array(leaf, dtype=np.int8),
    )


def _as_arrays(examples: Sequence[TrainingExample]) -> Tuple[np.ndarray, np.ndarray]:
    X = np.array([e.features for e in examples], dtype=float)
    Y = np.array([e.labels for e in examples], dtype=np.int8)
    if X.ndim != 2:
        X = X.reshape(len(examples), -1)
        Y = Y.reshape(len(examples), -1)
    return X, Y


def train(examples: Sequence[TrainingExample], trees: int = DEFAULT_TREES,
          vote_threshold: float = DEFAULT_VOTE_THRESHOLD, seed: int = 0,
          label_names: Optional[Sequence[str]] = None) -> ForestModel:
    """Fit one forest per label on bootstrap resamples of the examples.

    Splits are chosen by Gini impurity over a random subset of ceil(sqrt(d))
    features; trees grow until nodes are pure or hold fewer than two
    samples. A label column with a single class yields a constant forest
    flagged in ``constant_labels``. Deterministic for a fixed seed.
    """
    if len(examples) < 2:
        raise InsufficientDataError(
            f"need at least 2 training examples, got {len(examples)}"
        )
    X, Y = _as_arrays(examples)
    n, d = X.shape
    n_labels = Y.shape[1]
    if label_names is None:
        label_names = tuple(f"label_{i}" for i in range(n_labels))
    label_names = tuple(label_names)
    if len(label_names) != n_labels:
        raise ValueError("label_names length does not match label count")

    n_split_features = max(1, math.ceil(math.sqrt(d)))
    children = np.random.SeedSequence(seed).spawn(n_labels)
    forests: List[Forest] = []
    constant: List[str] = []
    for j in range(n_labels):
        col = Y[:, j]
        if col.min() == col.max():
            forests.append(Forest(constant=bool(col[0])))
            constant.append(label_names[j])
            continue
        rng = np.random.Generator(np.random.PCG64(children[j]))
        grown = []
        for _ in range(trees):
            bag = rng.integers(0, n, size=n)
            grown.append(_build_tree(X[bag], col[bag], rng, n_split_features))
        forests.append(Forest(trees=grown))

    return ForestModel(
        forests=forests,
        label_names=label_names,
        n_features=d,
        trees_per_forest=trees,
        vote_threshold=vote_threshold,
        seed=seed,
        constant_labels=tuple(constant),
    )


def classify(model: ForestModel, features: Sequence[float]) -> List[bool]:
    return model.classify(features)


@dataclass
class LabelScores:
    accuracy: float
    precision: float
    recall: float
    degenerate: bool = False


@dataclass
class EvalReport:
    per_label: Dict[str, LabelScores]
    macro_accuracy: float
    macro_precision: float
    macro_recall: float
    folds: int

    def __str__(self) -> str:
        lines = [f"{self.folds}-fold cross-validation"]
        for name, s in self.per_label.items():
            flag = " (degenerate)" if s.degenerate else ""
            lines.append(
                f"  {name}: acc={s.accuracy:.4f} prec={s.precision:.4f} "
                f"rec={s.recall:.4f}{flag}"
            )
        lines.append(
            f"  macro: acc={self.macro_accuracy:.4f} "
            f"prec={self.macro_precision:.4f} rec={self.macro_recall:.4f}"
        )
        return "\n".join(lines)


def _scores_from_counts(tp: int, fp: int, tn: int, fn: int) -> LabelScores:
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    degenerate = False
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
        degenerate = True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 1.0 if fp == 0 else 0.0
        degenerate = True
    else:
        recall = tp / (tp + fn)
    return LabelScores(accuracy, precision, recall, degenerate)


def cross_validate(examples: Sequence[TrainingExample], k: int = 10,
                   trees: int = DEFAULT_TREES,
                   vote_threshold: float = DEFAULT_VOTE_THRESHOLD,
                   seed: int = 0,
                   label_names: Optional[Sequence[str]] = None) -> EvalReport:
    """k-fold cross-validation with folds contiguous in wave order.

    Confusion counts are pooled over folds (micro-averaged per label);
    macro metrics average the per-label scores.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if k > len(examples):
        raise ValueError(f"{k} folds but only {len(examples)} examples")
    examples = sorted(examples, key=lambda e: e.wave)
    n_labels = len(examples[0].labels)
    if label_names is None:
        label_names = tuple(f"label_{i}" for i in range(n_labels))

    folds = np.array_split(np.arange(len(examples)), k)
    counts = np.zeros((n_labels, 4), dtype=int)  # tp, fp, tn, fn
    for fold in folds:
        held = set(fold.tolist())
        train_set = [e for i, e in enumerate(examples) if i not in held]
        test_set = [examples[i] for i in fold]
        model = train(train_set, trees=trees, vote_threshold=vote_threshold,
                      seed=seed, label_names=label_names)
        for ex in test_set:
            predicted = model.classify(ex.features)
            for j, (pred, actual) in enumerate(zip(predicted, ex.labels)):
                if pred and actual:
                    counts[j, 0] += 1
                elif pred and not actual:
                    counts[j, 1] += 1
                elif not pred and not actual:
                    counts[j, 2] += 1
                else:
                    counts[j, 3] += 1

    per_label = {
        name: _scores_from_counts(*counts[j])
        for j, name in enumerate(label_names)
    }
    scores = list(per_label.values())
    return EvalReport(
        per_label=per_label,
        macro_accuracy=sum(s.accuracy for s in scores) / len(scores),
        macro_precision=sum(s.precision for s in scores) / len(scores),
        macro_recall=sum(s.recall for s in scores) / len(scores),
        folds=k,
    )


def quality_gate(report: EvalReport, min_accuracy: float, min_recall: float) -> bool:
    """True when the model is good enough to leave the training phase."""
    return (report.macro_accuracy >= min_accuracy
            and report.macro_recall >= min_recall)


# ---------------------------------------------------------------------------
# Persistence: knowledge base as CSV, model as flat text.

def save_knowledge_base(examples: Sequence[TrainingExample],
                        step_names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wave"]
                   + [f"feat_{s}" for s in step_names]
                   + [f"label_{s}" for s in step_names])
        for ex in examples:
            w.writerow([ex.wave]
                       + [repr(f) for f in ex.features]
                       + [int(b) for b in ex.labels])


def load_knowledge_base(path) -> Tuple[List[TrainingExample], List[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InsufficientDataError(f"empty knowledge base file: {path}")
    header = rows[0]
    feat_cols = [h for h in header if h.startswith("feat_")]
    step_names = [h[len("feat_"):] for h in feat_cols]
    k = len(feat_cols)
    examples = []
    for row in rows[1:]:
        if not row:
            continue
        wave = int(row[0])
        features = tuple(float(v) for v in row[1:1 + k])
        labels = tuple(v not in ("0", "", "False") for v in row[1 + k:1 + 2 * k])
        examples.append(TrainingExample(wave=wave, features=features, labels=labels))
    return examples, step_names


MODEL_FORMAT_VERSION = 1


def save_model(model: ForestModel, path) -> None:
    """Versioned flat text serialization: one node per line within each tree."""
    with open(path, "w") as fh:
        fh.write(f"qodflow-forest v{MODEL_FORMAT_VERSION}\n")
        fh.write(f"features {model.n_features}\n")
        fh.write(f"trees {model.trees_per_forest}\n")
        fh.write(f"vote_threshold {model.vote_threshold!r}\n")
        fh.write(f"seed {model.seed}\n")
        fh.write(f"labels {' '.join(model.label_names)}\n")
        for name, forest in zip(model.label_names, model.forests):
            if forest.constant is not None:
                fh.write(f"forest {name} constant {int(forest.constant)}\n")
                continue
            fh.write(f"forest {name} trees {len(forest.trees)}\n")
            for t, tree in enumerate(forest.trees):
                fh.write(f"tree {t} nodes {len(tree.feature)}\n")
                for i in range(len(tree.feature)):
                    fh.write(
                        f"{i} {tree.feature[i]} {tree.threshold[i]!r} "
                        f"{tree.left[i]} {tree.right[i]} {tree.leaf[i]}\n"
                    )


def load_model(path) -> ForestModel:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("qodflow-forest v"):
        raise ValueError(f"not a qodflow forest model file: {path}")
    version = int(lines[0].split("v")[-1])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version: {version}")
    n_features = int(lines[1].split()[1])
    trees_per_forest = int(lines[2].split()[1])
    vote_threshold = float(lines[3].split()[1])
    seed = int(lines[4].split()[1])
    label_names = tuple(lines[5].split()[1:])

    forests: List[Forest] = []
    constant: List[str] = []
    pos = 6
    for name in label_names:
        parts = lines[pos].split()
        assert parts[0] == "forest" and parts[1] == name, f"bad model file near line {pos + 1}"
        if parts[2] == "constant":
            value = bool(int(parts[3]))
            forests.append(Forest(constant=value))
            constant.append(name)
            pos += 1
            continue
        n_trees = int(parts[3])
        pos += 1
        grown = []
        for _ in range(n_trees):
            n_nodes = int(lines[pos].split()[3])
            pos += 1
            feature = np.empty(n_nodes, dtype=np.int32)
            threshold = np.empty(n_nodes, dtype=np.float64)
            left = np.empty(n_nodes, dtype=np.int32)
            right = np.empty(n_nodes, dtype=np.int32)
            leaf = np.empty(n_nodes, dtype=np.int8)
            for i in range(n_nodes):
                fields = lines[pos].split()
                pos += 1
                feature[i] = int(fields[1])
                threshold[i] = float(fields[2])
                left[i] = int(fields[3])
                right[i] = int(fields[4])
                leaf[i] = int(fields[5])
            grown.append(Tree(feature, threshold, left, right, leaf))
        forests.append(Forest(trees=grown))

    return ForestModel(
        forests=forests,
        label_names=label_names,
        n_features=n_features,
        trees_per_forest=trees_per_forest,
        vote_threshold=vote_threshold,
        seed=seed,
        constant_labels=tuple(constant),
    )
