"""Baseline feature-vector classifiers: random forest, 1-NN (L1/L2),
Gaussian naive Bayes and a small MLP.

These are written from scratch on numpy so their behavior is fully pinned
down: given a seed, training and prediction are deterministic, score vectors
are proper distributions over the classes seen in training, and prediction
ties always resolve toward the lowest class code (never insertion order).

The random forest grows each tree on a bootstrap sample, picking the best of
ceil(sqrt(d)) randomly drawn features per split by Gini impurity; with
bootstrap disabled, a single tree searching all features reduces to a plain
exhaustive decision tree.  The MLP reuses the SGD-momentum machinery from
`neural` on standardized inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .imagecore import TissueClass
from . import neural

FAMILIES = ("random-forest", "knn-l1", "knn-l2", "gaussian-nb", "mlp")

_FAMILY_ALIASES = {
    "rf": "random-forest", "random-forest": "random-forest",
    "randomforest": "random-forest", "random_forest": "random-forest",
    "knn-l1": "knn-l1", "knn_l1": "knn-l1", "ibl-l1": "knn-l1",
    "knn-l2": "knn-l2", "knn_l2": "knn-l2", "ibl-l2": "knn-l2",
    "gnb": "gaussian-nb", "gaussian-nb": "gaussian-nb", "naive-bayes": "gaussian-nb",
    "mlp": "mlp",
}

_VAR_FLOOR = 1e-9


def normalize_family(name: str) -> str:
    try:
        return _FAMILY_ALIASES[name.replace(" ", "").lower()]
    except (KeyError, AttributeError):
        raise InvalidArgumentError(f"unknown classifier family {name!r}") from None


@dataclass(frozen=True)
class TrainingSet:
    """Feature rows with integer class labels (TissueClass codes in the pipeline)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        l = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise InvalidArgumentError("features must be a non-empty (n, d) matrix")
        if l.shape != (f.shape[0],):
            raise InvalidArgumentError("labels must align with feature rows")
        if not np.isfinite(f).all():
            raise InvalidArgumentError("features contain NaN or Inf")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


def _check_vector(model, vector) -> np.ndarray:
    v = np.asarray(getattr(vector, "values", vector), dtype=np.float64)
    if v.shape != (model.dim,):
        raise InvalidArgumentError(
            f"vector has dim {v.shape[-1] if v.ndim else 0}, model expects {model.dim}")
    return v


# ---------------------------------------------------------------------------
# decision trees and the forest


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return 1.0 - float((p * p).sum())


def _best_split(x, y, feature_ids, n_classes):
    """Lowest weighted-child-Gini split among the candidate features.

    Candidate thresholds are midpoints of consecutive distinct values.
    Features are scanned in ascending index order and thresholds in
    ascending value order, with strictly-better comparisons, so the result
    does not depend on the order features were drawn in.
    """
    n = y.shape[0]
    best = (math.inf, -1, 0.0)
    for f in sorted(feature_ids):
        values = x[:, f]
        order = np.argsort(values, kind="stable")
        sv = values[order]
        sy = y[order]
        left = np.zeros(n_classes)
        right = np.bincount(sy, minlength=n_classes).astype(np.float64)
        for i in range(n - 1):
            left[sy[i]] += 1
            right[sy[i]] -= 1
            if sv[i] == sv[i + 1]:
                continue
            n_left = i + 1
            score = (n_left * _gini(left) + (n - n_left) * _gini(right)) / n
            if score < best[0]:
                best = (score, f, (sv[i] + sv[i + 1]) / 2.0)
    return best


def _grow_tree(x, y, n_classes, rng, max_features):
    """Grow one tree to purity (or unsplittable nodes); returns a nested dict."""
    d = x.shape[1]
    root: dict = {}
    stack = [(root, np.arange(x.shape[0]))]
    while stack:
        node, idx = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes)
        majority = int(counts.argmax())  # argmax → lowest class code on ties
        if idx.shape[0] < 2 or counts.max() == idx.shape[0]:
            node["class"] = majority
            continue
        if max_features >= d:
            feats = np.arange(d)
        else:
            feats = rng.choice(d, size=max_features, replace=False)
        score, feat, threshold = _best_split(x[idx], y[idx], feats, n_classes)
        if feat < 0:  # all candidate features constant
            node["class"] = majority
            continue
        go_left = x[idx, feat] < threshold
        node["feature"] = int(feat)
        node["threshold"] = float(threshold)
        node["left"] = {}
        node["right"] = {}
        stack.append((node["left"], idx[go_left]))
        stack.append((node["right"], idx[~go_left]))
    return root


def _tree_predict(node, v) -> int:
    while "class" not in node:
        node = node["left"] if v[node["feature"]] < node["threshold"] else node["right"]
    return node["class"]


@dataclass
class RandomForestModel:
    family = "random-forest"
    classes: np.ndarray
    trees: list
    dim: int

    def predict_scores(self, v: np.ndarray) -> np.ndarray:
        votes = np.zeros(self.classes.shape[0])
        for tree in self.trees:
            votes[_tree_predict(tree, v)] += 1.0
        return votes / len(self.trees)


@dataclass
class KnnModel:
    classes: np.ndarray
    exemplars: np.ndarray
    exemplar_classes: np.ndarray  # indices into classes
    norm: int
    k: int
    dim: int

    @property
    def family(self) -> str:
        return f"knn-l{self.norm}"

    def predict_scores(self, v: np.ndarray) -> np.ndarray:
        delta = self.exemplars - v
        if self.norm == 1:
            dist = np.abs(delta).sum(axis=1)
        else:
            dist = np.sqrt((delta * delta).sum(axis=1))
        # order by (distance, class code): permutation-invariant tie handling
        order = np.lexsort((self.exemplar_classes, dist))
        chosen = self.exemplar_classes[order[:self.k]]
        votes = np.bincount(chosen, minlength=self.classes.shape[0]).astype(np.float64)
        return votes / votes.sum()


@dataclass
class GaussianNBModel:
    family = "gaussian-nb"
    classes: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_priors: np.ndarray
    dim: int

    def predict_scores(self, v: np.ndarray) -> np.ndarray:
        log_pdf = -0.5 * (np.log(2 * np.pi * self.variances)
                          + (v - self.means) ** 2 / self.variances).sum(axis=1)
        log_post = self.log_priors + log_pdf
        log_post -= log_post.max()
        p = np.exp(log_post)
        return p / p.sum()


@dataclass
class MlpModel:
    family = "mlp"
    classes: np.ndarray
    network: neural.Network
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    hidden: tuple
    dim: int
    history: list = field(default_factory=list)

    def predict_scores(self, v: np.ndarray) -> np.ndarray:
        z = (v - self.feature_mean) / self.feature_scale
        logits, _ = self.network.forward(z[None, :])
        return neural.softmax(logits)[0]


# ---------------------------------------------------------------------------
# training


def _train_random_forest(data: TrainingSet, seed, n_trees=10, max_features=None,
                         bootstrap=True):
    if n_trees < 1:
        raise InvalidArgumentError("n_trees must be >= 1")
    classes = data.classes
    y = np.searchsorted(classes, data.labels)
    d = data.dim
    if max_features is None:
        max_features = math.ceil(math.sqrt(d))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng(seed + t)  # per-tree stream
        if bootstrap:
            idx = rng.integers(0, data.features.shape[0], size=data.features.shape[0])
        else:
            idx = np.arange(data.features.shape[0])
        trees.append(_grow_tree(data.features[idx], y[idx], classes.shape[0],
                                rng, max_features))
    return RandomForestModel(classes=classes, trees=trees, dim=d)


def _train_knn(data: TrainingSet, norm, k=1):
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    classes = data.classes
    return KnnModel(classes=classes, exemplars=data.features.copy(),
                    exemplar_classes=np.searchsorted(classes, data.labels),
                    norm=norm, k=k, dim=data.dim)


def _train_gaussian_nb(data: TrainingSet):
    classes = data.classes
    n, d = data.features.shape
    means = np.zeros((classes.shape[0], d))
    variances = np.zeros((classes.shape[0], d))
    priors = np.zeros(classes.shape[0])
    for i, c in enumerate(classes):
        rows = data.features[data.labels == c]
        means[i] = rows.mean(axis=0)
        variances[i] = rows.var(axis=0) + _VAR_FLOOR
        priors[i] = rows.shape[0] / n
    return GaussianNBModel(classes=classes, means=means, variances=variances,
                           log_priors=np.log(priors), dim=d)


def stratified_holdout(labels: np.ndarray, frac: float, rng) -> np.ndarray:
    """Boolean mask marking a per-class holdout of about `frac` of the rows."""
    held = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        take = int(round(idx.shape[0] * frac))
        if take >= 1 and take < idx.shape[0]:
            held[rng.permutation(idx)[:take]] = True
    return held


def _train_mlp(data: TrainingSet, seed, hidden=(64, 64), learning_rate=0.01,
               momentum=0.9, batch_size=32, max_epochs=200, patience=25):
    classes = data.classes
    y = np.searchsorted(classes, data.labels)
    mean = data.features.mean(axis=0)
    scale = data.features.std(axis=0)
    scale = np.where(scale == 0, 1.0, scale)
    z = (data.features - mean) / scale

    rng = np.random.default_rng(seed)
    layers = []
    fan = data.dim
    for width in hidden:
        w = rng.uniform(-1, 1, (fan, width)) * np.sqrt(6.0 / fan)
        layers.append(neural.Dense(w, np.zeros(width)))
        layers.append(neural.ReLU())
        fan = width
    w = rng.uniform(-1, 1, (fan, classes.shape[0])) * np.sqrt(6.0 / fan)
    layers.append(neural.Dense(w, np.zeros(classes.shape[0])))
    net = neural.Network(layers)

    held = stratified_holdout(y, 0.1, np.random.default_rng(seed))
    if held.any() and not held.all():
        x_tr, y_tr, x_val, y_val = z[~held], y[~held], z[held], y[held]
    else:
        x_tr, y_tr, x_val, y_val = z, y, z, y
    config = neural.TrainConfig(learning_rate=learning_rate, momentum=momentum,
                                batch_size=batch_size, max_epochs=max_epochs,
                                patience=patience, seed=seed)
    history = neural.train_arrays(net, config, x_tr, y_tr, x_val, y_val)
    return MlpModel(classes=classes, network=net, feature_mean=mean,
                    feature_scale=scale, hidden=tuple(hidden), dim=data.dim,
                    history=history)


def train(data: TrainingSet, family: str, seed: int = 0, **hyperparams):
    """Train one classifier.  family is 'rf', 'knn-l1', 'knn-l2', 'gnb' or 'mlp'."""
    family = normalize_family(family)
    if family == "random-forest":
        return _train_random_forest(data, seed, **hyperparams)
    if family == "knn-l1":
        return _train_knn(data, norm=1, **hyperparams)
    if family == "knn-l2":
        return _train_knn(data, norm=2, **hyperparams)
    if family == "gaussian-nb":
        if hyperparams:
            raise InvalidArgumentError("gaussian-nb takes no hyperparameters")
        return _train_gaussian_nb(data)
    return _train_mlp(data, seed, **hyperparams)


def predict(model, vector):
    """Label one feature vector; returns (class code, score vector).

    The score vector is a distribution over model.classes; the returned label
    is its argmax, lowest class code on ties.
    """
    v = _check_vector(model, vector)
    scores = model.predict_scores(v)
    return int(model.classes[int(scores.argmax())]), scores


def predict_many(model, matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    labels = np.empty(matrix.shape[0], dtype=np.int64)
    scores = np.empty((matrix.shape[0], model.classes.shape[0]))
    for i in range(matrix.shape[0]):
        labels[i], scores[i] = predict(model, matrix[i])
    return labels, scores


# ---------------------------------------------------------------------------
# persistence


def _tree_to_jsonable(node):
    return node


def to_json(model) -> str:
    base = {"family": model.family, "classes": model.classes.tolist(), "dim": model.dim}
    if isinstance(model, RandomForestModel):
        base["trees"] = model.trees
    elif isinstance(model, KnnModel):
        base.update(exemplars=model.exemplars.tolist(),
                    exemplar_classes=model.exemplar_classes.tolist(),
                    norm=model.norm, k=model.k)
    elif isinstance(model, GaussianNBModel):
        base.update(means=model.means.tolist(), variances=model.variances.tolist(),
                    log_priors=model.log_priors.tolist())
    elif isinstance(model, MlpModel):
        weights = [[w.tolist() for w in layer.params]
                   for layer in model.network.layers if layer.params]
        base.update(hidden=list(model.hidden), weights=weights,
                    feature_mean=model.feature_mean.tolist(),
                    feature_scale=model.feature_scale.tolist(),
                    history=model.history)
    else:
        raise InvalidArgumentError(f"cannot serialize {type(model).__name__}")
    return json.dumps(base)


def from_json(text: str):
    raw = json.loads(text)
    family = raw["family"]
    classes = np.asarray(raw["classes"], dtype=np.int64)
    dim = int(raw["dim"])
    if family == "random-forest":
        return RandomForestModel(classes=classes, trees=raw["trees"], dim=dim)
    if family in ("knn-l1", "knn-l2"):
        return KnnModel(classes=classes,
                        exemplars=np.asarray(raw["exemplars"], dtype=np.float64),
                        exemplar_classes=np.asarray(raw["exemplar_classes"], dtype=np.int64),
                        norm=int(raw["norm"]), k=int(raw["k"]), dim=dim)
    if family == "gaussian-nb":
        return GaussianNBModel(classes=classes,
                               means=np.asarray(raw["means"], dtype=np.float64),
                               variances=np.asarray(raw["variances"], dtype=np.float64),
                               log_priors=np.asarray(raw["log_priors"], dtype=np.float64),
                               dim=dim)
    if family == "mlp":
        layers = []
        weights = raw["weights"]
        for i, (w, b) in enumerate(weights):
            layers.append(neural.Dense(np.asarray(w, dtype=np.float64),
                                       np.asarray(b, dtype=np.float64)))
            if i < len(weights) - 1:
                layers.append(neural.ReLU())
        return MlpModel(classes=classes, network=neural.Network(layers),
                        feature_mean=np.asarray(raw["feature_mean"], dtype=np.float64),
                        feature_scale=np.asarray(raw["feature_scale"], dtype=np.float64),
                        hidden=tuple(raw["hidden"]), dim=dim,
                        history=[tuple(h) for h in raw.get("history", [])])
    raise InvalidArgumentError(f"unknown model family {family!r}")


def save(model, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(model))


def load(path):
    with open(path) as fh:
        return from_json(fh.read())
