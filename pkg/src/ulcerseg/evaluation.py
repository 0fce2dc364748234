"""Classification metrics, cross-validation protocols and the nonparametric
ranking tests used to compare segmentation methods.

Metrics follow the usual multi-class conventions: Cohen's kappa from the
confusion matrix, per-class precision/recall/F1 with support-weighted
averages, specificity as the support-weighted one-vs-rest true-negative
rate, and AUC as the support-weighted mean of one-vs-rest ROC areas computed
by the rank (Mann-Whitney) method with average ranks on ties.

The ranking harness implements the Friedman test in rank-sum form with the
standard tie correction, and the Nemenyi post-test with p-values from the
studentized-range distribution (infinite degrees of freedom).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats

from .errors import InvalidArgumentError

_SCORE_TOL = 1e-6


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix; rows are true classes, columns predictions."""

    counts: np.ndarray
    classes: np.ndarray

    @classmethod
    def from_labels(cls, truth, predicted, classes=None):
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if truth.shape != predicted.shape or truth.ndim != 1:
            raise InvalidArgumentError("truth and predictions must be equal-length 1-D")
        if truth.shape[0] == 0:
            raise InvalidArgumentError("empty input")
        if classes is None:
            classes = np.unique(np.concatenate([truth, predicted]))
        classes = np.asarray(classes, dtype=np.int64)
        index = {int(c): i for i, c in enumerate(classes)}
        counts = np.zeros((classes.shape[0], classes.shape[0]), dtype=np.int64)
        for t, p in zip(truth, predicted):
            counts[index[int(t)], index[int(p)]] += 1
        return cls(counts=counts, classes=classes)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricReport:
    kappa: float
    f1: float
    sensitivity: float
    specificity: float
    auc: float
    per_class_f1: np.ndarray
    confusion: ConfusionMatrix

    def as_dict(self) -> dict:
        return {"kappa": self.kappa, "f1": self.f1, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "auc": self.auc}


def cohen_kappa(confusion: ConfusionMatrix) -> float:
    counts = confusion.counts.astype(np.float64)
    total = counts.sum()
    p_o = np.trace(counts) / total
    p_e = float((counts.sum(axis=1) * counts.sum(axis=0)).sum()) / total ** 2
    if p_e >= 1.0 - 1e-15:
        if p_o >= 1.0 - 1e-15:
            return 1.0
        raise InvalidArgumentError(
            "kappa undefined: expected agreement is 1 but observed agreement is not")
    return (p_o - p_e) / (1.0 - p_e)


def roc_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """One-vs-rest ROC area by the rank method (average ranks on ties)."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = positive.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("AUC needs at least one positive and one negative")
    ranks = stats.rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(truth, predicted, scores, classes=None) -> MetricReport:
    """All Table-style metrics for one set of predictions.

    `scores` holds one row per instance, one column per class (distribution
    rows summing to 1).  `classes` maps score columns to class codes; by
    default the sorted union of codes seen in truth and predictions.
    """
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if truth.shape[0] != predicted.shape[0] or truth.shape[0] != scores.shape[0]:
        raise InvalidArgumentError("truth, predictions and scores must align")
    if truth.shape[0] == 0:
        raise InvalidArgumentError("empty input")
    if np.abs(scores.sum(axis=1) - 1.0).max() > _SCORE_TOL:
        raise InvalidArgumentError("score rows must sum to 1")
    confusion = ConfusionMatrix.from_labels(truth, predicted, classes)
    classes = confusion.classes
    if scores.shape[1] != classes.shape[0]:
        raise InvalidArgumentError(
            f"scores have {scores.shape[1]} columns for {classes.shape[0]} classes; "
            "pass `classes` explicitly")

    counts = confusion.counts.astype(np.float64)
    support = counts.sum(axis=1)
    total = counts.sum()
    weights = support / total

    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = support - tp
    tn = total - tp - fp - fn
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(support > 0, tp / np.where(support > 0, support, 1.0), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / np.where(precision + recall > 0,
                                                        precision + recall, 1.0), 0.0)
        tnr = np.where(tn + fp > 0, tn / np.where(tn + fp > 0, tn + fp, 1.0), 0.0)

    auc_values = np.zeros(classes.shape[0])
    auc_weights = np.zeros(classes.shape[0])
    for i, c in enumerate(classes):
        positive = truth == c
        if 0 < positive.sum() < truth.shape[0]:
            auc_values[i] = roc_auc(positive, scores[:, i])
            auc_weights[i] = support[i]
    if auc_weights.sum() > 0:
        auc = float((auc_values * auc_weights).sum() / auc_weights.sum())
    else:  # single-class truth: ROC undefined, fall back to chance level
        auc = 0.5

    return MetricReport(
        kappa=cohen_kappa(confusion),
        f1=float((f1 * weights).sum()),
        sensitivity=float((recall * weights).sum()),
        specificity=float((tnr * weights).sum()),
        auc=auc,
        per_class_f1=f1,
        confusion=confusion,
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CrossValidationReport:
    fold_reports: list
    mean: dict
    std: dict

    def to_json(self) -> str:
        return json.dumps({
            "folds": [r.as_dict() for r in self.fold_reports],
            "mean": self.mean,
            "std": self.std,
        })


def stratified_folds(labels: np.ndarray, folds: int, seed: int = 0) -> list:
    """Deterministic stratified fold assignment; returns test-index arrays.

    Class proportions are preserved and per-class fold sizes differ by at
    most one.  A class with fewer instances than folds is rejected.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if folds < 2:
        raise InvalidArgumentError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    assignments = [[] for _ in range(folds)]
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if idx.shape[0] < folds:
            raise InvalidArgumentError(
                f"class {int(c)} has {idx.shape[0]} instances, fewer than {folds} folds")
        shuffled = rng.permutation(idx)
        for f in range(folds):
            assignments[f].extend(shuffled[f::folds].tolist())
    return [np.asarray(sorted(a), dtype=np.int64) for a in assignments]


def leave_one_group_out_folds(groups) -> list:
    """One test fold per distinct group id (sorted), e.g. per image."""
    groups = np.asarray(groups)
    return [np.nonzero(groups == g)[0] for g in sorted(set(groups.tolist()))]


def _expand_scores(scores, model_classes, all_classes):
    out = np.zeros((scores.shape[0], len(all_classes)))
    pos = {int(c): i for i, c in enumerate(all_classes)}
    for j, c in enumerate(model_classes):
        out[:, pos[int(c)]] = scores[:, j]
    return out


def cross_validate(data, labels, trainer, folds: int = 10, seed: int = 0,
                   groups=None, leave_one_group_out: bool = False) -> CrossValidationReport:
    """Stratified k-fold (default) or leave-one-group-out evaluation.

    `data` is any sequence indexable by integer arrays (feature matrix, list
    of patches, ...).  `trainer(train_data, train_labels, fold_seed)` must
    return a predict function `(test_data) -> (labels, scores, model_classes)`.
    Folds are deterministic given the seed; fold f trains with seed + f.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if leave_one_group_out:
        if groups is None:
            raise InvalidArgumentError("leave-one-group-out requires group ids")
        test_folds = leave_one_group_out_folds(groups)
    else:
        test_folds = stratified_folds(labels, folds, seed)
    all_classes = np.unique(labels)

    def take(seq, idx):
        if isinstance(seq, np.ndarray):
            return seq[idx]
        return [seq[i] for i in idx]

    n = labels.shape[0]
    reports = []
    for f, test_idx in enumerate(test_folds):
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        train_idx = np.nonzero(mask)[0]
        predict_fn = trainer(take(data, train_idx), labels[train_idx], seed + f)
        pred, scores, model_classes = predict_fn(take(data, test_idx))
        scores = _expand_scores(np.asarray(scores), model_classes, all_classes)
        reports.append(compute_metrics(labels[test_idx], pred, scores, all_classes))

    keys = ("kappa", "f1", "sensitivity", "specificity", "auc")
    values = {k: np.asarray([getattr(r, k) for r in reports]) for k in keys}
    return CrossValidationReport(
        fold_reports=reports,
        mean={k: float(v.mean()) for k, v in values.items()},
        std={k: float(v.std()) for k, v in values.items()},
    )


# ---------------------------------------------------------------------------
# Friedman + Nemenyi


@dataclass(frozen=True)
class RankTestReport:
    statistic: float
    p_value: float
    mean_ranks: np.ndarray
    nemenyi_p: np.ndarray
    significant: dict  # alpha -> boolean matrix
    n_datasets: int
    n_methods: int
    method_names: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "statistic": self.statistic,
            "p_value": self.p_value,
            "mean_ranks": self.mean_ranks.tolist(),
            "nemenyi_p": self.nemenyi_p.tolist(),
            "significant": {str(a): m.tolist() for a, m in self.significant.items()},
            "n_datasets": self.n_datasets,
            "n_methods": self.n_methods,
            "method_names": self.method_names,
        })


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    return float(stats.chi2.sf(x, df))


def studentized_range_sf(q: float, k: int) -> float:
    """Upper tail of the range of k standard normals (studentized range,
    infinite degrees of freedom), via numerical integration of

        P(R <= q) = k * Integral phi(z) * (Phi(z) - Phi(z - q))^(k-1) dz.
    """
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    if q <= 0:
        return 1.0

    def integrand(z):
        return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * \
            (special.ndtr(z) - special.ndtr(z - q)) ** (k - 1)

    cdf, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-10)
    return float(min(1.0, max(0.0, 1.0 - k * cdf)))


def friedman_nemenyi(measurements, alpha: float = 0.01,
                     method_names=None) -> RankTestReport:
    """Friedman ranking test plus Nemenyi pairwise post-test.

    `measurements` is an (N datasets x k methods) matrix, larger = better.
    Rows are ranked with average-rank ties (rank 1 = best); the Friedman
    statistic uses the rank-sum form with the standard tie correction and is
    referred to the chi-square distribution with k - 1 degrees of freedom.
    """
    m = np.asarray(measurements, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise InvalidArgumentError("need an (N >= 2) x (k >= 2) measurement matrix")
    if not np.isfinite(m).all():
        raise InvalidArgumentError("measurements contain NaN or Inf")
    n, k = m.shape

    ranks = np.vstack([stats.rankdata(-row, method="average") for row in m])
    rank_sums = ranks.sum(axis=0)
    uncorrected = 12.0 / (n * k * (k + 1)) * float((rank_sums ** 2).sum()) - 3.0 * n * (k + 1)

    tie_total = 0.0
    for row in m:
        _, tie_counts = np.unique(row, return_counts=True)
        tie_total += float((tie_counts ** 3 - tie_counts).sum())
    correction = 1.0 - tie_total / (n * k * (k * k - 1))
    if correction <= 0.0:
        statistic, p_value = 0.0, 1.0
    else:
        statistic = uncorrected / correction
        p_value = chi2_sf(statistic, k - 1)

    mean_ranks = rank_sums / n
    se = math.sqrt(k * (k + 1) / (6.0 * n))
    nemenyi = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            q = abs(mean_ranks[i] - mean_ranks[j]) / se
            p = studentized_range_sf(q * math.sqrt(2.0), k)
            nemenyi[i, j] = nemenyi[j, i] = p

    significant = {a: nemenyi < a for a in (0.01, 0.05, 0.10)}
    return RankTestReport(
        statistic=float(statistic), p_value=float(p_value), mean_ranks=mean_ranks,
        nemenyi_p=nemenyi, significant=significant, n_datasets=n, n_methods=k,
        method_names=list(method_names) if method_names is not None else [],
    )
