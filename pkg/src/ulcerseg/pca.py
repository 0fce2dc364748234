"""Principal-component reduction with Kaiser-Guttman and scree-plot
component selection.

Features are always standardized to zero mean / unit variance before the
eigendecomposition, i.e. components are eigenvectors of the correlation
matrix.  That is the only setting under which the Kaiser-Guttman
"eigenvalue > 1" rule is meaningful.  The scree-plot criterion is
operationalized as the smallest component count whose cumulative explained
variance reaches a threshold (default 0.80).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .mpeg7 import FeatureVector

CRITERIA = ("kaiser-guttman", "scree-plot", "fixed")

_CRITERION_ALIASES = {
    "kg": "kaiser-guttman", "kaiser-guttman": "kaiser-guttman",
    "kaiser_guttman": "kaiser-guttman", "kaiserguttman": "kaiser-guttman",
    "sp": "scree-plot", "scree-plot": "scree-plot", "scree_plot": "scree-plot",
    "screeplot": "scree-plot",
    "fixed": "fixed",
}


@dataclass(frozen=True)
class PcaModel:
    """A fitted standardize-then-project transform.

    components holds orthonormal eigenvectors as columns, in descending
    eigenvalue order; `retained` is how many of them transform() keeps.
    """

    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    retained: int
    criterion: str

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        if total == 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / total


def normalize_criterion(name: str) -> str:
    try:
        return _CRITERION_ALIASES[name.replace(" ", "").lower()]
    except (KeyError, AttributeError):
        raise InvalidArgumentError(f"unknown component criterion {name!r}") from None


def select_retained(eigenvalues: np.ndarray, criterion: str,
                    threshold: float = 0.80, n_components: int | None = None) -> int:
    """Number of leading components kept under a selection criterion.

    kaiser-guttman keeps eigenvalues > 1; scree-plot keeps the smallest
    prefix whose explained-variance share reaches `threshold`; fixed keeps
    exactly n_components.  Always at least 1.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    criterion = normalize_criterion(criterion)
    if criterion == "kaiser-guttman":
        return max(1, int((eigenvalues > 1.0).sum()))
    if criterion == "scree-plot":
        shares = np.cumsum(eigenvalues) / eigenvalues.sum()
        return int(np.searchsorted(shares, threshold - 1e-12) + 1)
    if n_components is None:
        raise InvalidArgumentError("criterion 'fixed' requires n_components")
    if not 1 <= n_components <= eigenvalues.shape[0]:
        raise InvalidArgumentError(
            f"n_components must be in [1, {eigenvalues.shape[0]}], got {n_components}")
    return int(n_components)


def fit(data: np.ndarray, criterion: str = "kaiser-guttman", *,
        threshold: float = 0.80, n_components: int | None = None) -> PcaModel:
    """Fit a PCA model on an (n, d) matrix of feature rows."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
        raise InvalidArgumentError("need a 2-D matrix with >= 2 rows and >= 2 columns")
    if not np.isfinite(data).all():
        raise InvalidArgumentError("data contains NaN or Inf")
    criterion = normalize_criterion(criterion)

    mean = data.mean(axis=0)
    scale = data.std(axis=0, ddof=1)
    scale = np.where(scale == 0, 1.0, scale)  # constant columns pass through
    z = (data - mean) / scale
    corr = (z.T @ z) / (data.shape[0] - 1)

    eigenvalues, vectors = np.linalg.eigh(corr)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    vectors = vectors[:, order]
    if (eigenvalues < -1e-12).any():
        raise InvalidArgumentError("correlation matrix is not positive semidefinite")
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    # deterministic sign: largest-magnitude entry of each component positive
    for j in range(vectors.shape[1]):
        pivot = np.argmax(np.abs(vectors[:, j]))
        if vectors[pivot, j] < 0:
            vectors[:, j] = -vectors[:, j]

    retained = select_retained(eigenvalues, criterion, threshold, n_components)
    return PcaModel(mean=mean, scale=scale, components=vectors,
                    eigenvalues=eigenvalues, retained=retained, criterion=criterion)


def _check_dim(model: PcaModel, values: np.ndarray) -> None:
    if values.shape[-1] != model.dim:
        raise InvalidArgumentError(
            f"vector has dim {values.shape[-1]}, model expects {model.dim}")


def transform(model: PcaModel, vector) -> FeatureVector:
    """Project one feature vector onto the retained components."""
    values = np.asarray(getattr(vector, "values", vector), dtype=np.float64)
    _check_dim(model, values)
    z = (values - model.mean) / model.scale
    return FeatureVector(model.components[:, :model.retained].T @ z, "pca")


def transform_matrix(model: PcaModel, data: np.ndarray) -> np.ndarray:
    """Project an (n, d) matrix; returns (n, retained)."""
    data = np.asarray(data, dtype=np.float64)
    _check_dim(model, data)
    z = (data - model.mean) / model.scale
    return z @ model.components[:, :model.retained]


def inverse_transform(model: PcaModel, reduced) -> np.ndarray:
    """Map a reduced vector back to the original feature space."""
    values = np.asarray(getattr(reduced, "values", reduced), dtype=np.float64)
    if values.shape[-1] != model.retained:
        raise InvalidArgumentError(
            f"vector has dim {values.shape[-1]}, model retains {model.retained}")
    z = model.components[:, :model.retained] @ values
    return z * model.scale + model.mean


# ---------------------------------------------------------------------------
# persistence


def to_json(model: PcaModel) -> str:
    return json.dumps({
        "mean": model.mean.tolist(),
        "scale": model.scale.tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
        "components": model.components.tolist(),  # row-major
        "retained": model.retained,
        "criterion": model.criterion,
    })


def from_json(text: str) -> PcaModel:
    raw = json.loads(text)
    return PcaModel(
        mean=np.asarray(raw["mean"], dtype=np.float64),
        scale=np.asarray(raw["scale"], dtype=np.float64),
        components=np.asarray(raw["components"], dtype=np.float64),
        eigenvalues=np.asarray(raw["eigenvalues"], dtype=np.float64),
        retained=int(raw["retained"]),
        criterion=raw["criterion"],
    )


def save(model: PcaModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(model))


def load(path) -> PcaModel:
    with open(path) as fh:
        return from_json(fh.read())
