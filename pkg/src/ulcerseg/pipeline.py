"""End-to-end QTDU orchestration: superpixels -> per-superpixel labels ->
fused tissue mask -> pixelwise area quantification.

The pipeline deliberately ignores where a superpixel sits in the image: the
classifier sees each superpixel patch (or its descriptor) in isolation, and
the mask is rebuilt afterwards by painting every pixel with its superpixel's
label.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import classifiers, mpeg7, neural, pca, slic
from .errors import ConfigurationError, InvalidArgumentError, MaeUndefinedError
from .imagecore import Patch, RgbImage, TissueClass, crop_patch

#: Fixed palette of the fused-mask PNG (index = TissueClass code).
MASK_PALETTE = {
    TissueClass.NOT_WOUND: (0, 0, 0),
    TissueClass.GRANULATION: (220, 20, 60),
    TissueClass.FIBRIN: (255, 215, 0),
    TissueClass.NECROSIS: (64, 64, 64),
}


@dataclass(frozen=True)
class SegmentationResult:
    partition: slic.SuperpixelPartition
    superpixel_labels: np.ndarray  # (count,) TissueClass codes
    superpixel_scores: np.ndarray  # (count, 4)
    fused_mask: np.ndarray  # (h, w) TissueClass codes


@dataclass(frozen=True)
class AreaReport:
    total_pixels: int
    counts: dict  # TissueClass -> pixel count
    ratios: dict  # TissueClass -> fraction of the image

    @property
    def wound_pixels(self) -> int:
        return self.total_pixels - self.counts[TissueClass.NOT_WOUND]

    @property
    def wound_ratio(self) -> float:
        return self.wound_pixels / self.total_pixels

    def to_json(self) -> str:
        return json.dumps({
            "total_pixels": self.total_pixels,
            "counts": {c.name.lower(): int(self.counts[c]) for c in TissueClass},
            "ratios": {c.name.lower(): self.ratios[c] for c in TissueClass},
            "wound_pixels": int(self.wound_pixels),
            "wound_ratio": self.wound_ratio,
        })


# ---------------------------------------------------------------------------
# superpixel predictors: one for the descriptor path, one for the network


class DescriptorClassifier:
    """Classic path: MPEG-7 descriptor (optionally PCA-reduced) + classifier."""

    def __init__(self, model, descriptor: str, pca_model: pca.PcaModel | None = None,
                 patch_size: int = 32):
        self.descriptor = mpeg7.normalize_kind(descriptor)
        self.pca_model = pca_model
        self.model = model
        self.patch_size = patch_size
        descriptor_dim = mpeg7.DESCRIPTOR_DIMS[self.descriptor]
        if pca_model is not None:
            if pca_model.dim != descriptor_dim:
                raise ConfigurationError(
                    f"PCA model expects dim {pca_model.dim} but descriptor "
                    f"'{self.descriptor}' produces dim {descriptor_dim}")
            feature_dim = pca_model.retained
        else:
            feature_dim = descriptor_dim
        if model.dim != feature_dim:
            raise ConfigurationError(
                f"classifier expects dim {model.dim} but the feature path "
                f"produces dim {feature_dim}")

    def predict_patch(self, patch: Patch):
        vec = mpeg7.extract(patch, self.descriptor)
        if self.pca_model is not None:
            vec = pca.transform(self.pca_model, vec)
        label, scores = classifiers.predict(self.model, vec)
        full = np.zeros(len(TissueClass))
        for cls, score in zip(self.model.classes, scores):
            full[int(cls)] = score
        return int(label), full


class PatchNetwork:
    """Network path: the patch itself is the classifier input."""

    def __init__(self, model: neural.NetworkModel):
        self.model = model
        self.patch_size = model.spec.input_size

    def predict_patch(self, patch: Patch):
        label, scores = neural.predict(self.model, patch)
        return int(label), scores


def _worker_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("ULCERSEG_THREADS", "1") or "0")
    if threads == 0:
        threads = os.cpu_count() or 1
    return max(1, threads)


def segment_image(image: RgbImage, predictor,
                  params: slic.SlicParams = slic.SlicParams(),
                  threads: int | None = None) -> SegmentationResult:
    """Partition `image` and label every superpixel with `predictor`.

    predictor is a DescriptorClassifier or PatchNetwork (anything with a
    predict_patch(Patch) -> (code, scores) method and a patch_size).  The
    per-superpixel results are fused into a per-pixel tissue mask.
    """
    part = slic.partition(image, params)
    patches = [crop_patch(image, part, sid, predictor.patch_size)
               for sid in range(part.count)]
    workers = _worker_count(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(predictor.predict_patch, patches))
    else:
        results = [predictor.predict_patch(p) for p in patches]
    labels = np.asarray([r[0] for r in results], dtype=np.int64)
    scores = np.stack([r[1] for r in results])
    fused = labels[part.labels]
    return SegmentationResult(partition=part, superpixel_labels=labels,
                              superpixel_scores=scores, fused_mask=fused)


def quantify_areas(result: SegmentationResult) -> AreaReport:
    """Exact per-class pixel counts and ratios of the fused mask."""
    counts = np.bincount(result.fused_mask.ravel(), minlength=len(TissueClass))
    total = int(counts.sum())
    return AreaReport(
        total_pixels=total,
        counts={c: int(counts[c]) for c in TissueClass},
        ratios={c: counts[c] / total for c in TissueClass},
    )


def mask_error(predicted: np.ndarray, reference: np.ndarray):
    """Pixel accuracy over the whole image and the MAE ratio.

    The MAE ratio divides the number of mismatched pixels by the number of
    wounded (non NOT_WOUND) pixels of the *reference* mask; it is therefore
    intentionally asymmetric in its arguments.
    """
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.shape != reference.shape:
        raise InvalidArgumentError(
            f"mask shapes differ: {predicted.shape} vs {reference.shape}")
    mismatches = int((predicted != reference).sum())
    accuracy = 1.0 - mismatches / predicted.size
    wounded = int((reference != TissueClass.NOT_WOUND).sum())
    if wounded == 0:
        raise MaeUndefinedError("reference mask has no wounded pixels",
                                pixel_accuracy=accuracy)
    return accuracy, mismatches / wounded


# ---------------------------------------------------------------------------
# mask persistence (indexed PNG with the fixed palette)


def save_mask_png(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= len(TissueClass):
        raise InvalidArgumentError("mask values must be TissueClass codes")
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    palette = []
    for c in TissueClass:
        palette.extend(MASK_PALETTE[c])
    im.putpalette(palette)
    im.save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "P":
            raise InvalidArgumentError(f"{path}: not an indexed mask PNG")
        return np.asarray(im, dtype=np.int64)
