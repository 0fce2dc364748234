"""Dataset ingestion: a manifest of images plus a superpixel-label CSV.

A dataset is a directory containing ``manifest.json``::

    {
      "images": [{"id": "img001", "path": "images/img001.png",
                  "mask": "masks/img001.png"},        # mask optional
                 ...],
      "labels": "labels.csv",
      "slic": {"target_size": 550, "compactness": 10.0}   # optional
    }

The label CSV has one row per labeled superpixel.  The importer tolerates
header variations (``image``/``image_id``, ``superpixel``/``superpixel_id``/
``sp_id``/``segment``, ``class``/``label``/``tissue``) and accepts classes as
integer codes or names.  Superpixel ids refer to the partition recomputed
locally with the manifest's SLIC parameters and are validated against it.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import mpeg7, slic
from .errors import DataError
from .imagecore import RgbImage, TissueClass, crop_patch, load_image, parse_tissue_class

_IMAGE_KEYS = ("image_id", "image", "img", "photo")
_SUPERPIXEL_KEYS = ("superpixel_id", "superpixel", "sp_id", "sp", "segment", "segment_id")
_CLASS_KEYS = ("class", "label", "tissue", "tissue_class")


@dataclass(frozen=True)
class LabelRow:
    image_id: str
    superpixel_id: int
    tissue: TissueClass


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    images: dict  # image_id -> path
    masks: dict  # image_id -> path (optional entries)
    labels: list  # of LabelRow
    slic_params: slic.SlicParams = field(default_factory=slic.SlicParams)

    def image_ids(self):
        return list(self.images)

    def load_image(self, image_id: str) -> RgbImage:
        return load_image(self.images[image_id])


def _pick_column(header, candidates, what, path):
    lowered = [h.strip().lower() for h in header]
    for name in candidates:
        if name in lowered:
            return lowered.index(name)
    raise DataError(f"{path}: no {what} column (tried {', '.join(candidates)})")


def read_label_csv(path) -> list:
    """Parse a superpixel-label CSV into LabelRow entries."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty label file")
        img_col = _pick_column(header, _IMAGE_KEYS, "image id", path)
        sp_col = _pick_column(header, _SUPERPIXEL_KEYS, "superpixel id", path)
        cls_col = _pick_column(header, _CLASS_KEYS, "class", path)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append(LabelRow(image_id=row[img_col].strip(),
                                     superpixel_id=int(row[sp_col]),
                                     tissue=parse_tissue_class(row[cls_col])))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{line_no}: bad label row ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: no label rows")
    return rows


def load_manifest(root) -> DatasetManifest:
    manifest_path = os.path.join(root, "manifest.json")
    try:
        with open(manifest_path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{manifest_path}: not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc

    images, masks = {}, {}
    for entry in raw.get("images", []):
        image_id = str(entry["id"])
        if image_id in images:
            raise DataError(f"{manifest_path}: duplicate image id {image_id!r}")
        path = os.path.join(root, entry["path"])
        if not os.path.exists(path):
            raise DataError(f"{manifest_path}: image file {entry['path']!r} not found")
        images[image_id] = path
        if "mask" in entry:
            masks[image_id] = os.path.join(root, entry["mask"])
    if not images:
        raise DataError(f"{manifest_path}: no images listed")

    labels = read_label_csv(os.path.join(root, raw.get("labels", "labels.csv")))
    for row in labels:
        if row.image_id not in images:
            raise DataError(f"label references unknown image {row.image_id!r}")

    slic_raw = raw.get("slic", {})
    params = slic.SlicParams(
        target_size=int(slic_raw.get("target_size", 550)),
        compactness=float(slic_raw.get("compactness", 10.0)),
        max_iters=int(slic_raw.get("max_iters", 10)),
        connectivity_min_frac=float(slic_raw.get("connectivity_min_frac", 0.25)),
    )
    return DatasetManifest(root=str(root), images=images, masks=masks,
                           labels=labels, slic_params=params)


def iter_labeled_patches(manifest: DatasetManifest, patch_size: int = 32):
    """Yield (image_id, superpixel_id, Patch, TissueClass) for every label row.

    Partitions are recomputed once per image with the manifest's SLIC
    parameters; label rows referencing nonexistent superpixel ids fail.
    """
    by_image: dict = {}
    for row in manifest.labels:
        by_image.setdefault(row.image_id, []).append(row)
    for image_id in manifest.image_ids():
        if image_id not in by_image:
            continue
        image = manifest.load_image(image_id)
        part = slic.partition(image, manifest.slic_params)
        for row in by_image[image_id]:
            if not 0 <= row.superpixel_id < part.count:
                raise DataError(
                    f"image {image_id!r}: superpixel id {row.superpixel_id} outside "
                    f"the recomputed partition (count {part.count})")
            yield image_id, row.superpixel_id, \
                crop_patch(image, part, row.superpixel_id, patch_size), row.tissue


def extract_features(manifest: DatasetManifest, descriptor: str, patch_size: int = 32):
    """Descriptor rows for every label: (image_id, superpixel_id, label, values)."""
    kind = mpeg7.normalize_kind(descriptor)
    for image_id, sp_id, patch, tissue in iter_labeled_patches(manifest, patch_size):
        yield image_id, sp_id, int(tissue), mpeg7.extract(patch, kind).values


def labeled_patch_list(manifest: DatasetManifest, patch_size: int = 32):
    """Materialize patches/labels/groups arrays for training and evaluation."""
    patches, labels, group_ids = [], [], []
    for image_id, _, patch, tissue in iter_labeled_patches(manifest, patch_size):
        patches.append(patch)
        labels.append(int(tissue))
        group_ids.append(image_id)
    return patches, np.asarray(labels, dtype=np.int64), group_ids
