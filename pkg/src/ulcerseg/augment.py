"""Deterministic geometric data augmentation over superpixel patches.

Each labeled patch is multiplied into 1 + variants_per_instance training
instances (4x with the default policy).  The variants are drawn without
replacement from a pool of seven transforms -- quarter rotations, horizontal
and vertical mirroring, and +-20% zoom -- by a draw keyed on
(seed, instance_index), so regeneration is reproducible patch by patch and
generation can stream without materializing the augmented set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .imagecore import Patch, resize_bilinear, resize_nearest

TRANSFORMS = ("rot90", "rot180", "rot270", "flip_h", "flip_v", "zoom_in", "zoom_out")

_ZOOM_IN = 1.2
_ZOOM_OUT = 0.8


@dataclass(frozen=True)
class AugmentPolicy:
    variants_per_instance: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.variants_per_instance < 0:
            raise InvalidArgumentError("variants_per_instance must be >= 0")
        if self.variants_per_instance > len(TRANSFORMS):
            raise InvalidArgumentError(
                f"at most {len(TRANSFORMS)} distinct variants are available")


def _mean_color(patch: Patch) -> np.ndarray:
    return patch.pixels[patch.mask].astype(np.float64).mean(axis=0)


def _zoom(patch: Patch, factor: float) -> Patch:
    side = patch.height
    if factor > 1.0:  # crop the center, scale back up
        crop = max(1, int(round(side / factor)))
        off = (side - crop) // 2
        px = patch.pixels[off:off + crop, off:off + crop].astype(np.float64)
        mask = patch.mask[off:off + crop, off:off + crop]
    else:  # pad with the patch mean color, scale back down
        pad_side = int(round(side / factor))
        off = (pad_side - side) // 2
        px = np.empty((pad_side, pad_side, 3))
        px[:] = _mean_color(patch)
        px[off:off + side, off:off + side] = patch.pixels
        mask = np.zeros((pad_side, pad_side), dtype=bool)
        mask[off:off + side, off:off + side] = patch.mask
    out_px = np.clip(np.rint(resize_bilinear(px, side, side)), 0, 255).astype(np.uint8)
    out_mask = resize_nearest(mask, side, side)
    if not out_mask.any():
        out_mask = np.ones((side, side), dtype=bool)  # degenerate sliver; keep patch valid
    return Patch(out_px, out_mask)


def apply_transform(patch: Patch, name: str) -> Patch:
    """Apply one named transform.  Rotations and flips are exact pixel
    permutations; zooms resample bilinearly back to the original side."""
    if name == "rot90":
        return Patch(np.rot90(patch.pixels).copy(), np.rot90(patch.mask).copy())
    if name == "rot180":
        return Patch(np.rot90(patch.pixels, 2).copy(), np.rot90(patch.mask, 2).copy())
    if name == "rot270":
        return Patch(np.rot90(patch.pixels, 3).copy(), np.rot90(patch.mask, 3).copy())
    if name == "flip_h":
        return Patch(patch.pixels[:, ::-1].copy(), patch.mask[:, ::-1].copy())
    if name == "flip_v":
        return Patch(patch.pixels[::-1].copy(), patch.mask[::-1].copy())
    if name == "zoom_in":
        return _zoom(patch, _ZOOM_IN)
    if name == "zoom_out":
        return _zoom(patch, _ZOOM_OUT)
    raise InvalidArgumentError(f"unknown transform {name!r}")


def select_transforms(policy: AugmentPolicy, instance_index: int) -> tuple:
    """The transform names instance_index receives (without replacement)."""
    if instance_index < 0:
        raise InvalidArgumentError("instance_index must be >= 0")
    rng = np.random.default_rng((policy.seed, instance_index))
    chosen = rng.choice(len(TRANSFORMS), size=policy.variants_per_instance, replace=False)
    return tuple(TRANSFORMS[i] for i in chosen)


def augment_patch(patch: Patch, policy: AugmentPolicy, instance_index: int) -> list:
    """All instances derived from one patch: the original first, then its variants."""
    if patch.height != patch.width:
        raise InvalidArgumentError("augmentation expects square (post-crop) patches")
    out = [patch]
    for name in select_transforms(policy, instance_index):
        out.append(apply_transform(patch, name))
    return out


def augment_stream(labeled_patches, policy: AugmentPolicy):
    """Lazily yield (patch, label) pairs, originals interleaved with variants.

    Consumes its input one instance at a time, so arbitrarily large datasets
    can be augmented without holding the expanded set in memory.
    """
    for index, (patch, label) in enumerate(labeled_patches):
        for variant in augment_patch(patch, policy, index):
            yield variant, label
