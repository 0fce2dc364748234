"""Pixel containers, the tissue-class vocabulary, color-space conversions and
superpixel-patch extraction shared by every other module.

Color conventions
-----------------
* RGB is 8-bit sRGB, channels in [0, 255].
* CIELAB uses sRGB companding with the D65 white point.
* HSV has hue in degrees [0, 360) and saturation/value in [0, 1].
* HMMD is the (hue, diff, sum) triple with diff = max - min and
  sum = (max + min) / 2, both on the 0..255 scale.
* YCbCr is full-range BT.601 (black maps to Y=0, Cb=Cr=128).

All conversion helpers accept arrays of shape (..., 3) and are pure,
so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError, NotFoundError

COLOR_SPACES = ("rgb8", "lab", "hsv", "hmmd", "ycbcr")

# sRGB <-> XYZ (D65) matrices
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
_D65 = np.array([0.95047, 1.0, 1.08883])


class TissueClass(IntEnum):
    """The four-class tissue vocabulary used throughout the pipeline."""

    NOT_WOUND = 0
    GRANULATION = 1
    FIBRIN = 2
    NECROSIS = 3


#: Accepted spellings for tissue classes in label files.
_CLASS_ALIASES = {
    "not wound": TissueClass.NOT_WOUND,
    "not_wound": TissueClass.NOT_WOUND,
    "notwound": TissueClass.NOT_WOUND,
    "skin": TissueClass.NOT_WOUND,
    "granulation": TissueClass.GRANULATION,
    "fibrin": TissueClass.FIBRIN,
    "necrosis": TissueClass.NECROSIS,
    "necrosed": TissueClass.NECROSIS,
}


def parse_tissue_class(value) -> TissueClass:
    """Parse a tissue class from an integer code or a (case-insensitive) name."""
    if isinstance(value, TissueClass):
        return value
    if isinstance(value, (int, np.integer)):
        return TissueClass(int(value))
    text = str(value).strip().lower()
    if text.lstrip("-").isdigit():
        return TissueClass(int(text))
    try:
        return _CLASS_ALIASES[text]
    except KeyError:
        raise InvalidArgumentError(f"unknown tissue class {value!r}") from None


@dataclass(frozen=True)
class RgbImage:
    """A structured grid of 8-bit RGB pixels, stored as a (h, w, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise InvalidArgumentError("pixels must be a (h, w, 3) uint8 array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidArgumentError("image must be at least 1x1")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class Patch:
    """A fixed-size crop of a superpixel: pixel grid plus membership mask."""

    pixels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        mk = np.asarray(self.mask, dtype=bool)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise InvalidArgumentError("patch pixels must be (h, w, 3) uint8")
        if mk.shape != px.shape[:2]:
            raise InvalidArgumentError("mask shape must match pixel grid")
        if not mk.any():
            raise InvalidArgumentError("patch mask must contain at least one pixel")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "mask", mk)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def load_image(path) -> RgbImage:
    """Read a PNG or JPEG file as 8-bit RGB (alpha, if present, is dropped)."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return RgbImage(np.asarray(rgb, dtype=np.uint8))


def save_image(image: RgbImage, path) -> None:
    Image.fromarray(image.pixels, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# color conversions


def _srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64) / 255.0
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    c = np.clip(c, 0.0, 1.0)
    out = np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)
    return out * 255.0


def rgb_to_lab(rgb) -> np.ndarray:
    """sRGB (0..255) -> CIELAB (D65), elementwise over (..., 3) arrays."""
    lin = _srgb_to_linear(rgb)
    xyz = lin @ _SRGB_TO_XYZ.T
    t = xyz / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    """CIELAB (D65) -> sRGB floats in 0..255 (not rounded, clipped to gamut)."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    delta = 6.0 / 29.0
    t = np.where(f > delta, f ** 3, 3 * delta ** 2 * (f - 4.0 / 29.0))
    xyz = t * _D65
    lin = xyz @ _XYZ_TO_SRGB.T
    return _linear_to_srgb(lin)


def rgb_to_hsv(rgb) -> np.ndarray:
    """sRGB (0..255) -> HSV with h in [0, 360) and s, v in [0, 1]."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    mx = c.max(axis=-1)
    mn = c.min(axis=-1)
    diff = mx - mn
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    safe = np.where(diff == 0, 1.0, diff)
    h = np.where(
        mx == r, (g - b) / safe,
        np.where(mx == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(diff == 0, 0.0, (h * 60.0) % 360.0)
    s = np.where(mx == 0, 0.0, diff / np.where(mx == 0, 1.0, mx))
    return np.stack([h, s, mx], axis=-1)


def rgb_to_hmmd(rgb) -> np.ndarray:
    """sRGB (0..255) -> HMMD (hue, diff, sum) with diff/sum on the 0..255 scale."""
    c = np.asarray(rgb, dtype=np.float64)
    mx = c.max(axis=-1)
    mn = c.min(axis=-1)
    hue = rgb_to_hsv(rgb)[..., 0]
    return np.stack([hue, mx - mn, (mx + mn) / 2.0], axis=-1)


def rgb_to_ycbcr(rgb) -> np.ndarray:
    """sRGB (0..255) -> full-range BT.601 YCbCr."""
    c = np.asarray(rgb, dtype=np.float64)
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


_CONVERTERS = {
    "lab": rgb_to_lab,
    "hsv": rgb_to_hsv,
    "hmmd": rgb_to_hmmd,
    "ycbcr": rgb_to_ycbcr,
}


def convert_color(triple, target: str):
    """Convert one RGB8 triple to `target` ('rgb8', 'lab', 'hsv', 'hmmd', 'ycbcr')."""
    if target not in COLOR_SPACES:
        raise InvalidArgumentError(f"unknown color space {target!r}")
    arr = np.asarray(triple, dtype=np.float64)
    if arr.shape != (3,):
        raise InvalidArgumentError("expected a single (r, g, b) triple")
    if target == "rgb8":
        return tuple(float(v) for v in arr)
    return tuple(float(v) for v in _CONVERTERS[target](arr))


# ---------------------------------------------------------------------------
# resampling and patch extraction


def _sample_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center alignment: output center (i + .5) maps to input (i + .5) * n_in / n_out
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample a (h, w) or (h, w, c) float array to (out_h, out_w)."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[:2]
    ys = np.clip(_sample_coords(out_h, h), 0.0, h - 1.0)
    xs = np.clip(_sample_coords(out_w, w), 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    if values.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = values[y0][:, x0] * (1 - wx) + values[y0][:, x1] * wx
    bot = values[y1][:, x0] * (1 - wx) + values[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_nearest(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of a (h, w[, c]) array to (out_h, out_w)."""
    values = np.asarray(values)
    h, w = values.shape[:2]
    ys = np.clip(np.rint(_sample_coords(out_h, h)).astype(int), 0, h - 1)
    xs = np.clip(np.rint(_sample_coords(out_w, w)).astype(int), 0, w - 1)
    return values[ys][:, xs]


def crop_patch(image: RgbImage, partition, superpixel_id: int, out_size: int = 32) -> Patch:
    """Cut one superpixel out of `image` as a square patch.

    The superpixel's bounding box is cropped, pixels outside the superpixel
    are replaced by its mean RGB color (so descriptors see no artificial black
    border), and the result is resampled to out_size x out_size -- bilinear
    for pixels, nearest-neighbor for the membership mask.
    """
    if out_size < 8:
        raise InvalidArgumentError(f"out_size must be >= 8, got {out_size}")
    if not 0 <= superpixel_id < partition.count:
        raise NotFoundError(f"superpixel id {superpixel_id} not in partition")
    member = partition.labels == superpixel_id
    ys, xs = np.nonzero(member)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    box = image.pixels[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    box_mask = member[y0:y1 + 1, x0:x1 + 1]
    mean_color = box[box_mask].mean(axis=0)
    filled = np.where(box_mask[..., None], box, mean_color)
    out_px = np.clip(np.rint(resize_bilinear(filled, out_size, out_size)), 0, 255).astype(np.uint8)
    out_mask = resize_nearest(box_mask, out_size, out_size)
    if not out_mask.any():
        # pathologically thin superpixel missed by the sampling grid
        cy, cx = int(np.rint(ys.mean())) - y0, int(np.rint(xs.mean())) - x0
        oy = min(out_size - 1, max(0, int(cy * out_size / box_mask.shape[0])))
        ox = min(out_size - 1, max(0, int(cx * out_size / box_mask.shape[1])))
        out_mask = out_mask.copy()
        out_mask[oy, ox] = True
    return Patch(out_px, out_mask)
