"""MPEG-7 color descriptors for superpixel patches.

Three extractors are provided, matching the classic feature stage of
superpixel wound pipelines:

* Color Layout (``cld``, 12 dims): 8x8 grid of block-mean colors in YCbCr,
  2-D DCT per channel, zigzag scan, first 6 Y + 3 Cb + 3 Cr coefficients.
* Color Structure (``csd``, 128 dims): HMMD colors quantized into 128 cells,
  an 8x8 structuring element slid over the patch counting in how many
  positions each cell occurs, normalized by the number of positions.
* Scalable Color (``scd``, 256 dims): 16x4x4 HSV histogram over the masked
  pixels, normalized to sum 1, Haar-transformed along each bin axis.

All descriptors emit unquantized real values: downstream classifiers consume
real vectors, so MPEG-7's nonuniform amplitude quantization would only
discard information.  Color Layout and Color Structure operate on the full
mean-filled rectangle of the patch (grid descriptors need rectangular
support); Scalable Color uses only mask-true pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn

from .errors import InvalidArgumentError
from .imagecore import Patch, rgb_to_hmmd, rgb_to_hsv, rgb_to_ycbcr

DESCRIPTOR_DIMS = {"cld": 12, "csd": 128, "scd": 256}

_KIND_ALIASES = {
    "cld": "cld", "colorlayout": "cld", "color_layout": "cld",
    "csd": "csd", "colorstructure": "csd", "color_structure": "csd",
    "scd": "scd", "scalablecolor": "scd", "scalable_color": "scd",
}

# HMMD quantization into 128 cells: five diff subspaces with
# (hue bins x sum bins) = 1x16, 4x4, 8x4, 8x4, 8x4.
_CSD_DIFF_BOUNDS = np.array([6.0, 20.0, 60.0, 110.0])
_CSD_BINS = ((1, 16), (4, 4), (8, 4), (8, 4), (8, 4))
_CSD_OFFSETS = np.concatenate([[0], np.cumsum([h * s for h, s in _CSD_BINS])])[:-1]


@dataclass(frozen=True)
class FeatureVector:
    """An ordered real-valued descriptor with its extractor tag."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def normalize_kind(kind: str) -> str:
    try:
        return _KIND_ALIASES[kind.replace("-", "").replace(" ", "").lower()]
    except (KeyError, AttributeError):
        raise InvalidArgumentError(f"unknown descriptor kind {kind!r}") from None


def _zigzag_indices(n: int = 8):
    order = []
    for s in range(2 * n - 1):
        idx = range(max(0, s - n + 1), min(s, n - 1) + 1)
        if s % 2 == 0:
            idx = reversed(list(idx))
        order.extend((i, s - i) for i in idx)
    return tuple(order)


_ZIGZAG = _zigzag_indices(8)


def _pad_to(pixels: np.ndarray, min_side: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    py, px = max(0, min_side - h), max(0, min_side - w)
    if py == 0 and px == 0:
        return pixels
    return np.pad(pixels, ((0, py), (0, px), (0, 0)), mode="edge")


def _color_layout(pixels: np.ndarray) -> np.ndarray:
    pixels = _pad_to(pixels, 8)
    h, w = pixels.shape[:2]
    means = np.empty((8, 8, 3))
    ys = [h * i // 8 for i in range(9)]
    xs = [w * j // 8 for j in range(9)]
    for i in range(8):
        for j in range(8):
            block = pixels[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            means[i, j] = block.reshape(-1, 3).mean(axis=0)
    ycc = rgb_to_ycbcr(means)
    out = np.empty(12)
    for ch, take, off in ((0, 6, 0), (1, 3, 6), (2, 3, 9)):
        coeffs = dctn(ycc[..., ch], type=2, norm="ortho")
        for t in range(take):
            i, j = _ZIGZAG[t]
            out[off + t] = coeffs[i, j]
    return out


def _csd_quantize(pixels: np.ndarray) -> np.ndarray:
    hmmd = rgb_to_hmmd(pixels)
    hue, diff, ssum = hmmd[..., 0], hmmd[..., 1], hmmd[..., 2]
    sub = np.searchsorted(_CSD_DIFF_BOUNDS, diff, side="right")
    bins = np.empty(pixels.shape[:2], dtype=np.int64)
    for si, (nh, ns) in enumerate(_CSD_BINS):
        sel = sub == si
        hb = np.minimum((hue[sel] * nh / 360.0).astype(np.int64), nh - 1)
        sb = np.minimum((ssum[sel] * ns / 256.0).astype(np.int64), ns - 1)
        bins[sel] = _CSD_OFFSETS[si] + hb * ns + sb
    return bins


def _csd_subsample_factor(h: int, w: int) -> int:
    p = int(np.rint(0.5 * np.log2(min(h, w)) - 4.0))
    return 2 ** max(0, p)


def _color_structure(pixels: np.ndarray) -> np.ndarray:
    pixels = _pad_to(pixels, 8)
    h, w = pixels.shape[:2]
    k = _csd_subsample_factor(h, w)
    bins = _csd_quantize(pixels)[::k, ::k]
    windows = sliding_window_view(bins, (8, 8)).reshape(-1, 64)
    n_pos = windows.shape[0]
    srt = np.sort(windows, axis=1)
    counts = np.zeros(128)
    np.add.at(counts, srt[:, 0], 1.0)
    fresh = srt[:, 1:][srt[:, 1:] != srt[:, :-1]]
    np.add.at(counts, fresh, 1.0)
    return counts / n_pos


_SQRT2 = np.sqrt(2.0)


def _haar_full_1d(vec: np.ndarray) -> np.ndarray:
    out = vec.astype(np.float64).copy()
    n = out.shape[0]
    while n > 1:
        half = n // 2
        a = (out[0:n:2] + out[1:n:2]) / _SQRT2
        d = (out[0:n:2] - out[1:n:2]) / _SQRT2
        out[:half] = a
        out[half:n] = d
        n = half
    return out


def _scalable_color(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    hsv = rgb_to_hsv(pixels[mask])
    hb = np.minimum((hsv[:, 0] * 16 / 360.0).astype(np.int64), 15)
    sb = np.minimum((hsv[:, 1] * 4).astype(np.int64), 3)
    vb = np.minimum((hsv[:, 2] * 4).astype(np.int64), 3)
    hist = np.zeros((16, 4, 4))
    np.add.at(hist, (hb, sb, vb), 1.0)
    hist /= hist.sum()
    for axis in range(3):
        hist = np.apply_along_axis(_haar_full_1d, axis, hist)
    return hist.ravel()


def extract(patch: Patch, kind: str) -> FeatureVector:
    """Compute one descriptor of `patch`.  kind is 'cld', 'csd' or 'scd'."""
    kind = normalize_kind(kind)
    if kind == "cld":
        values = _color_layout(patch.pixels.astype(np.float64))
    elif kind == "csd":
        values = _color_structure(patch.pixels.astype(np.float64))
    else:
        values = _scalable_color(patch.pixels.astype(np.float64), patch.mask)
    return FeatureVector(values, kind)


# ---------------------------------------------------------------------------
# feature dump


def write_features_csv(path, rows, dim: int) -> None:
    """Write feature rows as CSV: image_id,superpixel_id,label,f0..f{dim-1}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "superpixel_id", "label"] + [f"f{i}" for i in range(dim)])
        for image_id, superpixel_id, label, values in rows:
            values = np.asarray(values)
            if values.shape[0] != dim:
                raise InvalidArgumentError(
                    f"feature row has dim {values.shape[0]}, expected {dim}")
            writer.writerow([image_id, superpixel_id, int(label)]
                            + [repr(float(v)) for v in values])


def read_features_csv(path):
    """Read a CSV written by write_features_csv.

    Returns (image_ids, superpixel_ids, labels, features) where features is
    an (n, d) float array.
    """
    image_ids, sp_ids, labels, feats = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 4 or header[:3] != ["image_id", "superpixel_id", "label"]:
            raise InvalidArgumentError(f"{path}: not a feature CSV (bad header)")
        for row in reader:
            if not row:
                continue
            image_ids.append(row[0])
            sp_ids.append(int(row[1]))
            labels.append(int(row[2]))
            feats.append([float(v) for v in row[3:]])
    if not feats:
        raise InvalidArgumentError(f"{path}: no feature rows")
    return image_ids, np.asarray(sp_ids), np.asarray(labels), np.asarray(feats, dtype=np.float64)
