"""SLIC superpixel construction: localized k-means over CIELAB + (x, y).

The implementation follows the classic recipe: seed round(n / target_size)
cluster centers on a regular grid of step s = sqrt(n / k), nudge each seed to
the lowest-gradient spot of its 3x3 neighborhood, then iterate a local
k-means where every center only competes for pixels inside its 2s x 2s
window using the distance

    D^2 = d_lab^2 + (d_xy * m / s)^2

with ties broken toward the lowest center id.  A connectivity pass then
relabels small orphaned fragments into their largest adjacent superpixel and
promotes large ones to superpixels of their own, so the returned partition is
always a disjoint cover of 4-connected regions.

Everything here is deterministic: the same image and parameters always yield
a bit-identical label map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .imagecore import RgbImage, rgb_to_lab

#: Relative center movement (in units of the grid step) below which the
#: local k-means is considered converged.
_MOVE_TOL = 1e-4


@dataclass(frozen=True)
class SlicParams:
    """Parameters of the superpixel construction.

    target_size is the mean number of pixels per superpixel; the number of
    clusters is derived as round(n / target_size).  compactness is the usual
    SLIC spatial-versus-color weight m.  Fragments smaller than
    connectivity_min_frac * target_size are merged during the connectivity
    pass, larger ones become superpixels of their own.
    """

    target_size: int = 550
    compactness: float = 10.0
    max_iters: int = 10
    connectivity_min_frac: float = 0.25

    def __post_init__(self):
        if self.target_size < 16:
            raise InvalidArgumentError("target_size must be >= 16")
        if self.compactness <= 0:
            raise InvalidArgumentError("compactness must be > 0")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")


@dataclass(frozen=True)
class SuperpixelPartition:
    """Per-pixel superpixel ids plus per-superpixel statistics.

    labels is a (h, w) int32 array of 0-based ids; centroids has one
    (L, a, b, x, y) row per superpixel; sizes counts pixels per superpixel.
    """

    width: int
    height: int
    labels: np.ndarray
    count: int
    centroids: np.ndarray
    sizes: np.ndarray = field(repr=False)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_cluster_count(n_pixels: int, target_size: int) -> int:
    return max(1, _round_half_up(n_pixels / target_size))


def initial_seeds(width: int, height: int, k: int) -> list[tuple[int, int]]:
    """Exactly k seed positions on an area-balanced grid.

    Rows are distributed as round(sqrt(k * h / w)); rows sharing the same
    seed count are grouped into uniform sub-grids whose heights are
    proportional to their share of k, so every initial cell covers close to
    n / k pixels regardless of how unevenly k splits into rows.
    """
    rows = min(max(_round_half_up(math.sqrt(k * height / width)), 1), k)
    counts = [_round_half_up((i + 1) * k / rows) - _round_half_up(i * k / rows)
              for i in range(rows)]
    groups: list[tuple[int, int]] = []  # (seeds per row, number of rows)
    for c in sorted(set(counts), reverse=True):
        groups.append((c, counts.count(c)))
    seeds: list[tuple[int, int]] = []
    y_done = 0.0
    for c, n_rows in groups:
        group_h = height * (c * n_rows) / k
        for i in range(n_rows):
            y = min(height - 1, int(y_done + (i + 0.5) * group_h / n_rows))
            for j in range(c):
                x = min(width - 1, int((j + 0.5) * width / c))
                seeds.append((x, y))
        y_done += group_h
    return seeds


def _gradient_map(lab: np.ndarray) -> np.ndarray:
    h, w = lab.shape[:2]
    xp = np.clip(np.arange(w) + 1, 0, w - 1)
    xm = np.clip(np.arange(w) - 1, 0, w - 1)
    yp = np.clip(np.arange(h) + 1, 0, h - 1)
    ym = np.clip(np.arange(h) - 1, 0, h - 1)
    gx = lab[:, xp, :] - lab[:, xm, :]
    gy = lab[yp, :, :] - lab[ym, :, :]
    return (gx * gx).sum(axis=-1) + (gy * gy).sum(axis=-1)


def perturb_seeds(lab: np.ndarray, seeds) -> list[tuple[int, int]]:
    """Move each seed to the strictly lowest-gradient pixel of its 3x3 patch.

    The seed keeps its place on ties, which makes the step a no-op on
    constant images.
    """
    grad = _gradient_map(lab)
    h, w = grad.shape
    out = []
    for x, y in seeds:
        bx, by = x, y
        best = grad[y, x]
        for yy in range(max(0, y - 1), min(h, y + 2)):
            for xx in range(max(0, x - 1), min(w, x + 2)):
                if grad[yy, xx] < best:
                    best = grad[yy, xx]
                    bx, by = xx, yy
        out.append((bx, by))
    return out


def _assign(lab, X, Y, centers, s, w2):
    """One assignment sweep: each center claims the closest pixels of its window."""
    h, w = lab.shape[:2]
    dist = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int32)
    for cid in range(centers.shape[0]):
        L, A, B, cx, cy = centers[cid]
        x0 = max(0, int(math.ceil(cx - s)))
        x1 = min(w - 1, int(math.floor(cx + s)))
        y0 = max(0, int(math.ceil(cy - s)))
        y1 = min(h - 1, int(math.floor(cy + s)))
        if x1 < x0 or y1 < y0:
            continue
        sub = lab[y0:y1 + 1, x0:x1 + 1]
        dl = sub[..., 0] - L
        da = sub[..., 1] - A
        db = sub[..., 2] - B
        dx = X[y0:y1 + 1, x0:x1 + 1] - cx
        dy = Y[y0:y1 + 1, x0:x1 + 1] - cy
        d2 = dl * dl + da * da + db * db + (dx * dx + dy * dy) * w2
        win = dist[y0:y1 + 1, x0:x1 + 1]
        better = d2 < win
        win[better] = d2[better]
        labels[y0:y1 + 1, x0:x1 + 1][better] = cid
    if (labels < 0).any():
        # windows missed some pixels (extreme aspect ratios); fall back to a
        # full scan for just those, same metric and tie rule
        ys, xs = np.nonzero(labels < 0)
        for y, x in zip(ys, xs):
            px = lab[y, x]
            best_d, best_c = np.inf, 0
            for cid in range(centers.shape[0]):
                L, A, B, cx, cy = centers[cid]
                dl, da, db = px[0] - L, px[1] - A, px[2] - B
                dx, dy = x - cx, y - cy
                d2 = dl * dl + da * da + db * db + (dx * dx + dy * dy) * w2
                if d2 < best_d:
                    best_d, best_c = d2, cid
            labels[y, x] = best_c
    return labels


def _update_centers(lab, X, Y, labels, centers):
    k = centers.shape[0]
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    new = centers.copy()
    nz = counts > 0
    for ch, src in enumerate((lab[..., 0], lab[..., 1], lab[..., 2], X, Y)):
        sums = np.bincount(flat, weights=src.ravel(), minlength=k)
        new[nz, ch] = sums[nz] / counts[nz]
    movement = 0.0
    for cid in range(k):
        dx = new[cid, 3] - centers[cid, 3]
        dy = new[cid, 4] - centers[cid, 4]
        movement = max(movement, math.sqrt(dx * dx + dy * dy))
    return new, movement


def _connected_components(labels: np.ndarray):
    """4-connected components of the label map, in raster discovery order.

    Returns (component_map, component_labels, component_sizes).
    """
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    comp_label: list[int] = []
    comp_size: list[int] = []
    stack: list[tuple[int, int]] = []
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            cid = len(comp_label)
            lbl = labels[sy, sx]
            comp_label.append(int(lbl))
            size = 0
            stack.append((sy, sx))
            comp[sy, sx] = cid
            while stack:
                y, x = stack.pop()
                size += 1
                if y > 0 and comp[y - 1, x] < 0 and labels[y - 1, x] == lbl:
                    comp[y - 1, x] = cid
                    stack.append((y - 1, x))
                if y + 1 < h and comp[y + 1, x] < 0 and labels[y + 1, x] == lbl:
                    comp[y + 1, x] = cid
                    stack.append((y + 1, x))
                if x > 0 and comp[y, x - 1] < 0 and labels[y, x - 1] == lbl:
                    comp[y, x - 1] = cid
                    stack.append((y, x - 1))
                if x + 1 < w and comp[y, x + 1] < 0 and labels[y, x + 1] == lbl:
                    comp[y, x + 1] = cid
                    stack.append((y, x + 1))
            comp_size.append(size)
    return comp, np.asarray(comp_label), np.asarray(comp_size)


def _component_neighbors(comp: np.ndarray, n_comp: int):
    neigh: list[set] = [set() for _ in range(n_comp)]
    a, b = comp[:, :-1], comp[:, 1:]
    for u, v in zip(a[a != b].tolist(), b[a != b].tolist()):
        neigh[u].add(v)
        neigh[v].add(u)
    a, b = comp[:-1, :], comp[1:, :]
    for u, v in zip(a[a != b].tolist(), b[a != b].tolist()):
        neigh[u].add(v)
        neigh[v].add(u)
    return neigh


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Make every label a single 4-connected region.

    The largest component of each label keeps it.  Every other component is
    promoted to a fresh superpixel when it has at least min_size pixels and
    is otherwise merged into the adjacent kept component with the largest
    (pre-merge) pixel count, lowest discovery id on ties.  Final labels are
    renumbered by first raster occurrence.
    """
    comp, comp_label, comp_size = _connected_components(labels)
    n_comp = len(comp_label)

    largest_of_label: dict[int, int] = {}
    for cid in range(n_comp):  # discovery order; first largest wins ties
        lbl = int(comp_label[cid])
        cur = largest_of_label.get(lbl)
        if cur is None or comp_size[cid] > comp_size[cur]:
            largest_of_label[lbl] = cid
    kept = np.zeros(n_comp, dtype=bool)
    for cid in largest_of_label.values():
        kept[cid] = True
    kept |= comp_size >= min_size

    target = np.where(kept, np.arange(n_comp), -1)
    if not kept.all():
        neigh = _component_neighbors(comp, n_comp)
        pending = [cid for cid in range(n_comp) if not kept[cid]]
        while pending:
            progressed = False
            remaining = []
            for cid in pending:
                best = -1
                for nb in neigh[cid]:
                    t = target[nb]
                    if t < 0:
                        continue
                    if best < 0 or comp_size[t] > comp_size[best] or \
                            (comp_size[t] == comp_size[best] and t < best):
                        best = t
                if best >= 0:
                    target[cid] = best
                    progressed = True
                else:
                    remaining.append(cid)
            if not progressed:  # isolated group; absorb into lowest kept id
                fallback = int(np.nonzero(kept)[0][0])
                for cid in remaining:
                    target[cid] = fallback
                remaining = []
            pending = remaining

    merged = target[comp]
    # renumber by first raster occurrence
    out = np.empty_like(labels)
    remap: dict[int, int] = {}
    flat_in = merged.ravel()
    flat_out = out.ravel()
    for i, v in enumerate(flat_in.tolist()):
        nid = remap.get(v)
        if nid is None:
            nid = len(remap)
            remap[v] = nid
        flat_out[i] = nid
    return out


def partition(image: RgbImage, params: SlicParams = SlicParams()) -> SuperpixelPartition:
    """Split `image` into superpixels of roughly params.target_size pixels."""
    h, w = image.height, image.width
    n = h * w
    if n < params.target_size:
        raise InvalidArgumentError(
            f"image area {n} is smaller than one superpixel ({params.target_size})")
    k = derive_cluster_count(n, params.target_size)
    lab = rgb_to_lab(image.pixels)
    s = math.sqrt(n / k)
    w2 = (params.compactness / s) ** 2
    seeds = perturb_seeds(lab, initial_seeds(w, h, k))
    centers = np.zeros((k, 5))
    for i, (x, y) in enumerate(seeds):
        centers[i, 0:3] = lab[y, x]
        centers[i, 3] = x
        centers[i, 4] = y
    X, Y = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))

    labels = None
    for _ in range(params.max_iters):
        labels = _assign(lab, X, Y, centers, s, w2)
        centers, movement = _update_centers(lab, X, Y, labels, centers)
        if movement < _MOVE_TOL * s:
            break

    min_size = max(1, int(params.connectivity_min_frac * params.target_size))
    labels = enforce_connectivity(labels, min_size)

    count = int(labels.max()) + 1
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count)
    centroids = np.zeros((count, 5))
    for ch, src in enumerate((lab[..., 0], lab[..., 1], lab[..., 2], X, Y)):
        centroids[:, ch] = np.bincount(flat, weights=src.ravel(), minlength=count) / sizes
    return SuperpixelPartition(width=w, height=h, labels=labels, count=count,
                               centroids=centroids, sizes=sizes)


# ---------------------------------------------------------------------------
# partition dump


def save_partition_png(part: SuperpixelPartition, path) -> None:
    """Write the label map as a 16-bit grayscale PNG (pixel value = id)."""
    if part.count > 65535:
        raise InvalidArgumentError(
            f"partition has {part.count} superpixels; 16-bit PNG holds at most 65535")
    arr = part.labels.astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path, format="PNG")


def load_partition_labels(path) -> np.ndarray:
    """Read a label map written by save_partition_png."""
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int32)
