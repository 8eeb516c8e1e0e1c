"""HOG descriptors sampled around landmarks."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


@dataclass(frozen=True)
class HogSpec:
    """Patch geometry and histogram settings.

    The feature length is ``L * bins * (patch // cell) ** 2``.
    """

    patch: int = 32
    cell: int = 8
    bins: int = 9
    eps: float = 1e-6

    def __post_init__(self):
        if self.patch < 1 or self.cell < 1 or self.patch % self.cell:
            raise InvalidArgumentError("patch side must be a positive multiple of the cell side")
        if self.bins < 2:
            raise InvalidArgumentError("need at least two orientation bins")
        if not self.eps > 0:
            raise InvalidArgumentError("eps must be positive")

    @property
    def cells_per_side(self):
        return self.patch // self.cell

    def n_features(self, n_points):
        return n_points * self.bins * self.cells_per_side ** 2

    def to_vector(self):
        return np.array([self.patch, self.cell, self.bins, self.eps], dtype=np.float64)

    @classmethod
    def from_vector(cls, v):
        return cls(int(v[0]), int(v[1]), int(v[2]), float(v[3]))


def _patches(images, shapes, spec):
    """Edge-clamped ``(patch + 2)``-side windows around every landmark."""
    n, h, w = images.shape
    half = spec.patch // 2
    centers = _rounded_centers(shapes, images, spec)
    offs = np.arange(-half - 1, spec.patch - half + 1)
    xs = np.clip(centers[..., 0, None] + offs, 0, w - 1)
    ys = np.clip(centers[..., 1, None] + offs, 0, h - 1)
    idx = np.arange(n)[:, None, None, None]
    return images[idx, ys[:, :, :, None], xs[:, :, None, :]]


def _hog_loops(images, centers, patch, cell, bins, eps, bcos, bsin, out):
    n, h, w = images.shape
    n_points = centers.shape[1]
    c = patch // cell
    half = patch // 2
    per = c * c * bins
    hist = np.zeros(per)
    for i in range(n):
        img = images[i]
        for l in range(n_points):
            hist[:] = 0.0
            cx = centers[i, l, 0]
            cy = centers[i, l, 1]
            for r in range(patch):
                y = cy - half + r
                ym = min(max(y - 1, 0), h - 1)
                yp = min(max(y + 1, 0), h - 1)
                yc = min(max(y, 0), h - 1)
                crow = (r // cell) * c
                for q in range(patch):
                    x = cx - half + q
                    xm = min(max(x - 1, 0), w - 1)
                    xp = min(max(x + 1, 0), w - 1)
                    xc = min(max(x, 0), w - 1)
                    gx = img[yc, xp] - img[yc, xm]
                    gy = img[yp, xc] - img[ym, xc]
                    # fold onto [0, pi): unsigned orientation
                    if gy < 0 or (gy == 0 and gx < 0):
                        gx = -gx
                        gy = -gy
                    mag = np.sqrt(gx * gx + gy * gy)
                    b = 0
                    for k in range(1, bins):
                        if bcos[k] * gy - bsin[k] * gx >= 0:
                            b = k
                        else:
                            break
                    hist[(crow + q // cell) * bins + b] += mag
            s = 0.0
            for k in range(per):
                s += hist[k] * hist[k]
            nrm = np.sqrt(s + eps * eps)
            for k in range(per):
                out[i, l * per + k] = hist[k] / nrm


def _hog_loops_u8(images, centers, patch, cell, bins, eps, lut_bin, lut_mag, out):
    # integer differences index precomputed bin and magnitude tables
    n, h, w = images.shape
    n_points = centers.shape[1]
    c = patch // cell
    half = patch // 2
    per = c * c * bins
    hist = np.zeros(per)
    for i in range(n):
        img = images[i]
        for l in range(n_points):
            hist[:] = 0.0
            cx = centers[i, l, 0]
            cy = centers[i, l, 1]
            for r in range(patch):
                y = cy - half + r
                ym = min(max(y - 1, 0), h - 1)
                yp = min(max(y + 1, 0), h - 1)
                yc = min(max(y, 0), h - 1)
                crow = (r // cell) * c
                for q in range(patch):
                    x = cx - half + q
                    xm = min(max(x - 1, 0), w - 1)
                    xp = min(max(x + 1, 0), w - 1)
                    xc = min(max(x, 0), w - 1)
                    gx = int(img[yc, xp]) - int(img[yc, xm]) + 255
                    gy = int(img[yp, xc]) - int(img[ym, xc]) + 255
                    hist[(crow + q // cell) * bins + lut_bin[gy, gx]] += lut_mag[gy, gx]
            s = 0.0
            for k in range(per):
                s += hist[k] * hist[k]
            nrm = np.sqrt(s + eps * eps)
            for k in range(per):
                out[i, l * per + k] = hist[k] / nrm


def _lookup_tables(bins, unit):
    """Bin index and magnitude for every integer gradient pair of 8-bit images."""
    d = np.arange(-255, 256, dtype=np.float64) * unit
    gy, gx = np.meshgrid(d, d, indexing="ij")
    flip = (gy < 0) | ((gy == 0) & (gx < 0))
    gx = np.where(flip, -gx, gx)
    gy = np.where(flip, -gy, gy)
    mag = np.sqrt(gx * gx + gy * gy)
    edges = np.arange(bins) * (np.pi / bins)
    b = np.zeros(gx.shape, dtype=np.int64)
    alive = np.ones(gx.shape, dtype=bool)
    for k in range(1, bins):
        alive &= np.cos(edges[k]) * gy - np.sin(edges[k]) * gx >= 0
        b[alive] = k
    return b, mag


_LUT_CACHE = {}

_hog_jit = numba.njit(cache=True, nogil=True)(_hog_loops) if numba is not None else None
_hog_u8_jit = numba.njit(cache=True, nogil=True)(_hog_loops_u8) if numba is not None else None


def _extract_numpy(images, shapes, spec, chunk=64):
    """Vectorised equivalent of the compiled kernel, used when numba is missing."""
    n, n_points = shapes.shape[:2]
    c = spec.cells_per_side
    cell_of = (np.arange(spec.patch) // spec.cell)
    cell_index = (cell_of[:, None] * c + cell_of[None, :]).ravel()
    out = np.empty((n, spec.n_features(n_points)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        win = _patches(images[start:stop], shapes[start:stop], spec)
        if win.dtype == np.uint8:
            win = win.astype(np.float64) / 255.0
        else:
            win = win.astype(np.float64, copy=False)
        gx = win[:, :, 1:-1, 2:] - win[:, :, 1:-1, :-2]
        gy = win[:, :, 2:, 1:-1] - win[:, :, :-2, 1:-1]
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), np.pi)
        b = np.minimum((ang * (spec.bins / np.pi)).astype(np.int64), spec.bins - 1)
        m = stop - start
        groups = m * n_points
        key = (np.arange(groups)[:, None] * (c * c) + cell_index[None, :]) * spec.bins
        key = key + b.reshape(groups, -1)
        hist = np.bincount(key.ravel(), weights=mag.reshape(-1),
                           minlength=groups * c * c * spec.bins)
        hist = hist.reshape(groups, -1)
        norm = np.sqrt(np.sum(hist * hist, axis=1, keepdims=True) + spec.eps ** 2)
        out[start:stop] = (hist / norm).reshape(m, -1)
    return out


def extract_features_batch(images, shapes, spec=HogSpec(), n_jobs=1):
    """HOG features for a stack of images, one landmark set per image.

    Per landmark: a ``patch``-side window centred on the rounded landmark
    (edge-clamped), centred-difference gradients, magnitude-weighted unsigned
    orientation histograms per cell with hard binning, and one L2
    normalisation of the whole window descriptor.

    Parameters
    ----------
    images : ndarray, shape (n, H, W)
        Grayscale rasters with intensities in [0, 1] (``uint8`` is rescaled).
    shapes : ndarray, shape (n, L, 2)
    n_jobs : int
        Worker threads; rows are independent, so the result does not depend
        on the count.

    Returns
    -------
    ndarray, shape (n, L * bins * (patch // cell) ** 2)
    """
    images = np.asarray(images)
    shapes = np.asarray(shapes, dtype=np.float64)
    if images.ndim == 2:
        images, shapes = images[None], shapes[None]
    n, n_points = shapes.shape[:2]
    if images.shape[0] != n or shapes.shape[2] != 2:
        raise InvalidArgumentError("need one (L, 2) landmark set per image")
    if not np.all(np.isfinite(shapes)):
        raise InvalidArgumentError("landmarks must be finite")
    if _hog_jit is None:
        return _extract_numpy(images, shapes, spec)
    centers = _rounded_centers(shapes, images, spec)
    out = np.empty((n, spec.n_features(n_points)))
    if images.dtype == np.uint8 and spec.bins not in _LUT_CACHE:
        _LUT_CACHE[spec.bins] = _lookup_tables(spec.bins, 1.0 / 255.0)
    if n_jobs > 1 and n > 1:
        bounds = np.linspace(0, n, min(n_jobs, n) + 1).astype(int)
        with ThreadPoolExecutor(n_jobs) as pool:
            list(pool.map(lambda ab: _run_kernel(images[ab[0]:ab[1]], centers[ab[0]:ab[1]],
                                                 spec, out[ab[0]:ab[1]]),
                          zip(bounds[:-1], bounds[1:])))
        return out
    _run_kernel(images, centers, spec, out)
    return out


def _rounded_centers(shapes, images, spec):
    # windows are edge-clamped, so far-off centres can be clipped before the integer cast
    lim = max(images.shape[-2:]) + spec.patch + 2
    return np.floor(np.clip(shapes, -lim, lim) + 0.5).astype(np.int64)


def _run_kernel(images, centers, spec, out):
    if images.dtype == np.uint8:
        lut_bin, lut_mag = _LUT_CACHE[spec.bins]
        _hog_u8_jit(images, centers, spec.patch, spec.cell, spec.bins, float(spec.eps),
                    lut_bin, lut_mag, out)
    else:
        edges = np.arange(spec.bins) * (np.pi / spec.bins)
        _hog_jit(np.asarray(images, dtype=np.float64), centers, spec.patch, spec.cell,
                 spec.bins, float(spec.eps), np.cos(edges), np.sin(edges), out)


def extract_features(image, shape, spec=HogSpec()):
    """Concatenated per-landmark HOG descriptors of one image."""
    img = np.asarray(image)
    pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
    return extract_features_batch(img[None], pts[None], spec)[0]
