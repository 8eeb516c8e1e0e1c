"""Input validation helpers shared by the estimators and free functions."""
import numbers

import numpy as np

from .exceptions import InvalidArgumentError


def check_tensor(x, name="x", min_order=1, copy=False):
    """Return ``x`` as a finite float64 ndarray with at least ``min_order`` axes."""
    arr = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if arr.ndim < min_order:
        raise InvalidArgumentError(
            f"{name} must have at least {min_order} axes, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise InvalidArgumentError(f"{name} has an empty axis: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_mode(mode, order):
    if not isinstance(mode, numbers.Integral) or not 0 <= mode < order:
        raise InvalidArgumentError(
            f"mode must be an integer in [0, {order}), got {mode!r}")
    return int(mode)


def check_ranks(ranks, shape, name="ranks"):
    """Resolve a rank specification against ``shape``.

    ``None`` (globally or per mode) means the full rank of that unfolding,
    ``min(I_n, prod_{k != n} I_k)``.
    """
    shape = tuple(shape)
    total = int(np.prod(shape))
    full = [min(d, total // d) for d in shape]
    if ranks is None:
        return tuple(full)
    ranks = tuple(ranks)
    if len(ranks) != len(shape):
        raise InvalidArgumentError(
            f"{name} has {len(ranks)} entries for a tensor of order {len(shape)}")
    out = []
    for n, (r, d) in enumerate(zip(ranks, shape)):
        if r is None:
            out.append(full[n])
            continue
        if not isinstance(r, numbers.Integral) or r < 1:
            raise InvalidArgumentError(f"{name}[{n}] must be a positive integer, got {r!r}")
        if r > d:
            raise InvalidArgumentError(f"{name}[{n}]={r} exceeds extent {d}")
        out.append(min(int(r), full[n]))
    return tuple(out)


def check_mask(mask, shape, name="mask"):
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != tuple(shape):
        raise InvalidArgumentError(f"{name} shape {m.shape} does not match data shape {tuple(shape)}")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidArgumentError(f"{name} entries must be 0 or 1")
    return m


def check_points(points, name="shape", n_points=None):
    """Return landmarks as an ``(L, 2)`` float array.

    Accepts either the point array or the interleaved vector ``[x1, y1, ...]``.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        if p.size % 2:
            raise InvalidArgumentError(f"{name} vector has odd length {p.size}")
        p = p.reshape(-1, 2)
    if p.ndim != 2 or p.shape[1] != 2:
        raise InvalidArgumentError(f"{name} must be (L, 2) or a 2L vector, got {p.shape}")
    if n_points is not None and p.shape[0] != n_points:
        raise InvalidArgumentError(f"{name} has {p.shape[0]} points, expected {n_points}")
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError(f"{name} contains non-finite coordinates")
    return p


def check_image(image, name="image"):
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64, copy=False)
    if img.ndim != 2 or min(img.shape) < 1:
        raise InvalidArgumentError(f"{name} must be a non-empty 2-D grayscale raster")
    return img


def check_probability_simplex(c, name, atol=1e-10):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or np.any(c < -atol) or np.any(c > 1 + atol) or abs(c.sum() - 1.0) > atol:
        raise InvalidArgumentError(f"{name} must lie on the probability simplex")
    return c


def check_fitted(estimator, attributes):
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        from sklearn.exceptions import NotFittedError
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; missing {missing}")
