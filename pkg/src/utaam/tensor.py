"""Dense N-way tensor algebra: unfolding, mode-n products, HOSVD and Tucker.

Tensors are plain ``numpy.ndarray`` objects in C order, i.e. the flat buffer
has the last index varying fastest. Modes are 0-based axis numbers.

The mode-n unfolding of ``x`` with shape ``(I_0, ..., I_{N-1})`` is the
``I_n x prod_{k != n} I_k`` matrix whose columns enumerate the remaining
indices with the lowest remaining mode varying fastest. :func:`fold` inverts
it exactly, and every basis extraction in the package goes through this pair.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError, NumericalError
from .validation import check_mode, check_ranks

# Relative threshold below which singular values count as zero.
SVD_RTOL = 1e-12


@dataclass(frozen=True)
class TuckerModel:
    """Core tensor plus one orthonormal-column factor per mode."""

    core: np.ndarray
    factors: tuple

    def __post_init__(self):
        ranks = tuple(u.shape[1] for u in self.factors)
        if ranks != self.core.shape:
            raise InvalidArgumentError(
                f"core shape {self.core.shape} does not match factor ranks {ranks}")

    @property
    def shape(self):
        return tuple(u.shape[0] for u in self.factors)

    @property
    def ranks(self):
        return self.core.shape


def unfold(x, mode):
    """Mode-``mode`` matricization of ``x``."""
    x = np.asarray(x)
    mode = check_mode(mode, x.ndim)
    return np.reshape(np.moveaxis(x, mode, 0), (x.shape[mode], -1), order="F")


def fold(m, mode, shape):
    """Inverse of :func:`unfold`: rebuild a tensor of ``shape`` from its unfolding."""
    m = np.asarray(m)
    shape = tuple(int(d) for d in shape)
    mode = check_mode(mode, len(shape))
    rest = shape[:mode] + shape[mode + 1:]
    if m.ndim != 2 or m.shape != (shape[mode], int(np.prod(rest))):
        raise InvalidArgumentError(
            f"matrix of shape {m.shape} cannot be folded along mode {mode} into {shape}")
    x = np.reshape(m, (shape[mode],) + rest, order="F")
    return np.ascontiguousarray(np.moveaxis(x, 0, mode))


def mode_n_product(x, y, mode):
    """Contract axis ``mode`` of ``x`` with the columns of matrix ``y`` (J x I_mode)."""
    x = np.asarray(x)
    y = np.asarray(y)
    mode = check_mode(mode, x.ndim)
    if y.ndim == 1:
        y = y[np.newaxis, :]
    if y.ndim != 2 or y.shape[1] != x.shape[mode]:
        raise InvalidArgumentError(
            f"matrix of shape {y.shape} cannot multiply mode {mode} of extent {x.shape[mode]}")
    z = np.tensordot(y, x, axes=(1, mode))
    return np.ascontiguousarray(np.moveaxis(z, 0, mode))


def multi_mode_product(x, matrices, modes=None, transpose=False):
    """Apply a sequence of mode-n products; ``None`` entries are skipped."""
    if modes is None:
        modes = range(len(matrices))
    for mat, mode in zip(matrices, modes):
        if mat is None:
            continue
        x = mode_n_product(x, mat.T if transpose else mat, mode)
    return x


def tensor_norm(x):
    """Square root of the sum of squared entries."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))


def _fix_signs(u):
    # largest-magnitude entry of every column made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def _mode_gram(x, mode):
    """``unfold(x, mode) @ unfold(x, mode).T`` accumulated slice by slice."""
    n = x.shape[mode]
    if mode == 0:
        flat = x.reshape(n, -1)
        return flat @ flat.T
    g = np.zeros((n, n))
    for i in range(x.shape[0]):
        s = np.moveaxis(x[i], mode - 1, 0).reshape(n, -1)
        g += s @ s.T
    return g


def leading_left_singular_vectors(x, mode, rank, method="auto"):
    """Leading ``rank`` left singular vectors of ``unfold(x, mode)`` and all singular values.

    ``method="gram"`` works from the small Gram matrix of the unfolding, which
    avoids materialising huge unfoldings at the cost of squared conditioning;
    ``"auto"`` only picks it for very wide, large unfoldings.
    """
    rows = x.shape[mode]
    cols = x.size // rows
    if method == "auto":
        method = "gram" if (cols > 8 * rows and x.size > 2_000_000) else "svd"
    try:
        if method == "svd":
            u, s, _ = np.linalg.svd(unfold(x, mode), full_matrices=False)
        elif method == "gram":
            w, v = np.linalg.eigh(_mode_gram(x, mode))
            order = np.argsort(w)[::-1]
            u = v[:, order]
            s = np.sqrt(np.clip(w[order], 0.0, None))
        else:
            raise InvalidArgumentError(f"unknown method {method!r}")
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD of mode-{mode} unfolding did not converge") from exc
    return _fix_signs(u[:, :rank]), s


def numerical_rank(singular_values, rtol=SVD_RTOL):
    s = np.asarray(singular_values)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def hosvd(x, ranks=None, method="auto"):
    """Truncated higher-order SVD.

    Parameters
    ----------
    x : array_like
        Dense tensor.
    ranks : sequence of int or None, optional
        Retained rank per mode; ``None`` keeps the full rank of each unfolding.

    Returns
    -------
    TuckerModel
        ``factors[n]`` are the leading left singular vectors of ``unfold(x, n)``
        and the core is ``x`` multiplied by every transposed factor.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("tensor contains non-finite values")
    ranks = check_ranks(ranks, x.shape)
    factors = tuple(
        leading_left_singular_vectors(x, n, r, method=method)[0] for n, r in enumerate(ranks))
    core = multi_mode_product(x, factors, transpose=True)
    return TuckerModel(core=core, factors=factors)


def tucker_reconstruct(t):
    """Evaluate ``core x_0 U_0 x_1 U_1 ... x_{N-1} U_{N-1}``."""
    return multi_mode_product(t.core, t.factors)


def hooi_sweep(x, factors):
    """One higher-order orthogonal iteration sweep warm-started from ``factors``.

    Each mode update maximises the projected norm with the other factors held
    fixed, so the residual of the projection never increases.
    """
    factors = list(factors)
    for n in range(x.ndim):
        others = [None if k == n else factors[k] for k in range(x.ndim)]
        y = multi_mode_product(x, others, transpose=True)
        factors[n] = leading_left_singular_vectors(y, n, factors[n].shape[1])[0]
    core = multi_mode_product(x, factors, transpose=True)
    return TuckerModel(core=core, factors=tuple(factors))


def khatri_rao(matrices):
    """Column-wise Kronecker product, first matrix index varying fastest."""
    r = matrices[0].shape[1]
    out = matrices[0]
    for m in matrices[1:]:
        out = (m[:, None, :] * out[None, :, :]).reshape(-1, r)
    return out


def cp_to_tensor(factors):
    """Sum of rank-one outer products of the factor columns."""
    shape = tuple(a.shape[0] for a in factors)
    kr = khatri_rao(factors[1:]) if len(factors) > 1 else np.ones((1, factors[0].shape[1]))
    return fold(factors[0] @ kr.T, 0, shape)
