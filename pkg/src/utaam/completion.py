"""Completion of tensors with missing training samples.

Two solvers share the masked objective ``||O * (X - X')||``:

* :func:`complete_tucker_power` alternates imputation of the missing entries
  with a low multilinear-rank fit of the imputed tensor;
* :func:`complete_cp_weighted` runs first-order descent on a CP
  parameterisation of the observed entries.

Both start from :func:`initialize_missing`, which fills a missing sample with
the mean of available samples sharing its pose, illumination and expression
(all three, else any one of them, else uniform noise).
"""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InvalidArgumentError, NumericalError
from .tensor import (cp_to_tensor, hooi_sweep, hosvd, khatri_rao, multi_mode_product,
                     tensor_norm, tucker_reconstruct, unfold)
from .validation import check_mask, check_ranks, check_tensor

RULE_OBSERVED = "observed"
RULE_AND = "and"
RULE_OR = "or"
RULE_RANDOM = "random"

# Objective below this fraction of the observed norm counts as converged.
_ABS_STOP = 1e-14


@dataclass(frozen=True)
class MaskedTensor:
    """Data tensor ``X`` with its 0/1 availability tensor ``O`` of identical shape."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = check_tensor(self.data, "data")
        mask = check_mask(self.mask, data.shape)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_missing(self):
        return int(np.sum(self.mask == 0))

    def is_sample_constant(self):
        """True when the mask is constant along the last (feature) axis."""
        return bool(np.all(self.mask == self.mask[..., :1]))

    def sample_mask(self):
        """Boolean availability of each sample (all axes but the last)."""
        if not self.is_sample_constant():
            raise InvalidArgumentError("mask is not constant along the feature axis")
        return self.mask[..., 0] == 1


def masked_residual_norm(x, candidate):
    """``||O * (X - candidate)||`` for a :class:`MaskedTensor` ``x``."""
    candidate = np.asarray(candidate, dtype=np.float64)
    if candidate.shape != x.shape:
        raise InvalidArgumentError(
            f"candidate shape {candidate.shape} does not match data shape {x.shape}")
    return tensor_norm(x.mask * (x.data - candidate))


def initialize_missing(x, policy="variation_aware", random_state=None):
    """Fill missing samples of a 5-way sample tensor.

    Parameters
    ----------
    x : MaskedTensor
        Tensor ordered (identity, pose, illumination, expression, feature)
        with a sample-constant mask.
    policy : {"variation_aware", "random"}
        ``"random"`` fills every missing entry with uniform values in [0, 1].
    random_state : int or numpy.random.Generator, optional
        Seed for the uniform fallback. Data living outside [0, 1] should be
        normalised by the caller if the fallback matters.

    Returns
    -------
    filled : ndarray
        Observed entries copied verbatim, missing samples initialised.
    rules : ndarray of str
        Rule applied to each sample cell: ``"observed"``, ``"and"``, ``"or"``
        or ``"random"``.
    """
    rng = np.random.default_rng(random_state)
    if policy not in ("variation_aware", "random"):
        raise InvalidArgumentError(f"unknown initialisation policy {policy!r}")
    if policy == "variation_aware" and x.data.ndim != 5:
        raise InvalidArgumentError(
            f"variation-aware initialisation needs a 5-way tensor, got order {x.data.ndim}")
    present = x.sample_mask()
    filled = np.where(x.mask == 1, x.data, 0.0)
    rules = np.where(present, RULE_OBSERVED, RULE_RANDOM).astype("<U8")
    missing = np.argwhere(~present)
    if policy == "random":
        for cell in missing:
            filled[tuple(cell)] = rng.uniform(0.0, 1.0, size=x.shape[-1])
        return filled, rules

    grid = np.indices(present.shape)
    _, pose, illum, expr = grid
    for cell in missing:
        i, p, l, e = cell
        same = present & (pose == p) & (illum == l) & (expr == e)
        if same.any():
            filled[i, p, l, e] = x.data[same].mean(axis=0)
            rules[i, p, l, e] = RULE_AND
            continue
        shared = present & ((pose == p) | (illum == l) | (expr == e))
        if shared.any():
            filled[i, p, l, e] = x.data[shared].mean(axis=0)
            rules[i, p, l, e] = RULE_OR
            continue
        filled[i, p, l, e] = rng.uniform(0.0, 1.0, size=x.shape[-1])
    return filled, rules


def _restore(x, estimate):
    return np.where(x.mask == 1, x.data, estimate)


def complete_tucker_power(x, init, ranks=None, max_iter=200, tol=1e-6):
    """Low multilinear-rank completion by power iteration.

    Every iteration imputes the missing entries from the current estimate,
    computes a truncated HOSVD of the imputed tensor and keeps whichever of it
    and the previous subspace fits better, refines that with one orthogonal
    iteration sweep, and reconstructs. The masked objective of the low-rank
    estimate therefore never increases.

    Returns
    -------
    completed : ndarray
        Low-rank estimate with the observed entries restored.
    trace : list of float
        Masked objective after each iteration.
    """
    init = np.asarray(init, dtype=np.float64)
    if init.shape != x.shape:
        raise InvalidArgumentError(f"init shape {init.shape} does not match data shape {x.shape}")
    ranks = check_ranks(ranks, x.shape)
    if x.n_missing == 0:
        return x.data.copy(), [0.0]
    if max_iter < 1:
        raise InvalidArgumentError("max_iter must be at least 1")
    scale = tensor_norm(x.mask * x.data)
    estimate = init
    factors = None
    trace = []
    for it in range(1, max_iter + 1):
        y = _restore(x, estimate)
        model = hosvd(y, ranks)
        if factors is not None:
            warm = multi_mode_product(y, factors, transpose=True)
            if tensor_norm(warm) > tensor_norm(model.core):
                model = None
                start = factors
        if model is not None:
            start = model.factors
        model = hooi_sweep(y, start)
        factors = model.factors
        estimate = tucker_reconstruct(model)
        if not np.all(np.isfinite(estimate)):
            raise NumericalError("non-finite estimate in power iteration", it)
        obj = masked_residual_norm(x, estimate)
        trace.append(obj)
        if obj <= _ABS_STOP * scale:
            break
        if it > 1 and trace[-2] - obj <= tol * trace[-2]:
            break
    return _restore(x, estimate), trace


def cp_objective(x, factors):
    """Half the squared masked residual of a CP model."""
    r = x.mask * (x.data - cp_to_tensor(factors))
    return 0.5 * float(np.sum(r * r))


def cp_gradient(x, factors):
    """Gradient of :func:`cp_objective` with respect to every factor matrix."""
    residual = x.mask * (cp_to_tensor(factors) - x.data)
    grads = []
    for n in range(len(factors)):
        others = [factors[k] for k in range(len(factors)) if k != n]
        grads.append(unfold(residual, n) @ khatri_rao(others))
    return grads


def _cp_init(init, rank, rng):
    tucker = hosvd(init, [min(rank, r) for r in check_ranks(None, init.shape)])
    factors = []
    for u in tucker.factors:
        a = u
        if a.shape[1] < rank:
            extra = rng.standard_normal((a.shape[0], rank - a.shape[1])) / np.sqrt(a.shape[0])
            a = np.hstack([a, extra])
        factors.append(a)
    # least-squares column weights for the fixed directions
    gram = np.ones((rank, rank))
    for a in factors:
        gram *= a.T @ a
    rhs = np.einsum("ir,ir->r", factors[0], unfold(init, 0) @ khatri_rao(factors[1:]))
    weights = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    factors[0] = factors[0] * weights
    return factors


def complete_cp_weighted(x, init, rank, max_iter=500, tol=1e-9, restore=True,
                         armijo=1e-4, random_state=0, return_factors=False):
    """Weighted CP completion by gradient descent with backtracking.

    The trial step of every iteration is the Barzilai-Borwein step (doubling
    the last accepted step when that is undefined) and is halved until the
    Armijo condition holds, so every accepted step lowers the objective.

    Returns
    -------
    completed : ndarray
        CP reconstruction, with observed entries restored when ``restore``.
    trace : list of float
        Masked objective ``||O * (X - CP)||`` after initialisation and after
        every accepted step.
    """
    init = np.asarray(init, dtype=np.float64)
    if init.shape != x.shape:
        raise InvalidArgumentError(f"init shape {init.shape} does not match data shape {x.shape}")
    if int(rank) < 1:
        raise InvalidArgumentError("rank must be at least 1")
    rng = np.random.default_rng(random_state)
    factors = _cp_init(init, int(rank), rng)
    f = cp_objective(x, factors)
    trace = [float(np.sqrt(2 * f))]
    step = 1.0
    prev = None
    for it in range(1, max_iter + 1):
        grads = cp_gradient(x, factors)
        gflat = np.concatenate([g.ravel() for g in grads])
        if not (np.isfinite(f) and np.all(np.isfinite(gflat))):
            raise NumericalError("non-finite objective or gradient", it)
        gsq = float(gflat @ gflat)
        if gsq == 0.0:
            break
        trial = 2.0 * step
        if prev is not None:
            s = np.concatenate([a.ravel() for a in factors]) - prev[0]
            yv = gflat - prev[1]
            sy = float(s @ yv)
            if sy > 0:
                trial = float(s @ s) / sy
        t = trial
        while True:
            cand = [a - t * g for a, g in zip(factors, grads)]
            fc = cp_objective(x, cand)
            if np.isfinite(fc) and fc <= f - armijo * t * gsq:
                break
            t *= 0.5
            if t < 1e-30:
                cand = None
                break
        if cand is None:
            break
        prev = (np.concatenate([a.ravel() for a in factors]), gflat)
        factors, step = cand, t
        f_old, f = f, fc
        trace.append(float(np.sqrt(2 * f)))
        if f <= 0.5 * (_ABS_STOP * tensor_norm(x.mask * x.data)) ** 2:
            break
        if f_old - f <= tol * f_old:
            break
    estimate = cp_to_tensor(factors)
    out = _restore(x, estimate) if restore else estimate
    if return_factors:
        return out, trace, factors
    return out, trace


def reconstruction_rms(truth, completed, mask):
    """Root mean square error over the missing positions (``mask == 0``)."""
    truth = np.asarray(truth, dtype=np.float64)
    completed = np.asarray(completed, dtype=np.float64)
    mask = np.asarray(mask)
    if truth.shape != completed.shape or truth.shape != mask.shape:
        raise InvalidArgumentError("truth, completed and mask must share one shape")
    missing = mask == 0
    if not missing.any():
        return 0.0
    d = truth[missing] - completed[missing]
    return float(np.sqrt(np.mean(d * d)))


class _BaseCompleter(TransformerMixin, BaseEstimator):

    def _initial(self, x):
        if isinstance(self.init, str):
            filled, rules = initialize_missing(x, self.init, self.random_state)
            self.init_rules_ = rules
            return filled
        init = np.asarray(self.init, dtype=np.float64)
        self.init_rules_ = None
        return init

    def fit(self, X, mask):
        self.fit_transform(X, mask)
        return self

    def transform(self, X, mask=None):
        """Return the completion computed by the last :meth:`fit`."""
        from .validation import check_fitted
        check_fitted(self, ["completed_"])
        return self.completed_


class TuckerPowerCompleter(_BaseCompleter):
    """Estimator wrapper around :func:`complete_tucker_power`.

    Parameters
    ----------
    ranks : sequence of int, optional
        Retained multilinear rank; defaults to the full rank of every mode.
    init : {"variation_aware", "random"} or array_like
        Initialisation policy, or an explicit initial tensor.
    """

    def __init__(self, ranks=None, init="variation_aware", max_iter=200, tol=1e-6,
                 random_state=0):
        self.ranks = ranks
        self.init = init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit_transform(self, X, mask=None, **fit_params):
        x = MaskedTensor(X, mask)
        init = self._initial(x)
        self.completed_, self.objective_trace_ = complete_tucker_power(
            x, init, self.ranks, self.max_iter, self.tol)
        self.n_iter_ = len(self.objective_trace_)
        return self.completed_


class WeightedCPCompleter(_BaseCompleter):
    """Estimator wrapper around :func:`complete_cp_weighted`."""

    def __init__(self, rank=1, init="variation_aware", max_iter=500, tol=1e-9,
                 restore=True, random_state=0):
        self.rank = rank
        self.init = init
        self.max_iter = max_iter
        self.tol = tol
        self.restore = restore
        self.random_state = random_state

    def fit_transform(self, X, mask=None, **fit_params):
        x = MaskedTensor(X, mask)
        init = self._initial(x)
        self.completed_, self.objective_trace_, self.factors_ = complete_cp_weighted(
            x, init, self.rank, self.max_iter, self.tol, self.restore,
            random_state=self.random_state, return_factors=True)
        self.n_iter_ = len(self.objective_trace_) - 1
        return self.completed_
