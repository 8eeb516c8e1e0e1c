"""Unified tensor shape/texture models and their baselines.

Sample tensors are ordered ``(identity, pose, illumination, expression,
feature)``. Coefficient vectors live in the row space of the mode matrices:
the coefficients of training identity ``i`` are row ``i`` of the identity mode
matrix, and synthesis contracts the compressed core with them directly.
"""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import InvalidArgumentError
from .features import HogSpec
from .geometry import AffineParams, apply_affine
from .tensor import hosvd, leading_left_singular_vectors, mode_n_product, multi_mode_product, unfold
from .validation import (check_fitted, check_points, check_probability_simplex, check_ranks,
                         check_tensor)

IDENTITY, POSE, ILLUMINATION, EXPRESSION, FEATURE = range(5)
SAMPLE_AXES = (IDENTITY, POSE, ILLUMINATION, EXPRESSION)


@dataclass(frozen=True)
class SampleGrid:
    """Dataset factor extents, the frontal pose and per-cell availability."""

    extents: tuple
    frontal_pose: int
    present: np.ndarray = None

    def __post_init__(self):
        extents = tuple(int(e) for e in self.extents)
        if len(extents) != 4 or min(extents) < 1:
            raise InvalidArgumentError("extents must be four positive integers")
        if not 0 <= self.frontal_pose < extents[POSE]:
            raise InvalidArgumentError("frontal pose index out of range")
        present = (np.ones(extents, dtype=bool) if self.present is None
                   else np.asarray(self.present, dtype=bool))
        if present.shape != extents:
            raise InvalidArgumentError("availability array does not match extents")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "present", present)

    @property
    def n_missing(self):
        return int((~self.present).sum())


@dataclass(frozen=True)
class ShapeParams:
    """Global similarity plus identity, pose and expression coefficients."""

    affine: AffineParams
    identity: np.ndarray
    pose: np.ndarray
    expression: np.ndarray

    def to_vector(self):
        return np.concatenate([self.affine.to_vector(), self.identity, self.pose, self.expression])


@dataclass(frozen=True)
class TextureParams:
    identity: np.ndarray
    pose: np.ndarray
    illumination: np.ndarray
    expression: np.ndarray

    def to_vector(self):
        return np.concatenate([self.identity, self.pose, self.illumination, self.expression])


def _als_solve(core, target, coeffs, rounds, trace=None, flags=None):
    """Alternating least squares over the coefficient modes of ``core``.

    ``core`` has one axis per coefficient vector followed by the feature axis.
    Each update solves exactly for one vector with the others fixed.
    """
    coeffs = [np.array(c, dtype=np.float64) for c in coeffs]
    k = len(coeffs)
    for _ in range(rounds):
        for j in range(k):
            m = core
            # contract the higher modes first so axis numbers stay valid
            for n in range(k - 1, -1, -1):
                if n != j:
                    m = np.tensordot(m, coeffs[n], axes=([n], [0]))
            # m is now (R_j, F)
            gram = m @ m.T
            rhs = m @ target
            if np.linalg.matrix_rank(m) < m.shape[0]:
                gram = gram + 1e-8 * np.eye(len(gram))
                if flags is not None:
                    flags.append(j)
            coeffs[j] = np.linalg.solve(gram, rhs)
            if trace is not None:
                r = target - coeffs[j] @ m
                trace.append(float(np.sqrt(r @ r)))
    return coeffs


def _contract_except(core, coeffs, j):
    """Contract every coefficient mode but ``j`` row-wise; returns ``(N, R_j, F)``."""
    others = [n for n in range(len(coeffs)) if n != j]
    t = np.moveaxis(core, j, -2)
    if not others:
        return np.broadcast_to(t, (len(coeffs[j]),) + t.shape)
    first = coeffs[others[0]]
    x = (first @ t.reshape(t.shape[0], -1)).reshape((len(first),) + t.shape[1:])
    for n in others[1:]:
        c = coeffs[n]
        x = (c[:, None, :] @ x.reshape(len(c), c.shape[1], -1)).reshape((len(c),) + x.shape[2:])
    return x


def _als_batch(core, targets, coeffs, rounds, prox=1e-6):
    """Row-wise alternating least squares with a proximal term.

    Each mode update minimises the residual plus ``lam * ||c - c_old||^2``
    with ``lam = prox * trace(G) / R``. Starting coefficients that already
    fit are kept, poorly determined directions do not drift, and the
    residual never increases.
    """
    coeffs = [np.array(c, dtype=np.float64) for c in coeffs]
    for _ in range(rounds):
        for j in range(len(coeffs)):
            m = _contract_except(core, coeffs, j)
            gram = m @ m.transpose(0, 2, 1)
            rhs = (m @ targets[..., None])[..., 0]
            r = gram.shape[1]
            lam = prox * np.trace(gram, axis1=1, axis2=2) / r + 1e-300
            gram += lam[:, None, None] * np.eye(r)
            rhs += lam[:, None] * coeffs[j]
            coeffs[j] = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return coeffs


def _batch_similarity(source, target):
    """Least-squares complex similarities ``target ~ a * source + b`` per row."""
    cs, ct = source.mean(axis=1), target.mean(axis=1)
    ds = source - cs[:, None]
    denom = np.sum(np.abs(ds) ** 2, axis=1)
    if np.any(denom <= 1e-24):
        raise InvalidArgumentError("degenerate shape: all points coincide")
    a = np.sum(np.conj(ds) * (target - ct[:, None]), axis=1) / denom
    return a, ct - a * cs


class UTAAM(BaseEstimator):
    """Unified tensor-based active appearance model.

    Parameters
    ----------
    shape_ranks : sequence of 5 int, optional
        Retained HOSVD rank per shape mode; ``None`` entries keep full rank.
    texture_ranks : sequence of 5 int, optional
        Same for the texture tensor.
    illumination_weights : array_like, optional
        Weights over illumination states used to fold the illumination mode
        out of the shape core. Defaults to uniform weights.
    hog : HogSpec, optional
        Descriptor settings stored with the model for fitting.

    Attributes
    ----------
    mean_shape_, mean_texture_ : ndarray
    core_shape_ : ndarray, shape (R_i, R_p, R_e, 2L)
    core_texture_ : ndarray, shape (R_i, R_p, R_l, R_e, I_t)
    shape_modes_ : tuple of ndarray
        Identity, pose and expression mode matrices of the shape model.
    texture_modes_ : tuple of ndarray
        Identity, pose, illumination and expression mode matrices.
    """

    def __init__(self, shape_ranks=None, texture_ranks=None, illumination_weights=None,
                 hog=None):
        self.shape_ranks = shape_ranks
        self.texture_ranks = texture_ranks
        self.illumination_weights = illumination_weights
        self.hog = hog

    def fit(self, shape_tensor, texture_tensor=None, mesh=None, shape_mean=None,
            texture_mean=None):
        """Decompose complete sample tensors.

        When ``shape_mean`` (``texture_mean``) is given the tensor is taken as
        already centred; otherwise the mean over all samples is removed here.
        """
        s = check_tensor(shape_tensor, "shape_tensor")
        if s.ndim != 5:
            raise InvalidArgumentError("shape tensor must be 5-way")
        s, self.mean_shape_ = _center(s, shape_mean)
        ranks = check_ranks(self.shape_ranks, s.shape, "shape_ranks")
        tucker = hosvd(s, ranks)
        s_i, s_p, s_l, s_e, s_s = tucker.factors
        w = self._illumination_weights(s.shape[ILLUMINATION])
        self.illumination_row_ = w @ s_l
        core = mode_n_product(tucker.core, self.illumination_row_, ILLUMINATION)
        core = mode_n_product(core, s_s, FEATURE)
        self.core_shape_ = core[:, :, 0, :, :]
        self.shape_modes_ = (s_i, s_p, s_e)
        self.shape_illumination_mode_ = s_l

        if texture_tensor is not None:
            t = check_tensor(texture_tensor, "texture_tensor")
            if t.ndim != 5 or t.shape[:4] != s.shape[:4]:
                raise InvalidArgumentError("texture tensor must be 5-way with the shape tensor's sample axes")
            t, self.mean_texture_ = _center(t, texture_mean)
            self.core_texture_, self.texture_modes_ = _compressed_texture_core(
                t, self.texture_ranks)
        else:
            self.mean_texture_ = None
            self.core_texture_ = None
            self.texture_modes_ = None
        self.mesh_ = mesh
        self.hog_ = self.hog if self.hog is not None else HogSpec()
        return self

    def _illumination_weights(self, n):
        if self.illumination_weights is None:
            return np.full(n, 1.0 / n)
        w = np.asarray(self.illumination_weights, dtype=np.float64)
        if w.shape != (n,):
            raise InvalidArgumentError("illumination_weights needs one weight per illumination state")
        return w

    # -- dimensions ---------------------------------------------------------
    @property
    def n_points(self):
        return self.mean_shape_.size // 2

    @property
    def shape_ranks_(self):
        return self.core_shape_.shape[:3]

    @property
    def texture_ranks_(self):
        return None if self.core_texture_ is None else self.core_texture_.shape[:4]

    @property
    def n_shape_params(self):
        return 4 + sum(self.shape_ranks_)

    @property
    def has_texture(self):
        return self.core_texture_ is not None

    # -- parameters ---------------------------------------------------------
    def shape_params_from_vector(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_shape_params,):
            raise InvalidArgumentError(
                f"shape parameter vector must have length {self.n_shape_params}, got {v.shape}")
        r_i, r_p, _ = self.shape_ranks_
        return ShapeParams(AffineParams.from_vector(v[:4]), v[4:4 + r_i],
                           v[4 + r_i:4 + r_i + r_p], v[4 + r_i + r_p:])

    def training_shape_params(self, identity, pose, expression, affine=AffineParams()):
        s_i, s_p, s_e = self.shape_modes_
        return ShapeParams(affine, s_i[identity].copy(), s_p[pose].copy(), s_e[expression].copy())

    def mean_shape_params(self, affine=AffineParams()):
        """Coefficients at the mode-matrix row means; they synthesise the mean shape."""
        s_i, s_p, s_e = self.shape_modes_
        return ShapeParams(affine, s_i.mean(axis=0), s_p.mean(axis=0), s_e.mean(axis=0))

    def training_texture_params(self, identity, pose, illumination, expression):
        t_i, t_p, t_l, t_e = self.texture_modes_
        return TextureParams(t_i[identity].copy(), t_p[pose].copy(), t_l[illumination].copy(),
                             t_e[expression].copy())

    # -- synthesis ----------------------------------------------------------
    def model_shape(self, identity, pose, expression):
        """Shape in the normalised model frame, as an ``(L, 2)`` array."""
        check_fitted(self, ["core_shape_"])
        coeffs = _check_coeffs([identity, pose, expression], self.shape_ranks_, "shape")
        v = self.core_shape_
        for c in reversed(coeffs):
            v = np.tensordot(v, c, axes=([v.ndim - 2], [0]))
        return (self.mean_shape_ + v).reshape(-1, 2)

    def synthesize_shape(self, params):
        """Landmarks of ``params`` (a :class:`ShapeParams` or its vector) in image coordinates."""
        if not isinstance(params, ShapeParams):
            params = self.shape_params_from_vector(params)
        return apply_affine(self.model_shape(params.identity, params.pose, params.expression),
                            params.affine)

    def synthesize_shapes(self, param_matrix):
        """Vectorised :meth:`synthesize_shape` for rows of a parameter matrix."""
        p = np.atleast_2d(np.asarray(param_matrix, dtype=np.float64))
        if p.shape[1] != self.n_shape_params:
            raise InvalidArgumentError("parameter matrix has the wrong number of columns")
        r_i, r_p, _ = self.shape_ranks_
        a_i, a_p, a_e = p[:, 4:4 + r_i], p[:, 4 + r_i:4 + r_i + r_p], p[:, 4 + r_i + r_p:]
        v = np.einsum("ijkf,nk->nijf", self.core_shape_, a_e)
        v = np.einsum("nijf,nj->nif", v, a_p)
        v = np.einsum("nif,ni->nf", v, a_i)
        pts = (self.mean_shape_ + v).reshape(len(p), -1, 2)
        mult = p[:, 0] * np.exp(1j * p[:, 1])
        z = (pts[..., 0] + 1j * pts[..., 1]) * mult[:, None] + (p[:, 2] + 1j * p[:, 3])[:, None]
        return np.stack([z.real, z.imag], axis=-1)

    def synthesize_texture(self, params):
        """Raw texture vector of :class:`TextureParams` (not clipped)."""
        check_fitted(self, ["core_shape_"])
        if not self.has_texture:
            raise InvalidArgumentError("model was built without a texture tensor")
        if not isinstance(params, TextureParams):
            v = np.asarray(params, dtype=np.float64)
            bounds = np.cumsum((0,) + self.texture_ranks_)
            if v.shape != (bounds[-1],):
                raise InvalidArgumentError("texture parameter vector has the wrong length")
            params = TextureParams(*(v[a:b] for a, b in zip(bounds[:-1], bounds[1:])))
        coeffs = _check_coeffs([params.identity, params.pose, params.illumination,
                                params.expression], self.texture_ranks_, "texture")
        v = self.core_texture_
        for c in reversed(coeffs):
            v = np.tensordot(v, c, axes=([v.ndim - 2], [0]))
        return self.mean_texture_ + v

    # -- projection ---------------------------------------------------------
    def project_shape(self, shape, init=None, rounds=5, als_rounds=5):
        """Least-squares model parameters of an image-frame shape.

        Alternates a similarity fit of the current model shape onto ``shape``
        with per-mode least squares for the coefficients in the model frame.
        ``init`` (a :class:`ShapeParams`) seeds the coefficients; by default
        the row means are used.
        """
        pts = check_points(shape, n_points=self.n_points)
        inits = None if init is None else [init]
        return self.project_shapes(pts[None], inits, rounds, als_rounds)[0]

    def project_shapes(self, shapes, inits=None, rounds=5, als_rounds=5):
        """Vectorised :meth:`project_shape` for an ``(N, L, 2)`` stack."""
        check_fitted(self, ["core_shape_"])
        pts = np.asarray(shapes, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[1:] != (self.n_points, 2) or not np.all(np.isfinite(pts)):
            raise InvalidArgumentError(f"shapes must be finite (N, {self.n_points}, 2) arrays")
        n = len(pts)
        if inits is None:
            inits = [self.mean_shape_params()] * n
        coeffs = [np.array([getattr(q, f) for q in inits], dtype=np.float64)
                  for f in ("identity", "pose", "expression")]
        target = pts[..., 0] + 1j * pts[..., 1]
        for _ in range(rounds):
            mult, offset = _batch_similarity(self._batch_model_shapes(coeffs), target)
            local = (target - offset[:, None]) / mult[:, None]
            local = np.stack([local.real, local.imag], axis=-1).reshape(n, -1)
            coeffs = _als_batch(self.core_shape_, local - self.mean_shape_, coeffs, als_rounds)
        mult, offset = _batch_similarity(self._batch_model_shapes(coeffs), target)
        return [ShapeParams(AffineParams.from_complex(mult[k], offset[k]),
                            coeffs[0][k], coeffs[1][k], coeffs[2][k]) for k in range(n)]

    def _batch_model_shapes(self, coeffs):
        v = np.einsum("ijkf,ni,nj,nk->nf", self.core_shape_, *coeffs, optimize=True)
        z = (self.mean_shape_ + v).reshape(len(v), -1, 2)
        return z[..., 0] + 1j * z[..., 1]

    def estimate_texture_params(self, texture, rounds=5, return_trace=False):
        """Alternating least squares estimate of the texture coefficients.

        Starts from the mode-matrix row means and cycles through identity,
        pose, illumination and expression ``rounds`` times; the residual
        never increases across mode updates.
        """
        check_fitted(self, ["core_shape_"])
        if not self.has_texture:
            raise InvalidArgumentError("model was built without a texture tensor")
        t = np.asarray(texture, dtype=np.float64)
        if t.shape != self.mean_texture_.shape:
            raise InvalidArgumentError(
                f"texture length {t.shape} does not match the model {self.mean_texture_.shape}")
        target = t - self.mean_texture_
        starts = [[m.mean(axis=0) for m in self.texture_modes_]]
        seed = _rank_one_start(self.core_texture_, target, starts[0])
        if seed is not None:
            starts.insert(0, seed)
        best = None
        for init in starts:
            trace, flags = [], []
            coeffs = _als_solve(self.core_texture_, target, init, rounds, trace, flags)
            if best is None or trace[-1] < best[1][-1]:
                best = (coeffs, trace, flags)
        coeffs, trace, flags = best
        params = TextureParams(*coeffs)
        self.rank_deficient_modes_ = sorted(set(flags))
        if return_trace:
            return params, trace
        return params

    def interpolate_pose(self, row_a, row_b, t):
        """Pose coefficients ``(1 - t) S_p[row_a] + t S_p[row_b]``."""
        if not 0.0 <= t <= 1.0:
            raise InvalidArgumentError(f"interpolation weight must be in [0, 1], got {t}")
        s_p = self.shape_modes_[1]
        for r in (row_a, row_b):
            if not 0 <= r < s_p.shape[0]:
                raise InvalidArgumentError(f"pose row {r} out of range")
        return (1.0 - t) * s_p[row_a] + t * s_p[row_b]


def _rank_one_start(core, target, mean_rows, budget=5e9, sweeps=200):
    """Rank-one coefficient start from the min-norm coefficient tensor.

    After centering, the outer product of the mode-matrix row means
    synthesises zero, so the min-norm solution is only defined up to that
    direction; the rank-one fit alternates over it. Returns ``None`` when the
    dense least-squares solve would be too costly.
    """
    ranks = core.shape[:-1]
    n_coef = int(np.prod(ranks))
    if core.shape[-1] * n_coef ** 2 > budget:
        return None
    g = core.reshape(n_coef, -1).T
    z = np.linalg.lstsq(g, target, rcond=None)[0].reshape(ranks)
    if not np.any(z):
        return None
    null = mean_rows[0]
    for v in mean_rows[1:]:
        null = np.multiply.outer(null, v)
    null_sq = float(np.sum(null * null))
    vecs = [leading_left_singular_vectors(z, n, 1)[0][:, 0] for n in range(len(ranks))]
    c = 0.0
    for _ in range(sweeps):
        y = z + c * null
        for n in range(len(ranks)):
            w = y
            for k in range(len(ranks) - 1, -1, -1):
                if k != n:
                    w = np.tensordot(w, vecs[k], axes=([k], [0]))
            vecs[n] = w / max(np.linalg.norm(w), 1e-300) if n < len(ranks) - 1 else w
        x = vecs[0]
        for v in vecs[1:]:
            x = np.multiply.outer(x, v)
        if null_sq > 0:
            c = float(np.sum((x - z) * null)) / null_sq
    return vecs


def _center(x, mean):
    if mean is not None:
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (x.shape[-1],):
            raise InvalidArgumentError("mean length does not match the feature axis")
        return x, mean
    mean = x.reshape(-1, x.shape[-1]).mean(axis=0)
    return x - mean, mean


def _compressed_texture_core(t, ranks):
    ranks = check_ranks(ranks, t.shape, "texture_ranks")
    full_feature = check_ranks(None, t.shape)[FEATURE]
    modes = tuple(leading_left_singular_vectors(t, n, ranks[n])[0] for n in SAMPLE_AXES)
    core = multi_mode_product(t, modes, SAMPLE_AXES, transpose=True)
    if ranks[FEATURE] < full_feature:
        u = leading_left_singular_vectors(core, FEATURE, ranks[FEATURE])[0]
        core = mode_n_product(mode_n_product(core, u.T, FEATURE), u, FEATURE)
    # with a full-rank feature basis, folding it back into the core is the identity
    return core, modes


def _check_coeffs(coeffs, ranks, what):
    out = []
    for c, r in zip(coeffs, ranks):
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (r,):
            raise InvalidArgumentError(
                f"{what} coefficient vector of length {c.shape} does not match rank {r}")
        out.append(c)
    return out


def build_utaam(shape_tensor, texture_tensor=None, shape_ranks=None, texture_ranks=None,
                mesh=None, shape_mean=None, texture_mean=None, hog=None):
    """Functional form of ``UTAAM(...).fit(...)``."""
    return UTAAM(shape_ranks, texture_ranks, hog=hog).fit(
        shape_tensor, texture_tensor, mesh=mesh, shape_mean=shape_mean, texture_mean=texture_mean)


@dataclass(frozen=True)
class AssembledTensors:
    shape_tensor: np.ndarray
    shape_mean: np.ndarray
    texture_tensor: np.ndarray
    texture_mean: np.ndarray
    sample_mask: np.ndarray
    init_rules: np.ndarray


def assemble_tensors(grid, shapes, textures=None, completion="tucker", init="variation_aware",
                     shape_ranks=None, texture_ranks=None, max_iter=200, tol=1e-6,
                     random_state=0):
    """Stack per-cell vectors into centred 5-way tensors, completing missing cells.

    Parameters
    ----------
    grid : SampleGrid
    shapes : array_like, shape (I_i, I_p, I_l, I_e, 2L)
        Aligned shape vectors; values at missing cells are ignored.
    textures : array_like, shape (I_i, I_p, I_l, I_e, I_t), optional
    completion : {"tucker", "cp", "init"}
        Solver applied after initialisation; ``"init"`` keeps the
        initialisation as the completion.
    """
    from .completion import (MaskedTensor, complete_cp_weighted, complete_tucker_power,
                             initialize_missing)

    if completion not in ("tucker", "cp", "init"):
        raise InvalidArgumentError(f"unknown completion solver {completion!r}")
    present = grid.present
    missing_pose = [p for p in range(grid.extents[POSE]) if not present[:, p].any()]
    if missing_pose:
        raise InvalidArgumentError(f"every sample is missing for pose index {missing_pose[0]}")

    def complete(x, ranks, seed):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[:4] != grid.extents:
            raise InvalidArgumentError("tensor sample axes do not match the grid extents")
        data = np.where(present[..., None], x, 0.0)
        if grid.n_missing == 0:
            return data, np.full(grid.extents, "observed")
        mask = np.broadcast_to(present[..., None], data.shape).astype(np.float64)
        mt = MaskedTensor(data, mask)
        filled, rules = initialize_missing(mt, init, seed)
        if completion == "tucker":
            filled, _ = complete_tucker_power(mt, filled, ranks, max_iter, tol)
        elif completion == "cp":
            rank = max(ranks) if ranks is not None else max(grid.extents)
            filled, _ = complete_cp_weighted(mt, filled, rank, max_iter, tol, random_state=seed)
        return filled, rules

    s, rules = complete(shapes, shape_ranks, random_state)
    s, s_mean = _center(s, None)
    t = t_mean = None
    if textures is not None:
        t, _ = complete(textures, texture_ranks, random_state)
        t, t_mean = _center(t, None)
    return AssembledTensors(s, s_mean, t, t_mean, present.copy(), rules)


class PCAAAM(BaseEstimator):
    """Classical PCA shape and texture models.

    Parameters
    ----------
    variance : float
        Retain the fewest components whose eigenvalues explain at least this
        fraction of the total variance.
    """

    def __init__(self, variance=0.98):
        self.variance = variance

    def fit(self, shapes, textures=None):
        s = check_tensor(shapes, "shapes", min_order=2)
        if s.shape[0] < 2:
            raise InvalidArgumentError("PCA needs at least two samples")
        self.mean_shape_, self.shape_components_, self.shape_eigenvalues_ = _pca(s, self.variance)
        if textures is not None:
            t = check_tensor(textures, "textures", min_order=2)
            if t.shape[0] != s.shape[0]:
                raise InvalidArgumentError("need one texture per shape")
            (self.mean_texture_, self.texture_components_,
             self.texture_eigenvalues_) = _pca(t, self.variance)
        return self

    def shape_from_params(self, alpha):
        return self.mean_shape_ + self.shape_components_ @ np.asarray(alpha, dtype=np.float64)

    def texture_from_params(self, beta):
        return self.mean_texture_ + self.texture_components_ @ np.asarray(beta, dtype=np.float64)

    def shape_params(self, shape):
        return self.shape_components_.T @ (np.ravel(shape) - self.mean_shape_)

    def texture_params(self, texture):
        return self.texture_components_.T @ (np.asarray(texture) - self.mean_texture_)


def _pca(x, fraction):
    mean = x.mean(axis=0)
    u, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    eig = sv ** 2 / (x.shape[0] - 1)
    nonzero = sv > 1e-12 * max(sv[0], 1e-300)
    eig, vt = eig[nonzero], vt[nonzero]
    if eig.size == 0:
        return mean, np.zeros((x.shape[1], 0)), eig
    ratio = np.cumsum(eig) / eig.sum()
    k = int(np.searchsorted(ratio, fraction - 1e-12) + 1)
    k = min(k, eig.size)
    return mean, vt[:k].T.copy(), eig[:k]


def build_pca_aam(shapes, textures=None, variance=0.98):
    return PCAAAM(variance).fit(shapes, textures)


@dataclass(frozen=True)
class VariationModel:
    """Variation-specific linear model: ``mean + basis @ coefficients``."""

    mean: np.ndarray
    basis: np.ndarray


def build_taam_variation_models(shape_tensor, texture_tensor, shape_mean, texture_mean,
                                pose_weights, expression_weights, illumination_weights,
                                shape_ranks=None, texture_ranks=None):
    """Variation-specific shape and texture models of a classical tensor AAM.

    The shape basis contracts the pose and expression modes of the shape core
    with mixture-weighted mode-matrix rows and unfolds along the feature mode;
    the texture basis does the same with the illumination mode. The mean is
    the mixture-weighted average of the per-state slice means.

    Returns
    -------
    shape_model, texture_model : VariationModel
        ``texture_model`` is ``None`` without a texture tensor.
    """
    s = check_tensor(shape_tensor, "shape_tensor")
    i_p, i_l, i_e = s.shape[POSE], s.shape[ILLUMINATION], s.shape[EXPRESSION]
    c_p = check_probability_simplex(pose_weights, "pose_weights")
    c_e = check_probability_simplex(expression_weights, "expression_weights")
    c_l = check_probability_simplex(illumination_weights, "illumination_weights")
    if c_p.shape != (i_p,) or c_e.shape != (i_e,) or c_l.shape != (i_l,):
        raise InvalidArgumentError("mixture weights must have one entry per variation state")

    tucker = hosvd(s, shape_ranks)
    s_i, s_p, s_l, s_e, s_s = tucker.factors
    b = mode_n_product(tucker.core, c_p @ s_p, POSE)
    b = mode_n_product(b, c_e @ s_e, EXPRESSION)
    b = mode_n_product(b, s_s, FEATURE)
    slice_means = s.mean(axis=(IDENTITY, ILLUMINATION)) + shape_mean
    shape_model = VariationModel(
        mean=np.einsum("p,e,pef->f", c_p, c_e, slice_means),
        basis=unfold(b, FEATURE))

    texture_model = None
    if texture_tensor is not None:
        t = check_tensor(texture_tensor, "texture_tensor")
        tucker_t = hosvd(t, texture_ranks)
        t_l, t_t = tucker_t.factors[ILLUMINATION], tucker_t.factors[FEATURE]
        bt = mode_n_product(tucker_t.core, c_l @ t_l, ILLUMINATION)
        bt = mode_n_product(bt, t_t, FEATURE)
        t_slices = t.mean(axis=(IDENTITY, POSE, EXPRESSION)) + texture_mean
        texture_model = VariationModel(mean=c_l @ t_slices, basis=unfold(bt, FEATURE))
    return shape_model, texture_model


MODEL_MAGIC = b"UTAM"
MODEL_VERSION = 1


def save_model(path, model, cascade=None):
    """Write a fitted model (and optionally its cascade) as a chunked container."""
    from .fitting import cascade_to_bytes
    from .io import tensor_to_bytes, tensors_to_bytes, write_container

    check_fitted(model, ["core_shape_"])
    chunks = {"MEAN_S": tensor_to_bytes(model.mean_shape_),
              "CORE_S": tensor_to_bytes(model.core_shape_)}
    for tag, m in zip("IPE", model.shape_modes_):
        chunks[f"MODE_S_{tag}"] = tensor_to_bytes(m)
    if model.has_texture:
        chunks["MEAN_T"] = tensor_to_bytes(model.mean_texture_)
        chunks["CORE_T"] = tensor_to_bytes(model.core_texture_)
        for tag, m in zip("IPLE", model.texture_modes_):
            chunks[f"MODE_T_{tag}"] = tensor_to_bytes(m)
    if model.mesh_ is not None:
        chunks["MESH"] = tensors_to_bytes([model.mesh_.points,
                                           model.mesh_.triangles.astype(np.float64)])
    chunks["HOG"] = tensor_to_bytes(model.hog_.to_vector())
    if cascade is not None:
        chunks["CASC"] = cascade_to_bytes(cascade)
    write_container(path, MODEL_MAGIC, MODEL_VERSION, chunks)


def load_model(path):
    """Read a model file; returns ``(model, cascade)`` with ``cascade`` possibly ``None``."""
    from .exceptions import DataFormatError
    from .fitting import cascade_from_bytes
    from .geometry import ReferenceMesh
    from .io import read_container, tensor_from_bytes, tensors_from_bytes

    version, chunks = read_container(path, MODEL_MAGIC)
    if version != MODEL_VERSION:
        raise DataFormatError(f"unsupported model version {version}", path)

    def tensor(name):
        if name not in chunks:
            raise DataFormatError(f"model file lacks the {name} chunk", path)
        x, end = tensor_from_bytes(chunks[name], path=path)
        if end != len(chunks[name]):
            raise DataFormatError(f"trailing bytes in chunk {name}", path)
        return x

    model = UTAAM()
    model.mean_shape_ = tensor("MEAN_S")
    model.core_shape_ = tensor("CORE_S")
    model.shape_modes_ = tuple(tensor(f"MODE_S_{t}") for t in "IPE")
    if "CORE_T" in chunks:
        model.mean_texture_ = tensor("MEAN_T")
        model.core_texture_ = tensor("CORE_T")
        model.texture_modes_ = tuple(tensor(f"MODE_T_{t}") for t in "IPLE")
    else:
        model.mean_texture_ = model.core_texture_ = model.texture_modes_ = None
    model.mesh_ = None
    if "MESH" in chunks:
        arrays, end = tensors_from_bytes(chunks["MESH"], count=2, path=path)
        if len(arrays) != 2 or end != len(chunks["MESH"]):
            raise DataFormatError("MESH chunk must hold the points and the triangles", path)
        model.mesh_ = ReferenceMesh.from_triangulation(arrays[0], arrays[1].astype(np.int64))
    model.hog_ = HogSpec.from_vector(tensor("HOG"))
    model.hog = model.hog_
    if model.core_shape_.ndim != 4 or model.core_shape_.shape[3] != model.mean_shape_.size:
        raise DataFormatError("shape core does not match the mean shape", path)
    if tuple(m.shape[1] for m in model.shape_modes_) != model.core_shape_.shape[:3]:
        raise DataFormatError("shape mode matrices do not match the core", path)
    cascade = None
    if "CASC" in chunks:
        cascade = cascade_from_bytes(chunks["CASC"], model, path)
        n_f = model.hog_.n_features(model.n_points)
        if any(s.A.shape != (model.n_shape_params, n_f) for s in cascade.stages_):
            raise DataFormatError("cascade dimensions do not match the model", path)
    return model, cascade
