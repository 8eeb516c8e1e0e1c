"""Cascaded linear regression fitting of a UT-AAM, plus evaluation metrics."""
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator

from .exceptions import DataFormatError, InvalidArgumentError, NumericalError
from .features import extract_features_batch
from .geometry import AffineParams, warp_to_reference
from .io import tensor_from_bytes, tensor_to_bytes
from .validation import check_fitted, check_points, check_tensor

DEFAULT_STAGES = 5
DEFAULT_PERTURBATIONS = 10


@dataclass(frozen=True)
class WeakRegressor:
    """Linear update ``delta_p = A f + b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or b.shape != (a.shape[0],):
            raise InvalidArgumentError("A must be (N_p, N_f) and b of length N_p")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericalError("weak regressor has non-finite entries")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)

    def predict(self, features):
        return np.asarray(features) @ self.A.T + self.b

    def scaled(self, eta):
        return WeakRegressor(eta * self.A, eta * self.b)


def default_ridge_weight(features):
    """``1e-3 * trace(Fc^T Fc) / N_f`` for the mean-centred feature matrix."""
    f = np.asarray(features, dtype=np.float64)
    fc = f - f.mean(axis=0)
    return 1e-3 * float(np.sum(fc * fc)) / f.shape[1]


def train_weak(features, deltas, alpha=None):
    """Closed-form ridge regressor from features to parameter updates.

    Minimises ``sum ||A f_n + b - d_n||^2 + alpha ||A||_F^2``. The offset is
    unpenalised, so it absorbs the feature and target means; the slope comes
    from the normal equations of the centred data, in primal or dual form
    depending on which Gram matrix is smaller.

    Parameters
    ----------
    features : ndarray, shape (N, N_f)
    deltas : ndarray, shape (N, N_p)
    alpha : float, optional
        Ridge weight; defaults to :func:`default_ridge_weight`.
    """
    f = check_tensor(features, "features", min_order=2)
    d = check_tensor(deltas, "deltas", min_order=2)
    if f.ndim != 2 or d.ndim != 2 or f.shape[0] != d.shape[0]:
        raise InvalidArgumentError("features and deltas must be matrices with matching rows")
    if alpha is None:
        alpha = default_ridge_weight(f)
    if alpha < 0:
        raise InvalidArgumentError("ridge weight must be nonnegative")
    f_mean, d_mean = f.mean(axis=0), d.mean(axis=0)
    fc, dc = f - f_mean, d - d_mean
    n, n_f = fc.shape
    if alpha == 0:
        if np.linalg.matrix_rank(fc) < n_f:
            raise NumericalError("singular normal matrix with zero ridge weight; use a positive weight")
        a_t = linalg.solve(fc.T @ fc, fc.T @ dc, assume_a="pos")
    elif n < n_f:
        gram = fc @ fc.T
        gram[np.diag_indices_from(gram)] += alpha
        a_t = fc.T @ linalg.solve(gram, dc, assume_a="pos")
    else:
        gram = fc.T @ fc
        gram[np.diag_indices_from(gram)] += alpha
        a_t = linalg.solve(gram, fc.T @ dc, assume_a="pos")
    a = a_t.T
    return WeakRegressor(a, d_mean - a @ f_mean)


def pt_pt_error(predicted, truth):
    """Mean Euclidean distance between corresponding landmarks."""
    p = check_points(predicted, "predicted")
    t = check_points(truth, "truth")
    if p.shape != t.shape:
        raise InvalidArgumentError(f"landmark counts differ: {len(p)} vs {len(t)}")
    return float(np.mean(np.hypot(*(p - t).T)))


def pt_pt_errors(predicted, truth):
    """Row-wise :func:`pt_pt_error` for ``(n, L, 2)`` stacks."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidArgumentError("shape stacks differ in size")
    return np.mean(np.hypot(p[..., 0] - t[..., 0], p[..., 1] - t[..., 1]), axis=-1)


def normalized_error(predicted, truth, left_eye, right_eye):
    """pt-pt error divided by the distance between the truth's eye centroids."""
    t = check_points(truth, "truth")
    left, right = list(left_eye), list(right_eye)
    if not left or not right:
        raise InvalidArgumentError("eye index sets must be non-empty")
    iod = float(np.linalg.norm(t[left].mean(axis=0) - t[right].mean(axis=0)))
    if iod == 0:
        raise InvalidArgumentError("inter-ocular distance is zero")
    return pt_pt_error(predicted, t) / iod


def aam_fitting_objective(image, model, alpha, beta, mesh, return_info=False):
    """Squared texture residual of a PCA AAM at ``(alpha, beta)``.

    The image is warped from the shape generated by ``alpha`` to ``mesh``
    and compared with the texture generated by ``beta``. Samples falling
    outside the image are edge-clamped and reported with a warning.
    """
    shape = model.shape_from_params(alpha).reshape(-1, 2)
    warped, info = warp_to_reference(image, shape, mesh, return_info=True)
    r = model.texture_from_params(beta) - warped
    value = float(r @ r)
    if info.n_clamped_samples:
        warnings.warn(f"{info.n_clamped_samples} texture samples fell outside the image and were clamped",
                      RuntimeWarning, stacklevel=2)
    if return_info:
        return value, info
    return value


@dataclass(frozen=True)
class InitSpec:
    """Placement statistics and jitter ranges used to start the cascade.

    The test-time default places the mean shape with the mean training
    scale and rotation, offset ``(dx, dy)`` from the image centre.
    """

    scale: float = 1.0
    theta: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    scale_jitter: float = 0.1
    rotation_jitter: float = np.deg2rad(10.0)
    translation_jitter: float = 0.05

    def to_vector(self):
        return np.array([self.scale, self.theta, self.dx, self.dy, self.scale_jitter,
                         self.rotation_jitter, self.translation_jitter])

    @classmethod
    def from_vector(cls, v):
        return cls(*(float(x) for x in v))

    def default_params(self, model, image_shape):
        h, w = image_shape[:2]
        g = AffineParams(self.scale, self.theta, w / 2.0 + self.dx, h / 2.0 + self.dy)
        return model.mean_shape_params(g)


def _face_size(model):
    pts = model.mean_shape_.reshape(-1, 2)
    return float(np.max(pts.max(axis=0) - pts.min(axis=0)))


def jittered_affine(g, face_size, spec, rng):
    """Randomly perturb a similarity within the ranges of ``spec``."""
    s = g.scale * rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter)
    th = g.theta + rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
    span = spec.translation_jitter * face_size * g.scale
    tx, ty = g.tx + rng.uniform(-span, span), g.ty + rng.uniform(-span, span)
    return AffineParams(s, th, tx, ty)


def perturbed_initializations(model, targets, n_perturbations, spec=InitSpec(), random_state=0):
    """``n_perturbations`` starting vectors per ground-truth parameter row.

    Every start jitters the ground-truth similarity. Even-numbered starts use
    the mean coefficients; odd-numbered ones borrow the coefficients of
    another randomly chosen training sample.

    Returns
    -------
    starts : ndarray, shape (N * K, N_p)
    index : ndarray, shape (N * K,)
        Training row of each start.
    """
    rng = np.random.default_rng(random_state)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = len(targets)
    mean_coeffs = model.mean_shape_params().to_vector()[4:]
    size = _face_size(model)
    starts = np.empty((n * n_perturbations, targets.shape[1]))
    index = np.repeat(np.arange(n), n_perturbations)
    for row, i in enumerate(index):
        k = row % n_perturbations
        g = jittered_affine(AffineParams.from_vector(targets[i, :4]), size, spec, rng)
        if k % 2 == 1 and n > 1:
            j = (i + rng.integers(1, n)) % n
            coeffs = targets[j, 4:]
        else:
            coeffs = mean_coeffs
        starts[row, :4] = g.to_vector()
        starts[row, 4:] = coeffs
    return starts, index


def _as_stack(images):
    if isinstance(images, np.ndarray) and images.ndim == 3:
        return images
    images = list(images)
    if len({np.shape(im) for im in images}) > 1:
        raise InvalidArgumentError("all images in a batch must have the same size")
    return np.stack([np.asarray(im) for im in images])


class CascadeRegressor(BaseEstimator):
    """Cascade of linear regressors from HOG features to shape-parameter updates.

    Parameters
    ----------
    model : UTAAM
        Fitted shape model; its HOG settings define the features.
    n_stages : int
    alpha : float, optional
        Ridge weight per stage; ``None`` uses :func:`default_ridge_weight`.
    n_perturbations : int
        Starting points per training image.
    init_spec : InitSpec, optional
        Jitter ranges; placement statistics are re-estimated during ``fit``.
    random_state : int

    Attributes
    ----------
    stages_ : list of WeakRegressor
    step_sizes_ : list of float
        Damping applied to each stage so the training error never increases.
    train_errors_ : list of float
        Mean training pt-pt error before the first and after every stage.
    """

    def __init__(self, model=None, n_stages=DEFAULT_STAGES, alpha=None,
                 n_perturbations=DEFAULT_PERTURBATIONS, init_spec=None, random_state=0):
        self.model = model
        self.n_stages = n_stages
        self.alpha = alpha
        self.n_perturbations = n_perturbations
        self.init_spec = init_spec
        self.random_state = random_state

    def ground_truth_params(self, shapes, coefficient_init=None):
        """Least-squares model parameters of annotated shapes, one row each."""
        params = self.model.project_shapes(shapes, coefficient_init)
        return np.array([q.to_vector() for q in params])

    def fit(self, images, shapes, coefficient_init=None, targets=None):
        """Train the cascade.

        Parameters
        ----------
        images : ndarray, shape (N, H, W) or sequence of equal-size rasters
        shapes : ndarray, shape (N, L, 2)
            Annotated landmarks in image coordinates.
        coefficient_init : sequence of ShapeParams, optional
            Starting coefficients for the ground-truth projection.
        targets : ndarray, shape (N, N_p), optional
            Precomputed ground-truth parameters (skips the projection).
        """
        model = self.model
        check_fitted(model, ["core_shape_"])
        if self.n_stages < 1:
            raise InvalidArgumentError("need at least one stage")
        if self.n_perturbations < 1:
            raise InvalidArgumentError("need at least one perturbation per image")
        shapes = np.asarray(shapes, dtype=np.float64)
        if len(shapes) == 0:
            raise InvalidArgumentError("empty training set")
        images = _as_stack(images)
        if len(images) != len(shapes):
            raise InvalidArgumentError("need one annotated shape per image")
        if targets is None:
            targets = self.ground_truth_params(shapes, coefficient_init)
        targets = np.asarray(targets, dtype=np.float64)

        base = self.init_spec if self.init_spec is not None else InitSpec()
        h, w = images.shape[1:3]
        self.init_spec_ = InitSpec(
            scale=float(np.mean(targets[:, 0])), theta=float(np.mean(targets[:, 1])),
            dx=float(np.mean(targets[:, 2]) - w / 2.0), dy=float(np.mean(targets[:, 3]) - h / 2.0),
            scale_jitter=base.scale_jitter, rotation_jitter=base.rotation_jitter,
            translation_jitter=base.translation_jitter)

        p, index = perturbed_initializations(model, targets, self.n_perturbations, base,
                                             self.random_state)
        truth = shapes[index]
        current = model.synthesize_shapes(p)
        err = float(np.mean(pt_pt_errors(current, truth)))
        self.train_errors_ = [err]
        self.stages_, self.step_sizes_ = [], []
        hog = model.hog_
        for _ in range(self.n_stages):
            feats = _features(images, index, current, hog)
            weak = train_weak(feats, targets[index] - p, self.alpha)
            step = weak.predict(feats)
            eta = 1.0
            for _ in range(40):
                cand = p + eta * step
                cand_shapes = model.synthesize_shapes(cand)
                cand_err = float(np.mean(pt_pt_errors(cand_shapes, truth)))
                if cand_err <= err:
                    break
                eta *= 0.5
            else:
                eta, cand, cand_shapes, cand_err = 0.0, p, current, err
            self.stages_.append(weak if eta == 1.0 else weak.scaled(eta))
            self.step_sizes_.append(eta)
            p, current, err = cand, cand_shapes, cand_err
            self.train_errors_.append(err)
        self.n_features_ = hog.n_features(model.n_points)
        return self

    def predict_params(self, images, init, n_jobs=1):
        """Run every stage from ``init`` (one parameter row per image)."""
        check_fitted(self, ["stages_"])
        return run_stages(self.model, self.stages_, images, init, n_jobs)

    def predict(self, images, init=None):
        """Fitted landmarks, ``(N, L, 2)``; default starts use the stored placement."""
        images = _as_stack(images)
        if init is None:
            init = np.array([self.init_spec_.default_params(self.model, im.shape).to_vector()
                             for im in images])
        return self.model.synthesize_shapes(self.predict_params(images, init))


def _features(images, index, shapes, hog, n_jobs=1):
    if len(index) == len(images) and np.array_equal(index, np.arange(len(images))):
        batch = images
    else:
        batch = images[index]
    return extract_features_batch(batch, shapes, hog, n_jobs)


def run_stages(model, stages, images, init, n_jobs=1):
    """Apply ``stages`` in order to parameter rows ``init``, one per image."""
    images = _as_stack(images)
    p = np.array(np.atleast_2d(init), dtype=np.float64)
    if p.shape != (len(images), model.n_shape_params):
        raise InvalidArgumentError("need one initial parameter vector per image")
    index = np.arange(len(images))
    for m, stage in enumerate(stages):
        shapes = model.synthesize_shapes(p)
        if not np.all(np.isfinite(shapes)):
            raise NumericalError(f"non-finite shape before stage {m + 1}", iteration=m + 1)
        p = p + stage.predict(_features(images, index, shapes, model.hog_, n_jobs))
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite parameters after stage {m + 1}", iteration=m + 1)
    return p


def fit_image(image, cascade, model, init):
    """Fit one image: cascade updates, then texture coefficients at the final shape.

    Parameters
    ----------
    image : ndarray, shape (H, W)
    cascade : CascadeRegressor
    model : UTAAM
    init : ShapeParams or ndarray

    Returns
    -------
    params : ShapeParams
    texture : TextureParams or None
        ``None`` for shape-only models.
    """
    v = init.to_vector() if hasattr(init, "to_vector") else np.asarray(init, dtype=np.float64)
    if v.shape != (model.n_shape_params,):
        raise InvalidArgumentError("initial parameters do not match the model")
    img = np.asarray(image)
    check_fitted(cascade, ["stages_"])
    p = run_stages(model, cascade.stages_, img[None], v[None])[0]
    params = model.shape_params_from_vector(p)
    q = None
    if model.has_texture and model.mesh_ is not None:
        texture = warp_to_reference(img, model.synthesize_shape(params), model.mesh_)
        q = model.estimate_texture_params(texture)
    return params, q


def estimate_texture_params(texture, model, rounds=5):
    """Alternating least-squares texture coefficients (see ``UTAAM.estimate_texture_params``)."""
    return model.estimate_texture_params(texture, rounds=rounds)


def cascade_to_bytes(cascade):
    """``u32 M``, then ``A_m`` and ``b_m`` per stage, then the init spec vector."""
    check_fitted(cascade, ["stages_"])
    parts = [struct.pack("<I", len(cascade.stages_))]
    for stage in cascade.stages_:
        parts += [tensor_to_bytes(stage.A), tensor_to_bytes(stage.b)]
    parts.append(tensor_to_bytes(cascade.init_spec_.to_vector()))
    return b"".join(parts)


def cascade_from_bytes(buf, model=None, path=None):
    if len(buf) < 4:
        raise DataFormatError("truncated CASC chunk", path)
    (m,) = struct.unpack_from("<I", buf, 0)
    if m < 1:
        raise DataFormatError("cascade must have at least one stage", path)
    pos = 4
    stages = []
    for _ in range(m):
        a, pos = tensor_from_bytes(buf, pos, path)
        b, pos = tensor_from_bytes(buf, pos, path)
        stages.append(WeakRegressor(a, b))
    spec = InitSpec()
    if pos < len(buf):
        v, pos = tensor_from_bytes(buf, pos, path)
        spec = InitSpec.from_vector(v)
    if pos != len(buf):
        raise DataFormatError("trailing bytes in CASC chunk", path)
    cascade = CascadeRegressor(model, n_stages=m)
    cascade.stages_ = stages
    cascade.step_sizes_ = [1.0] * m
    cascade.init_spec_ = spec
    return cascade


def train_cascade(model, images, shapes, n_stages=DEFAULT_STAGES, alpha=None,
                  n_perturbations=DEFAULT_PERTURBATIONS, random_state=0, cells=None):
    """Train a :class:`CascadeRegressor`.

    ``cells`` (identity, pose, illumination, expression per image) seed the
    ground-truth projection with the sample's own mode-matrix rows.
    """
    coefficient_init = None
    if cells is not None:
        coefficient_init = [model.training_shape_params(c[0], c[1], c[3]) for c in cells]
    cascade = CascadeRegressor(model, n_stages=n_stages, alpha=alpha,
                               n_perturbations=n_perturbations, random_state=random_state)
    return cascade.fit(images, shapes, coefficient_init=coefficient_init)
