"""Shape alignment, reference meshes and piecewise-affine texture warping.

Shapes are ``(L, 2)`` arrays of ``(x, y)`` pixel coordinates with the origin
at the top-left corner, x to the right and y downwards. The interleaved
vector form ``[x1, y1, ..., xL, yL]`` is ``points.ravel()``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

from .exceptions import InvalidArgumentError
from .validation import check_image, check_points

_BARY_TOL = 1e-12
DEGENERATE_AREA = 1e-9


def _wrap_angle(theta):
    # into (-pi, pi]
    t = float(np.mod(theta + np.pi, 2 * np.pi) - np.pi)
    return np.pi if t == -np.pi else t


@dataclass(frozen=True)
class AffineParams:
    """Global similarity transform: ``x -> scale * R(theta) @ x + (tx, ty)``."""

    scale: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "theta", _wrap_angle(self.theta))

    @classmethod
    def from_complex(cls, a, t):
        """Build from the complex multiplier ``a = s e^{i theta}`` and offset ``t``."""
        return cls(abs(a), float(np.angle(a)), float(np.real(t)), float(np.imag(t)))

    @classmethod
    def from_vector(cls, v):
        s, th, tx, ty = (float(u) for u in v)
        return cls(s, th, tx, ty)

    def to_vector(self):
        return np.array([self.scale, self.theta, self.tx, self.ty])

    @property
    def multiplier(self):
        return self.scale * np.exp(1j * self.theta)

    @property
    def offset(self):
        return complex(self.tx, self.ty)

    def inverse(self):
        inv = 1.0 / self.multiplier
        return AffineParams.from_complex(inv, -inv * self.offset)

    def compose(self, other):
        """The transform applying ``other`` first and then ``self``."""
        return AffineParams.from_complex(self.multiplier * other.multiplier,
                                         self.multiplier * other.offset + self.offset)


def _to_complex(points):
    return points[:, 0] + 1j * points[:, 1]


def _to_points(z):
    return np.column_stack([z.real, z.imag])


def apply_affine(shape, g):
    """Map every landmark by scale-rotation followed by translation."""
    p = check_points(shape)
    c, s = np.cos(g.theta), np.sin(g.theta)
    rot = g.scale * np.array([[c, -s], [s, c]])
    return p @ rot.T + np.array([g.tx, g.ty])


def similarity_fit(source, target):
    """Least-squares similarity transform taking ``source`` onto ``target``."""
    zs = _to_complex(check_points(source))
    zt = _to_complex(check_points(target, n_points=len(zs)))
    cs, ct = zs.mean(), zt.mean()
    ds = zs - cs
    denom = np.vdot(ds, ds).real
    if denom <= 1e-24:
        raise InvalidArgumentError("degenerate shape: all points coincide")
    a = np.vdot(ds, zt - ct) / denom
    return AffineParams.from_complex(a, ct - a * cs)


def _normalize(z):
    zc = z - z.mean()
    size = np.sqrt(np.vdot(zc, zc).real)
    if size <= 1e-12:
        raise InvalidArgumentError("degenerate shape: all points coincide")
    return zc / size


def _orient(z, orientation):
    i, j = orientation
    d = z[j] - z[i]
    if abs(d) <= 1e-12:
        return z
    return z * (abs(d) / d)


def procrustes_align(shapes, max_iter=100, tol=1e-10, orientation=(0, -1)):
    """Generalized Procrustes analysis with similarity transforms.

    Every shape is aligned to the running mean, the mean is re-estimated and
    normalised to zero centroid and unit centroid size, until the mean moves by
    less than ``tol``. The mean's rotation is fixed intrinsically by making the
    vector from landmark ``orientation[0]`` to ``orientation[1]`` point along
    +x, so the result does not depend on the input poses.

    Returns
    -------
    aligned : ndarray, shape (n, L, 2)
    mean : ndarray, shape (L, 2)
    transforms : list of AffineParams
        ``apply_affine(aligned[k], transforms[k])`` reproduces ``shapes[k]``.
    """
    pts = [check_points(s) for s in shapes]
    if len(pts) < 2:
        raise InvalidArgumentError("Procrustes alignment needs at least two shapes")
    n_points = pts[0].shape[0]
    zs = [_to_complex(check_points(p, n_points=n_points)) for p in pts]
    for z in zs:
        _normalize(z)
    mean = _orient(_normalize(zs[0]), orientation)
    for _ in range(max_iter):
        aligned = [_align_to(z, mean)[0] for z in zs]
        new = _orient(_normalize(np.mean(aligned, axis=0)), orientation)
        delta = np.linalg.norm(new - mean)
        mean = new
        if delta < tol:
            break
    out, transforms = [], []
    for z in zs:
        a_z, g = _align_to(z, mean)
        out.append(_to_points(a_z))
        transforms.append(g)
    return np.stack(out), _to_points(mean), transforms


def _align_to(z, target):
    c = z.mean()
    zc = z - c
    a = np.vdot(zc, target) / np.vdot(zc, zc).real
    aligned = a * zc
    return aligned, AffineParams.from_complex(1.0 / a, c)


@dataclass(frozen=True)
class ReferenceMesh:
    """Reference shape, its triangulation and the texture sampling lattice.

    ``lattice`` holds integer ``(x, y)`` pixels inside the triangulated hull in
    raster order (row by row, left to right); ``lattice_triangle`` is the
    lowest-index triangle containing each pixel and ``lattice_bary`` its
    barycentric coordinates in that triangle.
    """

    points: np.ndarray
    triangles: np.ndarray
    lattice: np.ndarray = field(repr=False)
    lattice_triangle: np.ndarray = field(repr=False)
    lattice_bary: np.ndarray = field(repr=False)

    @classmethod
    def from_triangulation(cls, points, triangles):
        points = check_points(points, "reference shape")
        triangles = np.asarray(triangles, dtype=np.int64)
        xmin, ymin = np.ceil(points.min(axis=0) - 1e-9).astype(int)
        xmax, ymax = np.floor(points.max(axis=0) + 1e-9).astype(int)
        ys, xs = np.mgrid[ymin:ymax + 1, xmin:xmax + 1]
        cand = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
        tri_idx, bary = locate_in_triangles(cand, points, triangles)
        inside = tri_idx >= 0
        return cls(points=points, triangles=triangles,
                   lattice=cand[inside].astype(np.int64),
                   lattice_triangle=tri_idx[inside],
                   lattice_bary=bary[inside])

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_pixels(self):
        return self.lattice.shape[0]

    @property
    def frame_size(self):
        """``(height, width)`` of a raster holding the whole lattice."""
        return int(self.lattice[:, 1].max()) + 1, int(self.lattice[:, 0].max()) + 1

    def texture_to_image(self, texture, fill_outside=True):
        """Scatter a texture vector back onto a raster of :attr:`frame_size`."""
        h, w = self.frame_size
        img = np.zeros((h, w))
        known = np.zeros((h, w), dtype=bool)
        img[self.lattice[:, 1], self.lattice[:, 0]] = texture
        known[self.lattice[:, 1], self.lattice[:, 0]] = True
        if fill_outside and not known.all():
            _, (iy, ix) = ndimage.distance_transform_edt(~known, return_indices=True)
            img = img[iy, ix]
        return img


def locate_in_triangles(query, vertices, triangles, tol=_BARY_TOL):
    """Lowest-index triangle containing each query point and its barycentrics.

    Points outside every triangle get index ``-1``.
    """
    query = np.asarray(query, dtype=np.float64)
    idx = np.full(len(query), -1, dtype=np.int64)
    bary = np.zeros((len(query), 3))
    for t, (a, b, c) in enumerate(triangles):
        todo = idx < 0
        if not todo.any():
            break
        pa, pb, pc = vertices[a], vertices[b], vertices[c]
        m = np.array([[pb[0] - pa[0], pc[0] - pa[0]], [pb[1] - pa[1], pc[1] - pa[1]]])
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if abs(det) <= 2 * DEGENERATE_AREA:
            continue
        d = query[todo] - pa
        l1 = (m[1, 1] * d[:, 0] - m[0, 1] * d[:, 1]) / det
        l2 = (-m[1, 0] * d[:, 0] + m[0, 0] * d[:, 1]) / det
        l0 = 1.0 - l1 - l2
        hit = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        rows = np.flatnonzero(todo)[hit]
        idx[rows] = t
        bary[rows] = np.column_stack([l0[hit], l1[hit], l2[hit]])
    return idx, bary


def delaunay_triangles(points):
    points = check_points(points)
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise InvalidArgumentError("cannot triangulate collinear points")
    try:
        tri = Delaunay(points)
    except QhullError:
        # exact degeneracy only: joggle by ~1e-9 px
        tri = Delaunay(points, qhull_options="QJ Pp")
    return np.asarray(tri.simplices, dtype=np.int64)


def build_reference_mesh(frontal_shapes, height=128, margin=1.0, orientation=(0, -1)):
    """Reference shape from frontal faces, triangulated once.

    The reference is the Procrustes mean of the frontal shapes (the shape
    itself when only one is given), rescaled so its bounding box is
    ``height`` pixels tall and shifted so the box starts at ``margin``.
    """
    shapes = [check_points(s) for s in frontal_shapes]
    if not shapes:
        raise InvalidArgumentError("need at least one frontal shape")
    if len(shapes) == 1:
        ref = shapes[0].copy()
    else:
        ref = procrustes_align(shapes, orientation=orientation)[1]
    extent = ref.max(axis=0) - ref.min(axis=0)
    if extent[1] <= 0:
        raise InvalidArgumentError("reference shape has zero height")
    ref = (ref - ref.min(axis=0)) * (height / extent[1]) + margin
    triangles = delaunay_triangles(ref)
    return ReferenceMesh.from_triangulation(ref, triangles)


def bilinear_sample(image, xs, ys):
    """Bilinear samples with edge clamping; returns ``(values, n_clamped)``."""
    h, w = image.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    out_of_bounds = (xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy, int(out_of_bounds.sum())


@dataclass(frozen=True)
class WarpInfo:
    n_degenerate_triangles: int
    n_clamped_samples: int


def triangle_areas(points, triangles):
    a, b, c = (points[triangles[:, k]] for k in range(3))
    return 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                        - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def warp_to_reference(image, shape, mesh, return_info=False):
    """Piecewise-affine warp of the face inside ``shape`` onto the reference lattice.

    Pixels of source triangles with area below ``1e-9`` are set to zero and
    counted in the returned :class:`WarpInfo`.
    """
    img = check_image(image)
    pts = check_points(shape, n_points=mesh.n_points)
    degenerate = triangle_areas(pts, mesh.triangles) < DEGENERATE_AREA
    corners = pts[mesh.triangles[mesh.lattice_triangle]]
    src = np.einsum("nk,nkd->nd", mesh.lattice_bary, corners)
    values, clamped = bilinear_sample(img, src[:, 0], src[:, 1])
    bad = degenerate[mesh.lattice_triangle]
    values[bad] = 0.0
    if return_info:
        return values, WarpInfo(int(degenerate.sum()), clamped)
    return values


def render_texture(texture, shape, mesh, image_shape, background=0.0):
    """Inverse warp: paint a reference-frame texture inside ``shape``.

    Each raster pixel covered by the shape's triangulation is mapped back into
    the reference frame and sampled bilinearly from the texture raster.
    """
    pts = check_points(shape, n_points=mesh.n_points)
    h, w = image_shape
    img = np.full((h, w), float(background))
    lo = np.maximum(np.floor(pts.min(axis=0)).astype(int), 0)
    hi = np.minimum(np.ceil(pts.max(axis=0)).astype(int), [w - 1, h - 1])
    if np.any(hi < lo):
        return img
    ys, xs = np.mgrid[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
    query = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    tri_idx, bary = locate_in_triangles(query, pts, mesh.triangles)
    inside = tri_idx >= 0
    corners = mesh.points[mesh.triangles[tri_idx[inside]]]
    ref = np.einsum("nk,nkd->nd", bary[inside], corners)
    raster = mesh.texture_to_image(np.asarray(texture, dtype=np.float64))
    vals, _ = bilinear_sample(raster, ref[:, 0], ref[:, 1])
    q = query[inside].astype(np.int64)
    img[q[:, 1], q[:, 0]] = vals
    return img


def remap_to_polyline(shape, visibility, polyline):
    """Move invisible landmarks onto ``polyline`` along their horizontal line.

    Among several crossings the one nearest in x to the original point wins;
    when no segment spans the point's height the nearest polyline vertex is
    used instead.
    """
    pts = check_points(shape)
    visible = np.asarray(visibility, dtype=bool)
    if visible.shape != (len(pts),):
        raise InvalidArgumentError("visibility needs one flag per landmark")
    poly = check_points(polyline, "outline")
    if len(poly) == 0:
        raise InvalidArgumentError("outline is empty")
    out = pts.copy()
    p0, p1 = poly[:-1], poly[1:]
    for k in np.flatnonzero(~visible):
        x, y = pts[k]
        ylo = np.minimum(p0[:, 1], p1[:, 1])
        yhi = np.maximum(p0[:, 1], p1[:, 1])
        span = (ylo <= y) & (y <= yhi)
        if span.any():
            a, b = p0[span], p1[span]
            flat = a[:, 1] == b[:, 1]
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
            xi[flat] = np.clip(x, np.minimum(a[flat, 0], b[flat, 0]),
                               np.maximum(a[flat, 0], b[flat, 0]))
            j = int(np.argmin(np.abs(xi - x)))
            out[k] = (xi[j], y)
        else:
            j = int(np.argmin(np.hypot(poly[:, 0] - x, poly[:, 1] - y)))
            out[k] = poly[j]
    return out


def remap_occluded_landmarks(shape, visibility, outline):
    """Uniform landmarking: remap invisible points onto the face outline.

    ``outline`` is an ordered list of landmark indices, all visible, whose
    points form the outline polyline.
    """
    pts = check_points(shape)
    visible = np.asarray(visibility, dtype=bool)
    outline = [int(i) for i in outline]
    if not outline:
        raise InvalidArgumentError("outline is empty")
    if not visible[outline].all():
        raise InvalidArgumentError("outline landmarks must all be visible")
    return remap_to_polyline(pts, visible, pts[outline])
