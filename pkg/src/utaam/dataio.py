"""Dataset manifests, missing-sample masks and a synthetic multi-factor face generator."""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError, InvalidArgumentError
from .geometry import remap_occluded_landmarks
from .io import read_pgm, read_pts, read_visibility, write_pgm, write_pts, write_visibility

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

MANIFEST_COLUMNS = ("identity", "pose", "illumination", "expression", "image", "pts", "visibility")


@dataclass(frozen=True)
class ManifestRow:
    identity: int
    pose: int
    illumination: int
    expression: int
    image: str
    pts: str
    visibility: str = ""

    @property
    def cell(self):
        return (self.identity, self.pose, self.illumination, self.expression)


@dataclass
class DatasetManifest:
    """Rows of annotated samples plus the grid header.

    Paths in rows are relative to ``base_dir`` unless absolute. The optional
    landmark index lists name the eye points (for normalised errors) and the
    outline points (whose first and last entries orient shape alignment).
    """

    extents: tuple
    frontal: int
    rows: list = field(default_factory=list)
    left_eye: list = field(default_factory=list)
    right_eye: list = field(default_factory=list)
    outline: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if len(self.extents) != 4 or min(self.extents) < 1:
            raise InvalidArgumentError("extents must be four positive integers")
        if not 0 <= self.frontal < self.extents[1]:
            raise InvalidArgumentError("frontal pose index outside the pose extent")
        self.base_dir = Path(self.base_dir)

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def present(self):
        """Boolean availability grid of shape ``extents``."""
        out = np.zeros(self.extents, dtype=bool)
        for r in self.rows:
            out[r.cell] = True
        return out

    def load_shapes(self):
        return np.array([read_pts(self.resolve(r.pts)) for r in self.rows])

    def load_image(self, row):
        return read_pgm(self.resolve(row.image))

    def load_images(self):
        return [self.load_image(r) for r in self.rows]

    def load_visibility(self, row):
        return read_visibility(self.resolve(row.visibility)) if row.visibility else None


def _index_list(text):
    text = text.strip()
    return [int(v) for v in text.split()] if text else []


def load_manifest(path):
    """Parse and validate a manifest file.

    The header holds ``extents: Ii Ip Il Ie`` and ``frontal: k`` and may hold
    ``left_eye:``, ``right_eye:`` and ``outline:`` index lists; a CSV header
    line with the column names follows, then one row per sample.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest: {exc}", path) from exc
    header = {}
    body_start = None
    for n, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith(MANIFEST_COLUMNS[0] + ","):
            if [c.strip() for c in s.split(",")] != list(MANIFEST_COLUMNS):
                raise DataFormatError("unexpected CSV columns", path, n)
            body_start = n
            break
        if ":" not in s:
            raise DataFormatError(f"malformed header line {s!r}", path, n)
        key, value = s.split(":", 1)
        header[key.strip()] = (value, n)
    for key in ("extents", "frontal"):
        if key not in header:
            raise DataFormatError(f"missing '{key}:' header line", path)
    try:
        extents = tuple(int(v) for v in header["extents"][0].split())
        frontal = int(header["frontal"][0])
        lists = {k: _index_list(header[k][0]) if k in header else []
                 for k in ("left_eye", "right_eye", "outline")}
    except ValueError as exc:
        raise DataFormatError(f"malformed header value: {exc}", path) from exc
    if len(extents) != 4 or min(extents) < 1:
        raise DataFormatError("extents needs four positive integers", path, header["extents"][1])
    if not 0 <= frontal < extents[1]:
        raise DataFormatError("frontal pose index outside the pose extent", path,
                              header["frontal"][1])
    manifest = DatasetManifest(extents, frontal, base_dir=path.parent, **lists)
    if body_start is None:
        return manifest
    seen = set()
    reader = csv.reader(lines[body_start:])
    for offset, fields in enumerate(reader, start=body_start + 1):
        if not fields or not "".join(fields).strip():
            continue
        if len(fields) not in (6, 7):
            raise DataFormatError(f"expected 6 or 7 fields, got {len(fields)}", path, offset)
        try:
            cell = tuple(int(v) for v in fields[:4])
        except ValueError as exc:
            raise DataFormatError(f"non-integer index: {exc}", path, offset) from exc
        for name, v, e in zip(MANIFEST_COLUMNS, cell, extents):
            if not 0 <= v < e:
                raise DataFormatError(f"{name} index {v} outside extent {e} in cell {cell}",
                                      path, offset)
        if cell in seen:
            raise DataFormatError(f"duplicate cell {cell}", path, offset)
        seen.add(cell)
        vis = fields[6].strip() if len(fields) == 7 else ""
        manifest.rows.append(ManifestRow(*cell, fields[4].strip(), fields[5].strip(), vis))
    if manifest.rows and not any(r.pose == frontal for r in manifest.rows):
        raise DataFormatError("manifest has no frontal sample", path)
    return manifest


def write_manifest(path, manifest):
    lines = ["extents: " + " ".join(str(e) for e in manifest.extents),
             f"frontal: {manifest.frontal}"]
    for key in ("left_eye", "right_eye", "outline"):
        values = getattr(manifest, key)
        if values:
            lines.append(f"{key}: " + " ".join(str(v) for v in values))
    lines.append(",".join(MANIFEST_COLUMNS))
    for r in manifest.rows:
        lines.append(",".join(str(v) for v in (*r.cell, r.image, r.pts, r.visibility)))
    Path(path).write_text("\n".join(lines) + "\n")


def make_missing_mask(extents, fraction, seed=0, max_tries=1000):
    """Sample-availability mask with exactly ``round(fraction * cells)`` missing cells.

    Missing cells are drawn uniformly without replacement, redrawing until
    every pose index keeps at least one sample.

    Returns
    -------
    ndarray of float, shape ``extents``
        1 for available samples, 0 for missing ones.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 4 or min(extents) < 1:
        raise InvalidArgumentError("extents must be four positive integers")
    if not 0 <= fraction < 1:
        raise InvalidArgumentError("missing fraction must be in [0, 1)")
    cells = int(np.prod(extents))
    k = int(round(fraction * cells))
    if k > cells - extents[1]:
        raise InvalidArgumentError(
            f"removing {k} of {cells} cells cannot leave a sample for each of {extents[1]} poses")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        mask = np.ones(cells)
        mask[rng.choice(cells, size=k, replace=False)] = 0.0
        mask = mask.reshape(extents)
        if mask.any(axis=(0, 2, 3)).all():
            return mask
    # pathological fractions: keep one random cell per pose, sample the rest
    mask = np.zeros(extents)
    keep = []
    for p in range(extents[1]):
        cell = [rng.integers(e) for e in extents]
        cell[1] = p
        keep.append(np.ravel_multi_index(cell, extents))
    rest = np.setdiff1d(np.arange(cells), keep)
    chosen = rng.choice(rest, size=cells - k - len(keep), replace=False)
    mask.reshape(-1)[np.concatenate([keep, chosen]).astype(int)] = 1.0
    return mask


# -- synthetic generator -----------------------------------------------------

HEAD_AXES = (1.0, 1.3, 1.0)
OUTLINE_RADIUS = 0.96
SILHOUETTE_POINTS = 96
OCCLUSION_YAW = 45.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic multi-factor face family.

    Faces are ellipsoidal heads. Identity is a smooth radial deformation,
    pose a yaw rotation, expression a vertical mouth displacement and
    illumination a horizontal intensity ramp with a bias.
    """

    extents: tuple = (60, 7, 5, 3)
    n_points: int = 24
    image_size: int = 128
    seed: int = 0
    identity_sigma: float = 0.08
    yaw_range: float = 75.0
    expression_amplitude: float = 0.08
    gain_range: float = 0.6
    bias_range: float = 0.08
    placement_scale: float = 0.05
    placement_rotation: float = 5.0
    placement_shift: float = 0.03
    noise: float = 0.01

    def __post_init__(self):
        ext = tuple(int(e) for e in self.extents)
        if len(ext) != 4 or min(ext) < 1:
            raise InvalidArgumentError("extents must be four positive integers")
        object.__setattr__(self, "extents", ext)
        if self.n_points < 8:
            raise InvalidArgumentError("need at least 8 landmarks for an outline plus features")
        if not 0 <= self.yaw_range < 90:
            raise InvalidArgumentError("yaw range must lie in [0, 90) degrees")
        if self.image_size < 16:
            raise InvalidArgumentError("image side must be at least 16 pixels")

    @property
    def yaws(self):
        n = self.extents[1]
        return np.linspace(-self.yaw_range, self.yaw_range, n) if n > 1 else np.zeros(1)

    @property
    def frontal_pose(self):
        return int(np.argmin(np.abs(self.yaws)))


@dataclass(frozen=True)
class FaceLayout:
    """Landmark template on the frontal head."""

    base: np.ndarray
    outline: list
    left_eye: list
    right_eye: list
    mouth: np.ndarray
    mouth_weight: np.ndarray


def face_layout(n_points):
    """Outline points on the lower head arc, features on an inner ellipse."""
    a, b, _ = HEAD_AXES
    n_out = n_points // 2
    n_in = n_points - n_out
    t = np.deg2rad(np.linspace(190.0, 350.0, n_out))
    outer = OUTLINE_RADIUS * np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    u = 2 * np.pi * (np.arange(n_in) + 0.5) / n_in
    inner = np.stack([0.5 * np.cos(u), 0.05 + 0.45 * np.sin(u)], axis=1)
    base = np.vstack([outer, inner])
    idx = np.arange(n_out, n_points)
    upper = np.sin(u) > 0.3
    mouth = np.sin(u) < -0.5
    weight = np.zeros(n_points)
    weight[idx[mouth]] = -np.sin(u[mouth])
    return FaceLayout(base, list(range(n_out)), [int(i) for i in idx[upper & (np.cos(u) < 0)]],
                      [int(i) for i in idx[upper & (np.cos(u) > 0)]], idx[mouth], weight)


def _lift(xy):
    a, b, c = HEAD_AXES
    z = c * np.sqrt(np.clip(1 - (xy[:, 0] / a) ** 2 - (xy[:, 1] / b) ** 2, 0, None))
    return np.column_stack([xy, z])


def _radial(points3, coeffs, sigma):
    phi = np.arctan2(points3[:, 1], points3[:, 0])
    k = np.arange(1, coeffs.shape[1] + 1)
    h = (coeffs[0] * np.cos(np.outer(phi, k))).sum(1) + (coeffs[1] * np.sin(np.outer(phi, k))).sum(1)
    return points3 * (1 + sigma * h)[:, None]


def _silhouette(yaw_rad):
    """Occluding contour of the undeformed head under orthographic yaw."""
    a, b, c = HEAD_AXES
    tan = np.tan(yaw_rad)
    big_a = 1.0 / np.sqrt(1 / a ** 2 + (c * tan) ** 2 / a ** 4)
    t = 2 * np.pi * np.arange(SILHOUETTE_POINTS + 1) / SILHOUETTE_POINTS
    x = big_a * np.cos(t)
    return np.column_stack([x, b * np.sin(t), x * (c / a) ** 2 * tan])


def _project(points3, yaw_rad):
    return np.column_stack([points3[:, 0] * np.cos(yaw_rad) + points3[:, 2] * np.sin(yaw_rad),
                            points3[:, 1]])


def _visible(points3, yaw_rad):
    a, b, c = HEAD_AXES
    nz = -points3[:, 0] / a ** 2 * np.sin(yaw_rad) + points3[:, 2] / c ** 2 * np.cos(yaw_rad)
    return nz > 1e-12


def synthetic_shape(spec, identity_coeffs, yaw_deg, expression, layout=None):
    """Model-frame landmarks, visibility and outline polyline of one face.

    Parameters
    ----------
    identity_coeffs : ndarray, shape (2, K)
        Cosine and sine harmonic weights of the radial deformation.
    yaw_deg : float
    expression : float
        Expression index; the mouth moves down by ``amplitude * expression``.

    Returns
    -------
    shape : ndarray, shape (L, 2)
    visible : ndarray of bool, shape (L,)
    outline : ndarray, shape (SILHOUETTE_POINTS + 1, 2)
        Closed outline polyline of the posed head.
    """
    layout = layout if layout is not None else face_layout(spec.n_points)
    yaw = np.deg2rad(yaw_deg)
    base = layout.base.copy()
    base[:, 1] -= spec.expression_amplitude * expression * layout.mouth_weight
    pts3 = _lift(layout.base)
    pts3[:, 1] = base[:, 1]
    visible = _visible(_lift(layout.base), yaw)
    sil3 = _silhouette(yaw)
    deformed = _radial(np.vstack([pts3, sil3]), identity_coeffs, spec.identity_sigma)
    proj = _project(deformed, yaw)
    n = spec.n_points
    if abs(yaw_deg) >= OCCLUSION_YAW:
        flags = np.concatenate([visible, np.ones(len(sil3), dtype=bool)])
        flags[layout.outline[-1] + 1:n] = True  # inner features are never remapped
        proj = remap_occluded_landmarks(proj, flags, list(range(n, len(proj))))
    return proj[:n], visible, proj[n:]


@dataclass
class SyntheticDataset:
    """A fully observed synthetic grid.

    Arrays are indexed ``(identity, pose, illumination, expression, ...)``;
    landmark coordinates are in pixels with the origin at the top-left.
    """

    spec: SyntheticSpec
    shapes: np.ndarray
    visibility: np.ndarray
    model_shapes: np.ndarray
    outlines: np.ndarray
    images: np.ndarray
    identity_coeffs: np.ndarray
    placements: np.ndarray
    gains: np.ndarray
    biases: np.ndarray
    layout: FaceLayout

    @property
    def frontal_pose(self):
        return self.spec.frontal_pose

    def manifest(self, base_dir="."):
        rows = []
        for cell in np.ndindex(*self.spec.extents):
            name = "s_{}_{}_{}_{}".format(*cell)
            rows.append(ManifestRow(*cell, f"images/{name}.pgm", f"pts/{name}.pts",
                                    f"pts/{name}.vis"))
        return DatasetManifest(self.spec.extents, self.frontal_pose, rows,
                               list(self.layout.left_eye), list(self.layout.right_eye),
                               list(self.layout.outline), base_dir)


def _seg_distance_numpy(px, py, poly):
    """Distance from pixels to a polyline and crossing parity (inside test)."""
    a, b = poly[:-1], poly[1:]
    d = b - a
    len2 = np.maximum((d * d).sum(1), 1e-300)
    rx = px[:, None] - a[:, 0]
    ry = py[:, None] - a[:, 1]
    t = np.clip((rx * d[:, 0] + ry * d[:, 1]) / len2, 0, 1)
    dist = np.hypot(rx - t * d[:, 0], ry - t * d[:, 1]).min(axis=1)
    crosses = ((a[:, 1] > py[:, None]) != (b[:, 1] > py[:, None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = a[:, 0] + (py[:, None] - a[:, 1]) * d[:, 0] / d[:, 1]
    inside = (crosses & (px[:, None] < xi)).sum(axis=1) % 2 == 1
    return dist, inside


def _seg_distance_loops(px, py, poly, dist, inside):
    for i in range(px.shape[0]):
        x = px[i]
        y = py[i]
        best = 1e300
        cnt = 0
        for k in range(poly.shape[0] - 1):
            ax = poly[k, 0]
            ay = poly[k, 1]
            dx = poly[k + 1, 0] - ax
            dy = poly[k + 1, 1] - ay
            l2 = dx * dx + dy * dy
            t = 0.0
            if l2 > 0:
                t = ((x - ax) * dx + (y - ay) * dy) / l2
                t = min(max(t, 0.0), 1.0)
            ex = x - ax - t * dx
            ey = y - ay - t * dy
            e = ex * ex + ey * ey
            if e < best:
                best = e
            if (ay > y) != (poly[k + 1, 1] > y):
                if x < ax + (y - ay) * dx / dy:
                    cnt += 1
        dist[i] = np.sqrt(best)
        inside[i] = cnt % 2 == 1


_seg_distance_jit = numba.njit(cache=True, nogil=True)(_seg_distance_loops) if numba is not None else None


def _seg_distance(px, py, poly):
    if _seg_distance_jit is None:
        return _seg_distance_numpy(px, py, poly)
    dist = np.empty(len(px))
    inside = np.empty(len(px), dtype=np.bool_)
    _seg_distance_jit(px, py, np.ascontiguousarray(poly), dist, inside)
    return dist, inside


def render_albedo(size, outline, inner, skin, dark, background=0.15, edge=1.5, stroke=1.8):
    """Face albedo from signed distances to the outline and the feature curve.

    The face region fades in with a logistic profile across ``outline``; the
    closed curve through the inner landmarks is drawn as a dark Gaussian
    stroke. Both polylines are in pixel coordinates.
    """
    img = np.full((size, size), background)
    lo = np.floor(np.minimum(outline.min(0), inner.min(0)) - 4 * edge).astype(int)
    hi = np.ceil(np.maximum(outline.max(0), inner.max(0)) + 4 * edge).astype(int)
    x0, y0 = np.clip(lo, 0, size - 1)
    x1, y1 = np.clip(hi, 0, size - 1)
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    px, py = xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
    d_face, inside = _seg_distance(px, py, outline)
    signed = np.where(inside, -d_face, d_face)
    face = 1.0 / (1.0 + np.exp(np.clip(signed / edge, -50, 50)))
    d_inner, _ = _seg_distance(px, py, np.vstack([inner, inner[:1]]))
    val = background + (skin - background) * face - dark * np.exp(-(d_inner / stroke) ** 2) * face
    img[y0:y1 + 1, x0:x1 + 1] = val.reshape(ys.shape)
    return img


def _to_image(frame_pts, placement, size):
    """Model frame (y up) to pixels (y down) under a similarity placement."""
    s, r, tx, ty = placement
    x, y = frame_pts[:, 0], -frame_pts[:, 1]
    c, si = np.cos(r), np.sin(r)
    return np.column_stack([s * (c * x - si * y) + tx, s * (si * x + c * y) + ty])


def generate_synthetic(spec=SyntheticSpec(), render=True):
    """Generate a deterministic synthetic dataset.

    Parameters
    ----------
    spec : SyntheticSpec
    render : bool
        Skip image synthesis when ``False`` (``images`` is then ``None``).
    """
    rng = np.random.default_rng(spec.seed)
    i_i, i_p, i_l, i_e = spec.extents
    n = spec.n_points
    size = spec.image_size
    layout = face_layout(n)
    harmonics = 3
    id_coeffs = rng.standard_normal((i_i, 2, harmonics)) / np.arange(1, harmonics + 1)
    skins = rng.uniform(0.55, 0.8, i_i)
    darks = rng.uniform(0.3, 0.45, i_i)
    unit = 0.3 * size
    placements = np.empty((i_i, i_p, i_e, 4))
    placements[..., 0] = unit * (1 + rng.uniform(-spec.placement_scale, spec.placement_scale,
                                                 (i_i, i_p, i_e)))
    placements[..., 1] = np.deg2rad(rng.uniform(-spec.placement_rotation, spec.placement_rotation,
                                                (i_i, i_p, i_e)))
    shift = spec.placement_shift * size
    placements[..., 2] = size / 2 + rng.uniform(-shift, shift, (i_i, i_p, i_e))
    placements[..., 3] = size / 2 + rng.uniform(-shift, shift, (i_i, i_p, i_e))
    gains = np.linspace(-spec.gain_range, spec.gain_range, i_l) if i_l > 1 else np.zeros(1)
    biases = (np.linspace(-spec.bias_range, spec.bias_range, i_l)[::-1] if i_l > 1
              else np.zeros(1))
    noise_seed = int(rng.integers(2 ** 63))

    model_shapes = np.empty((i_i, i_p, i_e, n, 2))
    visibility = np.empty((i_i, i_p, i_e, n), dtype=bool)
    outlines = np.empty((i_i, i_p, i_e, SILHOUETTE_POINTS + 1, 2))
    shapes = np.empty((i_i, i_p, i_e, n, 2))
    images = np.empty((i_i, i_p, i_l, i_e, size, size), dtype=np.uint8) if render else None
    ramp = (np.arange(size) - size / 2) / size
    inner_idx = np.arange(layout.outline[-1] + 1, n)
    noise_rng = np.random.default_rng(noise_seed)
    for i in range(i_i):
        for p, yaw in enumerate(spec.yaws):
            for e in range(i_e):
                shape, vis, outline = synthetic_shape(spec, id_coeffs[i], yaw, e, layout)
                model_shapes[i, p, e], visibility[i, p, e] = shape, vis
                pl = placements[i, p, e]
                shapes[i, p, e] = _to_image(shape, pl, size)
                outlines[i, p, e] = _to_image(outline, pl, size)
                if not render:
                    continue
                albedo = render_albedo(size, outlines[i, p, e], shapes[i, p, e][inner_idx],
                                       skins[i], darks[i])
                for l in range(i_l):
                    lit = albedo * (1 + gains[l] * ramp[None, :]) + biases[l]
                    if spec.noise > 0:
                        lit = lit + spec.noise * noise_rng.standard_normal(lit.shape)
                    images[i, p, l, e] = np.clip(np.floor(lit * 255 + 0.5), 0, 255)
    expand = lambda x: np.repeat(x[:, :, None], i_l, axis=2)  # noqa: E731
    return SyntheticDataset(spec, expand(shapes), expand(visibility), model_shapes, outlines,
                            images, id_coeffs, placements, gains, biases, layout)


def write_dataset(dataset, out_dir):
    """Write images, pts and visibility files, the manifest and the factor values."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "pts").mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest(out)
    for row in manifest.rows:
        c = row.cell
        if dataset.images is not None:
            write_pgm(out / row.image, dataset.images[c])
        write_pts(out / row.pts, dataset.shapes[c])
        write_visibility(out / row.visibility, dataset.visibility[c])
    write_manifest(out / "manifest.txt", manifest)
    truth = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in dataset.spec.__dict__.items()},
        "yaws": dataset.spec.yaws.tolist(),
        "identity_coeffs": dataset.identity_coeffs.tolist(),
        "gains": dataset.gains.tolist(),
        "biases": dataset.biases.tolist(),
        "placements": dataset.placements.tolist(),
    }
    (out / "factors.json").write_text(json.dumps(truth, indent=1))
    return manifest
