import numpy as np
import pytest

from utaam.dataio import (DatasetManifest, ManifestRow, SyntheticSpec, generate_synthetic,
                          load_manifest, make_missing_mask, synthetic_shape, write_dataset,
                          write_manifest)
from utaam.exceptions import DataFormatError, InvalidArgumentError
from utaam.tensor import hosvd, tensor_norm, tucker_reconstruct


def write_text(path, text):
    path.write_text(text)
    return path


def segment_distance(p, poly):
    best = np.inf
    for a, b in zip(poly[:-1], poly[1:]):
        d = b - a
        t = np.clip(np.dot(p - a, d) / max(np.dot(d, d), 1e-300), 0, 1)
        best = min(best, np.linalg.norm(p - a - t * d))
    return best


class TestManifest:
    HEADER = "extents: 2 3 1 1\nfrontal: 1\nidentity,pose,illumination,expression,image,pts,visibility\n"

    def test_empty_body(self, tmp_path):
        m = load_manifest(write_text(tmp_path / "m.txt", "extents: 2 3 1 1\nfrontal: 1\n"))
        assert m.rows == [] and m.extents == (2, 3, 1, 1) and m.frontal == 1
        m = load_manifest(write_text(tmp_path / "n.txt", self.HEADER))
        assert m.rows == []

    def test_pose_out_of_range(self, tmp_path):
        body = self.HEADER + "0,1,0,0,a.pgm,a.pts,\n1,3,0,0,b.pgm,b.pts,\n"
        with pytest.raises(DataFormatError, match=r"m\.txt:5.*pose index 3.*\(1, 3, 0, 0\)") as err:
            load_manifest(write_text(tmp_path / "m.txt", body))
        assert err.value.line == 5

    @pytest.mark.parametrize("row,match", [
        ("0,1,0\n", "expected 6 or 7"),
        ("0,x,0,0,a,b\n", "non-integer"),
        ("0,1,0,0,a,b\n0,1,0,0,c,d\n", "duplicate"),
        ("0,0,0,0,a,b\n", "no frontal"),
    ])
    def test_malformed_rows(self, tmp_path, row, match):
        with pytest.raises(DataFormatError, match=match):
            load_manifest(write_text(tmp_path / "m.txt", self.HEADER + row))

    @pytest.mark.parametrize("text", ["frontal: 0\n", "extents: 2 3\nfrontal: 0\n",
                                      "extents: 2 3 1 1\nfrontal: 3\n", "extents 2 3 1 1\n"])
    def test_bad_header(self, tmp_path, text):
        with pytest.raises(DataFormatError):
            load_manifest(write_text(tmp_path / "m.txt", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_manifest(tmp_path / "absent.txt")

    def test_round_trip(self, tmp_path):
        rows = [ManifestRow(0, 1, 0, 0, "img/a b.pgm", "p/a.pts", "p/a.vis"),
                ManifestRow(1, 2, 0, 0, "/abs/b.pgm", "p/b.pts")]
        m = DatasetManifest((2, 3, 1, 1), 1, rows, [3, 4], [5], [0, 1, 2])
        write_manifest(tmp_path / "m.txt", m)
        back = load_manifest(tmp_path / "m.txt")
        assert back.rows == rows
        assert (back.extents, back.frontal) == (m.extents, m.frontal)
        assert (back.left_eye, back.right_eye, back.outline) == ([3, 4], [5], [0, 1, 2])
        write_manifest(tmp_path / "m2.txt", back)
        assert (tmp_path / "m.txt").read_bytes() == (tmp_path / "m2.txt").read_bytes()

    def test_present_grid(self):
        m = DatasetManifest((2, 2, 1, 1), 0, [ManifestRow(1, 0, 0, 0, "a", "b")])
        assert m.present().sum() == 1 and m.present()[1, 0, 0, 0]


class TestMissingMask:
    def test_zero_fraction(self):
        assert np.all(make_missing_mask((3, 4, 2, 2), 0.0, seed=3) == 1)

    def test_half_of_four(self):
        mask = make_missing_mask((2, 2, 1, 1), 0.5, seed=0)
        assert (mask == 0).sum() == 2
        assert mask.any(axis=(0, 2, 3)).all()

    @pytest.mark.parametrize("fraction", [0.1, 0.5, 0.9, 0.95])
    def test_exact_count_and_pose_cover(self, fraction):
        ext = (10, 7, 5, 3)
        mask = make_missing_mask(ext, fraction, seed=11)
        assert (mask == 0).sum() == round(fraction * np.prod(ext))
        assert mask.any(axis=(0, 2, 3)).all()
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_determinism_and_variability(self):
        ext = (6, 4, 3, 2)
        differ = 0
        for s in range(100):
            a = make_missing_mask(ext, 0.3, seed=s)
            np.testing.assert_array_equal(a, make_missing_mask(ext, 0.3, seed=s))
            differ += not np.array_equal(a, make_missing_mask(ext, 0.3, seed=s + 1))
        assert differ >= 99

    @pytest.mark.parametrize("fraction", [-0.1, 1.0])
    def test_fraction_range(self, fraction):
        with pytest.raises(InvalidArgumentError):
            make_missing_mask((2, 2, 1, 1), fraction)

    def test_infeasible(self):
        with pytest.raises(InvalidArgumentError, match="pose"):
            make_missing_mask((1, 4, 1, 1), 0.5)


class TestSyntheticSpec:
    @pytest.mark.parametrize("kwargs", [dict(n_points=7), dict(extents=(0, 1, 1, 1)),
                                        dict(yaw_range=90.0), dict(yaw_range=-5.0),
                                        dict(extents=(1, 2, 3))])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            SyntheticSpec(**kwargs)

    def test_frontal_is_zero_yaw(self):
        spec = SyntheticSpec(extents=(1, 7, 1, 1))
        assert spec.yaws[spec.frontal_pose] == 0.0


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(extents=(4, 5, 2, 2), image_size=48, seed=3))


class TestGenerator:
    def test_shapes_of_outputs(self, small):
        assert small.shapes.shape == (4, 5, 2, 2, 24, 2)
        assert small.images.shape == (4, 5, 2, 2, 48, 48) and small.images.dtype == np.uint8
        assert small.visibility.shape == (4, 5, 2, 2, 24)

    def test_shapes_constant_over_illumination(self, small):
        np.testing.assert_array_equal(small.shapes[:, :, 0], small.shapes[:, :, 1])
        assert not np.array_equal(small.images[:, :, 0], small.images[:, :, 1])

    def test_same_seed_bit_identical(self, small):
        again = generate_synthetic(small.spec)
        np.testing.assert_array_equal(small.images, again.images)
        np.testing.assert_array_equal(small.shapes, again.shapes)
        other = generate_synthetic(SyntheticSpec(extents=(4, 5, 2, 2), image_size=48, seed=4))
        assert not np.array_equal(small.shapes, other.shapes)

    def test_zero_yaw_has_no_foreshortening(self):
        from utaam.dataio import _lift, _radial, face_layout
        spec = SyntheticSpec(extents=(1, 1, 1, 2), seed=1)
        coeffs = np.random.default_rng(0).standard_normal((2, 3))
        layout = face_layout(spec.n_points)
        pts3 = _lift(layout.base)
        pts3[:, 1] -= spec.expression_amplitude * 1 * layout.mouth_weight
        expected = _radial(pts3, coeffs, spec.identity_sigma)[:, :2]
        shape, vis, _ = synthetic_shape(spec, coeffs, 0.0, 1)
        np.testing.assert_array_equal(shape, expected)
        assert vis.all()

    def test_expression_moves_mouth_only(self):
        spec = SyntheticSpec(extents=(1, 1, 1, 3))
        coeffs = np.zeros((2, 3))
        a, _, _ = synthetic_shape(spec, coeffs, 0.0, 0)
        b, _, _ = synthetic_shape(spec, coeffs, 0.0, 2)
        moved = np.flatnonzero(np.abs(a - b).max(axis=1) > 0)
        from utaam.dataio import face_layout
        assert set(moved) <= set(face_layout(24).mouth.tolist())
        assert np.all(b[moved, 1] < a[moved, 1])

    def test_remapped_points_on_outline(self):
        data = generate_synthetic(SyntheticSpec(extents=(3, 5, 1, 1), seed=7), render=False)
        outline_idx = data.layout.outline
        checked = 0
        for i in range(3):
            for p, yaw in enumerate(data.spec.yaws):
                if abs(yaw) < 45:
                    continue
                vis = data.visibility[i, p, 0, 0]
                for k in outline_idx:
                    if not vis[k]:
                        assert segment_distance(data.shapes[i, p, 0, 0, k], data.outlines[i, p, 0]) < 1e-6
                        checked += 1
        assert checked > 0

    def test_near_multilinear(self):
        spec = SyntheticSpec(extents=(8, 5, 1, 1), seed=2)
        data = generate_synthetic(spec, render=False)
        x = data.model_shapes.reshape(8, 5, 1, 1, -1)
        x = x - x.mean(axis=(0, 1, 2, 3))
        ranks = (8, 5, 1, 1, 2 * spec.n_points)
        approx = tucker_reconstruct(hosvd(x, ranks))
        assert tensor_norm(x - approx) < 0.05 * tensor_norm(x)

    def test_write_dataset(self, small, tmp_path):
        manifest = write_dataset(small, tmp_path)
        back = load_manifest(tmp_path / "manifest.txt")
        assert back.rows == manifest.rows and len(back.rows) == 80
        np.testing.assert_allclose(back.load_shapes()[5], small.shapes[back.rows[5].cell], atol=5e-7)
        np.testing.assert_array_equal(back.load_image(back.rows[7]), small.images[back.rows[7].cell])
        np.testing.assert_array_equal(back.load_visibility(back.rows[9]), small.visibility[back.rows[9].cell])
        assert (tmp_path / "factors.json").exists()
