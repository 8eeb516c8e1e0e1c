import numpy as np
import pytest

from utaam.dataio import SyntheticSpec, generate_synthetic, synthetic_shape
from utaam.exceptions import DataFormatError, InvalidArgumentError
from utaam.features import HogSpec
from utaam.geometry import AffineParams, apply_affine, build_reference_mesh, similarity_fit
from utaam.io import read_container, write_container
from utaam.model import (PCAAAM, UTAAM, SampleGrid, ShapeParams, TextureParams,
                         assemble_tensors, build_pca_aam, build_taam_variation_models,
                         build_utaam, load_model, save_model)
from utaam.pipeline import build_from_samples
from utaam.tensor import hosvd, mode_n_product, multi_mode_product, unfold

EXTENTS = (4, 3, 2, 2)


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def shape_tensor(rng):
    # shapes do not depend on illumination
    s = rng.normal(size=EXTENTS[:2] + (1,) + EXTENTS[3:] + (10,))
    return np.repeat(s, EXTENTS[2], axis=2)


@pytest.fixture
def texture_tensor(rng):
    return rng.normal(size=EXTENTS + (15,))


@pytest.fixture
def model(shape_tensor, texture_tensor):
    return UTAAM().fit(shape_tensor, texture_tensor)


class TestSampleGrid:
    def test_defaults_to_complete(self):
        g = SampleGrid(EXTENTS, 1)
        assert g.present.all() and g.n_missing == 0

    @pytest.mark.parametrize("extents,frontal", [((2, 2, 2), 0), ((2, 0, 1, 1), 0), (EXTENTS, 3)])
    def test_invalid(self, extents, frontal):
        with pytest.raises(InvalidArgumentError):
            SampleGrid(extents, frontal)


class TestUtaamExactness:
    def test_reproduces_training_shapes(self, model, shape_tensor):
        for i, p, l, e in np.ndindex(*EXTENTS):
            q = model.training_shape_params(i, p, e)
            out = model.synthesize_shape(q).ravel()
            assert rel(out, shape_tensor[i, p, l, e]) < 1e-8

    def test_reproduces_training_textures(self, model, texture_tensor):
        for cell in np.ndindex(*EXTENTS):
            out = model.synthesize_texture(model.training_texture_params(*cell))
            assert rel(out, texture_tensor[cell]) < 1e-8

    def test_one_hot_illumination_reproduces_dependent_shapes(self, rng):
        s = rng.normal(size=EXTENTS + (8,))
        for l in range(EXTENTS[2]):
            m = UTAAM(illumination_weights=np.eye(EXTENTS[2])[l]).fit(s)
            for i, p, e in np.ndindex(EXTENTS[0], EXTENTS[1], EXTENTS[3]):
                out = m.synthesize_shape(m.training_shape_params(i, p, e)).ravel()
                assert rel(out, s[i, p, l, e]) < 1e-8

    def test_compressed_equals_uncompressed(self, rng):
        s = rng.normal(size=EXTENTS + (8,))
        centred = s - s.reshape(-1, 8).mean(axis=0)
        full = hosvd(centred)
        for l in range(EXTENTS[2]):
            m = UTAAM(illumination_weights=np.eye(EXTENTS[2])[l]).fit(s)
            a = [rng.normal(size=r) for r in m.shape_ranks_]
            a_l = full.factors[2][l]
            v = full.core
            for mode, c in zip((0, 1, 2, 3), (a[0], a[1], a_l, a[2])):
                v = mode_n_product(v, c, mode)
            uncompressed = m.mean_shape_ + mode_n_product(v, full.factors[4], 4).ravel()
            assert np.max(np.abs(m.model_shape(*a).ravel() - uncompressed)) < 1e-10

    def test_fold_in_commutes_with_truncation(self, rng):
        s = rng.normal(size=EXTENTS + (8,))
        ranks = (2, 2, None, 1, None)
        m = UTAAM(shape_ranks=ranks).fit(s)
        centred = s - m.mean_shape_
        w = np.full(EXTENTS[2], 1.0 / EXTENTS[2])
        folded = mode_n_product(centred, w, 2)
        s_i, s_p, s_e = m.shape_modes_
        oracle = multi_mode_product(folded, [s_i, s_p, None, s_e], transpose=True)[:, :, 0]
        np.testing.assert_allclose(m.core_shape_, oracle, atol=1e-10)

    def test_zero_tensors(self):
        m = UTAAM().fit(np.zeros(EXTENTS + (6,)), np.zeros(EXTENTS + (5,)))
        assert np.all(m.core_shape_ == 0) and np.all(m.core_texture_ == 0)
        q = m.training_shape_params(0, 0, 0)
        np.testing.assert_array_equal(m.synthesize_shape(q).ravel(), m.mean_shape_)

    def test_modes_orthonormal(self, model):
        for u in model.shape_modes_ + model.texture_modes_:
            assert np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) < 1e-8

    def test_given_means_are_kept(self, shape_tensor):
        mean = np.arange(10.0)
        m = UTAAM().fit(shape_tensor, shape_mean=mean)
        np.testing.assert_array_equal(m.mean_shape_, mean)


class TestSynthesis:
    def test_zero_coefficients_give_mean(self, model):
        z = [np.zeros(r) for r in model.shape_ranks_]
        np.testing.assert_array_equal(model.synthesize_shape(ShapeParams(AffineParams(), *z)).ravel(),
                                      model.mean_shape_)
        zt = TextureParams(*[np.zeros(r) for r in model.texture_ranks_])
        np.testing.assert_array_equal(model.synthesize_texture(zt), model.mean_texture_)

    @pytest.mark.parametrize("mode", [0, 1, 2])
    def test_shape_linear_per_mode(self, model, rng, mode):
        a = [rng.normal(size=r) for r in model.shape_ranks_]
        base = model.model_shape(*a).ravel() - model.mean_shape_
        a[mode] = 2.5 * a[mode]
        scaled = model.model_shape(*a).ravel() - model.mean_shape_
        np.testing.assert_allclose(scaled, 2.5 * base, atol=1e-10)

    @pytest.mark.parametrize("mode", [0, 1, 2, 3])
    def test_texture_linear_per_mode(self, model, rng, mode):
        q = [rng.normal(size=r) for r in model.texture_ranks_]
        base = model.synthesize_texture(TextureParams(*q)) - model.mean_texture_
        q[mode] = -1.7 * q[mode]
        scaled = model.synthesize_texture(TextureParams(*q)) - model.mean_texture_
        np.testing.assert_allclose(scaled, -1.7 * base, atol=1e-10)

    def test_affine_applied(self, model):
        q = model.training_shape_params(1, 1, 1)
        g = AffineParams(3.0, 0.4, 10.0, -2.0)
        np.testing.assert_allclose(model.synthesize_shape(ShapeParams(g, q.identity, q.pose, q.expression)),
                                   apply_affine(model.synthesize_shape(q), g), atol=1e-12)

    def test_vector_forms(self, model, rng):
        v = rng.normal(size=model.n_shape_params)
        v[0] = abs(v[0]) + 0.1
        one = model.synthesize_shape(v)
        batch = model.synthesize_shapes(np.vstack([v, v]))
        np.testing.assert_allclose(batch[1], one, atol=1e-12)
        q = model.training_texture_params(0, 1, 1, 0)
        np.testing.assert_array_equal(model.synthesize_texture(q.to_vector()),
                                      model.synthesize_texture(q))

    def test_wrong_lengths(self, model):
        with pytest.raises(InvalidArgumentError):
            model.synthesize_shape(np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            model.model_shape(np.zeros(1), np.zeros(1), np.zeros(1))

    def test_shape_only_model_has_no_texture(self, shape_tensor):
        m = UTAAM().fit(shape_tensor)
        assert not m.has_texture
        with pytest.raises(InvalidArgumentError):
            m.synthesize_texture(np.zeros(3))

    def test_truncated_texture_feature_rank(self, texture_tensor, shape_tensor):
        m = UTAAM(texture_ranks=(4, 3, 2, 2, 5)).fit(shape_tensor, texture_tensor)
        assert m.core_texture_.shape == (4, 3, 2, 2, 15)
        assert np.linalg.matrix_rank(unfold(m.core_texture_, 4)) == 5


class TestProjection:
    def test_recovers_training_shape(self, model, shape_tensor):
        g = AffineParams(40.0, 0.3, 64.0, 60.0)
        target = apply_affine(shape_tensor[2, 1, 0, 1].reshape(-1, 2), g)
        p = model.project_shape(target, init=model.training_shape_params(2, 1, 1), rounds=10)
        assert np.abs(model.synthesize_shape(p) - target).max() < 1e-6

    def test_batch_matches_single(self, model, shape_tensor):
        targets = shape_tensor[:2, 0, 0, 0].reshape(2, -1, 2) * 30 + 50
        batch = model.project_shapes(targets)
        single = model.project_shape(targets[1])
        np.testing.assert_allclose(batch[1].to_vector(), single.to_vector(), atol=1e-10)

    def test_bad_input(self, model):
        with pytest.raises(InvalidArgumentError):
            model.project_shapes(np.zeros((2, 3, 2)))


class TestTextureEstimation:
    def test_round_trip(self, model, rng):
        q = TextureParams(*[rng.normal(size=r) for r in model.texture_ranks_])
        t = model.synthesize_texture(q)
        est = model.estimate_texture_params(t, rounds=50)
        assert rel(model.synthesize_texture(est) - model.mean_texture_, t - model.mean_texture_) < 1e-6

    def test_mean_texture(self, model):
        est = model.estimate_texture_params(model.mean_texture_)
        assert np.linalg.norm(model.synthesize_texture(est) - model.mean_texture_) < 1e-10

    def test_trace_non_increasing(self, model):
        for seed in range(10):
            t = np.random.default_rng(seed).normal(size=model.mean_texture_.shape)
            _, trace = model.estimate_texture_params(t, rounds=5, return_trace=True)
            assert np.all(np.diff(trace) <= 1e-9 * max(trace[0], 1.0))

    def test_length_checked(self, model):
        with pytest.raises(InvalidArgumentError):
            model.estimate_texture_params(np.zeros(3))


class TestInterpolatePose:
    def test_endpoints_exact(self, model):
        s_p = model.shape_modes_[1]
        np.testing.assert_array_equal(model.interpolate_pose(0, 2, 0.0), s_p[0])
        np.testing.assert_array_equal(model.interpolate_pose(0, 2, 1.0), s_p[2])

    @pytest.mark.parametrize("args", [(0, 1, -0.1), (0, 1, 1.5), (0, 9, 0.5)])
    def test_invalid(self, model, args):
        with pytest.raises(InvalidArgumentError):
            model.interpolate_pose(*args)

    def test_mid_yaw_on_generator(self):
        spec = SyntheticSpec(extents=(12, 5, 1, 1), yaw_range=40, seed=3)
        data = generate_synthetic(spec, render=False)
        cells = list(np.ndindex(*spec.extents))
        built = build_from_samples(spec.extents, spec.frontal_pose, cells,
                                   np.array([data.shapes[c] for c in cells]),
                                   orientation=(0, spec.n_points // 2 - 1))
        m = built.model
        s_i, s_p, s_e = m.shape_modes_

        def dist(true, x):
            return np.linalg.norm(apply_affine(true, similarity_fit(true, x)) - x, axis=1).mean()

        for i in range(4):
            for a, b in [(1, 2), (2, 3)]:
                ends = [m.model_shape(s_i[i], s_p[k], s_e[0]) for k in (a, b)]
                mid = m.model_shape(s_i[i], m.interpolate_pose(a, b, 0.5), s_e[0])
                lo, hi = np.minimum(*ends) - 1e-12, np.maximum(*ends) + 1e-12
                assert np.all((mid >= lo) & (mid <= hi))
                true, _, _ = synthetic_shape(spec, data.identity_coeffs[i],
                                             (spec.yaws[a] + spec.yaws[b]) / 2, 0)
                true = true * [1.0, -1.0]  # generator frame is y-up
                assert dist(true, mid) < min(dist(true, ends[0]), dist(true, ends[1]))


class TestAssemble:
    def test_complete_grid_is_centred_input(self, shape_tensor, texture_tensor):
        out = assemble_tensors(SampleGrid(EXTENTS, 0), shape_tensor, texture_tensor)
        np.testing.assert_allclose(out.shape_tensor + out.shape_mean, shape_tensor, atol=1e-14)
        np.testing.assert_allclose(out.texture_tensor + out.texture_mean, texture_tensor, atol=1e-14)
        assert out.shape_tensor.shape == EXTENTS + (10,)

    def test_and_rule_cell_recovered(self, rng):
        # identity-independent data: the AND-rule mean is exact
        base = rng.normal(size=(1,) + EXTENTS[1:] + (6,))
        s = np.repeat(base, EXTENTS[0], axis=0)
        present = np.ones(EXTENTS, bool)
        present[1, 2, 0, 1] = False
        out = assemble_tensors(SampleGrid(EXTENTS, 0, present), np.where(present[..., None], s, 0))
        np.testing.assert_allclose(out.shape_tensor[1, 2, 0, 1] + out.shape_mean, s[1, 2, 0, 1],
                                   atol=1e-6)
        assert out.init_rules[1, 2, 0, 1] == "and"

    def test_low_rank_completion(self, rng):
        core = rng.normal(size=(2, 2, 1, 2, 3))
        fac = [np.linalg.qr(rng.normal(size=(n, r)))[0]
               for n, r in zip((6, 3, 2, 2, 8), core.shape)]
        s = multi_mode_product(core, fac)
        present = np.ones((6, 3, 2, 2), bool)
        present[[0, 3, 5], [1, 2, 0], [0, 1, 1], [1, 0, 1]] = False
        out = assemble_tensors(SampleGrid((6, 3, 2, 2), 0, present), s, max_iter=2000, tol=0,
                               shape_ranks=(2, 2, 1, 2, 3))
        np.testing.assert_allclose(out.shape_tensor + out.shape_mean, s, atol=1e-6)

    def test_missing_pose_rejected(self, shape_tensor):
        present = np.ones(EXTENTS, bool)
        present[:, 1] = False
        with pytest.raises(InvalidArgumentError):
            assemble_tensors(SampleGrid(EXTENTS, 0, present), shape_tensor)

    def test_unknown_solver(self, shape_tensor):
        with pytest.raises(InvalidArgumentError):
            assemble_tensors(SampleGrid(EXTENTS, 0), shape_tensor, completion="svd")


class TestTaamVariation:
    @pytest.fixture
    def tensors(self, rng):
        s = rng.normal(size=EXTENTS + (6,))
        t = rng.normal(size=EXTENTS + (7,))
        return s - s.reshape(-1, 6).mean(0), t - t.reshape(-1, 7).mean(0), rng.normal(size=6), rng.normal(size=7)

    def test_one_hot_means(self, tensors):
        s, t, ms, mt = tensors
        shp, tex = build_taam_variation_models(s, t, ms, mt, np.eye(3)[1], np.eye(2)[0], np.eye(2)[1])
        np.testing.assert_allclose(shp.mean, (s[:, 1, :, 0] + ms).reshape(-1, 6).mean(0), atol=1e-12)
        np.testing.assert_allclose(tex.mean, (t[:, :, 1] + mt).reshape(-1, 7).mean(0), atol=1e-12)

    def test_uniform_means(self, tensors):
        s, t, ms, mt = tensors
        shp, tex = build_taam_variation_models(s, t, ms, mt, np.full(3, 1 / 3), np.full(2, .5),
                                               np.full(2, .5))
        np.testing.assert_allclose(shp.mean, ms, atol=1e-12)
        np.testing.assert_allclose(tex.mean, mt, atol=1e-12)

    def test_basis_columns(self, tensors):
        s, t, ms, mt = tensors
        shp, _ = build_taam_variation_models(s, None, ms, None, np.eye(3)[0], np.eye(2)[0],
                                             np.eye(2)[0])
        assert shp.basis.shape == (6, EXTENTS[0] * EXTENTS[2])

    def test_simplex_checked(self, tensors):
        s, t, ms, mt = tensors
        with pytest.raises(InvalidArgumentError):
            build_taam_variation_models(s, t, ms, mt, np.array([0.5, 0.6, -0.1]), np.full(2, .5),
                                        np.full(2, .5))


class TestPca:
    def test_two_samples_one_component(self, rng):
        m = build_pca_aam(rng.normal(size=(2, 8)), variance=1.0)
        assert m.shape_components_.shape == (8, 1)

    def test_full_reconstruction(self, rng):
        x = rng.normal(size=(6, 10))
        m = PCAAAM(variance=1.0).fit(x, x[:, ::-1] * 2)
        for v in x:
            np.testing.assert_allclose(m.shape_from_params(m.shape_params(v)), v, atol=1e-8)
        for v in x[:, ::-1] * 2:
            np.testing.assert_allclose(m.texture_from_params(m.texture_params(v)), v, atol=1e-8)

    @pytest.mark.parametrize("fraction", [0.5, 0.8, 0.95])
    def test_retained_variance(self, rng, fraction):
        x = rng.normal(size=(20, 12)) * np.linspace(3, 0.2, 12)
        m = PCAAAM(fraction).fit(x)
        eig = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1]
        k = m.shape_components_.shape[1]
        ratio = np.cumsum(eig) / eig.sum()
        assert ratio[k - 1] >= fraction - 1e-12
        assert k == 1 or ratio[k - 2] < fraction
        np.testing.assert_allclose(m.shape_eigenvalues_, eig[:k], rtol=1e-10)
        assert np.all(np.diff(m.shape_eigenvalues_) <= 0)
        np.testing.assert_allclose(m.shape_components_.T @ m.shape_components_, np.eye(k), atol=1e-8)

    def test_needs_two_samples(self, rng):
        with pytest.raises(InvalidArgumentError):
            PCAAAM().fit(rng.normal(size=(1, 4)))


class TestModelFile:
    @pytest.fixture
    def textured(self, shape_tensor, texture_tensor):
        pts = np.array([[0, 0], [4, 0], [4, 3], [0, 3], [2, 1.5]], float)
        mesh = build_reference_mesh([pts], height=6)
        t = np.random.default_rng(1).normal(size=EXTENTS + (mesh.n_pixels,))
        return build_utaam(shape_tensor, t, mesh=mesh, hog=HogSpec(16, 4, 6))

    def test_round_trip_bit_exact(self, textured, tmp_path):
        a, b = tmp_path / "a.utam", tmp_path / "b.utam"
        save_model(a, textured)
        m, casc = load_model(a)
        assert casc is None
        save_model(b, m)
        assert a.read_bytes() == b.read_bytes()
        np.testing.assert_array_equal(m.core_texture_, textured.core_texture_)
        np.testing.assert_array_equal(m.mesh_.lattice, textured.mesh_.lattice)
        assert m.hog_ == HogSpec(16, 4, 6)

    def test_shape_only_round_trip(self, shape_tensor, tmp_path):
        save_model(tmp_path / "s.utam", UTAAM().fit(shape_tensor))
        m, _ = load_model(tmp_path / "s.utam")
        assert not m.has_texture and m.mesh_ is None

    def test_missing_chunk_named(self, textured, tmp_path):
        save_model(tmp_path / "a.utam", textured)
        version, chunks = read_container(tmp_path / "a.utam", b"UTAM")
        del chunks["CORE_S"]
        write_container(tmp_path / "b.utam", b"UTAM", version, chunks)
        with pytest.raises(DataFormatError, match="CORE_S"):
            load_model(tmp_path / "b.utam")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.utam").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(DataFormatError):
            load_model(tmp_path / "x.utam")


class TestTextureRidgeFallback:
    def test_flat_illumination_mode_flagged(self, rng):
        s = np.repeat(rng.normal(size=(4, 3, 1, 2, 10)), 2, axis=2)
        t = np.repeat(rng.normal(size=(4, 3, 1, 2, 15)), 2, axis=2)
        m = UTAAM().fit(s, t)
        q = m.estimate_texture_params(t[1, 2, 0, 1])
        assert m.rank_deficient_modes_ == [2]
        assert np.all(np.isfinite(m.synthesize_texture(q)))

    def test_well_posed_not_flagged(self, model, texture_tensor):
        model.estimate_texture_params(texture_tensor[0, 1, 1, 0])
        assert model.rank_deficient_modes_ == []
