import math

import numpy as np
import pytest

from facesynth import shape3d
from facesynth.shape3d import (
    CameraPose,
    ShapeCoefficients,
    SingularFitError,
    build_synthetic_shape_model,
    extract_texture,
    fit_coefficients,
    fit_still,
    pose_grid,
    project,
    render,
    simulate,
    standard_frame,
    synthesize_shape,
)


@pytest.fixture(scope="module")
def model():
    return build_synthetic_shape_model(seed=1, vertex_count=256, basis_count=8)


class TestBuildModel:
    def test_deterministic_in_seed(self, model):
        again = build_synthetic_shape_model(seed=1, vertex_count=256, basis_count=8)
        assert np.array_equal(model.mean_shape, again.mean_shape)
        assert np.array_equal(model.basis, again.basis)
        assert np.array_equal(model.triangles, again.triangles)
        assert np.array_equal(model.landmark_indices, again.landmark_indices)

    def test_seed_changes_basis(self, model):
        other = build_synthetic_shape_model(seed=2, vertex_count=256, basis_count=8)
        assert not np.array_equal(model.basis, other.basis)

    def test_basis_orthonormal(self, model):
        gram = model.basis.T @ model.basis
        assert np.abs(gram - np.eye(model.basis_count)).max() < 1e-10

    def test_indices_in_range(self, model):
        v = model.vertex_count
        assert model.triangles.min() >= 0 and model.triangles.max() < v
        assert model.landmark_indices.min() >= 0 and model.landmark_indices.max() < v
        assert len(set(model.landmark_indices.tolist())) == len(model.landmark_indices)

    def test_invalid_counts_rejected(self):
        with pytest.raises(ValueError):
            build_synthetic_shape_model(seed=0, vertex_count=8, basis_count=4)
        with pytest.raises(ValueError):
            build_synthetic_shape_model(seed=0, vertex_count=256, basis_count=0)

    def test_mirror_symmetry_of_mean(self, model):
        verts = model.mean_shape.reshape(-1, 3)
        partner = verts[model.mirror_index]
        assert np.allclose(verts[:, 0], -partner[:, 0], atol=1e-12)
        assert np.allclose(verts[:, 1:], partner[:, 1:], atol=1e-12)


class TestSynthesize:
    def test_zero_coefficients_return_mean(self, model):
        out = synthesize_shape(model, ShapeCoefficients.zeros(8))
        assert np.array_equal(out, model.mean_shape)

    def test_unit_vector_adds_single_column(self, model):
        e3 = np.zeros(8)
        e3[3] = 1.0
        out = synthesize_shape(model, ShapeCoefficients(e3))
        assert np.allclose(out, model.mean_shape + model.basis[:, 3], atol=1e-15)

    def test_matches_dense_matvec_oracle(self, model):
        rng = np.random.default_rng(0)
        alpha = rng.uniform(0, 1, size=8)
        out = synthesize_shape(model, ShapeCoefficients(alpha))
        # brute-force oracle: explicit per-entry accumulation
        oracle = model.mean_shape.copy()
        for k in range(8):
            for i in range(oracle.shape[0]):
                oracle[i] += alpha[k] * model.basis[i, k]
        assert np.abs(out - oracle).max() < 1e-12

    def test_affine_in_alpha(self, model):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a1 = rng.uniform(0, 1, 8)
            a2 = rng.uniform(0, 1, 8)
            t = rng.uniform(0, 1)
            lhs = synthesize_shape(model, ShapeCoefficients(t * a1 + (1 - t) * a2))
            rhs = t * synthesize_shape(model, ShapeCoefficients(a1)) + (1 - t) * synthesize_shape(
                model, ShapeCoefficients(a2)
            )
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_length_mismatch(self, model):
        with pytest.raises(ValueError):
            synthesize_shape(model, ShapeCoefficients.zeros(5))

    def test_coefficients_clamped(self):
        c = ShapeCoefficients(np.array([-0.5, 0.5, 1.5]))
        assert np.array_equal(c.alpha, [0.0, 0.5, 1.0])


class TestProject:
    def test_identity_rotation_drops_z(self, model):
        pose = CameraPose()
        out = project(model.mean_shape, pose)
        verts = model.mean_shape.reshape(-1, 3)
        assert np.array_equal(out, verts[:, :2])

    def test_yaw_90_maps_x_axis_to_optical_axis(self):
        # hand-computed: R_y(90) @ (1,0,0) = (0,0,-1) -> image (0,0) + t
        pose = CameraPose(yaw=90.0, tx=3.0, ty=-2.0)
        out = project(np.array([1.0, 0.0, 0.0]), pose)
        assert np.allclose(out, [[3.0, -2.0]], atol=1e-12)

    def test_linear_in_scale(self, model):
        base = project(model.mean_shape, CameraPose(yaw=20, pitch=-10, scale=1.0))
        scaled = project(model.mean_shape, CameraPose(yaw=20, pitch=-10, scale=2.5))
        assert np.allclose(scaled, 2.5 * base, atol=1e-9)

    def test_pose_validation(self):
        with pytest.raises(ValueError):
            CameraPose(scale=0.0)
        with pytest.raises(ValueError):
            CameraPose(yaw=200.0)


class TestFit:
    def _landmark_projection(self, model, alpha, pose):
        verts = synthesize_shape(model, ShapeCoefficients(alpha))
        return project(verts, pose)[model.landmark_indices]

    def test_round_trip_recovery(self, model):
        pose = standard_frame(96)
        rng = np.random.default_rng(7)
        alpha = rng.uniform(0.2, 0.8, size=8)
        lms = self._landmark_projection(model, alpha, pose)
        fitted = fit_coefficients(lms, model, pose, ridge=1e-6)
        assert np.abs(fitted.alpha - alpha).max() < 1e-3

    def test_mean_shape_round_trip(self, model):
        pose = standard_frame(96)
        lms = self._landmark_projection(model, np.zeros(8), pose)
        fitted = fit_coefficients(lms, model, pose, ridge=1e-6)
        assert np.abs(fitted.alpha).max() < 1e-3

    def test_large_ridge_shrinks_to_zero(self, model):
        pose = standard_frame(96)
        rng = np.random.default_rng(3)
        lms = self._landmark_projection(model, rng.uniform(0.2, 0.8, 8), pose)
        fitted = fit_coefficients(lms, model, pose, ridge=1e12)
        assert np.abs(fitted.alpha).max() < 1e-6

    def test_median_recovery_over_random_draws(self, model):
        pose = standard_frame(96)
        rng = np.random.default_rng(42)
        errs = []
        for _ in range(100):
            alpha = rng.uniform(0.2, 0.8, size=8)
            lms = self._landmark_projection(model, alpha, pose)
            fitted = fit_coefficients(lms, model, pose, ridge=1e-6)
            errs.append(np.abs(fitted.alpha - alpha).max())
        assert np.median(errs) < 1e-3

    def test_singular_without_ridge(self):
        # more basis columns than landmark equations -> rank-deficient normal matrix
        wide = build_synthetic_shape_model(seed=5, vertex_count=256, basis_count=40)
        pose = standard_frame(96)
        lms = project(wide.mean_shape, pose)[wide.landmark_indices]
        with pytest.raises(SingularFitError, match="ridge"):
            fit_coefficients(lms, wide, pose, ridge=0.0)

    def test_landmark_count_mismatch(self, model):
        with pytest.raises(ValueError):
            fit_coefficients(np.zeros((4, 2)), model, standard_frame(96))


class TestTexture:
    def test_constant_still(self, model):
        pose = standard_frame(96)
        still = np.full((96, 96), 0.37)
        tex = extract_texture(still, model, ShapeCoefficients.zeros(8), pose)
        assert np.allclose(tex, 0.37, atol=1e-12)

    def test_exact_pixel_center_sample(self, model):
        # shift the frame so the nose tip lands on an integer pixel
        nose = model.landmark_indices[list(model.landmark_names).index("nose_tip")]
        base = standard_frame(96)
        p = project(model.mean_shape, base)[nose]
        pose = base.with_frame(base.scale, base.tx + (48 - p[0]), base.ty + (48 - p[1]))
        rng = np.random.default_rng(0)
        still = rng.uniform(0.2, 0.8, size=(96, 96))
        tex = extract_texture(still, model, ShapeCoefficients.zeros(8), pose)
        assert tex[nose] == pytest.approx(still[48, 48], abs=1e-12)

    def test_matches_bilinear_oracle_on_gradient(self, model):
        pose = standard_frame(96)
        xx, yy = np.meshgrid(np.arange(96.0), np.arange(96.0))
        still = (xx + 2.0 * yy) / 300.0
        coeffs = ShapeCoefficients.zeros(8)
        tex = extract_texture(still, model, coeffs, pose)
        proj = project(model.mean_shape, pose)

        def bilinear_oracle(img, x, y):
            x0, y0 = int(math.floor(x)), int(math.floor(y))
            fx, fy = x - x0, y - y0
            return (
                img[y0, x0] * (1 - fx) * (1 - fy)
                + img[y0, x0 + 1] * fx * (1 - fy)
                + img[y0 + 1, x0] * (1 - fx) * fy
                + img[y0 + 1, x0 + 1] * fx * fy
            )

        # interior vertices: all four bilinear corners on the face footprint
        verts = model.mean_shape.reshape(-1, 3)
        interior = np.where(verts[:, 2] > 0.45)[0]
        assert interior.size > 50
        for i in interior:
            assert tex[i] == pytest.approx(bilinear_oracle(still, *proj[i]), abs=1e-6)

    def test_occluded_vertices_mirror_filled(self, model):
        # strong yaw: the far half of the face is self-occluded
        base = standard_frame(96)
        pose = CameraPose(yaw=55.0, scale=base.scale, tx=base.tx, ty=base.ty)
        xx, _ = np.meshgrid(np.arange(96.0), np.arange(96.0))
        still = xx / 96.0
        tex = extract_texture(still, model, ShapeCoefficients.zeros(8), pose)
        assert np.isfinite(tex).all()
        assert tex.min() >= 0.0 and tex.max() <= 1.0


class TestRender:
    def test_zero_texture_black_image(self, model):
        img = render(model, ShapeCoefficients.zeros(8), np.zeros(256), standard_frame(96), 96)
        assert np.array_equal(img, np.zeros((96, 96)))

    def test_deterministic(self, model):
        rng = np.random.default_rng(0)
        tex = rng.uniform(0, 1, 256)
        pose = CameraPose(yaw=25, pitch=5, scale=38.0, tx=48, ty=48)
        a = render(model, ShapeCoefficients.zeros(8), tex, pose, 96)
        b = render(model, ShapeCoefficients.zeros(8), tex, pose, 96)
        assert np.array_equal(a, b)

    def test_unsupported_resolution(self, model):
        with pytest.raises(ValueError):
            render(model, ShapeCoefficients.zeros(8), np.zeros(256), standard_frame(64), 64)

    def test_render_extract_round_trip(self, model):
        # smooth per-vertex texture -> render frontal -> re-extract
        verts = model.mean_shape.reshape(-1, 3)
        tex = 0.5 + 0.3 * np.sin(3.0 * verts[:, 0]) * np.cos(2.0 * verts[:, 1])
        pose = standard_frame(96)
        coeffs = ShapeCoefficients.zeros(8)
        img = render(model, coeffs, tex, pose, 96)
        back = extract_texture(img, model, coeffs, pose)
        assert np.abs(back - tex).mean() < 0.02

    def test_output_range_and_shape(self, model):
        rng = np.random.default_rng(1)
        tex = rng.uniform(0, 1, 256)
        img = render(model, ShapeCoefficients.zeros(8), tex, standard_frame(32), 32)
        assert img.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestPoseGrid:
    def test_paper_grid_has_73_poses(self):
        grid = pose_grid(5, 5, 60)
        assert len(grid) == 73
        frontal = [p for p in grid if p.is_frontal()]
        assert len(frontal) == 1

    def test_count_formula(self):
        assert len(pose_grid(10, 10, 60)) == 1 + 3 * 2 * 6

    def test_degenerate_range_returns_frontal(self):
        grid = pose_grid(5, 10, 5)
        assert len(grid) == 1
        assert grid[0].is_frontal()

    def test_single_axis_structure(self):
        grid = pose_grid(30, 30, 60)
        # every non-frontal pose rotates exactly one axis
        for p in grid[1:]:
            nonzero = [abs(p.yaw) > 0, abs(p.pitch) > 0, abs(p.roll) > 0]
            assert sum(nonzero) == 1

    def test_invalid_step(self):
        with pytest.raises(ValueError):
            pose_grid(0, 5, 60)


class TestSimulate:
    def _make_still(self, model, alpha, res=96):
        verts = model.mean_shape.reshape(-1, 3)
        tex = np.clip(0.55 + 0.25 * np.sin(2.5 * verts[:, 0] + 1.0) * np.cos(1.5 * verts[:, 1]), 0, 1)
        pose = standard_frame(res)
        coeffs = ShapeCoefficients(alpha)
        still = render(model, coeffs, tex, pose, res)
        lms = project(synthesize_shape(model, coeffs), pose)[model.landmark_indices]
        return still, lms

    def test_full_grid_counts_and_labels(self, model):
        still, lms = self._make_still(model, np.full(8, 0.4))
        grid = pose_grid(5, 5, 60)
        faces = simulate(still, 3, model, grid, landmarks2d=lms, identity_count=5)
        assert len(faces) == 73
        assert all(f.label.identity == 3 for f in faces)
        assert [f.label.pose for f in faces] == list(range(73))
        assert all(f.image.shape == (96, 96) for f in faces)

    def test_frontal_reconstruction(self, model):
        still, lms = self._make_still(model, np.full(8, 0.5))
        faces = simulate(still, 0, model, [CameraPose()], landmarks2d=lms, identity_count=1)
        assert len(faces) == 1
        recon = faces[0].image
        face_region = (still > 0) & (recon > 0)
        assert face_region.sum() > 1000
        assert np.abs(recon - still)[face_region].mean() < 0.1

    def test_empty_grid(self, model):
        still, lms = self._make_still(model, np.zeros(8))
        assert simulate(still, 0, model, [], landmarks2d=lms) == []


class TestFitStill:
    def test_frame_estimation_recovers_scale_translation(self, model):
        pose = CameraPose(scale=33.0, tx=50.0, ty=47.0)
        lms = project(model.mean_shape, pose)[model.landmark_indices]
        est = shape3d.estimate_frontal_frame(lms, model)
        assert est.scale == pytest.approx(33.0, rel=1e-9)
        assert est.tx == pytest.approx(50.0, abs=1e-9)
        assert est.ty == pytest.approx(47.0, abs=1e-9)

    def test_fit_still_recovers_alpha(self, model):
        rng = np.random.default_rng(11)
        alpha = rng.uniform(0.25, 0.75, 8)
        coeffs = ShapeCoefficients(alpha)
        pose = standard_frame(96)
        verts = model.mean_shape.reshape(-1, 3)
        tex = np.clip(0.5 + 0.3 * np.sin(2 * verts[:, 0]), 0, 1)
        still = render(model, coeffs, tex, pose, 96)
        lms = project(synthesize_shape(model, coeffs), pose)[model.landmark_indices]
        got_coeffs, got_pose, _ = fit_still(still, model, lms)
        assert np.abs(got_coeffs.alpha - alpha).max() < 1e-2
        assert got_pose.scale == pytest.approx(pose.scale, rel=1e-2)


def test_mesh_obj_export(tmp_path, model):
    path = tmp_path / "face.obj"
    shape3d.save_mesh_obj(model, path)
    lines = path.read_text().strip().splitlines()
    v_lines = [l for l in lines if l.startswith("v ")]
    f_lines = [l for l in lines if l.startswith("f ")]
    assert len(v_lines) == model.vertex_count
    assert len(f_lines) == len(model.triangles)
    first = np.array(v_lines[0].split()[1:], dtype=float)
    assert np.allclose(first, model.mean_shape[:3], atol=1e-6)
