import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planeparallax.errors import (BehindPlaneHorizon, DegeneratePair, EpipoleSingularity,
                                  PlaneParallaxError)
from planeparallax.geometry import CameraIntrinsics, PlanarHomography, ReferencePlane
from planeparallax.homography import CorrespondenceSet, Epipole
from planeparallax.parallax import (DYNAMIC, NEAR_EPIPOLE, NO_MOTION, OUT_OF_RANGE, VALID,
                                    decompose_displacement, depth_to_structure,
                                    epipole_exclusion_mask, projective_structure,
                                    propagate_structure, relative_structure, samples_to_depth,
                                    splat, structure_map, structure_map_to_depth,
                                    structure_samples, structure_to_depth)
from planeparallax.synthetic import (KIND_BOX, KIND_DYNAMIC, DynamicPoint, SceneConfig,
                                     generate_scene)

K_SIMPLE = CameraIntrinsics(2.0, 2.0, 0.0, 0.0)
GROUND = ReferencePlane(np.array([0.0, 1.0, 0.0]), 1.5)

# five cars moving sideways and forward through the default scene
MOVERS = tuple(DynamicPoint(p, (0.3, 0.0, 0.8)) for p in
               [(1.0, 0.8, 9.0), (-1.0, 0.8, 13.0), (0.5, 1.0, 18.0), (-0.5, 0.9, 22.0),
                (1.5, 0.7, 27.0)])


def samples_of(scene, matches=None, **kw):
    m = scene.exact if matches is None else matches
    return structure_samples(m, scene.true_homography, scene.true_epipole, scene.k_scale, **kw)


class TestDisplacement:
    def test_split_is_exact(self, scene):
        m = scene.exact
        d = decompose_displacement(scene.true_homography, m.p_b, m.p_a)
        assert np.array_equal(d.u_pi + d.mu, (m.p_b - d.p_w) + (d.p_w - m.p_a))
        assert np.abs(d.u_pi + d.mu - (m.p_b - m.p_a)).max() < 1e-12

    def test_plane_points_have_no_parallax(self, scene):
        d = decompose_displacement(scene.true_homography, scene.exact.p_b, scene.exact.p_a)
        assert np.abs(d.mu[scene.on_plane]).max() < 1e-9

    def test_parallax_points_at_epipole(self, scene):
        d = decompose_displacement(scene.true_homography, scene.exact.p_b, scene.exact.p_a)
        off = ~scene.on_plane
        ray = d.p_w[off] - scene.true_epipole.e
        cross = d.mu[off, 0] * ray[:, 1] - d.mu[off, 1] * ray[:, 0]
        assert np.abs(cross / np.linalg.norm(ray, axis=1)).max() < 1e-9


class TestProjectiveStructure:
    def test_matches_height_over_depth(self, scene):
        s = samples_of(scene)
        ok = s.valid
        assert ok.sum() > 300
        assert np.abs(s.gamma[ok] - scene.gamma[ok]).max() < 1e-9
        assert np.abs(s.residual[ok]).max() < 1e-9

    def test_scalar_form_agrees(self, scene):
        s = samples_of(scene)
        i = int(np.flatnonzero(s.valid & (scene.kind == KIND_BOX))[0])
        g, r = projective_structure(scene.exact.p_a[i], s.p_w[i], scene.true_epipole,
                                    scene.k_scale, return_residual=True)
        assert abs(g - scene.gamma[i]) < 1e-9 and abs(r) < 1e-9

    def test_above_ground_is_negative(self, scene):
        s = samples_of(scene)
        box = s.valid & (scene.kind == KIND_BOX)
        assert np.all(s.gamma[box] < 0)

    def test_box_top_example(self):
        # a 1.5 m box top seen at 15 m depth: gamma = -1.5 / 15
        K = CameraIntrinsics(371.5, 369.5, 318.5, 92.25)
        P = np.array([0.4, 0.0, 15.0])
        assert abs(depth_to_structure(P[2], GROUND, K, (K.K @ P / P[2])[:2]) + 0.1) < 1e-12

    def test_near_epipole_raises(self, scene):
        e = scene.true_epipole
        with pytest.raises(EpipoleSingularity):
            projective_structure(e.e + 1.0, e.e + 3.0, e, scene.k_scale)

    def test_zero_k_rejected(self, scene):
        with pytest.raises(ValueError):
            projective_structure([0, 0], [10, 10], scene.true_epipole, 0.0)

    def test_infinite_epipole_rejected(self):
        with pytest.raises(PlaneParallaxError):
            projective_structure([0, 0], [10, 10], Epipole.infinite([1.0, 0.0]), 1.0)


class TestRelativeStructure:
    def test_ratio_without_epipole(self, scene):
        d = decompose_displacement(scene.true_homography, scene.exact.p_b, scene.exact.p_a)
        box = np.flatnonzero(scene.kind == KIND_BOX)
        i, j = box[0], box[5]
        ratio = relative_structure(d.mu[i], d.mu[j], d.p_w[i], d.p_w[j])
        assert abs(ratio - scene.gamma[j] / scene.gamma[i]) < 1e-8

    def test_propagation_matches_direct(self, scene):
        s = samples_of(scene)
        d = decompose_displacement(scene.true_homography, scene.exact.p_b, scene.exact.p_a)
        box = np.flatnonzero(s.valid & (scene.kind == KIND_BOX))
        a = box[0]
        prop = propagate_structure((d.p_w[a], d.mu[a], s.gamma[a]),
                                   [(d.p_w[i], d.mu[i]) for i in box[1:]])
        ok = prop.valid
        assert ok.mean() > 0.95
        assert np.abs(prop.gamma[ok] - s.gamma[box[1:]][ok]).max() < 1e-8

    def test_coincident_pair(self):
        with pytest.raises(DegeneratePair):
            relative_structure([1, 0], [1, 0], [5, 5], [5, 5])

    def test_parallel_pair(self):
        # reference parallax along the separation gives no constraint
        with pytest.raises(DegeneratePair):
            relative_structure([1, 0], [2, 0], [0, 0], [5, 0])

    def test_degenerate_target_invalid(self):
        prop = propagate_structure(((0.0, 0.0), (1.0, 1.0), -0.1), [((0.0, 0.0), (1.0, 1.0))])
        assert not prop.valid[0] and np.isnan(prop.gamma[0])

    def test_zero_anchor(self):
        with pytest.raises(ValueError):
            propagate_structure(((0.0, 0.0), (1.0, 1.0), 0.0), [])


class TestStructureDepth:
    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.5, 80.0), st.floats(-300, 300), st.floats(-50, 100))
    def test_round_trip(self, Z, u, v):
        K = CameraIntrinsics(371.5, 369.5, 318.5, 92.25)
        p = np.array([u + 318.5, v + 92.25])
        g = depth_to_structure(Z, GROUND, K, p)
        back = structure_to_depth(g, GROUND, K, p)
        assert abs(back - Z) / Z < 1e-12

    def test_constructed_point(self):
        # K^-1 (0, 1, 1) = (0, 0.5, 1); on the plane at Z = 3
        assert structure_to_depth(0.0, GROUND, K_SIMPLE, (0.0, 1.0)) == 3.0

    def test_horizon(self):
        with pytest.raises(BehindPlaneHorizon):
            structure_to_depth(0.0, GROUND, K_SIMPLE, (0.0, -1.0))

    def test_principal_point_on_horizon(self):
        # the optical axis runs parallel to the ground
        K = CameraIntrinsics(371.5, 369.5, 318.5, 92.25)
        with pytest.raises(BehindPlaneHorizon):
            structure_to_depth(0.0, GROUND, K, (K.cx, K.cy))

    def test_horizon_vectorized(self):
        Z = structure_to_depth(np.zeros(2), GROUND, K_SIMPLE, np.array([[0.0, 1.0], [0.0, -1.0]]))
        assert Z[0] == 3.0 and np.isnan(Z[1])

    def test_far_limit(self):
        K = CameraIntrinsics(371.5, 369.5, 318.5, 92.25)
        p = np.array([400.0, 60.0])
        g = depth_to_structure(1e6, GROUND, K, p)
        r = (np.linalg.inv(K.K) @ [p[0], p[1], 1.0]) @ GROUND.normal
        assert abs(g - r) < 1e-5

    def test_nonpositive_depth(self):
        with pytest.raises(ValueError):
            depth_to_structure(0.0, GROUND, K_SIMPLE, (0.0, 1.0))

    def test_sample_depth_is_exact(self, scene):
        s = samples_of(scene)
        Z, ok = samples_to_depth(s, scene.plane_a, scene.intrinsics)
        assert np.abs(Z[ok] / scene.depth_a[ok] - 1).max() < 1e-8


class TestExclusion:
    def test_lattice_count(self):
        e = Epipole(np.array([20.0, 20.0]), 0, False)
        assert int(epipole_exclusion_mask((41, 41), e, 5.0).sum()) == 69
        assert int(epipole_exclusion_mask((41, 41), e, 0.0).sum()) == 0

    def test_epipole_outside_image(self):
        e = Epipole(np.array([-50.0, 10.0]), 0, False)
        assert not epipole_exclusion_mask((40, 20), e, 5.0).any()

    def test_infinite_epipole(self):
        assert not epipole_exclusion_mask((8, 8), Epipole.infinite([1.0, 0.0]), 5.0).any()

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            epipole_exclusion_mask((8, 8), Epipole(np.zeros(2), 0, False), -1.0)

    def test_map_honours_radius(self, scene):
        smap = structure_map(scene.exact, scene.true_homography, scene.true_epipole,
                             scene.k_scale, exclusion_radius=30.0)
        near = epipole_exclusion_mask(scene.config.image_size, scene.true_epipole, 30.0)
        assert not smap.valid[near].any()


class TestSamples:
    def test_reasons(self, scene):
        s = samples_of(scene, exclusion_radius=25.0)
        assert set(np.unique(s.reason)) <= {VALID, NEAR_EPIPOLE, NO_MOTION, OUT_OF_RANGE, DYNAMIC}
        assert np.all(np.isnan(s.gamma[s.reason == NEAR_EPIPOLE]))

    def test_out_of_range_flagged(self, scene):
        s = samples_of(scene, gamma_range=(-0.01, 0.01))
        oor = s.reason == OUT_OF_RANGE
        assert oor.any() and not s.valid[oor].any()
        assert np.all(np.isfinite(s.gamma[oor]))

    def test_no_motion(self):
        m = CorrespondenceSet([[100.0, 100.0], [300.0, 50.0]], [[100.1, 100.0], [300.0, 50.0]])
        s = structure_samples(m, PlanarHomography(np.eye(3)), Epipole(np.zeros(2), 1, False), 0.5)
        assert np.all(s.reason == NO_MOTION)

    def test_dynamic_excluded(self):
        s = generate_scene(SceneConfig(dynamic_points=MOVERS))
        samp = samples_of(s)
        dyn = s.kind == KIND_DYNAMIC
        assert np.all(samp.reason[dyn] == DYNAMIC) and not samp.valid[dyn].any()


class TestDynamicFailure:
    def test_moving_points_break_structure(self):
        errs_dyn, errs_static = [], []
        for seed in range(3):
            s = generate_scene(SceneConfig(dynamic_points=MOVERS, label_dynamic=False,
                                           noise_px=0.5, seed=seed))
            samp = samples_of(s, matches=s.correspondences, gamma_range=None)
            err = np.abs(samp.gamma - s.gamma)
            errs_dyn.append(err[s.kind == KIND_DYNAMIC])
            errs_static.append(err[(s.kind == KIND_BOX) & samp.valid])
        assert np.mean(np.concatenate(errs_dyn)) > 10 * np.mean(np.concatenate(errs_static))


class TestRaster:
    def test_last_writer_wins(self):
        pix = np.array([[1.2, 0.9], [0.8, 1.1], [3.0, 0.0]])
        grid, ok, owner = splat(pix, [1.0, 2.0, 3.0], [True, True, False], (4, 2))
        assert grid[1, 1] == 2.0 and owner[1, 1] == 1
        assert not ok[0, 3] and owner[0, 3] == 2
        assert np.isnan(grid[0, 0]) and owner[0, 0] == -1

    def test_outside_dropped(self):
        grid, ok, owner = splat(np.array([[-1.0, 0.0], [5.0, 0.0]]), [1.0, 1.0], [True, True], (4, 2))
        assert not ok.any() and (owner == -1).all()

    def test_map_matches_truth(self, scene):
        smap = structure_map(scene.exact, scene.true_homography, scene.true_epipole, scene.k_scale)
        ref = scene.true_structure
        ok = smap.valid
        assert ok.sum() > 300 and (ref.valid[ok]).all()
        assert np.abs(smap.values[ok] - ref.values[ok]).max() < 1e-9

    def test_map_depth_close_to_truth(self, scene):
        # cell-centre conversion moves each pixel by up to half a cell
        smap = structure_map(scene.exact, scene.true_homography, scene.true_epipole, scene.k_scale)
        dm = structure_map_to_depth(smap, scene.plane_a, scene.intrinsics)
        ok = dm.valid & scene.true_depth.valid
        rel = np.abs(dm.values[ok] / scene.true_depth.values[ok] - 1)
        assert np.median(rel) < 0.02
