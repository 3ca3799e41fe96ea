import numpy as np
import pytest
import torch

from surfsplat.geometry import (
    RefinementMasks,
    export_mask_labels,
    normal_from_depth,
    normal_from_depth_t,
    pixel_frame,
    refined_depth,
    refinement_masks,
)
from surfsplat.scene import Camera


def make_camera(size=16, f=20.0):
    return Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2,
                  width=size, height=size, world_to_camera=np.eye(4))


def plane_depth(camera, n, d0):
    """z-depth map of the plane n . p = d0 in the camera frame."""
    xs = (np.arange(camera.width) - camera.cx) / camera.fx
    ys = (np.arange(camera.height) - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    denom = n[0] * gx + n[1] * gy + n[2]
    return d0 / denom


class TestNormalFromDepth:
    def test_frontoparallel_plane(self):
        cam = make_camera()
        depth = np.full((16, 16), 2.0)
        normals, valid = normal_from_depth(depth, cam)
        assert valid[1:-1, 1:-1].all()
        np.testing.assert_allclose(normals[valid], [[0, 0, -1]] * valid.sum(),
                                   atol=1e-12)

    def test_tilted_plane_analytic(self):
        cam = make_camera(size=24)
        n = np.array([0.3, -0.2, 1.0])
        n /= np.linalg.norm(n)
        depth = plane_depth(cam, n, 3.0)
        normals, valid = normal_from_depth(depth, cam)
        # camera-facing convention flips the plane normal's sign
        err = np.linalg.norm(normals[valid] - (-n), axis=-1)
        assert err.max() < 1e-9

    def test_border_invalid(self):
        cam = make_camera()
        _, valid = normal_from_depth(np.full((16, 16), 2.0), cam)
        assert not valid[0].any() and not valid[-1].any()
        assert not valid[:, 0].any() and not valid[:, -1].any()

    def test_zero_depth_poisons_neighborhood(self):
        cam = make_camera()
        depth = np.full((16, 16), 2.0)
        depth[8, 8] = 0.0
        _, valid = normal_from_depth(depth, cam)
        for dv, du in ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)):
            assert not valid[8 + dv, 8 + du]
        assert valid[8, 11]

    def test_unit_norm_on_valid(self):
        cam = make_camera()
        rng = np.random.default_rng(0)
        depth = 2.0 + 0.1 * rng.normal(size=(16, 16))
        normals, valid = normal_from_depth(depth, cam)
        np.testing.assert_allclose(np.linalg.norm(normals[valid], axis=-1),
                                   1.0, atol=1e-12)

    def test_gradient_flows_through_depth(self):
        cam = make_camera(size=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64,
                           requires_grad=True)
        normals, valid = normal_from_depth_t(depth, cam)
        normals[valid].sum().backward()
        assert depth.grad is not None
        assert torch.isfinite(depth.grad).all()


class TestPixelFrame:
    def test_tangent_orthogonal_to_ray(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            fr = pixel_frame(n, v)
            assert abs(np.dot(fr.tangent, v)) < 1e-9
            assert np.linalg.norm(fr.tangent) == pytest.approx(1.0, abs=1e-9)

    def test_cos_theta_prime_is_sin_theta(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            fr = pixel_frame(n, v)
            cos_theta = np.dot(n, -v)
            sin_theta = np.sqrt(max(0.0, 1 - cos_theta ** 2))
            assert fr.cos_theta_prime == pytest.approx(sin_theta, abs=1e-9)
            # y lies in the n-v plane with n . (-y) = sin(theta) >= 0
            assert np.dot(n, -fr.tangent) == pytest.approx(sin_theta, abs=1e-9)

    def test_parallel_normal_degenerate(self):
        v = np.array([0.0, 0.0, 1.0])
        fr = pixel_frame(-v, v)
        assert fr.cos_theta_prime == 0.0
        assert abs(np.dot(fr.tangent, v)) < 1e-12


def random_triples(rng, count):
    n = rng.normal(size=(count, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    nh = rng.normal(size=(count, 3))
    nh /= np.linalg.norm(nh, axis=1, keepdims=True)
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return n, nh, v


class TestRefinementMasks:
    def test_thousand_triple_partition(self):
        rng = np.random.default_rng(3)
        n, nh, v = random_triples(rng, 1000)
        masks = refinement_masks(n, nh, v)
        counts = (masks.m1.astype(int) + masks.m2.astype(int)
                  + masks.m3.astype(int))
        assert (counts == 1).all()

    def test_mask_defining_conditions(self):
        rng = np.random.default_rng(4)
        n, nh, v = random_triples(rng, 1000)
        masks = refinement_masks(n, nh, v)
        cos_theta = np.einsum("ij,ij->i", n, -v)
        sin_theta = np.sqrt(np.clip(1 - cos_theta ** 2, 0, 1))
        assert (masks.cos_alpha[masks.m1] > sin_theta[masks.m1]).all()
        assert (sin_theta[masks.m1] > 0).all()
        assert (masks.cos_alpha[masks.m2] < 0).all()
        on3 = masks.m3
        assert (~((masks.cos_alpha[on3] > sin_theta[on3]) & (sin_theta[on3] > 0))
                & ~(masks.cos_alpha[on3] < 0)).all()

    def test_invalid_pixels_in_no_mask(self):
        rng = np.random.default_rng(5)
        n, nh, v = random_triples(rng, 64)
        valid = rng.random(64) > 0.5
        masks = refinement_masks(n, nh, v, valid=valid)
        assert not (masks.m1 | masks.m2 | masks.m3)[~valid].any()
        union = masks.m1 | masks.m2 | masks.m3
        assert (union == valid).all()

    def test_equality_boundary_lands_in_m3(self):
        # prior normal exactly opposite the tangent: cos_alpha == 0 exactly
        v = np.array([[0.0, 0.0, 1.0]])
        n = np.array([[0.0, -1.0, -1.0]]) / np.sqrt(2)
        masks0 = refinement_masks(n, v.copy(), v)  # nh orthogonal to y? build below
        fr = pixel_frame(n[0], v[0])
        nh = np.cross(fr.tangent, v[0])[None]
        nh /= np.linalg.norm(nh)
        masks = refinement_masks(n, nh, v)
        assert masks.cos_alpha[0] == pytest.approx(0.0, abs=1e-12)
        assert masks.m3[0] and not masks.m1[0] and not masks.m2[0]
        assert masks0.m1.dtype == bool


class TestRefinedDepth:
    def test_case_identities(self):
        rng = np.random.default_rng(6)
        n, nh, v = random_triples(rng, 1000)
        masks = refinement_masks(n, nh, v)
        d = rng.uniform(0.5, 5.0, 1000)
        dp = d + rng.uniform(-0.3, 0.3, 1000)
        a = rng.uniform(0.0, 1.0, 1000)
        dr = refined_depth(d, dp, a, masks)
        np.testing.assert_allclose(dr[masks.m2], d[masks.m2])
        np.testing.assert_allclose(dr[masks.m3], dp[masks.m3])
        lo = np.minimum(d, dp)[masks.m1]
        hi = np.maximum(d, dp)[masks.m1]
        assert (dr[masks.m1] >= lo - 1e-12).all()
        assert (dr[masks.m1] <= hi + 1e-12).all()

    def test_m1_blend_formula(self):
        masks = RefinementMasks(m1=np.array([True]), m2=np.array([False]),
                                m3=np.array([False]), cos_alpha=np.array([0.9]))
        dr = refined_depth(np.array([2.0]), np.array([3.0]), np.array([0.25]),
                           masks)
        assert dr[0] == pytest.approx(0.25 * 3.0 + 0.75 * 2.0)

    def test_unmasked_pixels_keep_unbiased_depth(self):
        masks = RefinementMasks(m1=np.array([False]), m2=np.array([False]),
                                m3=np.array([False]), cos_alpha=np.array([0.0]))
        dr = refined_depth(np.array([2.0]), np.array([3.0]), np.array([0.5]),
                           masks)
        assert dr[0] == 3.0


class TestMaskLabels:
    def test_label_image(self):
        masks = RefinementMasks(m1=np.array([[True, False, False, False]]),
                                m2=np.array([[False, True, False, False]]),
                                m3=np.array([[False, False, True, False]]),
                                cos_alpha=np.zeros((1, 4)))
        np.testing.assert_array_equal(export_mask_labels(masks),
                                      [[1, 2, 3, 0]])
