import numpy as np
import pytest
import torch

from polgs.rasterizer import (ALPHA_MAX, blend_pixel, composite_backward, composite_projected, per_pixel_depth,
                              project, rasterize)
from polgs.scene import Camera, GaussianSurfel, SurfelCloud

from conftest import brute_force_composite, frontal_camera, random_cloud


def one_surfel(position, scale=(0.2, 0.2), rotation=(1.0, 0, 0, 0), opacity=0.8, color=(1.0, 0.5, 0.25)):
    return SurfelCloud.from_surfels([GaussianSurfel(np.asarray(position, float), np.asarray(scale, float),
                                                    np.asarray(rotation, float), opacity, np.asarray(color))])


def axis_rotation(axis, angle):
    q = np.zeros(4)
    q[0] = np.cos(angle / 2)
    q[1:] = np.sin(angle / 2) * np.asarray(axis, float) / np.linalg.norm(axis)
    return q


class TestProject:
    def test_on_axis_hits_principal_point(self):
        cam = Camera(50, 60, 17.0, 13.0, 32, 32, np.eye(4))
        p = project(one_surfel([0, 0, 3.0]), cam)
        np.testing.assert_allclose(p.means2d.detach().numpy()[0], [17.0, 13.0], atol=1e-12)

    def test_isotropic_facing_covariance(self):
        f, z, s = 50.0, 3.0, 0.1
        cam = Camera(f, f, 16, 16, 32, 32, np.eye(4))
        p = project(one_surfel([0, 0, z], scale=(s, s)), cam, low_pass=0.0)
        np.testing.assert_allclose(p.cov2d.detach().numpy()[0], (f * s / z) ** 2 * np.eye(2), atol=1e-12)
        p = project(one_surfel([0, 0, z], scale=(s, s)), cam)
        np.testing.assert_allclose(p.cov2d.detach().numpy()[0], ((f * s / z) ** 2 + 0.3) * np.eye(2), atol=1e-12)

    def test_rigid_translation_invariance(self, rng):
        cloud = random_cloud(6, rng)
        cam = frontal_camera()
        shift = np.array([0.3, -0.7, 1.1])
        moved = SurfelCloud(cloud.position + torch.as_tensor(shift), cloud.log_scale, cloud.rotation,
                            cloud.opacity_logit, cloud.color)
        T2 = cam.world_to_camera.copy()
        T2[:3, 3] -= cam.rotation @ shift
        cam2 = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, T2)
        a, b = project(cloud, cam), project(moved, cam2)
        np.testing.assert_allclose(a.means2d.detach().numpy(), b.means2d.detach().numpy(), atol=1e-10)
        np.testing.assert_allclose(a.cov2d.detach().numpy(), b.cov2d.detach().numpy(), atol=1e-10)

    def test_behind_camera_is_culled(self):
        cam = frontal_camera(distance=4.0)
        p = project(one_surfel([0, 0, -5.0]), cam)
        assert not p.valid[0]
        buf = composite_projected(p, cam.width, cam.height)
        assert float(buf.alpha.max()) == 0.0


class TestPerPixelDepth:
    def test_exact_at_center(self, rng):
        cloud = random_cloud(5, rng)
        p = project(cloud, frontal_camera())
        for i in range(5):
            assert float(per_pixel_depth(p, i, p.means2d[i].detach().numpy())) == float(p.depth[i])

    def test_frontoparallel_is_constant(self):
        p = project(one_surfel([0.1, 0.2, 0.0]), frontal_camera())
        d0 = float(p.depth[0])
        for u in ([3.0, 4.0], [20.5, 7.25]):
            assert float(per_pixel_depth(p, 0, u)) == pytest.approx(d0, abs=1e-12)

    def test_tilted_plane_first_order(self):
        cam = frontal_camera(f=40.0)
        q = axis_rotation([1, 1, 0], 0.6)
        p = project(one_surfel([0.05, -0.1, 0.0], rotation=q), cam)
        n = GaussianSurfel(np.zeros(3), np.ones(2), q, 0.5, np.zeros(3)).rotation
        from polgs.scene import quaternion_to_matrix
        normal_cam = cam.rotation @ quaternion_to_matrix(torch.as_tensor(n)).numpy()[:, 2]
        x_cam = cam.rotation @ np.array([0.05, -0.1, 0.0]) + cam.translation
        u0 = p.means2d.detach().numpy()[0]
        errs = []
        for h in (1.0, 0.5, 0.25):
            u = u0 + h * np.array([1.0, 0.6])
            ray = np.array([(u[0] - cam.cx) / cam.fx, (u[1] - cam.cy) / cam.fy, 1.0])
            exact = (normal_cam @ x_cam) / (normal_cam @ ray)
            errs.append(abs(float(per_pixel_depth(p, 0, u)) - exact))
        # error shrinks quadratically with the offset
        assert errs[0] < 1e-3
        assert errs[1] / errs[0] < 0.3 and errs[2] / errs[1] < 0.3


class TestBlendPixel:
    def test_single_opaque(self):
        C, D, N, A = blend_pixel([1.0], [[0.2, 0.4, 0.6]], [2.5], [[0, 0, -1.0]])
        np.testing.assert_allclose(C, [0.2, 0.4, 0.6])
        assert D == 2.5 and A == 1.0
        np.testing.assert_allclose(N, [0, 0, -1])

    def test_two_half(self):
        c1, c2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
        C, _, _, A = blend_pixel([0.5, 0.5], [c1, c2])
        np.testing.assert_allclose(C, 0.5 * c1 + 0.25 * c2)
        assert A == pytest.approx(0.75)

    def test_empty_is_background(self):
        C, D, N, A = blend_pixel(np.zeros(0), np.zeros((0, 3)))
        assert A == 0 and D == 0 and not C.any()


class TestComposite:
    def test_matches_brute_force(self, rng):
        cloud = random_cloud(20, rng)
        cam = frontal_camera(32, 32)
        buf = rasterize(cloud, cam)
        C, D, N, A = brute_force_composite(buf.proj, 32, 32)
        np.testing.assert_allclose(buf.color.detach().numpy(), C, atol=1e-6)
        np.testing.assert_allclose(buf.alpha.detach().numpy(), A, atol=1e-6)
        np.testing.assert_allclose(buf.depth.detach().numpy(), D, atol=1e-6)
        np.testing.assert_allclose(buf.normal.detach().numpy(), N, atol=1e-6)

    def test_single_surfel_alpha_clamped(self):
        cam = frontal_camera()
        buf = rasterize(one_surfel([0, 0, 0], scale=(1.0, 1.0), opacity=1 - 1e-9), cam)
        c = buf.color.detach().numpy()[16, 16]
        np.testing.assert_allclose(c, ALPHA_MAX * np.array([1.0, 0.5, 0.25]), atol=1e-6)
        assert float(buf.depth[16, 16]) == pytest.approx(4.0, abs=1e-9)
        np.testing.assert_allclose(buf.normal.detach().numpy()[16, 16], [0, 0, -1], atol=1e-12)

    def test_tile_size_does_not_matter(self, rng):
        cloud = random_cloud(15, rng)
        cam = frontal_camera(40, 24)
        a = rasterize(cloud, cam, tile=16).raw.detach().numpy()
        b = rasterize(cloud, cam, tile=8).raw.detach().numpy()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_permutation_invariance(self, rng):
        cloud = random_cloud(12, rng)
        perm = torch.as_tensor(rng.permutation(12))
        cam = frontal_camera()
        a = rasterize(cloud, cam).raw.detach().numpy()
        b = rasterize(cloud.select(perm), cam).raw.detach().numpy()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_unit_normals_and_alpha_range(self, rng):
        buf = rasterize(random_cloud(30, rng), frontal_camera())
        a = buf.alpha.detach().numpy()
        assert a.min() >= 0 and a.max() <= 1
        n = buf.normal.detach().numpy()[buf.foreground.numpy()]
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)

    def test_transmittance_in_unit_interval(self, rng):
        buf = rasterize(random_cloud(30, rng), frontal_camera())
        t = buf.state.t_final
        assert t.min() >= 0 and t.max() <= 1
        np.testing.assert_allclose(1 - t, buf.alpha.detach().numpy(), atol=1e-12)

    def test_repeatable_bitwise(self, rng):
        cloud = random_cloud(25, rng)
        cam = frontal_camera()
        a = rasterize(cloud, cam).raw.detach().numpy()
        b = rasterize(cloud, cam).raw.detach().numpy()
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_zero_upstream(self, rng):
        buf = rasterize(random_cloud(8, rng), frontal_camera())
        g = composite_backward(buf.state, np.zeros((32, 32, 8)))
        assert not g.any()

    def test_shape_mismatch(self, rng):
        buf = rasterize(random_cloud(3, rng), frontal_camera())
        with pytest.raises(ValueError, match="shape"):
            composite_backward(buf.state, np.zeros((16, 32, 8)))

    def test_single_surfel_color_gradient_is_alpha(self):
        cloud = one_surfel([0, 0, 0], opacity=0.6)
        p = {k: v.clone().requires_grad_(True) for k, v in cloud.params().items()}
        buf = rasterize(cloud, frontal_camera(), p)
        buf.color[10, 12, 1].backward()
        proj = buf.proj
        d = np.array([12.5, 10.5]) - proj.means2d.detach().numpy()[0]
        A, B, C = proj.conic.detach().numpy()[0]
        alpha = 0.6 * np.exp(-(0.5 * (A * d[0] ** 2 + C * d[1] ** 2) + B * d[0] * d[1]))
        np.testing.assert_allclose(p["color"].grad.numpy()[0], [0, alpha, 0], atol=1e-12)

    def test_matches_finite_differences(self, rng):
        cloud = random_cloud(6, rng, spread=0.4)
        cam = frontal_camera(24, 24)
        W = torch.as_tensor(rng.normal(size=(24, 24, 8)))

        def f(params):
            buf = rasterize(cloud, cam, params)
            return (buf.raw * W).sum()

        p = {k: v.clone().requires_grad_(True) for k, v in cloud.params().items()}
        f(p).backward()
        h = 1e-6
        for name in cloud.param_names:
            g = p[name].grad.numpy().reshape(-1)
            base = cloud.params()[name].clone().reshape(-1)
            for k in range(0, len(base), max(1, len(base) // 8)):
                vals = []
                for sgn in (1, -1):
                    q = {n: v.clone() for n, v in cloud.params().items()}
                    b = base.clone()
                    b[k] += sgn * h
                    q[name] = b.reshape(cloud.params()[name].shape)
                    vals.append(float(f(q)))
                fd = (vals[0] - vals[1]) / (2 * h)
                assert abs(fd - g[k]) <= 1e-4 * max(abs(fd), 1.0), (name, k, fd, g[k])
