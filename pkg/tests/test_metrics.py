import json

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from polgs.imageio import read_exr, read_ply
from polgs.metrics import (EvalReport, chamfer_brute, chamfer_distance, evaluate, export_decomposition,
                           export_pointcloud, mae_normals, oriented_normals, surface_samples)
from polgs.scene import Cubemap, GaussianSurfel, SurfelCloud, matrix_to_quaternion, surfel_normal
from polgs.stokes import azimuth_of_normal

from conftest import frontal_camera, random_cloud


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sphere_cloud(n=6000, radius=1.0, color=(0.5, 0.5, 0.5)):
    """Tangent surfels on a Fibonacci lattice of a sphere at the origin."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = np.pi * (1 + 5 ** 0.5) * k
    P = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], -1)
    out = []
    for p in P:
        a = unit(np.cross(p, [0.3, 0.5, 0.8]))
        R = np.stack([a, np.cross(p, a), p], 1)
        out.append(GaussianSurfel(radius * p, [0.04 * radius] * 2, matrix_to_quaternion(R), 0.95, color))
    return SurfelCloud.from_surfels(out)


def sphere_normals(camera, center_cam):
    d = unit(camera.camera_rays())
    b = (d * center_cam).sum(-1)
    disc = b * b - (center_cam @ center_cam - 1)
    t = b - np.sqrt(np.maximum(disc, 0))
    return d * t[..., None] - center_cam, disc > 0


class TestMAE:
    def test_identical_is_zero(self, rng):
        n = unit(rng.normal(size=(16, 16, 3)))
        assert mae_normals(n, n, np.ones((16, 16))) == pytest.approx(0.0, abs=1e-6)

    def test_ten_degree_rotation(self, rng):
        n = unit(rng.normal(size=(20, 20, 3)))
        axes = unit(np.cross(n, rng.normal(size=n.shape)))
        rot = Rotation.from_rotvec(np.radians(10.0) * axes.reshape(-1, 3))
        pred = rot.apply(n.reshape(-1, 3)).reshape(n.shape)
        assert mae_normals(pred, n, np.ones((20, 20))) == pytest.approx(10.0, abs=1e-6)

    def test_global_rotation_invariance(self, rng):
        a, b = unit(rng.normal(size=(8, 8, 3))), unit(rng.normal(size=(8, 8, 3)))
        R = Rotation.random(random_state=3)
        rot = lambda x: R.apply(x.reshape(-1, 3)).reshape(x.shape)
        m = rng.uniform(size=(8, 8)) > 0.3
        assert mae_normals(rot(a), rot(b), m) == pytest.approx(mae_normals(a, b, m), abs=1e-10)

    def test_only_masked_pixels_count(self, rng):
        gt = unit(rng.normal(size=(4, 4, 3)))
        pred = gt.copy()
        pred[0, 0] = -gt[0, 0]
        m = np.ones((4, 4))
        m[0, 0] = 0
        assert mae_normals(pred, gt, m) == pytest.approx(0.0, abs=1e-6)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="non-empty mask"):
            mae_normals(np.ones((2, 2, 3)), np.ones((2, 2, 3)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mae_normals(np.ones((2, 2, 3)), np.ones((3, 2, 3)), np.ones((2, 2)))


class TestChamfer:
    def test_same_set(self, rng):
        P = rng.normal(size=(50, 3))
        assert chamfer_distance(P, P) == 0.0

    def test_unit_offset(self):
        P = np.array([[0.0, 0, 0], [10, 0, 0]])
        assert chamfer_distance(P, P + [0, 1, 0]) == pytest.approx(1.0, abs=1e-15)

    def test_matches_brute_force(self, rng):
        P, Q = rng.normal(size=(1000, 3)), rng.normal(size=(700, 3)) + 0.2
        assert abs(chamfer_distance(P, Q) - chamfer_brute(P, Q)) <= 1e-12

    def test_symmetric(self, rng):
        P, Q = rng.normal(size=(40, 3)), rng.normal(size=(90, 3))
        assert chamfer_distance(P, Q) == pytest.approx(chamfer_distance(Q, P), abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            chamfer_distance(np.zeros((0, 3)), np.ones((3, 3)))


class TestPointCloud:
    def test_fields_and_round_trip(self, tmp_path, rng):
        cloud = random_cloud(3, rng)
        cam = frontal_camera()
        normals = export_pointcloud(cloud, tmp_path / "p.ply", [cam])
        head = (tmp_path / "p.ply").read_bytes()[:400].decode("latin-1")
        assert "element vertex 3" in head
        for f in ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "opacity"):
            assert f"property float {f}\n" in head
        back = read_ply(tmp_path / "p.ply")
        with torch.no_grad():
            np.testing.assert_allclose(back["points"], cloud.position.numpy(), atol=1e-6)
            np.testing.assert_allclose(back["colors"], cloud.color.numpy(), atol=1e-6)
            np.testing.assert_allclose(back["opacity"], cloud.opacity.numpy(), atol=1e-6)
        np.testing.assert_allclose(back["normals"], normals, atol=1e-6)

    def test_normals_match_surfel_normal(self, rng):
        cloud = random_cloud(3, rng, spread=0.2, scale=(0.3, 0.5), opacity=(0.8, 0.9))
        cam = frontal_camera()
        n = oriented_normals(cloud, [cam])
        with torch.no_grad():
            ref = surfel_normal(cloud.rotation, torch.as_tensor(cam.center) - cloud.position).numpy()
        np.testing.assert_allclose(n, ref, atol=1e-12)

    def test_sphere_normals_point_outward(self):
        from polgs.dataset import camera_ring
        cloud = sphere_cloud(800)
        n = oriented_normals(cloud, camera_ring(6, 32))
        with torch.no_grad():
            assert ((n * cloud.position.numpy()).sum(-1) > 0).all()


class TestDecomposition:
    cam = frontal_camera(64, 64, f=60.0)

    def test_zero_cubemap_has_no_specular(self, tmp_path):
        black = Cubemap(torch.full((6, 4, 4, 3), -1e3, dtype=torch.float64))
        im = export_decomposition(sphere_cloud(1500), black, self.cam, tmp_path, previews=False)
        assert np.abs(im["specular_s0"]).max() == 0.0

    def test_s0_is_sum_and_exr_round_trip(self, tmp_path):
        im = export_decomposition(sphere_cloud(1500), Cubemap.constant(0.8, 4), self.cam, tmp_path)
        np.testing.assert_allclose(im["s0"], im["diffuse_s0"] + im["specular_s0"], atol=1e-12)
        for name in ("s0", "s1", "s2", "aop", "dop", "normal", "depth", "diffuse_s0", "specular_s0"):
            back = read_exr(tmp_path / f"{name}.exr")
            np.testing.assert_array_equal(back.reshape(im[name].shape), im[name].astype(back.dtype))
        for name in ("s0", "aop", "dop", "normal", "depth", "mask"):
            assert (tmp_path / f"{name}.png").is_file()

    @pytest.mark.parametrize("lobe", ["diffuse", "specular"])
    def test_sphere_aop_follows_normal_azimuth(self, tmp_path, lobe):
        if lobe == "diffuse":
            cloud, cube, offset = sphere_cloud(), Cubemap(torch.full((6, 4, 4, 3), -1e3, dtype=torch.float64)), np.pi / 2
        else:
            cloud, cube, offset = sphere_cloud(color=(0, 0, 0)), Cubemap.constant(1.0, 4), 0.0
        im = export_decomposition(cloud, cube, self.cam, tmp_path, previews=False)
        N, hit = sphere_normals(self.cam, np.array([0, 0, 4.0]))
        phi, degenerate = azimuth_of_normal(N)
        err = np.degrees(np.abs((im["aop"][..., 1] - phi - offset + np.pi / 2) % np.pi - np.pi / 2))
        d = im["dop"][..., 1]
        sel = hit & ~degenerate & (d > np.quantile(d[hit], 0.5))
        assert sel.sum() > 100 and err[sel].max() < 1.0


class TestEvaluate:
    def test_surfel_sphere_against_analytic_sphere(self, tmp_path):
        from polgs.dataset import PolarizedView, camera_ring
        from polgs.render import render_stokes
        cloud = sphere_cloud(3000)
        views = []
        for cam in camera_ring(3, 48):
            center = cam.translation  # world origin in camera space
            N, hit = sphere_normals(cam, center)
            d = unit(cam.camera_rays())
            b = (d * center).sum(-1)
            t = b - np.sqrt(np.maximum(b * b - (center @ center - 1), 0))
            depth = np.where(hit, t * d[..., 2], 0.0)
            S = render_stokes(cloud, None, cam, deferred=False).stokes.detach().numpy()
            views.append(PolarizedView.from_stokes(S, hit.astype(float), cam, unit(N) @ cam.rotation, depth))
        rep = evaluate(cloud, None, views)
        # a discrete surfel shell approximates the sphere to a few degrees, worst at the silhouette
        assert rep.mae < 5.0 and rep.cd < 0.05 and len(rep.per_view) == 3
        rep.save(tmp_path / "e.json")
        assert EvalReport.load(tmp_path / "e.json") == rep
        assert set(json.loads((tmp_path / "e.json").read_text())) >= {"mae", "cd", "units"}

    def test_surface_samples_lie_on_sphere(self):
        from polgs.dataset import make_scene, make_synthetic_dataset
        views = make_synthetic_dataset(make_scene("sphere"), 2, 24, 0, samples=4)
        r = np.linalg.norm(surface_samples(views), axis=-1)
        np.testing.assert_allclose(r, make_scene("sphere").params["radius"], atol=1e-9)
