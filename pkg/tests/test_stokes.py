import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from polgs.oracle import point_stokes
from polgs.stokes import (azimuth_of_normal, aop, compose_stokes, dop, fresnel, quad_from_stokes, reflect,
                          stokes_from_quad)


def random_stokes(rng, n):
    s0 = rng.uniform(0, 10, n)
    p = rng.uniform(0, 1, n) * s0
    ang = rng.uniform(-np.pi, np.pi, n)
    return np.stack([s0, p * np.cos(ang), p * np.sin(ang)], -1)


def facing_pairs(rng, n):
    """Random camera-space view directions and normals with n . v > 0."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm = np.where((nrm * v).sum(-1, keepdims=True) < 0, -nrm, nrm)
    return nrm, v


class TestStokesFromQuad:
    def test_unpolarized(self):
        np.testing.assert_array_equal(stokes_from_quad(1.0, 1.0, 1.0, 1.0), [2, 0, 0])

    def test_fully_polarized_at_zero(self):
        np.testing.assert_array_equal(stokes_from_quad(1.0, 0.5, 0.0, 0.5), [1, 1, 0])

    def test_round_trip(self, rng):
        S = random_stokes(rng, 10000)
        np.testing.assert_allclose(stokes_from_quad(*quad_from_stokes(S)), S, atol=1e-12, rtol=0)

    def test_quad_is_non_negative_for_physical_stokes(self, rng):
        assert min(q.min() for q in quad_from_stokes(random_stokes(rng, 1000))) >= -1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            stokes_from_quad(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))

    def test_torch_input(self):
        q = [torch.tensor([1.0, 2.0], dtype=torch.float64)] * 4
        assert torch.is_tensor(stokes_from_quad(*q))

    def test_aop_dop(self):
        S = np.array([2.0, 0.0, -1.0])
        assert dop(S) == pytest.approx(0.5)
        assert aop(S) == pytest.approx(np.pi / 4)


def fresnel_mp(theta, eta, prec=50):
    with mpmath.workdps(prec):
        th = mpmath.mpf(theta)
        st_ = mpmath.sin(th) / eta
        ct = mpmath.sqrt(1 - st_ ** 2)
        ci = mpmath.cos(th)
        rs = ((ci - eta * ct) / (ci + eta * ct)) ** 2
        rp = ((ct - eta * ci) / (ct + eta * ci)) ** 2
        return float(rs), float(rp)


class TestFresnel:
    def test_normal_incidence(self):
        f = fresnel(0.0, 1.5)
        assert f.r_s == pytest.approx(0.04, abs=1e-15) and f.r_p == pytest.approx(0.04, abs=1e-15)
        assert f.r_minus == 0 and f.t_minus == 0
        assert f.r_plus == pytest.approx(((1.5 - 1) / 2.5) ** 2, abs=1e-15)

    def test_brewster(self):
        f = fresnel(np.arctan(1.5), 1.5)
        assert abs(f.r_p) < 1e-15
        assert f.r_plus == pytest.approx(f.r_minus, abs=1e-15)

    def test_high_precision_sweep(self):
        thetas = np.linspace(0, np.pi / 2 - 1e-3, 200)
        for eta in (1.3, 1.5, 2.2):
            f = fresnel(thetas, eta)
            ref = np.array([fresnel_mp(t, eta) for t in thetas])
            np.testing.assert_allclose(f.r_s, ref[:, 0], atol=1e-13)
            np.testing.assert_allclose(f.r_p, ref[:, 1], atol=1e-13)
            assert np.all(np.diff(f.r_plus) >= 0)
            assert np.all(f.r_minus >= -1e-15) and np.all(f.r_plus <= 1)
            np.testing.assert_allclose(f.r_plus + f.t_plus, 1.0, atol=1e-15)
            np.testing.assert_allclose(f.r_minus + f.t_minus, 0.0, atol=1e-15)

    def test_grazing_clamp(self):
        f = fresnel(np.array([np.pi / 2, 2.0]), 1.5)
        g = fresnel(np.pi / 2 - 1e-6, 1.5)
        np.testing.assert_allclose(f.r_s, g.r_s)
        assert np.all(np.isfinite(f.t_plus))

    def test_eta_must_exceed_one(self):
        with pytest.raises(ValueError):
            fresnel(0.3, 1.0)


class TestAzimuth:
    @pytest.mark.parametrize("n, phi", [((1.0, 0, 0), 0.0), ((0, 1.0, 0), np.pi / 2)])
    def test_axes(self, n, phi):
        p, deg = azimuth_of_normal(np.array(n))
        assert p == pytest.approx(phi) and not deg

    def test_degenerate_axis_normal(self):
        n = np.array([0.0, 0.0, 1.0])
        p, deg = azimuth_of_normal(n)
        assert deg and p == 0
        S = compose_stokes(np.ones(3), np.ones(3), n, n)
        np.testing.assert_array_equal(S[..., 1:], 0)


class TestReflect:
    def test_retro(self):
        np.testing.assert_allclose(reflect(np.array([0, 0, 1.0]), np.array([0, 0, 1.0])), [0, 0, 1])

    def test_mirror_45(self):
        n = np.array([0, 1, 1.0]) / np.sqrt(2)
        np.testing.assert_allclose(reflect(np.array([0, 0, 1.0]), n), [0, 1, 0], atol=1e-15)

    def test_random_angles(self, rng):
        n, v = facing_pairs(rng, 1000)
        r = reflect(v, n)
        np.testing.assert_allclose(np.linalg.norm(r, axis=-1), 1, atol=1e-12)
        np.testing.assert_allclose((r * n).sum(-1), (v * n).sum(-1), atol=1e-12)


class TestCompose:
    def test_zero_inputs(self, rng):
        n, v = facing_pairs(rng, 10)
        assert not compose_stokes(np.zeros((10, 3)), np.zeros((10, 3)), n, v).any()

    def test_normal_incidence(self):
        v = np.array([0, 0, 1.0])
        C = np.array([0.3, 0.5, 0.7])
        L = np.array([1.0, 2.0, 3.0])
        S = compose_stokes(C, L, v, v, 1.5)
        f = fresnel(0.0, 1.5)
        np.testing.assert_allclose(S[:, 0], C * f.t_plus + L * f.r_plus, atol=1e-15)
        np.testing.assert_array_equal(S[:, 1:], 0)

    def test_dop_at_most_one(self, rng):
        n, v = facing_pairs(rng, 5000)
        S = compose_stokes(rng.uniform(0, 1, (5000, 3)), rng.uniform(0, 1, (5000, 3)), n, v)
        assert np.all(np.hypot(S[..., 1], S[..., 2]) <= S[..., 0] + 1e-15)

    def test_rotation_about_optical_axis(self, rng):
        # rotating the normal by delta about the view axis rotates (s1, s2) by -2 delta
        v = np.array([0, 0, 1.0])
        n, _ = facing_pairs(rng, 200)
        n = np.where(n[:, 2:] < 0, -n, n)
        delta = 0.4
        c, s = np.cos(delta), np.sin(delta)
        Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        C = rng.uniform(0, 1, (200, 3))
        L = rng.uniform(0, 1, (200, 3))
        a = compose_stokes(C, L, n, v)
        b = compose_stokes(C, L, n @ Rz.T, v)
        c2, s2 = np.cos(-2 * delta), np.sin(-2 * delta)
        np.testing.assert_allclose(b[..., 0], a[..., 0], atol=1e-14)
        np.testing.assert_allclose(b[..., 1], c2 * a[..., 1] - s2 * a[..., 2], atol=1e-14)
        np.testing.assert_allclose(b[..., 2], s2 * a[..., 1] + c2 * a[..., 2], atol=1e-14)

    def test_matches_oracle_point_evaluation(self, rng):
        n, v = facing_pairs(rng, 2000)
        C = rng.uniform(0, 2, (2000, 3))
        L = rng.uniform(0, 2, (2000, 3))
        for eta in (1.33, 1.5, 1.9):
            np.testing.assert_allclose(compose_stokes(C, L, n, v, eta), point_stokes(C, L, n, v, eta),
                                       atol=1e-12, rtol=0)

    def test_gradients(self, rng):
        n, v = facing_pairs(rng, 6)
        args = [torch.tensor(a, dtype=torch.float64, requires_grad=True)
                for a in (rng.uniform(0.1, 1, (6, 3)), rng.uniform(0.1, 1, (6, 3)), n)]
        vt = torch.tensor(v)
        assert torch.autograd.gradcheck(lambda C, L, nn: compose_stokes(C, L, nn, vt), args, eps=1e-6,
                                        atol=1e-9, rtol=1e-5)

    @given(st.floats(0.0, 1.5), st.floats(-np.pi, np.pi))
    def test_torch_and_numpy_agree(self, theta, phi):
        n = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
        v = np.array([0, 0, 1.0])
        a = compose_stokes(np.ones(3), 0.5 * np.ones(3), n, v)
        b = compose_stokes(torch.ones(3, dtype=torch.float64), 0.5 * torch.ones(3, dtype=torch.float64),
                           torch.tensor(n), torch.tensor(v)).numpy()
        np.testing.assert_allclose(a, b, atol=1e-14)
