import numpy as np
import pytest

from conftest import assert_grad_close, finite_diff, small_camera
from errors import ConfigurationError, DegenerateRotationError, NonFiniteParameterError
from scene_core import (Camera, Gaussian, GaussianSet, covariance_from_params, project_gaussian,
                        project_gaussian_vjp, project_gaussians)


def _random_unit_quaternion(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


class TestCovariance:
    def test_identity_rotation_unit_scale(self):
        Sigma = covariance_from_params([1, 0, 0, 0], [0, 0, 0])
        assert np.allclose(Sigma, np.eye(3), atol=1e-12)

    def test_log_scale(self):
        Sigma = covariance_from_params([1, 0, 0, 0], [np.log(2.0), 0, 0])
        assert np.allclose(Sigma, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_quarter_turn_about_z_swaps_axes(self):
        half = np.pi / 4
        Sigma = covariance_from_params([np.cos(half), 0, 0, np.sin(half)], [np.log(2.0), 0, 0])
        assert np.allclose(Sigma, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_zero_quaternion_raises(self):
        with pytest.raises(DegenerateRotationError):
            covariance_from_params([0, 0, 0, 0], [0, 0, 0])

    def test_symmetric_positive_definite(self, rng):
        for _ in range(50):
            s = rng.uniform(-3, 1, 3)
            Sigma = covariance_from_params(rng.normal(size=4), s)
            assert np.allclose(Sigma, Sigma.T, atol=1e-12)
            eig = np.linalg.eigvalsh(Sigma)
            assert eig.min() >= np.exp(2 * s).min() * (1 - 1e-9)

    def test_unnormalized_quaternion_is_equivalent(self, rng):
        q = rng.normal(size=4)
        s = rng.normal(size=3)
        assert np.allclose(covariance_from_params(q, s), covariance_from_params(3.7 * q, s), atol=1e-12)


class TestProjection:
    def test_on_axis_mean_lands_on_principal_point(self):
        cam = Camera(fx=100, fy=100, cx=32, cy=24, width=64, height=48)
        p = project_gaussian(Gaussian(np.array([0, 0, 3.0]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0,
                                      np.zeros(3)), cam)
        assert p.valid
        assert np.allclose(p.mu2, [32, 24])
        assert p.z_cam == pytest.approx(3.0)

    def test_behind_camera_is_invalid(self):
        cam = Camera(fx=100, fy=100, cx=32, cy=24, width=64, height=48)
        p = project_gaussian(Gaussian(np.array([0, 0, -1.0]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0,
                                      np.zeros(3)), cam)
        assert not p.valid

    def test_isotropic_footprint(self):
        cam = Camera(fx=100, fy=100, cx=32, cy=32, width=64, height=64)
        p = project_gaussian(Gaussian(np.array([0, 0, 2.0]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0,
                                      np.zeros(3)), cam)
        assert np.allclose(p.cov2, np.diag([2500.0, 2500.0]), atol=1e-9)

    def test_quaternion_sign_flip_is_bit_identical(self, rng):
        cam = small_camera()
        for _ in range(20):
            mu = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(2, 5)])
            r = rng.normal(size=4)
            s = rng.normal(scale=0.3, size=3)
            a = project_gaussians(mu, r, s, cam)
            b = project_gaussians(mu, -r, s, cam)
            assert np.array_equal(a.mu2, b.mu2)
            assert np.array_equal(a.cov2, b.cov2)
            assert np.array_equal(a.z, b.z)

    def test_depth_gradient_is_camera_forward_axis(self, rng):
        cam = Camera.look_at([1.0, -0.5, -3.0], [0, 0, 0], [0, -1, 0], 50, 50, 16, 16, 32, 32)
        g = Gaussian(rng.normal(scale=0.3, size=3), rng.normal(size=4), rng.normal(scale=0.2, size=3), 0.0,
                     np.zeros(3))
        grads = project_gaussian_vjp(g, cam, g_z=1.0)
        assert np.allclose(grads['mu'], cam.rotation[2], atol=1e-12)

    def test_zero_upstream_gives_zero_gradients(self, rng):
        g = Gaussian(np.array([0.1, 0.2, 3.0]), rng.normal(size=4), rng.normal(size=3), 0.0, np.zeros(3))
        grads = project_gaussian_vjp(g, small_camera())
        for value in grads.values():
            assert np.all(value == 0.0)

    def test_vjp_matches_finite_differences(self, rng):
        for _ in range(100):
            eye = rng.normal(scale=0.5, size=3) + np.array([0, 0, -4.0])
            cam = Camera.look_at(eye, rng.normal(scale=0.2, size=3), [0, -1, 0], 40, 40, 16, 16, 32, 32)
            mu = rng.normal(scale=0.4, size=3)
            r = rng.normal(size=4)
            s = rng.uniform(-1.0, 0.5, 3)
            g_mu2 = rng.normal(size=2)
            g_cov2 = rng.normal(size=(2, 2))
            g_z = rng.normal()

            def objective():
                p = project_gaussians(mu, r, s, cam)
                return float(g_mu2 @ p.mu2[0] + np.sum(g_cov2 * p.cov2[0]) + g_z * p.z[0])

            grads = project_gaussian_vjp(Gaussian(mu, r, s, 0.0, np.zeros(3)), cam, g_mu2, g_cov2, g_z)
            for name, values in (('mu', mu), ('r', r), ('s', s)):
                for i in range(len(values)):
                    assert_grad_close(grads[name][i], finite_diff(objective, values, i, h=1e-5))


class TestContainers:
    def test_camera_validation(self):
        with pytest.raises(ConfigurationError):
            Camera(fx=10, fy=10, cx=4, cy=4, width=8, height=8, near=1.0, far=0.5).validate()
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(ConfigurationError):
            Camera(fx=10, fy=10, cx=4, cy=4, width=8, height=8, world_to_camera=bad).validate()

    def test_look_at_points_camera_at_target(self):
        cam = Camera.look_at([0, 0, -5], [0, 0, 0], [0, -1, 0], 10, 10, 4, 4, 8, 8)
        assert np.allclose(cam.center, [0, 0, -5])
        p = project_gaussians(np.zeros(3), [1, 0, 0, 0], np.zeros(3), cam)
        assert np.allclose(p.mu2[0], [4, 4])
        assert p.z[0] == pytest.approx(5.0)

    def test_check_finite_names_offending_gaussian(self, rng):
        gs = GaussianSet(rng.normal(size=(4, 3)), rng.normal(size=(4, 4)), np.zeros((4, 3)), np.zeros(4),
                         np.zeros((4, 3)))
        gs.s[2, 1] = np.nan
        with pytest.raises(NonFiniteParameterError) as info:
            gs.check_finite()
        assert info.value.index == 2

    def test_check_finite_accepts_empty_set(self):
        GaussianSet.empty().check_finite()

    def test_select_and_concatenate(self, rng):
        gs = GaussianSet(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3)),
                         rng.normal(size=5), rng.normal(size=(5, 3)))
        merged = gs.select([0, 1]).concatenate(gs.select([2, 3, 4]))
        for name, values in gs.params().items():
            assert np.array_equal(values, merged.params()[name])
