import numba
import numpy as np
import pytest

from conftest import assert_grad_close, broad_gaussians, finite_diff, small_camera
from errors import NonFiniteParameterError
from rasterizer import render, render_vjp
from scene_core import GaussianSet, inverse_sigmoid

OPAQUE = 50.0  # sigmoid(50) == 1.0 in float64


def _on_axis(n, z, sigma_op, colors, scale=0.5):
    mu = np.column_stack([np.zeros(n), np.zeros(n), np.asarray(z, dtype=np.float64)])
    r = np.tile([1.0, 0, 0, 0], (n, 1))
    s = np.full((n, 3), np.log(scale))
    return GaussianSet(mu, r, s, np.asarray(sigma_op, dtype=np.float64), np.asarray(colors, dtype=np.float64))


def _centered_camera():
    cam = small_camera()
    cam.cx = cam.cy = 4.0
    return cam


class TestForward:
    def test_empty_set_renders_background(self):
        out = render(GaussianSet.empty(), small_camera(), background=(0.2, 0.3, 0.4))
        assert np.allclose(out.color, [0.2, 0.3, 0.4])
        assert np.all(out.alpha == 0.0)
        assert np.all(out.depth == small_camera().far)

    def test_opaque_gaussian_shows_its_color(self):
        logits = np.array([[0.3, -0.7, 1.1]])
        gs = _on_axis(1, [2.0], [OPAQUE], logits)
        out = render(gs, _centered_camera(), background=(1.0, 1.0, 1.0))
        assert np.array_equal(out.color[4, 4], gs.colors[0])
        assert out.alpha[4, 4] == 1.0

    def test_two_coincident_half_opaque(self):
        logits = np.array([[inverse_sigmoid(0.2)] * 3, [40.0] * 3])
        gs = _on_axis(2, [2.0, 2.0], [0.0, 0.0], logits)
        out = render(gs, _centered_camera())
        assert out.color[4, 4, 0] == pytest.approx(0.35, abs=1e-12)

    def test_center_depth_is_camera_depth(self):
        gs = _on_axis(1, [3.25], [0.0], np.zeros((1, 3)))
        out = render(gs, _centered_camera())
        assert out.depth[4, 4] == pytest.approx(3.25, abs=1e-6)

    def test_uncovered_pixels_use_far_plane(self):
        gs = _on_axis(1, [3.0], [0.0], np.zeros((1, 3)), scale=0.01)
        cam = _centered_camera()
        out = render(gs, cam)
        assert out.depth[0, 0] == cam.far
        assert out.alpha[0, 0] == 0.0

    def test_transmittance_non_increasing(self, rng):
        gs = broad_gaussians(rng, 6)
        out = render(gs, small_camera())
        records = out.blend_records(3, 4)
        assert len(records) == 6
        transmittance = [T for _, _, T in records]
        assert all(b <= a for a, b in zip(transmittance, transmittance[1:]))
        assert all(0.0 <= alpha <= 1.0 for _, alpha, _ in records)

    def test_blend_order_is_front_to_back(self, rng):
        gs = broad_gaussians(rng, 5)
        order = rng.permutation(5)
        shuffled = gs.select(order)
        out = render(shuffled, small_camera())
        depths = [shuffled.mu[idx, 2] for idx, _, _ in out.blend_records(4, 4)]
        assert depths == sorted(depths)
        assert np.allclose(out.color, render(gs, small_camera()).color, atol=1e-12)

    def test_non_finite_parameter_is_reported(self, rng):
        gs = broad_gaussians(rng, 3)
        gs.mu[1, 0] = np.inf
        with pytest.raises(NonFiniteParameterError) as info:
            render(gs, small_camera())
        assert info.value.index == 1


class TestBackward:
    def test_color_gradient_is_alpha(self):
        gs = _on_axis(1, [2.0], [0.3], np.array([[0.2, 0.4, -0.1]]))
        cam = _centered_camera()
        out = render(gs, cam)
        grad_color = np.zeros((8, 8, 3))
        grad_color[4, 4, 0] = 1.0
        grads = render_vjp(gs, cam, (0, 0, 0), grad_color, output=out)
        color = gs.colors[0, 0]
        assert grads['c'][0, 0] / (color * (1 - color)) == pytest.approx(out.alpha[4, 4], rel=1e-12)

    def test_occluded_gaussian_gets_no_gradient(self):
        gs = _on_axis(2, [2.0, 4.0], [OPAQUE, 0.0], np.zeros((2, 3)))
        cam = _centered_camera()
        grad_color = np.zeros((8, 8, 3))
        grad_color[4, 4] = 1.0
        grads = render_vjp(gs, cam, (0, 0, 0), grad_color)
        for name in ('mu', 'r', 's', 'sigma_op', 'c'):
            assert np.all(grads[name][1] == 0.0)

    def test_matches_finite_differences(self, rng):
        cam = small_camera()
        gs = broad_gaussians(rng, 5)
        background = np.array([0.1, 0.2, 0.3])
        w_color = rng.normal(size=(8, 8, 3))
        w_depth = rng.normal(scale=0.1, size=(8, 8))
        w_alpha = rng.normal(size=(8, 8))

        def objective():
            out = render(gs, cam, background)
            return float(np.sum(w_color * out.color) + np.sum(w_depth * out.depth) + np.sum(w_alpha * out.alpha))

        grads = render_vjp(gs, cam, background, w_color, w_depth, w_alpha)
        for name, values in gs.params().items():
            for index in np.ndindex(values.shape):
                assert_grad_close(grads[name][index], finite_diff(objective, values, index, h=1e-6))

    @pytest.mark.parametrize('seed', range(100))
    def test_squared_error_gradients_on_random_scenes(self, seed):
        rng = np.random.default_rng(seed)
        cam = small_camera()
        gs = broad_gaussians(rng, int(rng.integers(1, 6)))
        background = rng.uniform(0, 1, 3)
        target_color = rng.uniform(0, 1, size=(8, 8, 3))
        target_depth = rng.uniform(2.5, 5.5, size=(8, 8))
        w_alpha = rng.normal(size=(8, 8))

        def objective():
            out = render(gs, cam, background)
            return float(np.sum((out.color - target_color) ** 2) + 0.1 * np.sum((out.depth - target_depth) ** 2)
                         + np.sum(w_alpha * out.alpha))

        out = render(gs, cam, background)
        grads = render_vjp(gs, cam, background, 2.0 * (out.color - target_color),
                           0.2 * (out.depth - target_depth), w_alpha, output=out)
        params = gs.params()
        for name in rng.choice(sorted(params), size=4):
            values = params[name]
            index = tuple(int(rng.integers(d)) for d in values.shape)
            assert_grad_close(grads[name][index], finite_diff(objective, values, index, h=1e-6))

    def test_empty_set_has_empty_gradients(self):
        cam = small_camera()
        grads = render_vjp(GaussianSet.empty(), cam, (0.2, 0.2, 0.2), np.ones((8, 8, 3)))
        assert grads['mu'].shape == (0, 3) and grads['sigma_op'].shape == (0,)

    def test_thread_count_does_not_change_results(self, rng):
        gs = broad_gaussians(rng, 40)
        gs.mu[:, :2] += rng.uniform(-1.5, 1.5, size=(40, 2))
        cam = small_camera(width=40, height=40, f=30.0)
        grad_color = rng.normal(size=(40, 40, 3))
        original = numba.get_num_threads()
        try:
            numba.set_num_threads(1)
            out_a = render(gs, cam)
            grads_a = render_vjp(gs, cam, (0, 0, 0), grad_color, output=out_a)
            numba.set_num_threads(numba.config.NUMBA_NUM_THREADS)
            out_b = render(gs, cam)
            grads_b = render_vjp(gs, cam, (0, 0, 0), grad_color, output=out_b)
        finally:
            numba.set_num_threads(original)
        assert np.array_equal(out_a.color, out_b.color)
        assert np.array_equal(out_a.depth, out_b.depth)
        for name in grads_a:
            assert np.array_equal(grads_a[name], grads_b[name])
