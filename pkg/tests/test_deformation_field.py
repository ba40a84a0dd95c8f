import numpy as np
import pytest

from conftest import assert_grad_close, finite_diff
from deformation_field import (DeformationField, PlaneGrids, deform, encode_time, grid_smoothness, sample_grids)
from errors import ConfigurationError, RangeError
from scene_core import GaussianSet


def _gaussians(rng, n=6):
    return GaussianSet(rng.uniform(-1, 1, size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(scale=0.3, size=(n, 3)),
                       rng.normal(size=n), rng.normal(size=(n, 3)))


def _small_field(points, seed=0, **overrides):
    values = dict(spatial_resolution=4, time_resolution=5, features=2, width=8, depth=2, k_max=2, seed=seed)
    values.update(overrides)
    return DeformationField.create(points, **values)


def _randomize(field, rng, scale=0.3):
    for name, values in field.params().items():
        if name.startswith('head_') or name.startswith('grid_'):
            values[...] = rng.normal(scale=scale, size=values.shape)


def _uniform_grids(value, resolution=4, time_resolution=5, features=2):
    shapes = [(resolution, resolution)] * 3 + [(resolution, time_resolution)] * 3
    planes = [np.full(shape + (features,), value, dtype=np.float64) for shape in shapes]
    return PlaneGrids(planes, [-1, -1, -1], [1, 1, 1])


class TestTimeEncoding:
    def test_origin(self):
        assert np.allclose(encode_time(0.0, 1), [0, 1, 0, 1])

    def test_half(self):
        assert np.allclose(encode_time(0.5, 1), [1, 0, 0, -1], atol=1e-12)

    def test_quarter_turn(self):
        half = np.sqrt(0.5)
        assert np.allclose(encode_time(0.25, 2), [half, half, 1, 0, 0, -1], atol=1e-12)

    def test_end_of_span_base_frequency(self):
        assert np.allclose(encode_time(1.0, 0), [0, -1], atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            encode_time(1.5, 3)


class TestGridSampling:
    def test_node_returns_stored_feature(self, rng):
        g = _uniform_grids(0.0)
        g.planes[0][1, 2] = [0.7, -0.3]
        mu = np.array([-1.0 + 2.0 / 3.0, -1.0 + 4.0 / 3.0, 0.0])
        features = sample_grids(g, mu, 0.0)
        assert np.allclose(features[:2], [0.7, -0.3], atol=1e-12)

    def test_constant_grids(self, rng):
        g = _uniform_grids(0.25)
        features = sample_grids(g, rng.uniform(-1, 1, size=(10, 3)), 0.37)
        assert np.allclose(features, 0.25)

    def test_midpoint_is_average(self):
        g = _uniform_grids(0.0)
        g.planes[0][0, 0] = 1.0
        g.planes[0][1, 0] = 3.0
        mu = np.array([-1.0 + 1.0 / 3.0, -1.0, 0.0])
        assert np.allclose(sample_grids(g, mu, 0.0)[:2], 2.0)

    def test_outside_box_is_clamped(self):
        g = _uniform_grids(0.0)
        g.planes[0][-1, -1] = 5.0
        assert np.allclose(sample_grids(g, np.array([3.0, 3.0, 0.0]), 0.0)[:2], 5.0)


class TestDeform:
    def test_fresh_field_is_identity(self, rng):
        gs = _gaussians(rng)
        gs.normalize_rotations()
        field = _small_field(gs.mu)
        for t in (0.0, 0.3, 1.0):
            out = deform(gs, t, field)
            for name, values in gs.params().items():
                assert np.array_equal(values, out.params()[name])

    def test_constant_position_offset(self, rng):
        gs = _gaussians(rng)
        field = _small_field(gs.mu)
        field.decoder.heads['mu'][1][:] = [1.0, 0.0, 0.0]
        out = field.deform(gs, 0.4)
        assert np.allclose(out.mu, gs.mu + [1.0, 0.0, 0.0])
        assert np.array_equal(out.s, gs.s)

    def test_opacity_and_color_are_untouched(self, rng):
        gs = _gaussians(rng)
        field = _small_field(gs.mu)
        _randomize(field, rng)
        out = field.deform(gs, 0.6)
        assert np.array_equal(out.sigma_op, gs.sigma_op)
        assert np.array_equal(out.c, gs.c)
        assert np.allclose(np.linalg.norm(out.r, axis=1), 1.0)

    def test_continuous_in_time(self, rng):
        gs = _gaussians(rng)
        field = _small_field(gs.mu)
        _randomize(field, rng)
        a = field.deform(gs, 0.5)
        b = field.deform(gs, 0.5 + 1e-7)
        for name in ('mu', 's', 'r'):
            assert np.max(np.abs(a.params()[name] - b.params()[name])) < 1e-4

    def test_params_round_trip(self, rng):
        gs = _gaussians(rng)
        field = _small_field(gs.mu)
        _randomize(field, rng)
        rebuilt = DeformationField.from_params({k: v.copy() for k, v in field.params().items()},
                                               field.grids.bbox_min, field.grids.bbox_max, field.k_max)
        a = field.deform(gs, 0.25)
        b = rebuilt.deform(gs, 0.25)
        assert np.array_equal(a.mu, b.mu)
        assert np.array_equal(a.r, b.r)


class TestGradients:
    def test_matches_finite_differences(self, rng):
        gs = _gaussians(rng, n=5)
        field = _small_field(gs.mu, seed=3)
        _randomize(field, rng)
        t = 0.37
        weights = {name: rng.normal(size=values.shape) for name, values in gs.params().items()}

        def objective():
            out = field.deform(gs, t)
            return float(sum(np.sum(weights[name] * out.params()[name]) for name in weights))

        _, cache = field.deform_with_cache(gs, t)
        canonical, field_grads = field.deform_vjp(cache, weights)

        for name in ('mu', 'r', 's'):
            values = gs.params()[name]
            for index in np.ndindex(values.shape):
                assert_grad_close(canonical[name][index], finite_diff(objective, values, index, h=1e-6),
                                  rtol=1e-4)

        params = field.params()
        for name, values in params.items():
            flat = np.abs(field_grads[name]).ravel()
            # every touched grid node and a sample of network weights
            picks = np.flatnonzero(flat)[:12] if name.startswith('grid_') else rng.choice(values.size, 6)
            for flat_index in picks:
                index = np.unravel_index(flat_index, values.shape)
                assert_grad_close(field_grads[name][index], finite_diff(objective, values, index, h=1e-6),
                                  rtol=1e-4)


class TestSmoothness:
    def test_constant_in_time(self):
        assert grid_smoothness(_uniform_grids(0.8)) == 0.0

    def test_linear_in_time(self):
        g = _uniform_grids(0.0)
        for i in (3, 4, 5):
            g.planes[i][...] = np.arange(5)[None, :, None]
        assert grid_smoothness(g) == pytest.approx(0.0, abs=1e-24)

    def test_quadratic_in_time(self):
        g = _uniform_grids(0.0)
        for i in (3, 4, 5):
            g.planes[i][...] = (np.arange(5) ** 2)[None, :, None]
        assert grid_smoothness(g) == pytest.approx(4.0)

    def test_needs_three_time_nodes(self):
        with pytest.raises(ConfigurationError):
            grid_smoothness(_uniform_grids(0.0, time_resolution=2))

    def test_gradient_matches_finite_differences(self, rng):
        field = _small_field(rng.uniform(-1, 1, size=(4, 3)))
        _randomize(field, rng)
        grads = field.smoothness_grads()
        for i in (0, 3, 5):
            plane = field.grids.planes[i]
            for _ in range(5):
                index = tuple(rng.integers(s) for s in plane.shape)
                assert_grad_close(grads[f'grid_{i}'][index], finite_diff(field.smoothness, plane, index))
