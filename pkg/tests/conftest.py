import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from data_builder import SceneSpec, generate_tiny_scene  # noqa: E402
from dataset_io import load_dataset  # noqa: E402
from scene_core import Camera, GaussianSet  # noqa: E402
from trainer import TrainConfig  # noqa: E402


def finite_diff(f, x, index, h=1e-4):
    """Central difference of the scalar f() wrt x[index]; x is perturbed in place and restored"""
    original = x[index]
    step = h * max(abs(original), 1.0)
    x[index] = original + step
    f_plus = f()
    x[index] = original - step
    f_minus = f()
    x[index] = original
    return (f_plus - f_minus) / (2.0 * step)


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    scale = max(abs(analytic), abs(numeric))
    assert abs(analytic - numeric) <= max(atol, rtol * scale), (analytic, numeric)


def small_camera(width=8, height=8, f=12.0):
    """Identity pose: camera at the origin looking down +z"""
    return Camera(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)


def broad_gaussians(rng, n):
    """Gaussians whose footprints cover a whole 8x8 view with moderate opacity"""
    z = 3.0 + 0.5 * np.arange(n) + rng.uniform(0.0, 0.1, n)
    mu = np.column_stack([rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, n), z])
    r = rng.normal(size=(n, 4))
    s = np.log(rng.uniform(1.0, 1.5, size=(n, 3)))
    sigma_op = rng.uniform(-1.3, 0.4, n)
    c = rng.normal(size=(n, 3))
    return GaussianSet(mu, r, s, sigma_op, c)


def tiny_spec(**overrides):
    values = dict(scene='orbiting_two_ball', width=16, height=16, views=3, timestamps=5,
                  eval_views=1, event_fps=100.0)
    values.update(overrides)
    return SceneSpec(**values)


def tiny_config(**overrides):
    values = dict(n_init=200, spatial_resolution=4, time_resolution=4, features=2, decoder_width=8,
                  decoder_depth=1, k_max=2, static_steps=2, total_steps=4, densify_from=1000,
                  checkpoint_interval=0)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('orbit')
    return generate_tiny_scene(tiny_spec(), str(out))


@pytest.fixture(scope='session')
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture(scope='session')
def static_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp('static')
    return load_dataset(generate_tiny_scene(tiny_spec(speed=0.0), str(out)))
