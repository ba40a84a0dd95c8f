"""
Two-phase optimization of canonical Gaussians and the deformation field.

Phase 1 (static_steps): identity deformation, RGB + depth losses on the
earliest timestamp's training views. Phase 2: full objective with event
windows and the grid smoothness regularizer, with periodic clone / split /
prune density control.
"""

import os
import warnings
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from tqdm import tqdm

from deformation_field import DeformationField
from errors import ConfigurationError, DimensionMismatchError, NumericalError, EmptySupervisionWarning
from event_model import accumulate_window, event_loss, event_loss_grad, predicted_log_diff, \
    predicted_log_diff_vjp, sample_window
from rasterizer import render, render_vjp
from scene_core import GaussianSet, PARAM_NAMES, inverse_sigmoid, normalize_quaternions, quaternion_to_rotation

HISTORY_COLUMNS = ['step', 'l_rgb', 'l_event', 'l_depth', 'l_g', 'total']
INITIAL_OPACITY = 0.1
SPLIT_SCALE_DIVISOR = 1.6
SPLIT_OFFSET = 0.75
CLONE_OFFSET = 0.5


@dataclass
class TrainConfig:
    # loss weights (lambda3 is the perceptual term; accepted but contributes nothing)
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 0.0
    lambda4: float = 0.5
    lambda5: float = 0.01
    # event window lengths, seconds
    l_min: float = 0.001
    l_max: float = 0.05
    static_steps: int = 500
    total_steps: int = 4000
    # learning rates
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_s: float = 5e-3
    lr_r: float = 1e-3
    lr_sigma_op: float = 5e-2
    lr_c: float = 2.5e-3
    lr_grid: float = 1.6e-3
    lr_decoder: float = 1.6e-4
    # density control
    densify_from: int = 100
    densify_until: int = 2000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 20000
    # initialization
    n_init: int = 2000
    init_views: int = 1
    init_from_depth: bool = True
    init_depth_min: float = 2.5
    init_depth_max: float = 5.5
    # deformation field
    spatial_resolution: int = 32
    time_resolution: int = 16
    features: int = 16
    decoder_width: int = 64
    decoder_depth: int = 2
    k_max: int = 6
    motion_degree: float = 1.0
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_interval: int = 1000

    def __post_init__(self):
        self.background = tuple(float(v) for v in self.background)
        self.validate()

    def validate(self):
        for name in ('lambda1', 'lambda2', 'lambda3', 'lambda4', 'lambda5'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0 (got {getattr(self, name)})")
        if not 0 <= self.static_steps <= self.total_steps:
            raise ConfigurationError(
                f"need 0 <= static_steps <= total_steps (got {self.static_steps}, {self.total_steps})")
        if not 0 < self.l_min <= self.l_max:
            raise ConfigurationError(f"need 0 < l_min <= l_max (got {self.l_min}, {self.l_max})")
        if len(self.background) != 3:
            raise ConfigurationError(f"background must have 3 components (got {self.background})")
        if self.n_init < 1 or self.init_views < 1:
            raise ConfigurationError("n_init and init_views must be >= 1")
        if self.densify_interval < 1:
            raise ConfigurationError("densify_interval must be >= 1")

    def weights(self):
        return {f'lambda{i}': getattr(self, f'lambda{i}') for i in range(1, 6)}

    def learning_rates(self):
        return {'mu': self.lr_mu, 's': self.lr_s, 'r': self.lr_r, 'sigma_op': self.lr_sigma_op,
                'c': self.lr_c, 'grid': self.lr_grid, 'decoder': self.lr_decoder}


_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def _coerce(name, kind, text):
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(f"not a boolean: {text!r}")
            return lowered in _TRUE
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(v) for v in text.replace(',', ' ').split())
    except ValueError as e:
        raise ConfigurationError(f"config key '{name}': {e}") from e
    return text


def parse_config(text, source='config'):
    """Flat `key = value` lines (# comments, blank lines ignored) -> TrainConfig"""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{source} line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in kinds:
            raise ConfigurationError(f"{source} line {lineno}: unknown config key '{key}'")
        values[key] = _coerce(key, kinds[key], value)
    return TrainConfig(**values)


def load_config(path):
    if path is None:
        return TrainConfig()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e.strerror or e}") from e
    return parse_config(text, source=os.path.basename(path))


# --- optimizer --------------------------------------------------------------

def param_group(name):
    if name.startswith('grid_'):
        return 'grid'
    if name.startswith(('dec_', 'head_')):
        return 'decoder'
    return name


class Adam:
    """Adam with one learning rate per parameter group and one step count per parameter array"""

    def __init__(self, lrs, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.counts = {}
        self.step = 0

    def update(self, params, grads, lr_overrides=None):
        """In-place update of every array in `params`; missing gradients count as zero"""
        lr_overrides = lr_overrides or {}
        self.step += 1
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            g = np.zeros_like(p) if g is None else g
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            count = self.counts.get(name, 0) + 1
            self.counts[name] = count
            lr = lr_overrides.get(name, self.lrs[param_group(name)])
            m_hat = m / (1.0 - self.beta1 ** count)
            v_hat = v / (1.0 - self.beta2 ** count)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def resize(self, keep, n_new):
        """Track densification: keep rows `keep` of every Gaussian moment, append n_new zero rows"""
        for store in (self.m, self.v):
            for name in PARAM_NAMES:
                if name in store:
                    kept = store[name][keep]
                    store[name] = np.concatenate([kept, np.zeros((n_new,) + kept.shape[1:])])


def position_lr(config, step, scene_extent):
    """Exponential decay from lr_mu to lr_mu_final over total_steps, scaled by scene extent"""
    f = np.clip(step / max(config.total_steps, 1), 0.0, 1.0)
    lr = np.exp(np.log(config.lr_mu) * (1.0 - f) + np.log(config.lr_mu_final) * f)
    return float(lr * scene_extent)


# --- losses -----------------------------------------------------------------

def _same_shape(gt, pred, what):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise DimensionMismatchError(f"{what}: ground truth {gt.shape} vs prediction {pred.shape}")
    return gt, pred


def rgb_loss(gt, pred):
    gt, pred = _same_shape(gt, pred, 'rgb_loss')
    return float(np.mean(np.abs(gt - pred)))


def rgb_loss_grad(gt, pred):
    gt, pred = _same_shape(gt, pred, 'rgb_loss')
    return np.sign(pred - gt) / gt.size


def depth_loss(gt, pred, valid):
    gt, pred = _same_shape(gt, pred, 'depth_loss')
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("depth validity mask is empty; depth loss is 0", EmptySupervisionWarning)
        return 0.0
    return float(np.sum(np.abs(gt - pred)[valid]) / n)


def depth_loss_grad(gt, pred, valid):
    gt, pred = _same_shape(gt, pred, 'depth_loss')
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return np.zeros_like(pred)
    return np.where(valid, np.sign(pred - gt), 0.0) / n


def total_loss(components, weights):
    """
    Weighted sum of loss components.

    Args:
        components: mapping with 'rgb', 'event', 'depth', 'smooth' (missing = 0)
        weights: mapping with lambda1..lambda5 (lambda3 has no component)

    Returns:
        (total, report) where report carries each component under its history column name
    """
    report = {
        'l_rgb': float(components.get('rgb', 0.0)),
        'l_event': float(components.get('event', 0.0)),
        'l_depth': float(components.get('depth', 0.0)),
        'l_g': float(components.get('smooth', 0.0)),
    }
    for name, value in report.items():
        if not np.isfinite(value):
            raise NumericalError(f"loss component {name} is non-finite ({value}); components={report}")
    total = (weights['lambda1'] * report['l_rgb'] + weights['lambda2'] * report['l_event']
             + weights['lambda4'] * report['l_depth'] + weights['lambda5'] * report['l_g'])
    if not np.isfinite(total):
        raise NumericalError(f"total loss is non-finite; components={report}")
    report['total'] = float(total)
    return float(total), report


# --- state ------------------------------------------------------------------

@dataclass
class TrainState:
    gaussians: GaussianSet
    field: DeformationField
    adam: Adam
    config: TrainConfig
    rng: np.random.Generator
    step: int = 0
    grad_accum: np.ndarray = None
    grad_denom: np.ndarray = None
    history: list = None
    scene_extent: float = 1.0
    span: float = 1.0
    resolution: tuple = None

    def __post_init__(self):
        n = len(self.gaussians)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_denom is None:
            self.grad_denom = np.zeros(n)
        if self.history is None:
            self.history = []

    @property
    def phase(self):
        return 'static' if self.step < self.config.static_steps else 'full'


@dataclass
class StepBatch:
    """One step's supervision: an RGB(-D) frame and, in phase 2, an event window"""
    frame: object
    deform: bool
    window: object = None
    event_cam_start: object = None
    event_cam_end: object = None


def _nearest_neighbour_scale(points, k=3, chunk=512):
    """sqrt of the mean squared distance to the k nearest neighbours"""
    n = len(points)
    if n <= 1:
        return np.full(n, 0.01)
    k = min(k, n - 1)
    out = np.empty(n)
    sq = np.sum(points * points, axis=1)
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        d2 = sq[start:start + chunk, None] + sq[None, :] - 2.0 * block @ points.T
        d2[np.arange(len(block)), np.arange(start, start + len(block))] = np.inf
        nearest = np.partition(np.maximum(d2, 0.0), k - 1, axis=1)[:, :k]
        out[start:start + chunk] = np.sqrt(np.mean(nearest, axis=1))
    return np.maximum(out, 1e-7)


def _stratified(rng, count, target):
    if count <= target:
        return np.arange(count)
    return np.floor((np.arange(target) + rng.random(target)) * count / target).astype(np.int64)


def _backproject(frame):
    cam = frame.camera
    ys, xs = np.nonzero(frame.depth_valid)
    z = frame.depth[ys, xs]
    cam_points = np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z], axis=1)
    world = (cam_points - cam.translation) @ cam.rotation
    return world, frame.image[ys, xs]


def _random_rays(frame, rng, count, depth_min, depth_max):
    cam = frame.camera
    xs = rng.uniform(0, cam.width - 1, count)
    ys = rng.uniform(0, cam.height - 1, count)
    z = rng.uniform(depth_min, depth_max, count)
    cam_points = np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z], axis=1)
    world = (cam_points - cam.translation) @ cam.rotation
    colors = frame.image[np.round(ys).astype(int), np.round(xs).astype(int)]
    return world, colors


def initialize_state(dataset, config):
    """Seed canonical Gaussians from the earliest training frames and build a fresh field"""
    rng = np.random.default_rng(config.seed)
    frames = sorted(dataset.earliest_frames('train'), key=lambda f: f.view)[:config.init_views]
    if not frames:
        raise ConfigurationError("dataset has no training frames to initialize from")

    if config.init_from_depth and all(f.depth is not None for f in frames):
        pieces = [_backproject(f) for f in frames]
        points = np.concatenate([p for p, _ in pieces])
        colors = np.concatenate([c for _, c in pieces])
        if len(points) == 0:
            raise ConfigurationError("initial depth maps have no valid pixels to back-project")
        pick = _stratified(rng, len(points), config.n_init)
        points, colors = points[pick], colors[pick]
    else:
        per_view = int(np.ceil(config.n_init / len(frames)))
        pieces = [_random_rays(f, rng, per_view, config.init_depth_min, config.init_depth_max) for f in frames]
        points = np.concatenate([p for p, _ in pieces])[:config.n_init]
        colors = np.concatenate([c for _, c in pieces])[:config.n_init]

    n = len(points)
    scales = np.log(_nearest_neighbour_scale(points))
    gaussians = GaussianSet(
        mu=points,
        r=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        s=np.repeat(scales[:, None], 3, axis=1),
        sigma_op=np.full(n, inverse_sigmoid(INITIAL_OPACITY)),
        c=inverse_sigmoid(np.clip(colors, 0.02, 0.98)),
    )
    deformation = DeformationField.create(
        points, spatial_resolution=config.spatial_resolution, time_resolution=config.time_resolution,
        features=config.features, width=config.decoder_width, depth=config.decoder_depth,
        k_max=config.k_max, motion_degree=config.motion_degree, seed=config.seed)
    extent = 1.1 * float(np.max(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    return TrainState(gaussians=gaussians, field=deformation, adam=Adam(config.learning_rates()),
                      config=config, rng=rng, scene_extent=max(extent, 1e-3), span=float(dataset.span),
                      resolution=tuple(dataset.resolution))


# --- one step ---------------------------------------------------------------

def sample_batch(state, dataset, config):
    rng = state.rng
    if state.phase == 'static':
        frames = dataset.earliest_frames('train')
        frame = frames[int(rng.integers(len(frames)))]
        return StepBatch(frame=frame, deform=False)

    frames = dataset.split('train')
    frame = frames[int(rng.integers(len(frames)))]
    batch = StepBatch(frame=frame, deform=True)
    if config.lambda2 > 0:
        t_s, t_e = sample_window(rng, config.l_min, config.l_max, dataset.span)
        batch.window = accumulate_window(dataset.events, t_s, t_e, dataset.contrast_threshold)
        batch.event_cam_start = dataset.event_camera_at(t_s)
        batch.event_cam_end = dataset.event_camera_at(t_e)
    return batch


def _add_into(total, grads):
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


def _render_at(state, cam, timestamp, deform):
    if deform:
        deformed, cache = state.field.deform_with_cache(state.gaussians, timestamp / state.span)
    else:
        deformed, cache = state.gaussians, None
    return deformed, cache, render(deformed, cam, state.config.background)


def _backward(state, deformed, cache, cam, out, g_color, g_depth=None):
    grads = render_vjp(deformed, cam, state.config.background, g_color, g_depth, output=out)
    screen = grads.pop('mu2')
    if cache is None:
        return grads, {}, screen
    canonical, field_grads = state.field.deform_vjp(cache, grads)
    return canonical, field_grads, screen


def compute_losses(state, batch, config):
    """
    Forward and backward for one batch without touching any parameter.

    Returns:
        (report, grads, stats) - report holds the loss components and total,
        grads maps parameter names (Gaussian and field) to gradients of the
        total, stats holds the supervised view's screen-space mean gradients
        and visibility for densification.
    """
    frame = batch.frame
    cam = frame.camera
    components = {}
    grads = {}

    deformed, cache, out = _render_at(state, cam, frame.timestamp, batch.deform)
    components['rgb'] = rgb_loss(frame.image, out.color)
    g_color = config.lambda1 * rgb_loss_grad(frame.image, out.color)
    g_depth = None
    if frame.depth is not None:
        components['depth'] = depth_loss(frame.depth, out.depth, frame.depth_valid)
        g_depth = config.lambda4 * depth_loss_grad(frame.depth, out.depth, frame.depth_valid)
    g_gauss, g_field, screen = _backward(state, deformed, cache, cam, out, g_color, g_depth)
    _add_into(grads, g_gauss)
    _add_into(grads, g_field)
    stats = {'mu2': screen, 'visible': out.splats.valid, 'width': cam.width, 'height': cam.height}

    if batch.window is not None:
        window = batch.window
        def_s, cache_s, out_s = _render_at(state, batch.event_cam_start, window.t_s, batch.deform)
        def_e, cache_e, out_e = _render_at(state, batch.event_cam_end, window.t_e, batch.deform)
        pred = predicted_log_diff(out_s.color, out_e.color)
        components['event'] = event_loss(window, pred)
        g_pred = config.lambda2 * event_loss_grad(window, pred)
        g_img_s, g_img_e = predicted_log_diff_vjp(out_s.color, out_e.color, g_pred)
        for deformed_k, cache_k, cam_k, out_k, g_img in ((def_s, cache_s, batch.event_cam_start, out_s, g_img_s),
                                                         (def_e, cache_e, batch.event_cam_end, out_e, g_img_e)):
            g_gauss, g_field, _ = _backward(state, deformed_k, cache_k, cam_k, out_k, g_img)
            _add_into(grads, g_gauss)
            _add_into(grads, g_field)

    if batch.deform:
        components['smooth'] = state.field.smoothness()
        for name, g in state.field.smoothness_grads().items():
            _add_into(grads, {name: config.lambda5 * g})

    _, report = total_loss(components, config.weights())
    return report, grads, stats


def _accumulate_densify_stats(state, stats):
    visible = stats['visible']
    # screen gradient expressed in NDC units
    g = stats['mu2'] * np.array([0.5 * stats['width'], 0.5 * stats['height']])
    state.grad_accum[visible] += np.linalg.norm(g[visible], axis=1)
    state.grad_denom[visible] += 1.0


def train_step(state, dataset, config=None, rng=None):
    """One optimization step; mutates `state` and returns the loss report"""
    config = config or state.config
    if rng is not None:
        state.rng = rng
    batch = sample_batch(state, dataset, config)
    report, grads, stats = compute_losses(state, batch, config)

    if state.step < config.densify_until:
        _accumulate_densify_stats(state, stats)

    params = state.gaussians.params()
    if batch.deform:
        params.update(state.field.params())
    lr_mu = position_lr(config, state.step, state.scene_extent)
    state.adam.update(params, grads, lr_overrides={'mu': lr_mu})
    state.gaussians.normalize_rotations()
    state.gaussians.check_finite('parameter after optimizer step')

    state.step += 1
    if (config.densify_from <= state.step < config.densify_until
            and state.step % config.densify_interval == 0):
        densify_and_prune(state, config)

    report = {'step': state.step, **report, 'n_gaussians': len(state.gaussians)}
    state.history.append({k: report[k] for k in HISTORY_COLUMNS})
    return report


# --- density control --------------------------------------------------------

def _dominant_axes(gaussians):
    R = quaternion_to_rotation(normalize_quaternions(gaussians.r)[0])
    largest = np.argmax(gaussians.s, axis=1)
    axes = R[np.arange(len(gaussians)), :, largest]
    return axes, np.exp(gaussians.s[np.arange(len(gaussians)), largest])


def densify_and_prune(state, config=None):
    """
    Clone small high-gradient Gaussians, split large ones, prune transparent ones.

    Returns a dict with the number of Gaussians cloned, split and pruned.
    Optimizer moments follow: surviving rows are kept, new rows start at zero.
    """
    config = config or state.config
    gs = state.gaussians
    n = len(gs)
    avg = np.where(state.grad_denom > 0, state.grad_accum / np.maximum(state.grad_denom, 1.0), 0.0)
    high = avg >= config.densify_grad_threshold
    prune = gs.opacity < config.prune_opacity
    high &= ~prune
    scale_max = np.exp(gs.s.max(axis=1)) if n else np.zeros(0)
    small = scale_max <= config.percent_dense * state.scene_extent
    clone = high & small
    split = high & ~small

    room = config.max_gaussians - (n - int(prune.sum()) - int(split.sum()))
    if int(clone.sum()) + 2 * int(split.sum()) > room:
        # not enough room: no densification this round
        clone[:] = False
        split[:] = False

    axes, sigma = _dominant_axes(gs) if n else (np.zeros((0, 3)), np.zeros(0))
    clones = gs.select(clone)
    clones.mu = clones.mu + CLONE_OFFSET * sigma[clone, None] * axes[clone]

    parents = gs.select(split)
    offset = SPLIT_OFFSET * sigma[split, None] * axes[split]
    children = []
    for sign in (1.0, -1.0):
        child = parents.copy()
        child.mu = child.mu + sign * offset
        child.s = child.s - np.log(SPLIT_SCALE_DIVISOR)
        children.append(child)

    keep = ~prune & ~split
    new_set = gs.select(keep).concatenate(clones).concatenate(children[0]).concatenate(children[1])
    n_new = len(new_set) - int(keep.sum())
    state.adam.resize(keep, n_new)
    state.gaussians = new_set
    state.grad_accum = np.zeros(len(new_set))
    state.grad_denom = np.zeros(len(new_set))
    return {'cloned': int(clone.sum()), 'split': int(split.sum()), 'pruned': int(prune.sum())}


# --- rendering a trained state ---------------------------------------------

def render_state(state, cam, timestamp):
    """Render the scene at `timestamp` seconds through the deformation field"""
    deformed = state.field.deform(state.gaussians, float(np.clip(timestamp / state.span, 0.0, 1.0)))
    return render(deformed, cam, state.config.background)


# --- full run ---------------------------------------------------------------

def _check_compatible(dataset, config):
    if config.total_steps > config.static_steps and config.lambda2 > 0 and config.l_max > dataset.span:
        raise ConfigurationError(f"l_max={config.l_max} exceeds the dataset's capture span {dataset.span}")
    ecam = dataset.cameras.get('event')
    if ecam is not None and (dataset.events.width, dataset.events.height) != (ecam.width, ecam.height):
        raise ConfigurationError("event stream resolution differs from the event camera")


def write_history(history, path):
    df = pd.DataFrame(history, columns=HISTORY_COLUMNS)
    df.to_csv(path, index=False)
    return df


def train(dataset, config, out_dir, resume=None, progress_callback=None):
    """
    Train on a loaded dataset.

    Args:
        dataset: SensorDataset (already validated by load_dataset)
        config: TrainConfig
        out_dir: directory for checkpoints and loss_history.csv
        resume: optional checkpoint path to continue from
        progress_callback: Function to call with progress updates

    Returns:
        Path of the final checkpoint
    """
    from dataset_io import load_checkpoint, save_checkpoint

    print(f"\n{'='*60}")
    print(f"🏋️  Training on '{dataset.scene}' ({len(dataset.split('train'))} training frames, "
          f"{len(dataset.events)} events)")
    print(f"{'='*60}\n")

    _check_compatible(dataset, config)
    os.makedirs(out_dir, exist_ok=True)

    if resume:
        state = load_checkpoint(resume)
        state.config = config
        print(f"🔄 Resuming from {resume} at step {state.step}")
    else:
        state = initialize_state(dataset, config)
        print(f"✨ Initialized {len(state.gaussians)} gaussians (scene extent {state.scene_extent:.3f})")

    if progress_callback:
        progress_callback(f"Training from step {state.step} to {config.total_steps}...")

    with tqdm(total=config.total_steps, initial=state.step, desc='train') as pbar:
        while state.step < config.total_steps:
            report = train_step(state, dataset, config)
            pbar.update(1)
            pbar.set_postfix(loss=f"{report['total']:.4f}", n=report['n_gaussians'], phase=state.phase)
            if config.checkpoint_interval and state.step % config.checkpoint_interval == 0 \
                    and state.step < config.total_steps:
                path = os.path.join(out_dir, f'checkpoint_{state.step:06d}.npz')
                save_checkpoint(state, path)
                if progress_callback:
                    progress_callback(f"Step {state.step}: loss {report['total']:.4f}")

    final = os.path.join(out_dir, 'checkpoint.npz')
    save_checkpoint(state, final)
    write_history(state.history, os.path.join(out_dir, 'loss_history.csv'))

    print(f"💾 Saved checkpoint to {final}")
    if state.history:
        print(f"📉 Loss {state.history[0]['total']:.4f} -> {state.history[-1]['total']:.4f}")
    print(f"✅ Training finished with {len(state.gaussians)} gaussians")
    print(f"{'='*60}\n")
    return final
