#!/usr/bin/env python3
"""
Builds synthetic sensor-fusion datasets from built-in analytic scenes.
Used by the CLI `generate` / `simulate` verbs, the test-suite and the fusion ablation.

Scenes are ray cast exactly (spheres and rectangular plates with Lambert shading),
so RGB and depth are ground truth rather than approximations. Events come from
event_simulator run on a dense frame sequence of a fixed event camera.
"""

import os
from dataclasses import dataclass, asdict

import numpy as np
from tqdm import tqdm

from dataset_io import (DATASET_FORMAT, DATASET_VERSION, MANIFEST_NAME, write_depth, write_events,
                        write_manifest, write_rgb)
from errors import ConfigurationError, UnknownSceneError
from event_simulator import FrameSequence, simulate
from scene_core import Camera

SCENES = ('translating_spheres', 'orbiting_two_ball', 'flapping_plate')
BASELINES = {'large': 120.0, 'medium': 60.0, 'small': 25.0}
LIGHTING = {'bright': 1.0, 'dark': 0.25}

ARC_RADIUS = 4.0
ELEVATION_DEG = 20.0
FOV_DEG = 40.0
AMBIENT = 0.3
DIFFUSE = 0.7
LIGHT_DIR = np.array([0.3, -0.5, 1.0]) / np.linalg.norm([0.3, -0.5, 1.0])


def resolve_project_path(relative_path):
    """
    Resolve a path relative to the project root.
    Works from the repo root, tests/ or any other working directory.
    """
    potential_bases = [
        os.getcwd(),
        os.path.dirname(os.path.abspath(__file__)),
    ]

    for base in potential_bases:
        full_path = os.path.abspath(os.path.join(base, relative_path))
        # existing path, or a file about to be created in an existing directory
        if os.path.exists(full_path) or os.path.exists(os.path.dirname(full_path)):
            return full_path

    return os.path.abspath(relative_path)


@dataclass
class SceneSpec:
    scene: str = 'orbiting_two_ball'
    baseline: str = 'medium'
    lighting: str = 'bright'
    speed: float = 1.0
    views: int = 12
    timestamps: int = 60
    eval_views: int = 2
    width: int = 64
    height: int = 64
    span: float = 1.0
    contrast_threshold: float = 0.2
    event_fps: float = 500.0
    timestamp_jitter: float = 0.0
    threshold_jitter: float = 0.0
    seed: int = 0

    def validate(self):
        if self.scene not in SCENES:
            raise UnknownSceneError(f"unknown scene '{self.scene}' (choose from {', '.join(SCENES)})")
        if self.baseline not in BASELINES:
            raise ConfigurationError(f"baseline must be one of {sorted(BASELINES)} (got '{self.baseline}')")
        if self.lighting not in LIGHTING:
            raise ConfigurationError(f"lighting must be one of {sorted(LIGHTING)} (got '{self.lighting}')")
        if self.views < 1 or self.eval_views < 0 or self.timestamps < 2:
            raise ConfigurationError("need at least 1 training view and 2 timestamps")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"invalid resolution {self.width}x{self.height}")
        if self.span <= 0 or self.event_fps <= 0 or self.contrast_threshold <= 0:
            raise ConfigurationError("span, event_fps and contrast_threshold must be positive")
        if self.speed < 0:
            raise ConfigurationError(f"speed must be >= 0 (got {self.speed})")


# --- analytic primitives ----------------------------------------------------

@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    moving: bool = False

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum('ij,ij->i', dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4.0 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        s = (-b - root) / (2.0 * a)
        return np.where((disc >= 0.0) & (s > 0.0), s, np.inf)

    def normals(self, points):
        return (points - self.center) / self.radius


@dataclass
class Plate:
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float
    color: np.ndarray
    moving: bool = False

    @property
    def normal(self):
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def intersect(self, origin, dirs):
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide='ignore', invalid='ignore'):
            s = ((self.center - origin) @ n) / denom
        ok = np.abs(denom) > 1e-12
        s = np.where(ok, s, np.inf)
        points = origin + np.where(np.isfinite(s), s, 0.0)[:, None] * dirs
        local = points - self.center
        inside = (np.abs(local @ self.u) <= self.half_u) & (np.abs(local @ self.v) <= self.half_v)
        return np.where(ok & inside & (s > 0.0), s, np.inf)

    def normals(self, points):
        return np.broadcast_to(self.normal, points.shape)


RED = np.array([0.85, 0.2, 0.15])
GREEN = np.array([0.2, 0.75, 0.25])
BLUE = np.array([0.2, 0.35, 0.9])
GRAY = np.array([0.55, 0.55, 0.55])
TAN = np.array([0.7, 0.55, 0.3])


def scene_objects(scene, t, speed=1.0):
    """Primitives of `scene` at normalized time t in [0, 1]"""
    phase = 2.0 * np.pi * speed * t
    if scene == 'translating_spheres':
        return [
            Sphere(np.array([-0.4 + 0.8 * speed * t, 0.0, 0.3]), 0.3, RED, moving=speed > 0),
            Sphere(np.array([0.4 - 0.8 * speed * t, 0.3, -0.2]), 0.25, BLUE, moving=speed > 0),
        ]
    if scene == 'orbiting_two_ball':
        return [
            Sphere(np.zeros(3), 0.3, GREEN),
            Sphere(np.array([0.8 * np.cos(phase), 0.8 * np.sin(phase), 0.0]), 0.2, RED, moving=speed > 0),
            Sphere(np.array([0.0, 0.0, 0.75 + 0.2 * np.sin(phase)]), 0.15, BLUE, moving=speed > 0),
            Plate(np.array([0.0, 0.0, -0.45]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                  1.2, 1.2, GRAY),
        ]
    if scene == 'flapping_plate':
        angle = 0.6 * np.sin(3.0 * phase)
        objects = [Sphere(np.zeros(3), 0.25, TAN)]
        for side in (1.0, -1.0):
            u = np.array([side * np.cos(angle), 0.0, np.sin(angle)])
            hinge = np.array([side * 0.2, 0.0, 0.0])
            objects.append(Plate(hinge + 0.35 * u, u, np.array([0.0, 1.0, 0.0]), 0.35, 0.18, BLUE,
                                 moving=speed > 0))
        return objects
    raise UnknownSceneError(f"unknown scene '{scene}' (choose from {', '.join(SCENES)})")


def cast_rays(origin, dirs, objects):
    """Nearest hit per ray: (ray parameter, object index or -1, unit normals)"""
    if not objects:
        n = len(dirs)
        return np.full(n, np.inf), np.full(n, -1), np.zeros((n, 3))
    hits = np.stack([obj.intersect(origin, dirs) for obj in objects])
    index = np.argmin(hits, axis=0)
    s = hits[index, np.arange(len(dirs))]
    index = np.where(np.isfinite(s), index, -1)
    normals = np.zeros((len(dirs), 3))
    for k, obj in enumerate(objects):
        rows = index == k
        if rows.any():
            points = origin + s[rows, None] * dirs[rows]
            normals[rows] = obj.normals(points)
    return s, index, normals


def _pixel_rays(cam, offsets):
    xs, ys = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    dirs = np.stack([(xs + offsets[0] - cam.cx) / cam.fx, (ys + offsets[1] - cam.cy) / cam.fy,
                     np.ones_like(xs)], axis=-1).reshape(-1, 3)
    # camera-frame directions with unit z, so ray parameter == camera depth
    return dirs @ cam.rotation


def render_scene(objects, cam, lighting=1.0, supersample=2):
    """
    Ground-truth render of analytic primitives.

    Returns (rgb HxWx3 in [0,1], depth HxW with 0 where nothing is hit,
    object index HxW with -1 for background). Color is averaged over a
    supersample x supersample grid; depth and index come from the pixel-center ray.
    """
    origin = cam.center
    H, W = cam.height, cam.width
    rgb = np.zeros((H * W, 3))
    subs = (np.arange(supersample) + 0.5) / supersample - 0.5
    for oy in subs:
        for ox in subs:
            _, index, normals = cast_rays(origin, _pixel_rays(cam, (ox, oy)), objects)
            shade = lighting * (AMBIENT + DIFFUSE * np.abs(normals @ LIGHT_DIR))
            for k, obj in enumerate(objects):
                rows = index == k
                rgb[rows] += shade[rows, None] * obj.color
    rgb /= supersample * supersample

    s, index, _ = cast_rays(origin, _pixel_rays(cam, (0.0, 0.0)), objects)
    depth = np.where(index >= 0, s, 0.0)
    return (np.clip(rgb, 0.0, 1.0).reshape(H, W, 3), depth.reshape(H, W), index.reshape(H, W))


# --- cameras ----------------------------------------------------------------

def _arc_camera(azimuth_deg, spec, timestamp=0.0):
    az, el = np.radians(azimuth_deg), np.radians(ELEVATION_DEG)
    eye = ARC_RADIUS * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    fx = spec.width / (2.0 * np.tan(np.radians(FOV_DEG / 2.0)))
    fy = spec.height / (2.0 * np.tan(np.radians(FOV_DEG / 2.0)))
    return Camera.look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0]), fx, fy,
                          (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height,
                          near=0.1, far=20.0, timestamp=timestamp)


def training_azimuths(spec):
    arc = BASELINES[spec.baseline]
    if spec.views == 1:
        return np.array([-90.0])
    return -90.0 + arc * (np.arange(spec.views) / (spec.views - 1) - 0.5)


def eval_azimuths(spec):
    """Azimuths halfway between neighbouring training views"""
    arc = BASELINES[spec.baseline]
    if spec.views == 1:
        return -90.0 + 0.1 * arc * (np.arange(spec.eval_views) + 1)
    slots = [min((j + 1) * (spec.views - 1) // (spec.eval_views + 1), spec.views - 2)
             for j in range(spec.eval_views)]
    return -90.0 + arc * ((np.array(slots) + 0.5) / (spec.views - 1) - 0.5)


def frame_timestamps(spec):
    return spec.span * np.arange(spec.timestamps) / (spec.timestamps - 1)


def eval_timestamps(spec):
    """Unseen times halfway between training timestamps"""
    stride = max(1, (spec.timestamps - 1) // 10)
    k = np.arange(0, spec.timestamps - 1, stride)
    return spec.span * (k + 0.5) / (spec.timestamps - 1)


def event_camera(spec, timestamp=0.0):
    return _arc_camera(-90.0, spec, timestamp)


def event_frame_sequence(spec, progress=False):
    """Dense event-camera frames of the scene at spec.event_fps"""
    count = int(round(spec.span * spec.event_fps)) + 1
    timestamps = spec.span * np.arange(count) / (count - 1)
    cam = event_camera(spec)
    lighting = LIGHTING[spec.lighting]
    frames = []
    for t in tqdm(timestamps, desc='event frames', disable=not progress):
        rgb, _, _ = render_scene(scene_objects(spec.scene, t / spec.span, spec.speed), cam, lighting)
        frames.append(rgb)
    return FrameSequence(frames, timestamps)


def simulate_scene_events(spec, progress=False):
    seq = event_frame_sequence(spec, progress)
    return simulate(seq, spec.contrast_threshold, timestamp_jitter=spec.timestamp_jitter,
                    threshold_jitter=spec.threshold_jitter, seed=spec.seed)


# --- dataset generation -----------------------------------------------------

def check_dataset_exists(out_dir):
    """Check if a generated dataset is present and return basic info"""
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(manifest):
        return False, None
    with open(manifest, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    frames = sum(1 for line in lines if line.startswith('frame '))
    scene = next((line.split('=', 1)[1].strip() for line in lines if line.startswith('scene')), None)
    return True, {'frames': frames, 'scene': scene}


def generate_tiny_scene(spec, out_dir, progress_callback=None):
    """
    Render a complete dataset directory for one analytic scene.

    Args:
        spec: SceneSpec naming the scene and capture conditions
        out_dir: directory to write (created if needed)
        progress_callback: Function to call with progress updates

    Returns:
        Absolute path of the dataset directory
    """
    spec.validate()
    out_dir = resolve_project_path(out_dir)

    print(f"\n{'='*60}")
    print(f"🎬 Generating '{spec.scene}' dataset")
    print(f"{'='*60}\n")
    print(f"📁 Output directory: {out_dir}")

    os.makedirs(os.path.join(out_dir, 'rgb'), exist_ok=True)
    os.makedirs(os.path.join(out_dir, 'depth'), exist_ok=True)

    lighting = LIGHTING[spec.lighting]
    times = frame_timestamps(spec)
    frames = []
    jobs = [('train', v, az, k, t) for v, az in enumerate(training_azimuths(spec)) for k, t in enumerate(times)]
    jobs += [('eval', j, az, k, t) for j, az in enumerate(eval_azimuths(spec))
             for k, t in enumerate(eval_timestamps(spec))]

    if progress_callback:
        progress_callback(f"Rendering {len(jobs)} RGB-D frames...")
    print(f"📷 Rendering {len(jobs)} RGB-D frames at {spec.width}x{spec.height}")

    for split, view, azimuth, k, t in tqdm(jobs, desc='frames'):
        cam = _arc_camera(azimuth, spec, t)
        rgb, depth, _ = render_scene(scene_objects(spec.scene, t / spec.span, spec.speed), cam, lighting)
        prefix = '' if split == 'train' else f'{split}_'
        rgb_rel = f'rgb/{prefix}v{view:02d}_t{k:03d}.png'
        depth_rel = f'depth/{prefix}v{view:02d}_t{k:03d}.dpth'
        write_rgb(os.path.join(out_dir, rgb_rel), rgb)
        write_depth(os.path.join(out_dir, depth_rel), depth)
        frames.append({'split': split, 'view': view, 'timestamp': float(t), 'camera': 'rgb',
                       'rgb': rgb_rel, 'depth': depth_rel, 'pose': cam.world_to_camera})

    if progress_callback:
        progress_callback("Simulating events...")
    print(f"⚡ Simulating events at {spec.event_fps:g} fps with C={spec.contrast_threshold}")
    events = simulate_scene_events(spec, progress=True)
    write_events(os.path.join(out_dir, 'events.evst'), events)
    print(f"📊 {len(events)} events")

    template = _arc_camera(-90.0, spec)
    header = {
        'format': DATASET_FORMAT,
        'version': DATASET_VERSION,
        'scene': spec.scene,
        'span': repr(float(spec.span)),
        'contrast_threshold': repr(float(spec.contrast_threshold)),
        'events': 'events.evst',
        'units': 'world units, seconds',
    }
    for key, value in asdict(spec).items():
        if key not in ('scene', 'span', 'contrast_threshold'):
            header[f'generator.{key}'] = value
    ecam = event_camera(spec)
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), header,
                   {'rgb': template, 'event': template}, frames,
                   [(0.0, 'event', ecam.world_to_camera)])

    print(f"✅ Successfully created dataset with {len(frames)} frames and {len(events)} events")
    print(f"{'='*60}\n")
    return out_dir


def ensure_dataset_exists(spec, out_dir, force_rebuild=False, progress_callback=None):
    """
    Ensure a generated dataset exists at out_dir, building it if the manifest is missing.

    Returns:
        Absolute path of the dataset directory
    """
    out_dir = resolve_project_path(out_dir)
    exists, info = check_dataset_exists(out_dir)

    if exists and not force_rebuild:
        print(f"✅ Dataset exists ({info['frames']} frames, scene '{info['scene']}')")
        return out_dir

    if force_rebuild:
        print("🔄 Force rebuild requested")
    else:
        print("⚠️  Dataset not found. Generating...")
    return generate_tiny_scene(spec, out_dir, progress_callback=progress_callback)


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else os.getenv('FUSIONSPLAT_DATA', 'data/orbiting_two_ball')
    ensure_dataset_exists(SceneSpec(), target, force_rebuild=True)
