"""
On-disk formats for fusionsplat datasets and checkpoints.

A dataset directory holds:
    manifest.txt     key = value header plus camera / frame / event_pose lines
    rgb/*.png        8-bit RGB frames
    depth/*.dpth     float32 depth planes ("DPTH" header, 0 = invalid)
    events.evst      binary event stream ("EVST" header, 14-byte records)

See DATA_ARCHITECTURE.md for the byte layouts.
"""

import json
import os
import struct
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from errors import (CheckpointIntegrityError, CheckpointVersionError, DatasetValidationError,
                    ConfigurationError)
from event_model import EventStream
from scene_core import Camera, GaussianSet, PARAM_NAMES

MANIFEST_NAME = 'manifest.txt'
DATASET_FORMAT = 'fusionsplat-dataset'
DATASET_VERSION = 1

EVENT_MAGIC = b'EVST'
EVENT_VERSION = 1
EVENT_HEADER = struct.Struct('<4sHHHIxx')
EVENT_DTYPE = np.dtype([('x', '<u2'), ('y', '<u2'), ('t', '<f8'), ('p', 'i1'), ('pad', 'i1')])

DEPTH_MAGIC = b'DPTH'
DEPTH_HEADER = struct.Struct('<4sHH')

CHECKPOINT_VERSION = 1


# --- event stream codec -----------------------------------------------------

def encode_events(events):
    records = np.zeros(len(events), dtype=EVENT_DTYPE)
    records['x'] = events.x
    records['y'] = events.y
    records['t'] = events.t
    records['p'] = events.p
    header = EVENT_HEADER.pack(EVENT_MAGIC, EVENT_VERSION, events.width, events.height, len(events))
    return header + records.tobytes()


def decode_events(data, source='events'):
    """Returns (EventStream or None, list of problems). Problems name byte offsets."""
    if len(data) < EVENT_HEADER.size:
        return None, [f"{source}: file is {len(data)} bytes, shorter than the {EVENT_HEADER.size}-byte header"]
    magic, version, width, height, count = EVENT_HEADER.unpack_from(data)
    if magic != EVENT_MAGIC:
        return None, [f"{source}: bad magic {magic!r} at byte offset 0 (expected {EVENT_MAGIC!r})"]
    if version != EVENT_VERSION:
        return None, [f"{source}: unsupported event format version {version} (expected {EVENT_VERSION})"]
    expected = EVENT_HEADER.size + count * EVENT_DTYPE.itemsize
    if len(data) != expected:
        return None, [f"{source}: header declares {count} records ({expected} bytes) but file has {len(data)} bytes"]

    records = np.frombuffer(data, dtype=EVENT_DTYPE, count=count, offset=EVENT_HEADER.size)
    problems = []

    def offset(i):
        return EVENT_HEADER.size + int(i) * EVENT_DTYPE.itemsize

    for i in np.flatnonzero((records['x'] >= width) | (records['y'] >= height))[:20]:
        problems.append(f"{source}: record {i} at byte offset {offset(i)} has coordinate "
                        f"({records['x'][i]}, {records['y'][i]}) outside {width}x{height}")
    for i in np.flatnonzero((records['p'] != 1) & (records['p'] != -1))[:20]:
        problems.append(f"{source}: record {i} at byte offset {offset(i)} has polarity {records['p'][i]}")
    for i in np.flatnonzero(~np.isfinite(records['t']))[:20]:
        problems.append(f"{source}: record {i} at byte offset {offset(i)} has non-finite timestamp")
    if count > 1:
        for i in np.flatnonzero(np.diff(records['t']) < 0)[:20]:
            problems.append(f"{source}: record {i + 1} at byte offset {offset(i + 1)} is out of time order")

    events = EventStream(records['x'], records['y'], records['t'], records['p'], width, height)
    return events, problems


def write_events(path, events):
    with open(path, 'wb') as f:
        f.write(encode_events(events))


def read_events(path):
    with open(path, 'rb') as f:
        events, problems = decode_events(f.read(), source=os.path.basename(path))
    if problems:
        raise DatasetValidationError(problems)
    return events


# --- depth planes and RGB frames --------------------------------------------

def write_depth(path, depth, valid=None):
    depth = np.asarray(depth, dtype=np.float64)
    if valid is not None:
        depth = np.where(valid, depth, 0.0)
    H, W = depth.shape
    with open(path, 'wb') as f:
        f.write(DEPTH_HEADER.pack(DEPTH_MAGIC, W, H))
        f.write(depth.astype('<f4').tobytes())


def decode_depth(data, source='depth'):
    """Returns ((depth, valid) or None, problems)"""
    if len(data) < DEPTH_HEADER.size:
        return None, [f"{source}: truncated depth header"]
    magic, W, H = DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        return None, [f"{source}: bad magic {magic!r} (expected {DEPTH_MAGIC!r})"]
    expected = DEPTH_HEADER.size + 4 * W * H
    if len(data) != expected:
        return None, [f"{source}: expected {expected} bytes for {W}x{H} depth, found {len(data)}"]
    values = np.frombuffer(data, dtype='<f4', offset=DEPTH_HEADER.size).reshape(H, W).astype(np.float64)
    if not np.isfinite(values).all():
        return None, [f"{source}: depth plane contains non-finite values"]
    valid = values > 0.0
    return (values, valid), []


def read_depth(path):
    with open(path, 'rb') as f:
        decoded, problems = decode_depth(f.read(), source=os.path.basename(path))
    if problems:
        raise DatasetValidationError(problems)
    return decoded


def write_rgb(path, image):
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')


def read_rgb(path):
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0


# --- manifest ---------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def _pose_fields(w2c):
    return ' '.join(_fmt(v) for v in np.asarray(w2c)[:3, :4].reshape(-1))


def _pose_from_fields(values):
    w2c = np.eye(4)
    w2c[:3, :4] = np.array([float(v) for v in values]).reshape(3, 4)
    return w2c


@dataclass
class Frame:
    split: str
    view: int
    timestamp: float
    camera: Camera
    image: np.ndarray
    depth: np.ndarray = None
    depth_valid: np.ndarray = None
    rgb_path: str = ''
    depth_path: str = ''


@dataclass
class SensorDataset:
    root: str
    scene: str
    span: float
    contrast_threshold: float
    cameras: dict
    frames: list
    events: EventStream
    event_poses: list
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self):
        cam = self.cameras['rgb']
        return cam.width, cam.height

    def split(self, name):
        return [f for f in self.frames if f.split == name]

    @property
    def splits(self):
        return sorted({f.split for f in self.frames})

    def earliest_frames(self, split='train'):
        frames = self.split(split)
        if not frames:
            return []
        t0 = min(f.timestamp for f in frames)
        return [f for f in frames if f.timestamp == t0]

    def event_camera_at(self, t):
        """Event-camera pose in effect at time t, stamped with t"""
        times = np.array([cam.timestamp for cam in self.event_poses])
        i = max(int(np.searchsorted(times, t, side='right')) - 1, 0)
        return self.event_poses[i].with_timestamp(float(t))


def write_manifest(path, header, cameras, frames, event_poses):
    """
    header: ordered key -> value; cameras: name -> Camera;
    frames: dicts with split, view, timestamp, camera, rgb, depth, pose;
    event_poses: (timestamp, camera name, 4x4 pose) tuples
    """
    lines = ['# fusionsplat dataset manifest']
    for key, value in header.items():
        lines.append(f"{key} = {value}")
    for name, cam in cameras.items():
        lines.append(f"camera {name} {_fmt(cam.fx)} {_fmt(cam.fy)} {_fmt(cam.cx)} {_fmt(cam.cy)} "
                     f"{cam.width} {cam.height} {_fmt(cam.near)} {_fmt(cam.far)}")
    for fr in frames:
        lines.append(f"frame {fr['split']} {fr['view']} {_fmt(fr['timestamp'])} {fr['camera']} "
                     f"{fr['rgb']} {fr['depth'] or '-'} {_pose_fields(fr['pose'])}")
    for timestamp, name, pose in event_poses:
        lines.append(f"event_pose {_fmt(timestamp)} {name} {_pose_fields(pose)}")
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')


def _parse_manifest(path, problems):
    header, cameras, frame_lines, pose_lines = {}, {}, [], []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            where = f"{MANIFEST_NAME} line {lineno}"
            if '=' in line and not line.startswith(('camera ', 'frame ', 'event_pose ')):
                key, value = (part.strip() for part in line.split('=', 1))
                header[key] = value
                continue
            parts = line.split()
            kind = parts[0]
            try:
                if kind == 'camera' and len(parts) == 10:
                    fx, fy, cx, cy = (float(v) for v in parts[2:6])
                    cameras[parts[1]] = Camera(fx, fy, cx, cy, int(parts[6]), int(parts[7]),
                                               near=float(parts[8]), far=float(parts[9]))
                elif kind == 'frame' and len(parts) == 19:
                    frame_lines.append((where, parts[1], int(parts[2]), float(parts[3]), parts[4],
                                        parts[5], None if parts[6] == '-' else parts[6],
                                        _pose_from_fields(parts[7:19])))
                elif kind == 'event_pose' and len(parts) == 15:
                    pose_lines.append((where, float(parts[1]), parts[2], _pose_from_fields(parts[3:15])))
                else:
                    problems.append(f"{where}: malformed '{kind}' record ({len(parts)} fields)")
            except ValueError as e:
                problems.append(f"{where}: {e}")
    return header, cameras, frame_lines, pose_lines


def _header_float(header, key, problems):
    if key not in header:
        problems.append(f"{MANIFEST_NAME}: missing required key '{key}'")
        return None
    try:
        return float(header[key])
    except ValueError:
        problems.append(f"{MANIFEST_NAME}: key '{key}' is not a number: {header[key]!r}")
        return None


def _posed_camera(where, cameras, name, pose, timestamp, problems):
    if name not in cameras:
        problems.append(f"{where}: unknown camera '{name}'")
        return None
    base = cameras[name]
    cam = Camera(base.fx, base.fy, base.cx, base.cy, base.width, base.height, pose, base.near, base.far, timestamp)
    try:
        cam.validate()
    except ConfigurationError as e:
        problems.append(f"{where}: {e}")
        return None
    return cam


def load_dataset(directory):
    """
    Load and fully validate a dataset directory.

    Every problem found is collected and raised together as one
    DatasetValidationError; a returned dataset has passed all checks.
    """
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise DatasetValidationError([f"{directory}: no {MANIFEST_NAME} found"])

    problems = []
    header, cameras, frame_lines, pose_lines = _parse_manifest(manifest, problems)

    if header.get('format') != DATASET_FORMAT:
        problems.append(f"{MANIFEST_NAME}: format is {header.get('format')!r}, expected {DATASET_FORMAT!r}")
    if header.get('version') != str(DATASET_VERSION):
        problems.append(f"{MANIFEST_NAME}: dataset version {header.get('version')!r} is not supported")
    span = _header_float(header, 'span', problems)
    threshold = _header_float(header, 'contrast_threshold', problems)
    if span is not None and span <= 0:
        problems.append(f"{MANIFEST_NAME}: span must be positive (got {span})")
    if threshold is not None and threshold <= 0:
        problems.append(f"{MANIFEST_NAME}: contrast_threshold must be positive (got {threshold})")
    for name in ('rgb', 'event'):
        if name not in cameras:
            problems.append(f"{MANIFEST_NAME}: no '{name}' camera record")

    def in_span(where, t):
        if span is not None and not 0.0 <= t <= span:
            problems.append(f"{where}: timestamp {t!r} outside capture span [0, {span!r}]")

    frames = []
    for where, split, view, timestamp, cam_name, rgb_rel, depth_rel, pose in frame_lines:
        in_span(where, timestamp)
        cam = _posed_camera(where, cameras, cam_name, pose, timestamp, problems)
        rgb_path = os.path.join(directory, rgb_rel)
        if not os.path.exists(rgb_path):
            problems.append(f"{where}: missing RGB file {rgb_rel}")
            continue
        try:
            image = read_rgb(rgb_path)
        except OSError as e:
            problems.append(f"{where}: cannot decode {rgb_rel}: {e}")
            continue
        if cam is not None and image.shape[:2] != (cam.height, cam.width):
            problems.append(f"{where}: {rgb_rel} is {image.shape[1]}x{image.shape[0]}, camera is {cam.width}x{cam.height}")
        depth = valid = None
        if depth_rel is not None:
            depth_path = os.path.join(directory, depth_rel)
            if not os.path.exists(depth_path):
                problems.append(f"{where}: missing depth file {depth_rel}")
            else:
                with open(depth_path, 'rb') as f:
                    decoded, depth_problems = decode_depth(f.read(), source=depth_rel)
                problems.extend(f"{where}: {p}" for p in depth_problems)
                if decoded is not None:
                    depth, valid = decoded
                    if depth.shape != image.shape[:2]:
                        problems.append(f"{where}: depth {depth_rel} is not registered to {rgb_rel} (shape {depth.shape})")
        if cam is not None:
            frames.append(Frame(split, view, timestamp, cam, image, depth, valid, rgb_rel, depth_rel or ''))

    event_poses = []
    for where, timestamp, cam_name, pose in pose_lines:
        in_span(where, timestamp)
        cam = _posed_camera(where, cameras, cam_name, pose, timestamp, problems)
        if cam is not None:
            event_poses.append(cam)
    event_poses.sort(key=lambda c: c.timestamp)
    if not event_poses and 'event' in cameras:
        problems.append(f"{MANIFEST_NAME}: no event_pose records")

    events = None
    events_rel = header.get('events')
    if events_rel is None:
        problems.append(f"{MANIFEST_NAME}: missing required key 'events'")
    else:
        events_path = os.path.join(directory, events_rel)
        if not os.path.exists(events_path):
            problems.append(f"{MANIFEST_NAME}: missing event file {events_rel}")
        else:
            with open(events_path, 'rb') as f:
                events, event_problems = decode_events(f.read(), source=events_rel)
            problems.extend(event_problems)
            if events is not None:
                ecam = cameras.get('event')
                if ecam is not None and (events.width, events.height) != (ecam.width, ecam.height):
                    problems.append(f"{events_rel}: stream resolution {events.width}x{events.height} "
                                    f"differs from event camera {ecam.width}x{ecam.height}")
                if span is not None and len(events) and events.t.max() > span:
                    problems.append(f"{events_rel}: last event at t={events.t.max()!r} exceeds declared span {span!r}")
                if len(events) and events.t.min() < 0:
                    problems.append(f"{events_rel}: first event at t={events.t.min()!r} is before 0")

    if not any(f.split == 'train' for f in frames) and not problems:
        problems.append(f"{MANIFEST_NAME}: dataset has no training frames")

    if problems:
        raise DatasetValidationError(problems)

    known = {'format', 'version', 'scene', 'span', 'contrast_threshold', 'events'}
    meta = {k: v for k, v in header.items() if k not in known}
    return SensorDataset(
        root=os.path.abspath(directory),
        scene=header.get('scene', ''),
        span=span,
        contrast_threshold=threshold,
        cameras=cameras,
        frames=frames,
        events=events,
        event_poses=event_poses,
        meta=meta,
    )


# --- checkpoints ------------------------------------------------------------

def _pack_json(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode('utf-8'), dtype=np.uint8)


def save_checkpoint(state, path):
    """Write a training state as an uncompressed npz (written to a temp file, then renamed)."""
    arrays = {}
    for name in PARAM_NAMES:
        arrays[f'gauss__{name}'] = getattr(state.gaussians, name)
    for name, value in state.field.params().items():
        arrays[f'field__{name}'] = value
    arrays['field__bbox_min'] = state.field.grids.bbox_min
    arrays['field__bbox_max'] = state.field.grids.bbox_max
    for name, value in state.adam.m.items():
        arrays[f'adam_m__{name}'] = value
    for name, value in state.adam.v.items():
        arrays[f'adam_v__{name}'] = value
    arrays['stats__grad_accum'] = state.grad_accum
    arrays['stats__grad_denom'] = state.grad_denom

    meta = {
        'version': CHECKPOINT_VERSION,
        'step': int(state.step),
        'adam': {'step': int(state.adam.step), 'counts': state.adam.counts, 'beta1': state.adam.beta1,
                 'beta2': state.adam.beta2, 'eps': state.adam.eps},
        'config': asdict(state.config),
        'rng': state.rng.bit_generator.state,
        'k_max': int(state.field.k_max),
        'scene_extent': float(state.scene_extent),
        'span': float(state.span),
        'resolution': list(state.resolution) if state.resolution is not None else None,
        'history': state.history,
    }
    arrays['meta'] = _pack_json(meta)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def read_checkpoint_arrays(path):
    """All arrays plus the decoded meta dict; every member is read (and CRC-checked) eagerly."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {key: npz[key] for key in npz.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError, KeyError) as e:
        raise CheckpointIntegrityError(f"{path}: cannot read checkpoint ({e})") from e
    if 'meta' not in arrays:
        raise CheckpointIntegrityError(f"{path}: checkpoint has no metadata entry")
    try:
        meta = json.loads(arrays.pop('meta').tobytes().decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"{path}: checkpoint metadata is corrupt ({e})") from e
    if meta.get('version') != CHECKPOINT_VERSION:
        raise CheckpointVersionError(meta.get('version'), CHECKPOINT_VERSION)
    return arrays, meta


def load_checkpoint(path):
    """Restore a TrainState written by save_checkpoint"""
    from trainer import Adam, TrainConfig, TrainState
    from deformation_field import DeformationField

    arrays, meta = read_checkpoint_arrays(path)

    def group(prefix):
        return {key[len(prefix):]: value for key, value in arrays.items() if key.startswith(prefix)}

    try:
        gaussians = GaussianSet(*(arrays[f'gauss__{name}'] for name in PARAM_NAMES))
        field_arrays = group('field__')
        bbox_min = field_arrays.pop('bbox_min')
        bbox_max = field_arrays.pop('bbox_max')
        deformation = DeformationField.from_params(field_arrays, bbox_min, bbox_max, meta['k_max'])
        config = TrainConfig(**meta['config'])
        adam_meta = meta['adam']
        adam = Adam(config.learning_rates(), beta1=adam_meta['beta1'], beta2=adam_meta['beta2'], eps=adam_meta['eps'])
        adam.m = group('adam_m__')
        adam.v = group('adam_v__')
        adam.step = int(adam_meta['step'])
        adam.counts = {name: int(count) for name, count in adam_meta['counts'].items()}
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = meta['rng']
        grad_accum = arrays['stats__grad_accum']
        grad_denom = arrays['stats__grad_denom']
    except KeyError as e:
        raise CheckpointIntegrityError(f"{path}: checkpoint is missing entry {e}") from e

    if len(grad_accum) != len(gaussians):
        raise CheckpointIntegrityError(f"{path}: densification statistics do not match {len(gaussians)} gaussians")

    return TrainState(
        gaussians=gaussians,
        field=deformation,
        adam=adam,
        config=config,
        rng=rng,
        step=int(meta['step']),
        grad_accum=grad_accum,
        grad_denom=grad_denom,
        history=meta['history'],
        scene_extent=meta['scene_extent'],
        span=meta['span'],
        resolution=tuple(meta['resolution']) if meta.get('resolution') is not None else None,
    )
