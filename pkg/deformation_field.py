"""
Temporal deformation field: six 2D feature planes over (x,y), (x,z), (y,z),
(x,t), (y,t), (z,t) sampled bilinearly, concatenated with a sinusoidal time
encoding and the raw position, and decoded by a small ReLU network into
per-Gaussian offsets of position, log-scale and rotation.

The three output heads start at zero, so a fresh field is the identity map.
"""

import numpy as np

from errors import ConfigurationError, NonFiniteParameterError, RangeError
from scene_core import GaussianSet, normalize_vjp

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
TIME_PLANES = (3, 4, 5)
HEADS = (('mu', 3), ('s', 3), ('r', 4))


def encode_time(t, k_max):
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"normalized time {t} outside [0, 1]")
    out = np.empty(2 * (k_max + 1))
    for k in range(k_max + 1):
        angle = (2.0 ** k) * np.pi * t
        out[2 * k] = np.sin(angle)
        out[2 * k + 1] = np.cos(angle)
    return out


class PlaneGrids:
    def __init__(self, planes, bbox_min, bbox_max):
        self.planes = [np.ascontiguousarray(p, dtype=np.float64) for p in planes]
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)
        if len(self.planes) != 6:
            raise ConfigurationError(f"expected 6 feature planes, got {len(self.planes)}")
        for p in self.planes:
            if p.ndim != 3 or p.shape[0] < 2 or p.shape[1] < 2:
                raise ConfigurationError(f"feature plane resolution must be at least 2x2, got {p.shape[:2]}")

    @classmethod
    def create(cls, points, spatial_resolution=32, time_resolution=16, features=16, rng=None, dilation=0.05):
        """Planes spanning the bounding box of `points` dilated by `dilation` on each side"""
        rng = np.random.default_rng(0) if rng is None else rng
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = points.min(axis=0), points.max(axis=0)
        extent = np.maximum(hi - lo, 1e-3)
        lo, hi = lo - dilation * extent, hi + dilation * extent
        res = (spatial_resolution,) * 3 + (time_resolution,)
        planes = [rng.uniform(-1e-4, 1e-4, size=(res[a], res[b], features)) for a, b in PLANE_AXES]
        return cls(planes, lo, hi)

    @property
    def features(self):
        return self.planes[0].shape[2]

    def copy(self):
        return PlaneGrids([p.copy() for p in self.planes], self.bbox_min.copy(), self.bbox_max.copy())

    def _coordinates(self, mu, t):
        """(N, 4) coordinates in [0, 1] and the d(coordinate)/d(mu) factors (zero where clamped)"""
        extent = self.bbox_max - self.bbox_min
        u = (mu - self.bbox_min) / extent
        inside = (u >= 0.0) & (u <= 1.0)
        coords = np.empty((len(mu), 4))
        coords[:, :3] = np.clip(u, 0.0, 1.0)
        coords[:, 3] = min(max(t, 0.0), 1.0)
        return coords, inside / extent

    def sample(self, mu, t):
        """Batched bilinear lookup: (N, 3) positions -> (N, 6F) features plus a backward cache"""
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        coords, dcoord = self._coordinates(mu, t)
        out = []
        taps = []
        for plane, (a, b) in zip(self.planes, PLANE_AXES):
            Ra, Rb, _ = plane.shape
            fa = coords[:, a] * (Ra - 1)
            fb = coords[:, b] * (Rb - 1)
            ia = np.minimum(np.floor(fa).astype(np.int64), Ra - 2)
            ib = np.minimum(np.floor(fb).astype(np.int64), Rb - 2)
            wa = (fa - ia)[:, None]
            wb = (fb - ib)[:, None]
            g00, g10 = plane[ia, ib], plane[ia + 1, ib]
            g01, g11 = plane[ia, ib + 1], plane[ia + 1, ib + 1]
            out.append((1 - wa) * (1 - wb) * g00 + wa * (1 - wb) * g10 + (1 - wa) * wb * g01 + wa * wb * g11)
            taps.append((ia, ib, wa, wb))
        return np.concatenate(out, axis=1), {'taps': taps, 'dcoord': dcoord}

    def sample_vjp(self, cache, g_features):
        """Returns (per-plane gradients, gradient wrt the sampled positions)"""
        F = self.features
        g_planes = [np.zeros_like(p) for p in self.planes]
        g_mu = np.zeros((g_features.shape[0], 3))
        for i, (plane, (a, b)) in enumerate(zip(self.planes, PLANE_AXES)):
            ia, ib, wa, wb = cache['taps'][i]
            g = g_features[:, i * F:(i + 1) * F]
            np.add.at(g_planes[i], (ia, ib), (1 - wa) * (1 - wb) * g)
            np.add.at(g_planes[i], (ia + 1, ib), wa * (1 - wb) * g)
            np.add.at(g_planes[i], (ia, ib + 1), (1 - wa) * wb * g)
            np.add.at(g_planes[i], (ia + 1, ib + 1), wa * wb * g)

            Ra, Rb, _ = plane.shape
            d_fa = (1 - wb) * (plane[ia + 1, ib] - plane[ia, ib]) + wb * (plane[ia + 1, ib + 1] - plane[ia, ib + 1])
            d_fb = (1 - wa) * (plane[ia, ib + 1] - plane[ia, ib]) + wa * (plane[ia + 1, ib + 1] - plane[ia + 1, ib])
            if a < 3:
                g_mu[:, a] += np.sum(g * d_fa, axis=1) * (Ra - 1) * cache['dcoord'][:, a]
            if b < 3:
                g_mu[:, b] += np.sum(g * d_fb, axis=1) * (Rb - 1) * cache['dcoord'][:, b]
        return g_planes, g_mu


def sample_grids(g, mu, t):
    mu = np.asarray(mu, dtype=np.float64)
    features, _ = g.sample(mu.reshape(-1, 3), t)
    return features[0] if mu.ndim == 1 else features


def _second_differences(plane):
    return plane[:, :-2] - 2.0 * plane[:, 1:-1] + plane[:, 2:]


def grid_smoothness(g):
    """Mean squared second difference along t over the three time-bearing planes"""
    total = 0.0
    count = 0
    for i in TIME_PLANES:
        if g.planes[i].shape[1] < 3:
            raise ConfigurationError(f"temporal smoothness needs >= 3 time nodes, plane {i} has {g.planes[i].shape[1]}")
        d2 = _second_differences(g.planes[i])
        total += float(np.sum(d2 * d2))
        count += d2.size
    return total / count


def grid_smoothness_grad(g):
    count = sum(_second_differences(g.planes[i]).size for i in TIME_PLANES)
    grads = [np.zeros_like(p) for p in g.planes]
    for i in TIME_PLANES:
        coeff = 2.0 * _second_differences(g.planes[i]) / count
        grads[i][:, :-2] += coeff
        grads[i][:, 1:-1] -= 2.0 * coeff
        grads[i][:, 2:] += coeff
    return grads


class DeformDecoder:
    """ReLU network with zero-initialized output heads"""

    def __init__(self, hidden, heads):
        self.hidden = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in hidden]
        self.heads = {name: (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                      for name, (w, b) in heads.items()}

    @classmethod
    def create(cls, in_dim, width=64, depth=2, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = []
        fan_in = in_dim
        for _ in range(depth):
            bound = 1.0 / np.sqrt(fan_in)
            hidden.append((rng.uniform(-bound, bound, size=(fan_in, width)), rng.uniform(-bound, bound, size=width)))
            fan_in = width
        heads = {name: (np.zeros((width, dim)), np.zeros(dim)) for name, dim in HEADS}
        return cls(hidden, heads)

    def copy(self):
        return DeformDecoder([(w.copy(), b.copy()) for w, b in self.hidden],
                             {name: (w.copy(), b.copy()) for name, (w, b) in self.heads.items()})

    def forward(self, x):
        activations = [x]
        pre = []
        h = x
        for w, b in self.hidden:
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0)
            activations.append(h)
        outputs = {name: h @ w + b for name, (w, b) in self.heads.items()}
        return outputs, {'activations': activations, 'pre': pre}

    def backward(self, cache, g_outputs):
        """Returns ({param name: grad}, gradient wrt the input)"""
        grads = {}
        h = cache['activations'][-1]
        g_h = np.zeros_like(h)
        for name, (w, b) in self.heads.items():
            g_out = g_outputs[name]
            grads[f'head_{name}_w'] = h.T @ g_out
            grads[f'head_{name}_b'] = g_out.sum(axis=0)
            g_h += g_out @ w.T
        for layer in range(len(self.hidden) - 1, -1, -1):
            w, _ = self.hidden[layer]
            g_z = g_h * (cache['pre'][layer] > 0.0)
            grads[f'dec_w{layer}'] = cache['activations'][layer].T @ g_z
            grads[f'dec_b{layer}'] = g_z.sum(axis=0)
            g_h = g_z @ w.T
        return grads, g_h


class DeformationField:
    def __init__(self, grids, decoder, k_max=6):
        self.grids = grids
        self.decoder = decoder
        self.k_max = k_max

    @classmethod
    def create(cls, points, spatial_resolution=32, time_resolution=16, features=16,
               width=64, depth=2, k_max=6, motion_degree=1.0, seed=0):
        rng = np.random.default_rng(seed)
        time_nodes = max(2, int(round(time_resolution * motion_degree)))
        grids = PlaneGrids.create(points, spatial_resolution, time_nodes, features, rng)
        in_dim = 6 * features + 2 * (k_max + 1) + 3
        decoder = DeformDecoder.create(in_dim, width, depth, rng)
        return cls(grids, decoder, k_max)

    @classmethod
    def from_params(cls, params, bbox_min, bbox_max, k_max):
        """Inverse of params(); used when restoring checkpoints"""
        grids = PlaneGrids([params[f'grid_{i}'] for i in range(len(PLANE_AXES))], bbox_min, bbox_max)
        depth = sum(1 for name in params if name.startswith('dec_w'))
        hidden = [(params[f'dec_w{layer}'], params[f'dec_b{layer}']) for layer in range(depth)]
        heads = {name: (params[f'head_{name}_w'], params[f'head_{name}_b']) for name, _ in HEADS}
        return cls(grids, DeformDecoder(hidden, heads), int(k_max))

    def copy(self):
        return DeformationField(self.grids.copy(), self.decoder.copy(), self.k_max)

    def params(self):
        """Name -> trainable array (views, so in-place optimizer updates stick)"""
        out = {f'grid_{i}': p for i, p in enumerate(self.grids.planes)}
        for layer, (w, b) in enumerate(self.decoder.hidden):
            out[f'dec_w{layer}'] = w
            out[f'dec_b{layer}'] = b
        for name, (w, b) in self.decoder.heads.items():
            out[f'head_{name}_w'] = w
            out[f'head_{name}_b'] = b
        return out

    def offsets(self, mu, t):
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        features, grid_cache = self.grids.sample(mu, t)
        gamma = np.broadcast_to(encode_time(t, self.k_max), (len(mu), 2 * (self.k_max + 1)))
        x = np.concatenate([features, gamma, mu], axis=1)
        outputs, net_cache = self.decoder.forward(x)
        return outputs, {'grid': grid_cache, 'net': net_cache, 'n_features': features.shape[1]}

    def offsets_vjp(self, cache, g_outputs):
        grads, g_x = self.decoder.backward(cache['net'], g_outputs)
        n_feat = cache['n_features']
        g_planes, g_mu = self.grids.sample_vjp(cache['grid'], g_x[:, :n_feat])
        for i, g in enumerate(g_planes):
            grads[f'grid_{i}'] = g
        g_mu = g_mu + g_x[:, -3:]
        return grads, g_mu

    def deform_with_cache(self, gs, t):
        outputs, cache = self.offsets(gs.mu, t)
        for name, values in outputs.items():
            bad = ~np.isfinite(values).all(axis=1)
            if bad.any():
                index = int(np.flatnonzero(bad)[0])
                raise NonFiniteParameterError(index, f"deformation offset '{name}'", f"t={t}")
        r_raw = gs.r + outputs['r']
        norm = np.sqrt(np.sum(r_raw * r_raw, axis=1, keepdims=True))
        # rows with a zero rotation offset keep their stored quaternion bit-for-bit
        moved = np.any(outputs['r'] != 0.0, axis=1)
        r_out = np.where(moved[:, None], r_raw / norm, gs.r)
        deformed = GaussianSet(gs.mu + outputs['mu'], r_out, gs.s + outputs['s'], gs.sigma_op.copy(), gs.c.copy())
        cache.update({'r_unit': r_raw / norm, 'r_norm': norm, 'moved': moved})
        return deformed, cache

    def deform(self, gs, t):
        return self.deform_with_cache(gs, t)[0]

    def deform_vjp(self, cache, g_deformed):
        """
        Backward through deform. `g_deformed` holds gradients wrt the deformed
        Gaussians; returns (gradients wrt the canonical Gaussians, field gradients).
        """
        g_r_pre = np.where(cache['moved'][:, None],
                           normalize_vjp(cache['r_unit'], cache['r_norm'], g_deformed['r']), g_deformed['r'])
        g_outputs = {'mu': g_deformed['mu'], 's': g_deformed['s'], 'r': g_r_pre}
        field_grads, g_mu_field = self.offsets_vjp(cache, g_outputs)
        canonical = {
            'mu': g_deformed['mu'] + g_mu_field,
            's': g_deformed['s'].copy(),
            'r': g_r_pre,
            'sigma_op': g_deformed['sigma_op'].copy(),
            'c': g_deformed['c'].copy(),
        }
        return canonical, field_grads

    def smoothness(self):
        return grid_smoothness(self.grids)

    def smoothness_grads(self):
        return {f'grid_{i}': g for i, g in enumerate(grid_smoothness_grad(self.grids))}


def deform(gs, t, field):
    return field.deform(gs, t)
