"""
Tile-based splatting of projected Gaussians with front-to-back alpha blending,
plus the analytic backward pass to every Gaussian parameter.

Gaussians are sorted once per view by camera depth (ties broken by index) and
binned into 16x16 pixel tiles. Forward and backward run one tile per thread;
gradients land in per-(tile, entry) slots and are merged in a fixed order, so
results do not depend on the thread count.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from errors import NonFiniteParameterError
from scene_core import project_gaussians, project_gaussians_vjp

TILE_SIZE = 16
COV2_DILATION = 0.3
TRUNCATION_POWER = 9.0  # d^T conic d <= 9 is the 3-sigma ellipse
MIN_TRANSMITTANCE = 1e-4
MIN_ALPHA_FOR_DEPTH = 1e-4

# per-entry gradient slots written by the backward kernel
_G_MU2X, _G_MU2Y, _G_CONIC_A, _G_CONIC_B, _G_CONIC_C, _G_OPACITY, _G_R, _G_G, _G_B, _G_Z = range(10)
_N_SLOTS = 10


@dataclass
class SplatBatch:
    """Screen-space quantities shared by forward, backward and record inspection"""
    mu2: np.ndarray
    conic: np.ndarray
    cov2: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    z: np.ndarray
    radius: np.ndarray
    valid: np.ndarray
    tile_offsets: np.ndarray
    tile_gauss: np.ndarray
    tiles_x: int


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    depth_raw: np.ndarray
    contrib_count: np.ndarray
    splats: SplatBatch
    background: np.ndarray

    def blend_records(self, x, y):
        """Ordered (gaussian index, alpha_i, transmittance before i) for pixel (x, y)"""
        splats = self.splats
        tile = (y // TILE_SIZE) * splats.tiles_x + (x // TILE_SIZE)
        start = splats.tile_offsets[tile]
        records = []
        T = 1.0
        for k in range(start, start + self.contrib_count[y, x]):
            idx = splats.tile_gauss[k]
            dx = x - splats.mu2[idx, 0]
            dy = y - splats.mu2[idx, 1]
            a, b, c = splats.conic[idx]
            power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
            if power > TRUNCATION_POWER:
                continue
            alpha = splats.opacity[idx] * np.exp(-0.5 * power)
            records.append((int(idx), float(alpha), float(T)))
            T = T * (1.0 - alpha)
        return records


# --- kernels -------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _blend_forward(tile_offsets, tile_gauss, mu2, conic, opacity, color, z, background,
                   width, height, tiles_x, out_color, out_depth, out_T, out_count):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        y0 = (tile // tiles_x) * TILE_SIZE
        x0 = (tile % tiles_x) * TILE_SIZE
        for py in range(y0, min(y0 + TILE_SIZE, height)):
            for px in range(x0, min(x0 + TILE_SIZE, width)):
                T = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                count = 0
                for k in range(start, end):
                    idx = tile_gauss[k]
                    dx = px - mu2[idx, 0]
                    dy = py - mu2[idx, 1]
                    power = conic[idx, 0] * dx * dx + 2.0 * conic[idx, 1] * dx * dy + conic[idx, 2] * dy * dy
                    if power > TRUNCATION_POWER:
                        continue
                    alpha = opacity[idx] * np.exp(-0.5 * power)
                    w = alpha * T
                    acc_r += color[idx, 0] * w
                    acc_g += color[idx, 1] * w
                    acc_b += color[idx, 2] * w
                    acc_d += z[idx] * w
                    T = T * (1.0 - alpha)
                    count = k - start + 1
                    if T < MIN_TRANSMITTANCE:
                        break
                out_color[py, px, 0] = acc_r + background[0] * T
                out_color[py, px, 1] = acc_g + background[1] * T
                out_color[py, px, 2] = acc_b + background[2] * T
                out_depth[py, px] = acc_d
                out_T[py, px] = T
                out_count[py, px] = count


@njit(parallel=True, cache=True)
def _blend_backward(tile_offsets, tile_gauss, mu2, conic, opacity, color, z, background,
                    width, height, tiles_x, count, grad_color, grad_depth_raw, grad_alpha, partial):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in prange(n_tiles):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        n = end - start
        rec_k = np.empty(n, np.int64)
        rec_alpha = np.empty(n)
        rec_T = np.empty(n)
        rec_G = np.empty(n)
        rec_dx = np.empty(n)
        rec_dy = np.empty(n)
        y0 = (tile // tiles_x) * TILE_SIZE
        x0 = (tile % tiles_x) * TILE_SIZE
        for py in range(y0, min(y0 + TILE_SIZE, height)):
            for px in range(x0, min(x0 + TILE_SIZE, width)):
                m = 0
                T = 1.0
                for k in range(start, start + count[py, px]):
                    idx = tile_gauss[k]
                    dx = px - mu2[idx, 0]
                    dy = py - mu2[idx, 1]
                    power = conic[idx, 0] * dx * dx + 2.0 * conic[idx, 1] * dx * dy + conic[idx, 2] * dy * dy
                    if power > TRUNCATION_POWER:
                        continue
                    G = np.exp(-0.5 * power)
                    alpha = opacity[idx] * G
                    rec_k[m] = k
                    rec_alpha[m] = alpha
                    rec_T[m] = T
                    rec_G[m] = G
                    rec_dx[m] = dx
                    rec_dy[m] = dy
                    m += 1
                    T = T * (1.0 - alpha)

                g_r = grad_color[py, px, 0]
                g_g = grad_color[py, px, 1]
                g_b = grad_color[py, px, 2]
                g_d = grad_depth_raw[py, px]
                g_a = grad_alpha[py, px]
                # light arriving from behind the current record
                behind_r = background[0]
                behind_g = background[1]
                behind_b = background[2]
                behind_d = 0.0
                behind_a = 0.0
                for j in range(m - 1, -1, -1):
                    k = rec_k[j]
                    idx = tile_gauss[k]
                    alpha = rec_alpha[j]
                    Tj = rec_T[j]
                    c_r = color[idx, 0]
                    c_g = color[idx, 1]
                    c_b = color[idx, 2]
                    zi = z[idx]
                    w = alpha * Tj
                    g_alpha = Tj * (g_r * (c_r - behind_r) + g_g * (c_g - behind_g) + g_b * (c_b - behind_b)
                                    + g_d * (zi - behind_d) + g_a * (1.0 - behind_a))
                    partial[k, _G_R] += g_r * w
                    partial[k, _G_G] += g_g * w
                    partial[k, _G_B] += g_b * w
                    partial[k, _G_Z] += g_d * w
                    behind_r = c_r * alpha + (1.0 - alpha) * behind_r
                    behind_g = c_g * alpha + (1.0 - alpha) * behind_g
                    behind_b = c_b * alpha + (1.0 - alpha) * behind_b
                    behind_d = zi * alpha + (1.0 - alpha) * behind_d
                    behind_a = alpha + (1.0 - alpha) * behind_a

                    partial[k, _G_OPACITY] += g_alpha * rec_G[j]
                    g_power = -0.5 * g_alpha * alpha
                    dx = rec_dx[j]
                    dy = rec_dy[j]
                    a = conic[idx, 0]
                    b = conic[idx, 1]
                    c = conic[idx, 2]
                    partial[k, _G_MU2X] -= g_power * (2.0 * a * dx + 2.0 * b * dy)
                    partial[k, _G_MU2Y] -= g_power * (2.0 * b * dx + 2.0 * c * dy)
                    partial[k, _G_CONIC_A] += g_power * dx * dx
                    partial[k, _G_CONIC_B] += g_power * 2.0 * dx * dy
                    partial[k, _G_CONIC_C] += g_power * dy * dy


@njit(cache=True)
def _merge_partials(tile_gauss, partial, out):
    # tile-major, then front-to-back list order
    for k in range(tile_gauss.shape[0]):
        idx = tile_gauss[k]
        for slot in range(partial.shape[1]):
            out[idx, slot] += partial[k, slot]


# --- preprocessing ---------------------------------------------------------------

def _bin_into_tiles(mu2, radius, z, valid, width, height):
    """Global depth sort, then duplicate each Gaussian into every tile its footprint touches"""
    tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y

    index = np.flatnonzero(valid)
    order = index[np.lexsort((index, z[index]))]
    cx, cy, rad = mu2[order, 0], mu2[order, 1], radius[order]
    px0 = np.clip(np.ceil(cx - rad), 0, width - 1)
    px1 = np.clip(np.floor(cx + rad), 0, width - 1)
    py0 = np.clip(np.ceil(cy - rad), 0, height - 1)
    py1 = np.clip(np.floor(cy + rad), 0, height - 1)
    on_screen = (cx + rad >= 0) & (cx - rad <= width - 1) & (cy + rad >= 0) & (cy - rad <= height - 1)
    on_screen &= (px0 <= px1) & (py0 <= py1)

    order = order[on_screen]
    tx0 = (px0[on_screen] // TILE_SIZE).astype(np.int64)
    tx1 = (px1[on_screen] // TILE_SIZE).astype(np.int64)
    ty0 = (py0[on_screen] // TILE_SIZE).astype(np.int64)
    ty1 = (py1[on_screen] // TILE_SIZE).astype(np.int64)
    span_x = tx1 - tx0 + 1
    counts = span_x * (ty1 - ty0 + 1)
    total = int(counts.sum())

    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - first
    span_rep = np.repeat(span_x, counts)
    tile_ids = (np.repeat(ty0, counts) + local // span_rep) * tiles_x + np.repeat(tx0, counts) + local % span_rep
    entries = np.repeat(order, counts)

    # stable: keeps depth order inside each tile
    perm = np.argsort(tile_ids, kind='stable')
    tile_gauss = np.ascontiguousarray(entries[perm], dtype=np.int64)
    tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    tile_offsets[1:] = np.cumsum(np.bincount(tile_ids, minlength=n_tiles))
    return tile_offsets, tile_gauss, tiles_x


def prepare_splats(gaussians, cam):
    gaussians.check_finite()
    n = len(gaussians)
    screen = project_gaussians(gaussians.mu, gaussians.r, gaussians.s, cam)
    cov = screen.cov2.copy()
    cov[:, 0, 0] += COV2_DILATION
    cov[:, 1, 1] += COV2_DILATION
    A, B, C = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = A * C - B * B
    valid = screen.valid & (det > 0)
    det_safe = np.where(valid, det, 1.0)
    conic = np.stack([C / det_safe, -B / det_safe, A / det_safe], axis=1)
    mid = 0.5 * (A + C)
    lambda_max = mid + np.sqrt(np.maximum(0.25 * (A - C) ** 2 + B * B, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lambda_max, 0.0))

    finite = np.isfinite(screen.mu2).all(axis=1) & np.isfinite(conic).all(axis=1) & np.isfinite(radius)
    broken = valid & ~finite
    if broken.any():
        index = int(np.flatnonzero(broken)[0])
        raise NonFiniteParameterError(index, 'projected footprint', f"mu2={screen.mu2[index]}")

    tile_offsets, tile_gauss, tiles_x = _bin_into_tiles(screen.mu2, radius, screen.z, valid, cam.width, cam.height)
    return SplatBatch(
        mu2=np.ascontiguousarray(screen.mu2),
        conic=np.ascontiguousarray(conic),
        cov2=cov,
        opacity=np.ascontiguousarray(gaussians.opacity) if n else np.zeros(0),
        color=np.ascontiguousarray(gaussians.colors) if n else np.zeros((0, 3)),
        z=np.ascontiguousarray(screen.z),
        radius=radius,
        valid=valid,
        tile_offsets=tile_offsets,
        tile_gauss=tile_gauss,
        tiles_x=tiles_x,
    )


# --- public API ------------------------------------------------------------------

def render(gaussians, cam, background=(0.0, 0.0, 0.0)):
    background = np.ascontiguousarray(background, dtype=np.float64)
    splats = prepare_splats(gaussians, cam)
    H, W = cam.height, cam.width
    color = np.empty((H, W, 3))
    depth_raw = np.empty((H, W))
    T = np.empty((H, W))
    count = np.empty((H, W), dtype=np.int64)
    _blend_forward(splats.tile_offsets, splats.tile_gauss, splats.mu2, splats.conic, splats.opacity,
                   splats.color, splats.z, background, W, H, splats.tiles_x, color, depth_raw, T, count)
    alpha = 1.0 - T
    covered = alpha > MIN_ALPHA_FOR_DEPTH
    depth = np.full((H, W), float(cam.far))
    depth[covered] = depth_raw[covered] / alpha[covered]
    return RenderOutput(color=color, depth=depth, alpha=alpha, depth_raw=depth_raw,
                        contrib_count=count, splats=splats, background=background)


def render_vjp(gaussians, cam, background, grad_color, grad_depth=None, grad_alpha=None, output=None):
    """
    Gradients of a scalar loss wrt every raw Gaussian parameter, given the loss
    gradient on the color, depth and alpha maps. Pass the forward `output` to skip
    recomputing it.

    Returns a dict with 'mu', 'r', 's', 'sigma_op', 'c' and the screen-space mean
    gradient 'mu2' (used for densification statistics).
    """
    if output is None:
        output = render(gaussians, cam, background)
    splats = output.splats
    H, W = cam.height, cam.width
    n = len(gaussians)

    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64).reshape(H, W, 3)
    grad_depth = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    grad_alpha = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)

    # depth = depth_raw / alpha on covered pixels, far plane elsewhere
    covered = output.alpha > MIN_ALPHA_FOR_DEPTH
    safe_alpha = np.where(covered, output.alpha, 1.0)
    g_depth_raw = np.where(covered, grad_depth / safe_alpha, 0.0)
    g_alpha_eff = np.where(covered, grad_alpha - grad_depth * output.depth / safe_alpha, grad_alpha)

    partial = np.zeros((len(splats.tile_gauss), _N_SLOTS))
    _blend_backward(splats.tile_offsets, splats.tile_gauss, splats.mu2, splats.conic, splats.opacity,
                    splats.color, splats.z, output.background, W, H, splats.tiles_x, output.contrib_count,
                    grad_color, np.ascontiguousarray(g_depth_raw), np.ascontiguousarray(g_alpha_eff), partial)
    screen_grads = np.zeros((n, _N_SLOTS))
    _merge_partials(splats.tile_gauss, partial, screen_grads)

    grads = {
        'mu': np.zeros((n, 3)),
        'r': np.zeros((n, 4)),
        's': np.zeros((n, 3)),
        'sigma_op': screen_grads[:, _G_OPACITY] * splats.opacity * (1.0 - splats.opacity),
        'c': screen_grads[:, _G_R:_G_B + 1] * splats.color * (1.0 - splats.color),
        'mu2': screen_grads[:, _G_MU2X:_G_MU2Y + 1].copy(),
    }

    active = splats.valid
    if active.any():
        a, b, c = splats.conic[active, 0], splats.conic[active, 1], splats.conic[active, 2]
        K = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
        g_conic = np.stack([
            np.stack([screen_grads[active, _G_CONIC_A], 0.5 * screen_grads[active, _G_CONIC_B]], -1),
            np.stack([0.5 * screen_grads[active, _G_CONIC_B], screen_grads[active, _G_CONIC_C]], -1),
        ], -2)
        g_cov2 = -K @ g_conic @ K
        g_mu, g_r, g_s = project_gaussians_vjp(
            gaussians.mu[active], gaussians.r[active], gaussians.s[active], cam,
            screen_grads[active, _G_MU2X:_G_MU2Y + 1], g_cov2, screen_grads[active, _G_Z])
        grads['mu'][active] = g_mu
        grads['r'][active] = g_r
        grads['s'][active] = g_s
    return grads
