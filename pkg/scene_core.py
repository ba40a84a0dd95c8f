"""
Canonical Gaussian scene representation and the pinhole projection math that turns
3D Gaussians into screen-space footprints (mean, 2x2 covariance, camera depth).

Raw parameters are unconstrained: scales live in log domain, opacity and color are
logits. Covariances are always derived, never stored.
"""

from dataclasses import dataclass, field

import numpy as np

from errors import DegenerateRotationError, ConfigurationError, NonFiniteParameterError

PARAM_NAMES = ('mu', 'r', 's', 'sigma_op', 'c')


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


@dataclass
class Gaussian:
    mu: np.ndarray
    r: np.ndarray
    s: np.ndarray
    sigma_op: float
    c: np.ndarray

    @property
    def opacity(self):
        return float(sigmoid(self.sigma_op))

    @property
    def color(self):
        return sigmoid(np.asarray(self.c, dtype=np.float64))


class GaussianSet:
    """Structure-of-arrays container for N Gaussians"""

    def __init__(self, mu, r, s, sigma_op, c):
        self.mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1, 3)
        self.r = np.ascontiguousarray(r, dtype=np.float64).reshape(-1, 4)
        self.s = np.ascontiguousarray(s, dtype=np.float64).reshape(-1, 3)
        self.sigma_op = np.ascontiguousarray(sigma_op, dtype=np.float64).reshape(-1)
        self.c = np.ascontiguousarray(c, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        if not (len(self.r) == len(self.s) == len(self.sigma_op) == len(self.c) == n):
            raise ConfigurationError("GaussianSet arrays must all have the same length")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians):
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.array([g.mu for g in gaussians]),
            np.array([g.r for g in gaussians]),
            np.array([g.s for g in gaussians]),
            np.array([g.sigma_op for g in gaussians]),
            np.array([g.c for g in gaussians]),
        )

    def __len__(self):
        return len(self.mu)

    def __getitem__(self, i):
        return Gaussian(self.mu[i].copy(), self.r[i].copy(), self.s[i].copy(),
                        float(self.sigma_op[i]), self.c[i].copy())

    def copy(self):
        return GaussianSet(self.mu.copy(), self.r.copy(), self.s.copy(), self.sigma_op.copy(), self.c.copy())

    def params(self):
        """Name -> raw parameter array (views, not copies)"""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def select(self, index):
        return GaussianSet(self.mu[index], self.r[index], self.s[index], self.sigma_op[index], self.c[index])

    def concatenate(self, other):
        return GaussianSet(
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.r, other.r]),
            np.concatenate([self.s, other.s]),
            np.concatenate([self.sigma_op, other.sigma_op]),
            np.concatenate([self.c, other.c]),
        )

    @property
    def opacity(self):
        return sigmoid(self.sigma_op)

    @property
    def colors(self):
        return sigmoid(self.c)

    @property
    def scales(self):
        return np.exp(self.s)

    def check_finite(self, what='parameter'):
        """Raise NonFiniteParameterError naming the first Gaussian with a NaN/inf"""
        for name in PARAM_NAMES:
            values = getattr(self, name)
            bad = ~np.isfinite(values.reshape(len(values), int(np.prod(values.shape[1:])))).all(axis=1)
            if bad.any():
                index = int(np.flatnonzero(bad)[0])
                raise NonFiniteParameterError(index, f"{what} '{name}'",
                                              f"{int(bad.sum())} gaussian(s) affected, value={values[index]}")

    def normalize_rotations(self):
        self.r /= np.sqrt(np.sum(self.r * self.r, axis=1, keepdims=True))


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0
    timestamp: float = 0.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates"""
        return -self.rotation.T @ self.translation

    def validate(self):
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ConfigurationError("camera rotation is not orthonormal")
        if not (0 < self.near < self.far):
            raise ConfigurationError(f"camera clip range invalid: near={self.near}, far={self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError(f"camera resolution invalid: {self.width}x{self.height}")

    def with_timestamp(self, timestamp):
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.world_to_camera.copy(), self.near, self.far, timestamp)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height, near=0.1, far=20.0, timestamp=0.0):
        """OpenCV convention: x right, y down, z forward"""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([right, down, forward])
        w2c[:3, 3] = -w2c[:3, :3] @ eye
        return cls(fx, fy, cx, cy, width, height, w2c, near, far, timestamp)


@dataclass
class Projected2D:
    mu2: np.ndarray
    cov2: np.ndarray
    z_cam: float
    valid: bool


# --- rotation helpers -------------------------------------------------------

def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    return q / norm, norm


def quaternion_to_rotation(q):
    """(..., 4) unit quaternions (w, x, y, z) -> (..., 3, 3) rotation matrices"""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quaternion_to_rotation_vjp(q, gR):
    """Gradient wrt the unit quaternion given dL/dR"""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = lambda i, j: gR[..., i, j]
    gq = np.empty(q.shape)
    gq[..., 0] = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gq[..., 1] = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
                        + z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2))
    gq[..., 2] = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
                        - w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2))
    gq[..., 3] = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
                        + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return gq


def normalize_vjp(q_unit, norm, g_unit):
    """Backward of q -> q / |q|"""
    dot = np.sum(q_unit * g_unit, axis=-1, keepdims=True)
    return (g_unit - q_unit * dot) / norm


# --- covariance ----------------------------------------------------------------

def covariances(r, s):
    """Batched Sigma = R diag(exp s)^2 R^T; also returns the pieces the backward pass needs"""
    norm = np.sqrt(np.sum(r * r, axis=-1, keepdims=True))
    if np.any(norm == 0):
        index = int(np.flatnonzero(norm.reshape(-1) == 0)[0])
        raise DegenerateRotationError(f"quaternion of gaussian {index} has zero norm")
    q_unit = r / norm
    R = quaternion_to_rotation(q_unit)
    S = np.exp(s)
    M = R * S[..., None, :]
    Sigma = M @ np.swapaxes(M, -1, -2)
    return Sigma, M, R, S, q_unit, norm


def covariance_from_params(r, s):
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return covariances(r[None], s[None])[0][0]


# --- projection ----------------------------------------------------------------

@dataclass
class ScreenSpace:
    """Batched projection result; mu2/cov2 are only meaningful where valid"""
    mu2: np.ndarray
    cov2: np.ndarray
    z: np.ndarray
    valid: np.ndarray


def _jacobian(t, fx, fy):
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    return J


def _camera_space(mu, cam):
    t = mu @ cam.rotation.T + cam.translation
    valid = (t[:, 2] > cam.near) & (t[:, 2] < cam.far)
    # culled points still get finite numbers; callers ignore them
    t_safe = t.copy()
    t_safe[~valid, 2] = 1.0
    return t, t_safe, valid


def project_gaussians(mu, r, s, cam):
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    Sigma = covariances(np.asarray(r, dtype=np.float64).reshape(-1, 4),
                        np.asarray(s, dtype=np.float64).reshape(-1, 3))[0]
    t, t_safe, valid = _camera_space(mu, cam)
    x, y, z = t_safe[:, 0], t_safe[:, 1], t_safe[:, 2]
    mu2 = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    J = _jacobian(t_safe, cam.fx, cam.fy)
    Rw = cam.rotation
    V = Rw @ Sigma @ Rw.T
    cov2 = J @ V @ np.swapaxes(J, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))
    return ScreenSpace(mu2, cov2, t[:, 2].copy(), valid)


def project_gaussians_vjp(mu, r, s, cam, g_mu2, g_cov2, g_z):
    """Analytic backward of project_gaussians; returns (g_mu, g_r, g_s)"""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    Sigma, M, R, S, q_unit, norm = covariances(np.asarray(r, dtype=np.float64).reshape(-1, 4),
                                               np.asarray(s, dtype=np.float64).reshape(-1, 3))
    _, t, _ = _camera_space(mu, cam)
    fx, fy = cam.fx, cam.fy
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    J = _jacobian(t, fx, fy)
    Rw = cam.rotation
    V = Rw @ Sigma @ Rw.T

    g_mu2 = np.asarray(g_mu2, dtype=np.float64).reshape(-1, 2)
    g_cov2 = np.asarray(g_cov2, dtype=np.float64).reshape(-1, 2, 2)
    g_z = np.asarray(g_z, dtype=np.float64).reshape(-1)
    G = 0.5 * (g_cov2 + np.swapaxes(g_cov2, 1, 2))

    gJ = 2.0 * G @ J @ V
    gV = np.swapaxes(J, 1, 2) @ G @ J
    gSigma = Rw.T @ gV @ Rw
    gM = (gSigma + np.swapaxes(gSigma, 1, 2)) @ M
    gR = gM * S[:, None, :]
    g_s = np.sum(gM * R, axis=1) * S
    g_r = normalize_vjp(q_unit, norm, quaternion_to_rotation_vjp(q_unit, gR))

    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    gt = np.empty_like(t)
    gt[:, 0] = g_mu2[:, 0] * fx * inv_z - gJ[:, 0, 2] * fx * inv_z2
    gt[:, 1] = g_mu2[:, 1] * fy * inv_z - gJ[:, 1, 2] * fy * inv_z2
    gt[:, 2] = (g_z
                - g_mu2[:, 0] * fx * x * inv_z2 - g_mu2[:, 1] * fy * y * inv_z2
                - gJ[:, 0, 0] * fx * inv_z2 + gJ[:, 0, 2] * 2.0 * fx * x * inv_z3
                - gJ[:, 1, 1] * fy * inv_z2 + gJ[:, 1, 2] * 2.0 * fy * y * inv_z3)
    g_mu = gt @ Rw
    return g_mu, g_r, g_s


def project_gaussian(g, cam):
    screen = project_gaussians(np.asarray(g.mu)[None], np.asarray(g.r)[None], np.asarray(g.s)[None], cam)
    return Projected2D(screen.mu2[0], screen.cov2[0], float(screen.z[0]), bool(screen.valid[0]))


def project_gaussian_vjp(g, cam, g_mu2=None, g_cov2=None, g_z=0.0):
    """Single-Gaussian wrapper; returns {'mu', 'r', 's'} gradients"""
    g_mu2 = np.zeros(2) if g_mu2 is None else g_mu2
    g_cov2 = np.zeros((2, 2)) if g_cov2 is None else g_cov2
    g_mu, g_r, g_s = project_gaussians_vjp(np.asarray(g.mu)[None], np.asarray(g.r)[None], np.asarray(g.s)[None],
                                           cam, np.asarray(g_mu2)[None], np.asarray(g_cov2)[None], [g_z])
    return {'mu': g_mu[0], 'r': g_r[0], 's': g_s[0]}
