"""Rigid-body algebra and pinhole projection shared by every other module.

Conventions:
    - Quaternions are (w, x, y, z); stored possibly unnormalized, normalized
      on use; canonical form has w >= 0.
    - Twists are 6-vectors (wx, wy, wz, vx, vy, vz): rotation part first.
    - Camera frame is +z forward, +x right, +y down; a world point maps to
      pixel coordinates u = fx*x/z + cx, v = fy*y/z + cy with no half-pixel
      offset, u in [0, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Near-plane in scene units; Gaussians at or behind it are culled.
NEAR_PLANE = 0.01
# Anti-aliasing floor added to the projected 2x2 covariance diagonal (px^2).
COV2D_BLUR = 0.3
# Componentwise floor for Gaussian scales (scene units).
SCALE_FLOOR = 1e-4

# Below this angle, rotation formulas switch to their Taylor expansions.
_SMALL_ANGLE = 1e-8
# Margin around pi where the SO(3) log branch is rejected as ambiguous.
_PI_MARGIN = 1e-6


class DegenerateRotationError(ValueError):
    """Raised when a rotation log/interpolation hits the pi-angle branch cut."""


@dataclass(frozen=True)
class Quaternion:
    """Rotation quaternion, scalar-first component order."""

    w: float
    x: float
    y: float
    z: float

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < 1e-12:
            raise ValueError("cannot normalize near-zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def canonicalized(self) -> "Quaternion":
        """Unit quaternion with w >= 0 (both signs encode the same rotation)."""
        q = self.normalized()
        if q.w < 0.0:
            return Quaternion(-q.w, -q.x, -q.y, -q.z)
        return q

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def multiply(self, other: "Quaternion") -> "Quaternion":
        a, b = self, other
        return Quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def to_matrix(self) -> np.ndarray:
        """3x3 rotation matrix of the normalized quaternion."""
        q = self.normalized()
        w, x, y, z = q.w, q.x, q.y, q.z
        return np.array(
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ]
        )

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.to_matrix() @ np.asarray(v, dtype=float)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @staticmethod
    def from_array(q: np.ndarray) -> "Quaternion":
        q = np.asarray(q, dtype=float).reshape(4)
        return Quaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            return Quaternion.identity()
        axis = axis / n
        half = 0.5 * angle
        s = math.sin(half)
        return Quaternion(math.cos(half), s * axis[0], s * axis[1], s * axis[2])

    @staticmethod
    def from_rotation_vector(omega: np.ndarray) -> "Quaternion":
        omega = np.asarray(omega, dtype=float)
        angle = float(np.linalg.norm(omega))
        if angle < _SMALL_ANGLE:
            # First-order: q = (1, omega/2), renormalized.
            return Quaternion(1.0, 0.5 * omega[0], 0.5 * omega[1], 0.5 * omega[2]).normalized()
        return Quaternion.from_axis_angle(omega / angle, angle)

    def to_rotation_vector(self) -> np.ndarray:
        """Axis-angle vector of the shortest rotation (angle in [0, pi])."""
        q = self.canonicalized()
        vn = math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z)
        if vn < _SMALL_ANGLE:
            return 2.0 * np.array([q.x, q.y, q.z])
        angle = 2.0 * math.atan2(vn, q.w)
        return (angle / vn) * np.array([q.x, q.y, q.z])

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        q = self.canonicalized()
        vn = math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z)
        return 2.0 * math.atan2(vn, q.w)

    @staticmethod
    def from_matrix(R: np.ndarray) -> "Quaternion":
        """Shepperd's method; returns a canonicalized unit quaternion."""
        R = np.asarray(R, dtype=float)
        trace = R[0, 0] + R[1, 1] + R[2, 2]
        if trace > 0.0:
            s = 0.5 / math.sqrt(trace + 1.0)
            w = 0.25 / s
            x = (R[2, 1] - R[1, 2]) * s
            y = (R[0, 2] - R[2, 0]) * s
            z = (R[1, 0] - R[0, 1]) * s
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
        return Quaternion(w, x, y, z).canonicalized()


@dataclass(frozen=True)
class Se3:
    """Rigid transform: rotation followed by translation, p' = R p + t."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Se3":
        return Se3()

    @staticmethod
    def from_translation(t: np.ndarray) -> "Se3":
        return Se3(Quaternion.identity(), t)

    @staticmethod
    def from_rotation(q: Quaternion) -> "Se3":
        return Se3(q, np.zeros(3))

    def inverse(self) -> "Se3":
        qinv = self.rotation.normalized().conjugate()
        return Se3(qinv, -qinv.rotate(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or a stack of points (N, 3)."""
        points = np.asarray(points, dtype=float)
        R = self.rotation.to_matrix()
        if points.ndim == 1:
            return R @ points + self.translation
        return points @ R.T + self.translation

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.to_matrix()
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Se3":
        T = np.asarray(T, dtype=float)
        return Se3(Quaternion.from_matrix(T[:3, :3]), T[:3, 3].copy())


def se3_compose(a: Se3, b: Se3) -> Se3:
    """Compose rigid transforms: the result applies b first, then a."""
    qa = a.rotation.normalized()
    qb = b.rotation.normalized()
    return Se3(qa.multiply(qb), qa.rotate(b.translation) + a.translation)


def se3_inverse(T: Se3) -> Se3:
    return T.inverse()


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian mapping twist translation into group translation."""
    theta = float(np.linalg.norm(omega))
    K = _skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / t2 * K
        + (theta - math.sin(theta)) / (t2 * theta) * (K @ K)
    )


def _left_jacobian_inverse(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = _skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    coeff = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


def se3_exp(xi: np.ndarray) -> Se3:
    """Exponential map from a twist (wx, wy, wz, vx, vy, vz) to a rigid transform."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    q = Quaternion.from_rotation_vector(omega)
    return Se3(q, _left_jacobian(omega) @ v)


def se3_log(T: Se3) -> np.ndarray:
    """Logarithm map; rejects rotations within _PI_MARGIN of pi (branch cut)."""
    q = T.rotation.canonicalized()
    if abs(q.angle() - math.pi) < _PI_MARGIN:
        raise DegenerateRotationError("rotation angle too close to pi for a stable log")
    omega = q.to_rotation_vector()
    v = _left_jacobian_inverse(omega) @ T.translation
    return np.concatenate([omega, v])


def se3_interpolate(T: Se3, tau: float) -> Se3:
    """Screw-linear interpolation exp(tau * log(T)); tau=0 gives identity, tau=1 gives T."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"interpolation parameter must be in [0, 1], got {tau}")
    if tau == 0.0:
        return Se3.identity()
    if tau == 1.0:
        return Se3(T.rotation.normalized(), T.translation.copy())
    return se3_exp(tau * se3_log(T))


def covariance_from_rs(r: Quaternion, s: np.ndarray) -> np.ndarray:
    """3x3 covariance R diag(s)^2 R^T; scales are floored at SCALE_FLOOR."""
    s = np.maximum(np.asarray(s, dtype=float).reshape(3), SCALE_FLOOR)
    R = r.to_matrix()
    M = R * s[np.newaxis, :]
    return M @ M.T


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    w2c: Se3 = field(default_factory=Se3.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0.0 <= self.cx <= self.width) or not (0.0 <= self.cy <= self.height):
            raise ValueError("principal point must lie within the image")

    @staticmethod
    def look_at(
        position: np.ndarray,
        target: np.ndarray,
        up: np.ndarray,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
    ) -> "Camera":
        """Camera at `position` with +z toward `target`; `up` fixes the roll."""
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise ValueError("camera position coincides with target")
        forward = forward / fn
        right = np.cross(forward, np.asarray(up, dtype=float))
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise ValueError("up direction is parallel to the viewing direction")
        right = right / rn
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w2c = Se3(Quaternion.from_matrix(R), -R @ position)
        return Camera(fx, fy, cx, cy, width, height, w2c)

    def project_point(self, p_world: np.ndarray) -> tuple[np.ndarray, float]:
        """Pixel coordinates and camera-frame depth of a world point."""
        p = self.w2c.apply(np.asarray(p_world, dtype=float))
        z = p[2]
        return np.array([self.fx * p[0] / z + self.cx, self.fy * p[1] / z + self.cy]), z


def perspective_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """2x3 Jacobian of the pinhole projection at a camera-frame point."""
    x, y, z = p_cam
    return np.array(
        [
            [fx / z, 0.0, -fx * x / (z * z)],
            [0.0, fy / z, -fy * y / (z * z)],
        ]
    )


def project_gaussian(
    mu: np.ndarray,
    cov: np.ndarray,
    cam: Camera,
    near: float = NEAR_PLANE,
    blur: float = COV2D_BLUR,
) -> tuple[np.ndarray, np.ndarray, float] | None:
    """Project a world-frame Gaussian to the image plane.

    Returns (mu2d, cov2d, depth), or None when the center is at or behind the
    near plane (culled). cov2d includes the anti-aliasing floor `blur` on its
    diagonal, keeping it invertible for degenerate scales.
    """
    mu = np.asarray(mu, dtype=float).reshape(3)
    W = cam.w2c.rotation.to_matrix()
    p_cam = W @ mu + cam.w2c.translation
    z = p_cam[2]
    if z <= near:
        return None
    J = perspective_jacobian(p_cam, cam.fx, cam.fy)
    M = J @ W
    cov2d = M @ np.asarray(cov, dtype=float) @ M.T + blur * np.eye(2)
    mu2d = np.array([cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy])
    return mu2d, cov2d, float(z)
