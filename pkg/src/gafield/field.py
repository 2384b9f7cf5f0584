"""Motion-augmented Gaussian scene state and its binary on-disk format.

Every primitive carries a position, a displacement over a fixed future
interval, appearance parameters (color, opacity logit, rotation, log-scales)
and a small-integer body label (0 background, 1 gripper, >= 2 objects).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Quaternion, Se3

MAGIC = b"GAF1"
FORMAT_VERSION = 1

GRIPPER_LABEL = 1
BACKGROUND_LABEL = 0

_HEADER = struct.Struct("<4sIIII")
_RECORD = struct.Struct("<17fB")


class FieldFormatError(ValueError):
    """Base class for field-file decoding failures."""


class BadMagicError(FieldFormatError):
    pass


class UnsupportedVersionError(FieldFormatError):
    pass


class TruncatedFieldError(FieldFormatError):
    pass


class EmptySubsetError(ValueError):
    """Raised when a requested body label is absent from the field."""


@dataclass(frozen=True)
class GaussianPoint:
    """Single primitive: position, future displacement and appearance."""

    mu: np.ndarray
    dmu: np.ndarray
    color: np.ndarray
    opacity: float
    rotation: Quaternion
    log_scale: np.ndarray
    label: int = 0


@dataclass
class GaussianField:
    """Ordered set of Gaussians over one time interval, stored column-wise.

    Treated as an immutable value: operations return new fields and never
    mutate arrays in place. Ordering is stable and is what gradient buffers
    and render tie-breaks index into.
    """

    mu: np.ndarray          # (N, 3) positions, scene units
    dmu: np.ndarray         # (N, 3) displacement over the interval
    color: np.ndarray       # (N, 3) RGB in [0, 1]
    opacity: np.ndarray     # (N,)   logits
    rotation: np.ndarray    # (N, 4) quaternions, wxyz, possibly unnormalized
    log_scale: np.ndarray   # (N, 3) log of per-axis scales
    label: np.ndarray       # (N,)   uint8 body labels
    t: int = 0
    dt: int = 8             # interval length in controller steps

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.asarray(self.mu, dtype=float).reshape(n, 3)
        self.dmu = np.asarray(self.dmu, dtype=float).reshape(n, 3)
        self.color = np.asarray(self.color, dtype=float).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=float).reshape(n)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=float).reshape(n, 3)
        self.label = np.asarray(self.label, dtype=np.uint8).reshape(n)
        if self.dt <= 0:
            raise ValueError("interval dt must be a positive integer")

    def __len__(self) -> int:
        return len(self.mu)

    def point(self, i: int) -> GaussianPoint:
        return GaussianPoint(
            mu=self.mu[i].copy(),
            dmu=self.dmu[i].copy(),
            color=self.color[i].copy(),
            opacity=float(self.opacity[i]),
            rotation=Quaternion.from_array(self.rotation[i]),
            log_scale=self.log_scale[i].copy(),
            label=int(self.label[i]),
        )

    @staticmethod
    def from_points(points: list[GaussianPoint], t: int = 0, dt: int = 8) -> "GaussianField":
        return GaussianField(
            mu=np.array([p.mu for p in points], dtype=float).reshape(len(points), 3),
            dmu=np.array([p.dmu for p in points], dtype=float).reshape(len(points), 3),
            color=np.array([p.color for p in points], dtype=float).reshape(len(points), 3),
            opacity=np.array([p.opacity for p in points], dtype=float),
            rotation=np.array([p.rotation.as_array() for p in points], dtype=float).reshape(len(points), 4),
            log_scale=np.array([p.log_scale for p in points], dtype=float).reshape(len(points), 3),
            label=np.array([p.label for p in points], dtype=np.uint8),
            t=t,
            dt=dt,
        )

    def copy(self) -> "GaussianField":
        return GaussianField(
            mu=self.mu.copy(),
            dmu=self.dmu.copy(),
            color=self.color.copy(),
            opacity=self.opacity.copy(),
            rotation=self.rotation.copy(),
            log_scale=self.log_scale.copy(),
            label=self.label.copy(),
            t=self.t,
            dt=self.dt,
        )


@dataclass
class FieldDelta:
    """Per-parameter gradient buffers aligned to a field's point ordering."""

    mu: np.ndarray          # (N, 3)
    dmu: np.ndarray         # (N, 3)
    color: np.ndarray       # (N, 3)
    opacity: np.ndarray     # (N,)
    rotation: np.ndarray    # (N, 4)
    log_scale: np.ndarray   # (N, 3)

    @staticmethod
    def zeros(n: int) -> "FieldDelta":
        return FieldDelta(
            mu=np.zeros((n, 3)),
            dmu=np.zeros((n, 3)),
            color=np.zeros((n, 3)),
            opacity=np.zeros(n),
            rotation=np.zeros((n, 4)),
            log_scale=np.zeros((n, 3)),
        )

    def __len__(self) -> int:
        return len(self.mu)

    def add(self, other: "FieldDelta") -> None:
        self.mu += other.mu
        self.dmu += other.dmu
        self.color += other.color
        self.opacity += other.opacity
        self.rotation += other.rotation
        self.log_scale += other.log_scale

    def all_finite(self) -> bool:
        return all(
            np.isfinite(a).all()
            for a in (self.mu, self.dmu, self.color, self.opacity, self.rotation, self.log_scale)
        )


def advance(f: GaussianField, fraction: float) -> GaussianField:
    """Move positions along their displacements by `fraction` of the interval.

    Appearance parameters, labels, ordering and the (t, dt) bookkeeping are
    unchanged; the remaining displacement shrinks to (1 - fraction) * dmu.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    if fraction == 0.0:
        return f.copy()
    out = f.copy()
    out.mu = f.mu + fraction * f.dmu
    out.dmu = (1.0 - fraction) * f.dmu
    return out


def extract_subset(f: GaussianField, label: int) -> tuple[np.ndarray, np.ndarray]:
    """Current and future positions of one labeled body, in field order."""
    mask = f.label == label
    if not mask.any():
        raise EmptySubsetError(f"no points carry label {label}")
    positions = f.mu[mask].copy()
    return positions, positions + f.dmu[mask]


def relabeled(f: GaussianField, old: int, new: int) -> GaussianField:
    out = f.copy()
    out.label = np.where(f.label == old, np.uint8(new), f.label)
    return out


def transformed(f: GaussianField, pose: Se3) -> GaussianField:
    """Rigidly move every point: positions map through the pose, displacement
    vectors and per-point rotations rotate with it."""
    rot = pose.rotation.normalized()
    R = rot.to_matrix()
    out = f.copy()
    out.mu = f.mu @ R.T + pose.translation
    out.dmu = f.dmu @ R.T
    w, x, y, z = rot.w, rot.x, rot.y, rot.z
    pw, px, py, pz = f.rotation[:, 0], f.rotation[:, 1], f.rotation[:, 2], f.rotation[:, 3]
    out.rotation = np.stack(
        [
            w * pw - x * px - y * py - z * pz,
            w * px + x * pw + y * pz - z * py,
            w * py - x * pz + y * pw + z * px,
            w * pz + x * py - y * px + z * pw,
        ],
        axis=1,
    )
    return out


def subset_field(f: GaussianField, label: int) -> GaussianField:
    """New field holding only the points of one body, order preserved."""
    mask = f.label == label
    if not mask.any():
        raise EmptySubsetError(f"no points carry label {label}")
    return GaussianField(
        mu=f.mu[mask].copy(),
        dmu=f.dmu[mask].copy(),
        color=f.color[mask].copy(),
        opacity=f.opacity[mask].copy(),
        rotation=f.rotation[mask].copy(),
        log_scale=f.log_scale[mask].copy(),
        label=f.label[mask].copy(),
        t=f.t,
        dt=f.dt,
    )


def save_field(f: GaussianField, path) -> None:
    """Write the GAF1 binary format (little-endian, float32 records)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(f), f.t, f.dt))
        for i in range(len(f)):
            fh.write(
                _RECORD.pack(
                    *np.asarray(f.mu[i], dtype=np.float32),
                    *np.asarray(f.dmu[i], dtype=np.float32),
                    *np.asarray(f.color[i], dtype=np.float32),
                    np.float32(f.opacity[i]),
                    *np.asarray(f.rotation[i], dtype=np.float32),
                    *np.asarray(f.log_scale[i], dtype=np.float32),
                    int(f.label[i]),
                )
            )


def load_field(path) -> GaussianField:
    """Read a GAF1 file; raises a distinct error per corruption mode."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TruncatedFieldError("file shorter than the header")
    magic, version, count, t, dt = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported field file version {version}")
    expected = _HEADER.size + count * _RECORD.size
    if len(data) < expected:
        raise TruncatedFieldError(
            f"payload truncated: expected {expected} bytes, found {len(data)}"
        )
    mu = np.empty((count, 3))
    dmu = np.empty((count, 3))
    color = np.empty((count, 3))
    opacity = np.empty(count)
    rotation = np.empty((count, 4))
    log_scale = np.empty((count, 3))
    label = np.empty(count, dtype=np.uint8)
    offset = _HEADER.size
    for i in range(count):
        values = _RECORD.unpack_from(data, offset)
        offset += _RECORD.size
        mu[i] = values[0:3]
        dmu[i] = values[3:6]
        color[i] = values[6:9]
        opacity[i] = values[9]
        rotation[i] = values[10:14]
        log_scale[i] = values[14:17]
        label[i] = values[17]
    return GaussianField(mu, dmu, color, opacity, rotation, log_scale, label, t=int(t), dt=int(dt))
