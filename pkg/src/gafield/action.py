"""Rigid end-effector action extraction from Gaussian motion.

The displacement of the gripper-labeled points between the current and
future states is summarized as one rigid transform (point-cloud
registration), then split into a sequence of per-controller-step transforms
by screw-linear interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .field import GaussianField, GRIPPER_LABEL, extract_subset
from .geometry import Quaternion, Se3, se3_compose, se3_interpolate


class DegenerateCloudError(ValueError):
    """Source points do not constrain a rigid transform (covariance rank < 2)."""


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-8        # stop when the RMS change drops below this
    correspondence: str = "nearest-neighbor"   # or "paired-by-index"

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.correspondence not in ("nearest-neighbor", "paired-by-index"):
            raise ValueError(f"unknown correspondence strategy {self.correspondence!r}")


@dataclass
class InitAction:
    """Relative world-frame transforms, one per controller step."""

    steps: list[Se3]
    horizon: int

    def total(self) -> Se3:
        """Composition of all steps (screw steps commute, so order is moot)."""
        out = Se3.identity()
        for step in self.steps:
            out = se3_compose(step, out)
        return out

    def to_json(self) -> str:
        doc = {
            "horizon": self.horizon,
            "steps": [
                {
                    "q": list(s.rotation.normalized().as_array()),
                    "t": list(s.translation),
                }
                for s in self.steps
            ],
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(doc: str | dict) -> "InitAction":
        data = json.loads(doc) if isinstance(doc, str) else doc
        steps = [
            Se3(Quaternion.from_array(np.array(s["q"])), np.array(s["t"]))
            for s in data["steps"]
        ]
        return InitAction(steps=steps, horizon=int(data["horizon"]))


def _check_cloud(points: np.ndarray, name: str) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"{name} must be an (N, 3) array, got {points.shape}")
    if len(points) < 3:
        raise ValueError(f"{name} needs at least 3 points")
    return points


def _source_rank_ok(src: np.ndarray) -> bool:
    centered = src - src.mean(axis=0)
    eigs = np.linalg.eigvalsh(centered.T @ centered / len(src))
    # Rank >= 2: the second-largest spread direction must be non-degenerate.
    return bool(eigs[1] > 1e-9)


def kabsch_align(src: np.ndarray, dst: np.ndarray) -> Se3:
    """Least-squares rigid transform mapping src onto dst, paired by index.

    Closed-form SVD solution with the determinant fix that excludes
    reflections.
    """
    src = _check_cloud(src, "src")
    dst = _check_cloud(dst, "dst")
    if len(src) != len(dst):
        raise ValueError("paired clouds must have equal length")
    if not _source_rank_ok(src):
        raise DegenerateCloudError("source cloud is rank-deficient (collinear or coincident)")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Se3(Quaternion.from_matrix(rot), c_dst - rot @ c_src)


def icp(src: np.ndarray, dst: np.ndarray, cfg: IcpConfig | None = None) -> tuple[Se3, float]:
    """Iterative registration of src toward dst; returns (transform, final RMS).

    With nearest-neighbor correspondence, matches are re-estimated against a
    kd-tree of dst each iteration; paired-by-index skips matching entirely
    and converges in one solve.
    """
    cfg = cfg or IcpConfig()
    src = _check_cloud(src, "src")
    dst = _check_cloud(dst, "dst")

    if cfg.correspondence == "paired-by-index":
        transform = kabsch_align(src, dst)
        rms = float(np.sqrt(np.mean(np.sum((transform.apply(src) - dst) ** 2, axis=1))))
        return transform, rms

    tree = cKDTree(dst)
    transform = Se3.identity()
    last_rms = np.inf
    rms = np.inf
    for _ in range(cfg.max_iterations):
        moved = transform.apply(src)
        dists, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dists ** 2)))
        if abs(last_rms - rms) < cfg.tolerance:
            break
        last_rms = rms
        transform = kabsch_align(src, dst[idx])
    return transform, rms


def compute_init_action(
    f: GaussianField, gripper_label: int = GRIPPER_LABEL, horizon: int | None = None,
    icp_cfg: IcpConfig | None = None,
) -> InitAction:
    """Register current against future gripper points and split the result
    into `horizon` equal screw steps.

    steps[k] maps the pose at fraction k/horizon to the pose at (k+1)/horizon
    in the world frame; their composition reproduces the full transform.
    """
    if horizon is None:
        horizon = f.dt
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    positions, future_positions = extract_subset(f, gripper_label)
    # The two clouds are index-aligned by construction.
    icp_cfg = icp_cfg or IcpConfig(correspondence="paired-by-index")
    total, _ = icp(positions, future_positions, icp_cfg)
    steps = []
    for k in range(horizon):
        a = se3_interpolate(total, (k + 1) / horizon)
        b = se3_interpolate(total, k / horizon)
        steps.append(se3_compose(a, b.inverse()))
    return InitAction(steps=steps, horizon=horizon)
