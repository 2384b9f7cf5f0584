"""Differentiable alpha-blend splatting of anisotropic 3D Gaussians.

The forward pass composites Gaussians front-to-back per pixel; the backward
pass returns analytic gradients for every Gaussian parameter. A brute-force
per-pixel reference renderer shares the same per-contribution arithmetic and
serves as the oracle for the windowed fast path.

Non-differentiable gates (near-plane culling, the Mahalanobis support radius,
the alpha cutoff, the alpha ceiling clamp and the depth sort order) pass zero
gradient. For finite-difference checks the gates of a base configuration can
be captured and replayed, which makes the rendered loss smooth around that
base point.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import _kernels
from .field import FieldDelta, GaussianField
from .geometry import Camera, COV2D_BLUR, NEAR_PLANE, SCALE_FLOOR


@dataclass(frozen=True)
class RenderConfig:
    background: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))
    alpha_ceiling: float = 0.999
    alpha_cutoff: float = 1.0 / 255.0
    support_radius: float = 3.0     # Mahalanobis units

    def __post_init__(self):
        object.__setattr__(self, "background", np.asarray(self.background, dtype=float).reshape(3))
        if not 0.0 < self.alpha_cutoff < self.alpha_ceiling <= 0.999:
            raise ValueError("require 0 < alpha_cutoff < alpha_ceiling <= 0.999")
        if self.support_radius <= 0.0:
            raise ValueError("support radius must be positive")


@dataclass
class RenderOutput:
    image: np.ndarray           # (H, W, 3) in [0, 1]
    transmittance: np.ndarray   # (H, W) in [0, 1], light reaching the background


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _Projection:
    """Per-Gaussian screen-space quantities plus the chain intermediates."""

    order: np.ndarray       # visible indices, sorted by (depth, index)
    visible: np.ndarray     # (N,) bool
    depth: np.ndarray       # (N,)
    mu2d: np.ndarray        # (N, 2)
    conic: np.ndarray       # (N, 2, 2) inverse of cov2d
    opac: np.ndarray        # (N,) activated opacity
    bbox: np.ndarray        # (N, 4) int: u0, u1, v0, v1 (u1/v1 exclusive)
    # intermediates consumed by the backward chain
    p_cam: np.ndarray       # (N, 3)
    q_unit: np.ndarray      # (N, 4) normalized quaternions
    q_norm: np.ndarray      # (N,)
    rot_mats: np.ndarray    # (N, 3, 3)
    s_act: np.ndarray       # (N, 3) floored scales
    s_floored: np.ndarray   # (N, 3) bool, True where the floor clamped
    m3: np.ndarray          # (N, 3, 3) R diag(s)
    v_cam: np.ndarray       # (N, 3, 3) camera-frame 3D covariance
    jac: np.ndarray         # (N, 2, 3) perspective Jacobians
    cov2d: np.ndarray       # (N, 2, 2)
    w_mat: np.ndarray       # (3, 3) extrinsic rotation


def _quat_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def _project_field(f: GaussianField, cam: Camera, cfg: RenderConfig) -> _Projection:
    n = len(f)
    q_norm = np.linalg.norm(f.rotation, axis=1)
    if n and q_norm.min() <= 1e-12:
        raise ValueError("field contains a non-normalizable quaternion")
    q_unit = f.rotation / q_norm[:, None] if n else f.rotation.copy()
    rot_mats = _quat_to_matrices(q_unit) if n else np.zeros((0, 3, 3))

    s_raw = np.exp(f.log_scale)
    s_floored = s_raw < SCALE_FLOOR
    s_act = np.maximum(s_raw, SCALE_FLOOR)
    m3 = rot_mats * s_act[:, None, :]
    cov3 = np.einsum("nij,nkj->nik", m3, m3)

    w_mat = cam.w2c.rotation.to_matrix()
    p_cam = f.mu @ w_mat.T + cam.w2c.translation
    depth = p_cam[:, 2]
    visible = depth > NEAR_PLANE

    # Perspective Jacobian rows; invalid depths are patched to avoid warnings.
    z = np.where(visible, depth, 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * p_cam[:, 0] / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * p_cam[:, 1] / (z * z)

    v_cam = np.einsum("ij,njk,lk->nil", w_mat, cov3, w_mat)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, v_cam, jac)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det

    mu2d = np.stack(
        [cam.fx * p_cam[:, 0] / z + cam.cx, cam.fy * p_cam[:, 1] / z + cam.cy], axis=1
    )

    ru = cfg.support_radius * np.sqrt(cov2d[:, 0, 0])
    rv = cfg.support_radius * np.sqrt(cov2d[:, 1, 1])
    bbox = np.zeros((n, 4), dtype=np.int64)
    bbox[:, 0] = np.clip(np.floor(mu2d[:, 0] - ru), 0, cam.width)
    bbox[:, 1] = np.clip(np.floor(mu2d[:, 0] + ru) + 1, 0, cam.width)
    bbox[:, 2] = np.clip(np.floor(mu2d[:, 1] - rv), 0, cam.height)
    bbox[:, 3] = np.clip(np.floor(mu2d[:, 1] + rv) + 1, 0, cam.height)
    visible &= (bbox[:, 1] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 2])

    idx = np.flatnonzero(visible)
    order = idx[np.lexsort((idx, depth[idx]))] if len(idx) else idx

    return _Projection(
        order=order,
        visible=visible,
        depth=depth,
        mu2d=mu2d,
        conic=conic,
        opac=_sigmoid(f.opacity),
        bbox=bbox,
        p_cam=p_cam,
        q_unit=q_unit,
        q_norm=q_norm,
        rot_mats=rot_mats,
        s_act=s_act,
        s_floored=s_floored,
        m3=m3,
        v_cam=v_cam,
        jac=jac,
        cov2d=cov2d,
        w_mat=w_mat,
    )


def _forward(prep: _Projection, f: GaussianField, cam: Camera, cfg: RenderConfig) -> RenderOutput:
    image = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    _kernels.forward_blend(
        prep.order, prep.mu2d, prep.conic, prep.opac, f.color, prep.bbox,
        cfg.alpha_ceiling, cfg.alpha_cutoff, cfg.support_radius * cfg.support_radius,
        cfg.background, image, trans,
    )
    return RenderOutput(image=image, transmittance=trans)


def render(f: GaussianField, cam: Camera, cfg: RenderConfig | None = None) -> RenderOutput:
    """Composite the field into an image; an empty visible set yields the
    background and unit transmittance."""
    cfg = cfg or RenderConfig()
    return _forward(_project_field(f, cam, cfg), f, cam, cfg)


def render_reference(f: GaussianField, cam: Camera, cfg: RenderConfig | None = None) -> RenderOutput:
    """Brute-force oracle: per-pixel loop over all depth-sorted Gaussians,
    no window culling."""
    cfg = cfg or RenderConfig()
    prep = _project_field(f, cam, cfg)
    image = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    _kernels.reference_blend(
        prep.order, prep.mu2d, prep.conic, prep.opac, f.color,
        cfg.alpha_ceiling, cfg.alpha_cutoff, cfg.support_radius * cfg.support_radius,
        cfg.background, image, trans,
    )
    return RenderOutput(image=image, transmittance=trans)


@dataclass
class RenderGates:
    """Frozen gate decisions of one forward pass, for smooth re-evaluation."""

    order: np.ndarray
    bbox: np.ndarray        # (N, 4), rows valid for entries of `order`
    include: np.ndarray     # flat bool, windows of ordered Gaussians concatenated
    clamped: np.ndarray     # flat bool, same layout
    offsets: np.ndarray     # (len(order),) start of each window slab


def _window_offsets(order: np.ndarray, bbox: np.ndarray) -> tuple[np.ndarray, int]:
    sizes = (bbox[order, 1] - bbox[order, 0]) * (bbox[order, 3] - bbox[order, 2])
    offsets = np.zeros(len(order), dtype=np.int64)
    if len(order):
        np.cumsum(sizes[:-1], out=offsets[1:])
    return offsets, int(sizes.sum())


def capture_gates(f: GaussianField, cam: Camera, cfg: RenderConfig | None = None) -> RenderGates:
    cfg = cfg or RenderConfig()
    prep = _project_field(f, cam, cfg)
    offsets, total = _window_offsets(prep.order, prep.bbox)
    include = np.zeros(total, dtype=np.bool_)
    clamped = np.zeros(total, dtype=np.bool_)
    _kernels.gate_masks(
        prep.order, prep.mu2d, prep.conic, prep.opac, prep.bbox,
        cfg.alpha_ceiling, cfg.alpha_cutoff, cfg.support_radius * cfg.support_radius,
        include, clamped, offsets,
    )
    return RenderGates(
        order=prep.order.copy(), bbox=prep.bbox.copy(),
        include=include, clamped=clamped, offsets=offsets,
    )


def render_frozen(
    f: GaussianField, cam: Camera, cfg: RenderConfig, gates: RenderGates
) -> RenderOutput:
    """Render with gate decisions taken from `gates` instead of the live field.

    Within the captured gates the output is a smooth function of every field
    parameter, which is what finite-difference checks need.
    """
    prep = _project_field(f, cam, cfg)
    image = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    _kernels.frozen_blend(
        gates.order, prep.mu2d, prep.conic, prep.opac, f.color, gates.bbox,
        gates.include, gates.clamped, gates.offsets,
        cfg.alpha_ceiling, cfg.background, image, trans,
    )
    return RenderOutput(image=image, transmittance=trans)


# Partial derivatives of the rotation matrix w.r.t. unit quaternion components.
def _rotation_grad_tensor(q: np.ndarray) -> np.ndarray:
    """(N, 4, 3, 3) tensor dR/du for unit quaternions u = (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    d = np.empty((len(q), 4, 3, 3))
    d[:, 0] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    d[:, 1] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2.0 * x, -w], axis=-1),
            np.stack([z, w, -2.0 * x], axis=-1),
        ],
        axis=-2,
    )
    d[:, 2] = 2.0 * np.stack(
        [
            np.stack([-2.0 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2.0 * y], axis=-1),
        ],
        axis=-2,
    )
    d[:, 3] = 2.0 * np.stack(
        [
            np.stack([-2.0 * z, -w, x], axis=-1),
            np.stack([w, -2.0 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return d


def render_backward(
    f: GaussianField,
    cam: Camera,
    cfg: RenderConfig | None,
    image_gradient: np.ndarray,
) -> FieldDelta:
    """Pull an image-space gradient back onto every Gaussian parameter.

    `image_gradient` is dL/d(rendered image), (H, W, 3). The returned delta
    holds dL/d{mu, color, opacity logit, raw quaternion, log scale}; its dmu
    slot stays zero (displacement gradients are wired up by the fitter, which
    knows which render came from an advanced field).
    """
    cfg = cfg or RenderConfig()
    image_gradient = np.ascontiguousarray(image_gradient, dtype=float)
    if image_gradient.shape != (cam.height, cam.width, 3):
        raise ValueError("image_gradient shape does not match the camera")
    prep = _project_field(f, cam, cfg)
    n = len(f)
    delta = FieldDelta.zeros(n)
    if len(prep.order) == 0:
        return delta

    total = _forward(prep, f, cam, cfg).image

    d_opac_act = np.zeros(n)
    g_mu2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    partial = np.zeros_like(total)
    trans = np.ones((cam.height, cam.width))
    _kernels.backward_replay(
        prep.order, prep.mu2d, prep.conic, prep.opac, f.color, prep.bbox,
        cfg.alpha_ceiling, cfg.alpha_cutoff, cfg.support_radius * cfg.support_radius,
        total, image_gradient,
        delta.color, d_opac_act, g_mu2d, g_conic, partial, trans,
    )

    live = prep.order
    delta.opacity[live] = d_opac_act[live] * prep.opac[live] * (1.0 - prep.opac[live])

    conic = prep.conic[live]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", conic, g_conic[live], conic)

    jac = prep.jac[live]
    v_cam = prep.v_cam[live]
    g_vcam = np.einsum("nji,njk,nkl->nil", jac, g_cov2d, jac)
    g_jac = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, jac, v_cam)

    w_mat = prep.w_mat
    g_cov3 = np.einsum("ji,njk,kl->nil", w_mat, g_vcam, w_mat)
    g_m3 = 2.0 * np.einsum("nij,njk->nik", g_cov3, prep.m3[live])

    rot = prep.rot_mats[live]
    g_rot = g_m3 * prep.s_act[live][:, None, :]
    g_s = np.einsum("njk,njk->nk", g_m3, rot)
    g_log_scale = np.where(prep.s_floored[live], 0.0, g_s * prep.s_act[live])

    # Through the quaternion normalization: u = q / |q|.
    d_r_du = _rotation_grad_tensor(prep.q_unit[live])
    g_u = np.einsum("nij,nqij->nq", g_rot, d_r_du)
    u = prep.q_unit[live]
    g_q = (g_u - np.einsum("nq,nq->n", u, g_u)[:, None] * u) / prep.q_norm[live][:, None]

    # Camera-frame position receives both the center projection path and the
    # Jacobian's own dependence on the position.
    p = prep.p_cam[live]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    z2 = z * z
    z3 = z2 * z
    g_p = np.einsum("nji,nj->ni", jac, g_mu2d[live])
    g_p[:, 0] += g_jac[:, 0, 2] * (-cam.fx / z2)
    g_p[:, 1] += g_jac[:, 1, 2] * (-cam.fy / z2)
    g_p[:, 2] += (
        g_jac[:, 0, 0] * (-cam.fx / z2)
        + g_jac[:, 1, 1] * (-cam.fy / z2)
        + g_jac[:, 0, 2] * (2.0 * cam.fx * x / z3)
        + g_jac[:, 1, 2] * (2.0 * cam.fy * y / z3)
    )

    delta.mu[live] = g_p @ w_mat
    delta.rotation[live] = g_q
    delta.log_scale[live] = g_log_scale
    return delta
