"""Iterative action refinement conditioned on rendered visual guidance.

Candidate end-effector actions live in 6-dof twist coordinates so that
additive Gaussian noise and L1 errors are well defined. Each refinement step
renders the gripper at the candidate pose over the current scene (one image
per camera), asks a pluggable denoiser for a noise estimate, and applies a
deterministic reverse-diffusion update. The terminal step returns the
predicted clean action directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Protocol

import numpy as np

from .field import GaussianField, transformed
from .geometry import Camera, Quaternion, Se3, se3_compose, se3_exp, se3_log
from .renderer import RenderConfig, render
from .action import InitAction


@dataclass
class ActionSequence:
    """Per-controller-step relative poses with gripper open/close commands."""

    steps: list[Se3]
    gripper: np.ndarray     # (H,) in [0, 1]
    horizon: int

    def __post_init__(self):
        self.gripper = np.asarray(self.gripper, dtype=float).reshape(self.horizon)

    def total(self) -> Se3:
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
                    "g": float(g),
                }
                for s, g in zip(self.steps, self.gripper)
            ],
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(doc: str | dict) -> "ActionSequence":
        data = json.loads(doc) if isinstance(doc, str) else doc
        steps = [
            Se3(Quaternion.from_array(np.array(s["q"])), np.array(s["t"]))
            for s in data["steps"]
        ]
        gripper = np.array([s["g"] for s in data["steps"]], dtype=float)
        return ActionSequence(steps=steps, gripper=gripper, horizon=int(data["horizon"]))


@dataclass
class NoisyAction:
    """Action at one noise level: twist rows plus clean gripper channel."""

    twists: np.ndarray      # (H, 6)
    gripper: np.ndarray     # (H,) in [0, 1]
    k: int

    def __post_init__(self):
        self.twists = np.asarray(self.twists, dtype=float)
        self.gripper = np.asarray(self.gripper, dtype=float)


@dataclass
class GuidanceImage:
    """Current-scene render with the gripper overlaid at a candidate pose."""

    image: np.ndarray       # (H, W, 3)
    mask: np.ndarray        # (H, W) bool, overlay footprint


@dataclass(frozen=True)
class DenoiseSchedule:
    """Cumulative signal coefficients alpha_bar[0..K], decreasing in k."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha_bar", np.asarray(self.alpha_bar, dtype=float).reshape(-1))

    @property
    def steps(self) -> int:
        return len(self.alpha_bar) - 1

    def validate(self) -> None:
        ab = self.alpha_bar
        if len(ab) < 2:
            raise ValueError("schedule needs at least one step")
        if not (np.all(ab > 0.0) and np.all(ab < 1.0)):
            raise ValueError("alpha_bar values must lie in (0, 1)")
        if not np.all(np.diff(ab) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")


ALPHA_BAR_TOP = 1.0 - 1e-6


def cosine_schedule(steps: int, offset: float = 0.008) -> DenoiseSchedule:
    """Squared-cosine alpha_bar ramp over `steps` levels, pinned near 1 at k=0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    k = np.arange(steps + 1, dtype=float)
    f = np.cos((k / steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    ab = np.clip(f / f[0], 1e-6, ALPHA_BAR_TOP)
    ab[0] = ALPHA_BAR_TOP
    # Enforce strict decrease after the clips.
    for i in range(1, len(ab)):
        ab[i] = min(ab[i], ab[i - 1] - 1e-9)
    sched = DenoiseSchedule(ab)
    sched.validate()
    return sched


def strided_schedule(base: DenoiseSchedule, steps: int, depth: float = 1.0) -> DenoiseSchedule:
    """Subset of a schedule with `steps` levels, keeping the k=0 anchor.

    `depth` < 1 restricts the subset to the low-noise front of the base
    schedule, which suits refinement of an already-plausible action.
    """
    if not 0.0 < depth <= 1.0:
        raise ValueError("depth must be in (0, 1]")
    top = max(1, int(round(depth * base.steps)))
    idx = np.unique(np.round(np.linspace(0, top, steps + 1)).astype(int))
    if len(idx) < steps + 1:
        raise ValueError(f"base schedule too coarse for {steps} strided steps")
    sched = DenoiseSchedule(base.alpha_bar[idx])
    sched.validate()
    return sched


def action_to_twists(action: InitAction | ActionSequence) -> np.ndarray:
    return np.stack([se3_log(s) for s in action.steps])


def twists_to_steps(twists: np.ndarray) -> list[Se3]:
    return [se3_exp(row) for row in np.asarray(twists, dtype=float)]


def add_noise(
    clean: ActionSequence, k: int, schedule: DenoiseSchedule, seed: int
) -> NoisyAction:
    """Forward-noise the twist coordinates to level k; gripper stays clean."""
    if not 0 <= k <= schedule.steps:
        raise ValueError(f"noise index {k} outside schedule of {schedule.steps} steps")
    x0 = action_to_twists(clean)
    ab = schedule.alpha_bar[k]
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    xk = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return NoisyAction(twists=xk, gripper=clean.gripper.copy(), k=k)


def predict_clean(x: np.ndarray, eps_hat: np.ndarray, schedule: DenoiseSchedule, k: int) -> np.ndarray:
    """Clean-sample estimate implied by a noise prediction at level k."""
    ab = schedule.alpha_bar[k]
    return (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_step(
    x_k: NoisyAction, eps_hat: np.ndarray, schedule: DenoiseSchedule, k: int
) -> NoisyAction:
    """Deterministic reverse update from level k to k-1."""
    if k < 1:
        raise ValueError("ddim_step needs k >= 1")
    eps_hat = np.asarray(eps_hat, dtype=float)
    if eps_hat.shape != x_k.twists.shape:
        raise ValueError("noise prediction shape mismatch")
    x0_hat = predict_clean(x_k.twists, eps_hat, schedule, k)
    ab_prev = schedule.alpha_bar[k - 1]
    x_prev = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    return NoisyAction(twists=x_prev, gripper=x_k.gripper.copy(), k=k - 1)


class Denoiser(Protocol):
    """Noise predictor: maps a noisy action plus visual guidance at level k
    to a per-dof noise estimate and a gripper open/close belief."""

    def __call__(
        self, action: NoisyAction, guidance: list[GuidanceImage], k: int
    ) -> tuple[np.ndarray, np.ndarray]:
        ...


class OracleDenoiser:
    """Knows the clean action; returns the noise that exactly explains the
    input as a forward-noised version of it. For scheduler tests."""

    def __init__(self, target_twists: np.ndarray, target_gripper: np.ndarray, schedule: DenoiseSchedule):
        self.target_twists = np.asarray(target_twists, dtype=float)
        self.target_gripper = np.asarray(target_gripper, dtype=float)
        self.schedule = schedule

    def __call__(self, action: NoisyAction, guidance: list[GuidanceImage], k: int):
        ab = self.schedule.alpha_bar[k]
        eps = (action.twists - math.sqrt(ab) * self.target_twists) / math.sqrt(1.0 - ab)
        return eps, self.target_gripper.copy()


class IdentityDenoiser:
    """Predicts zero noise and echoes the current gripper channel."""

    def __call__(self, action: NoisyAction, guidance: list[GuidanceImage], k: int):
        return np.zeros_like(action.twists), action.gripper.copy()


def reverse_denoise(
    x: np.ndarray,
    gripper: np.ndarray,
    schedule: DenoiseSchedule,
    denoiser: Denoiser,
    guidance_fn: Callable[[np.ndarray], list[GuidanceImage]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the reverse chain from level K down to the clean estimate.

    Intermediate levels use the deterministic reverse update; the terminal
    step returns the predicted clean sample itself, so an exact noise
    prediction recovers the clean action exactly.
    """
    x = np.asarray(x, dtype=float)
    gripper = np.asarray(gripper, dtype=float)
    for k in range(schedule.steps, 0, -1):
        guidance = guidance_fn(x) if guidance_fn is not None else []
        state = NoisyAction(twists=x, gripper=gripper, k=k)
        eps_hat, g_hat = denoiser(state, guidance, k)
        eps_hat = np.asarray(eps_hat, dtype=float)
        g_hat = np.asarray(g_hat, dtype=float)
        if eps_hat.shape != x.shape or g_hat.shape != gripper.shape:
            raise ValueError("denoiser output shape mismatch")
        if k > 1:
            x = ddim_step(state, eps_hat, schedule, k).twists
        else:
            x = predict_clean(x, eps_hat, schedule, k)
        gripper = np.clip(g_hat, 0.0, 1.0)
    return x, gripper


def render_action_guidance(
    scene: GaussianField,
    gripper_pose: Se3,
    action: Se3,
    cameras: list[Camera],
    primitive: GaussianField,
    render_cfg: RenderConfig | None = None,
) -> list[GuidanceImage]:
    """Overlay the gripper primitive, posed at gripper_pose * action, onto the
    rendered current scene for every camera.

    The primitive is rendered on its own and alpha-composited over the scene
    render; the mask marks pixels where it contributes at all. A primitive
    entirely behind a camera yields an empty mask for that view.
    """
    render_cfg = render_cfg or RenderConfig()
    posed = transformed(primitive, se3_compose(gripper_pose, action))
    overlay_cfg = replace(render_cfg, background=np.zeros(3))
    out = []
    for cam in cameras:
        base = render(scene, cam, render_cfg).image
        overlay = render(posed, cam, overlay_cfg)
        composite = overlay.image + overlay.transmittance[:, :, None] * base
        mask = (1.0 - overlay.transmittance) >= render_cfg.alpha_cutoff
        out.append(GuidanceImage(image=composite, mask=mask))
    return out


def _world_total(twists: np.ndarray) -> Se3:
    total = Se3.identity()
    for row in twists:
        total = se3_compose(se3_exp(row), total)
    return total


def refine_action(
    init: InitAction,
    scene: GaussianField,
    gripper_pose: Se3,
    cameras: list[Camera],
    primitive: GaussianField,
    denoiser: Denoiser,
    schedule: DenoiseSchedule,
    initial_gripper: np.ndarray | None = None,
    render_cfg: RenderConfig | None = None,
) -> ActionSequence:
    """Refine an initial action through the guided reverse-denoising chain.

    Guidance is re-rendered per step at the candidate's terminal pose,
    expressed relative to the gripper frame. Returns the refined steps with
    gripper commands thresholded at 0.5.
    """
    if schedule.steps < 1:
        raise ValueError("schedule needs at least one step")
    x = action_to_twists(init)
    gripper = (
        np.full(init.horizon, 0.5)
        if initial_gripper is None
        else np.asarray(initial_gripper, dtype=float).reshape(init.horizon)
    )
    pose_inv = gripper_pose.inverse()

    def guidance_fn(candidate: np.ndarray) -> list[GuidanceImage]:
        total_world = _world_total(candidate)
        relative = se3_compose(pose_inv, se3_compose(total_world, gripper_pose))
        return render_action_guidance(scene, gripper_pose, relative, cameras, primitive, render_cfg)

    x_final, g_final = reverse_denoise(x, gripper, schedule, denoiser, guidance_fn)
    return ActionSequence(
        steps=twists_to_steps(x_final),
        gripper=(g_final > 0.5).astype(float),
        horizon=init.horizon,
    )


def refine_loss(
    d_pred: np.ndarray,
    d_gt: np.ndarray,
    eps_pred: np.ndarray,
    eps_gt: np.ndarray,
    g_pred: np.ndarray,
    g_gt: np.ndarray,
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Mean-L1 on the denoising direction and the noise, plus binary
    cross-entropy on the gripper channel, with analytic gradients.

    Gripper predictions are clamped to [1e-7, 1 - 1e-7] before the log terms.
    """
    d_pred = np.asarray(d_pred, dtype=float)
    d_gt = np.asarray(d_gt, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    eps_gt = np.asarray(eps_gt, dtype=float)
    g_gt = np.asarray(g_gt, dtype=float)
    if d_pred.shape != d_gt.shape or eps_pred.shape != eps_gt.shape:
        raise ValueError("prediction/target shape mismatch")
    g = np.clip(np.asarray(g_pred, dtype=float), 1e-7, 1.0 - 1e-7)
    if g.shape != g_gt.shape:
        raise ValueError("gripper shape mismatch")

    loss = float(np.mean(np.abs(d_pred - d_gt)))
    loss += float(np.mean(np.abs(eps_pred - eps_gt)))
    loss += float(np.mean(-(g_gt * np.log(g) + (1.0 - g_gt) * np.log(1.0 - g))))

    grad_d = np.sign(d_pred - d_gt) / d_pred.size
    grad_eps = np.sign(eps_pred - eps_gt) / eps_pred.size
    grad_g = (-g_gt / g + (1.0 - g_gt) / (1.0 - g)) / g.size
    return loss, (grad_d, grad_eps, grad_g)


def _block_mean(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Mean-pool an image to (out_h, out_w, C) using near-even block splits."""
    h, w = image.shape[:2]
    rows = np.linspace(0, h, out_h + 1).astype(int)
    cols = np.linspace(0, w, out_w + 1).astype(int)
    pooled = np.empty((out_h, out_w, image.shape[2]))
    for i in range(out_h):
        for j in range(out_w):
            pooled[i, j] = image[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean(axis=(0, 1))
    return pooled


class RidgeDenoiser:
    """Linear noise predictor on pooled guidance pixels and the noisy action.

    Trained by ridge regression on forward-noised rollouts; the same
    featurization runs at training and inference time.
    """

    def __init__(self, weights: np.ndarray, pool: int, schedule_steps: int):
        self.weights = np.asarray(weights, dtype=float)
        self.pool = pool
        self.schedule_steps = schedule_steps

    @staticmethod
    def featurize(
        action: NoisyAction, guidance: list[GuidanceImage], k: int, pool: int, schedule_steps: int
    ) -> np.ndarray:
        parts = [np.ones(1), action.twists.ravel(), action.gripper.ravel(),
                 np.array([k / max(1, schedule_steps)])]
        for view in guidance:
            parts.append(_block_mean(view.image, pool, pool).ravel())
            parts.append(_block_mean(view.mask[:, :, None].astype(float), pool, pool).ravel())
        return np.concatenate(parts)

    def __call__(self, action: NoisyAction, guidance: list[GuidanceImage], k: int):
        phi = self.featurize(action, guidance, k, self.pool, self.schedule_steps)
        if phi.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"feature size {phi.shape[0]} does not match trained size {self.weights.shape[0]}"
            )
        y = phi @ self.weights
        h = action.twists.shape[0]
        eps = y[: 6 * h].reshape(h, 6)
        g = np.clip(y[6 * h: 7 * h], 0.0, 1.0)
        return eps, g

    @classmethod
    def train(
        cls,
        features: np.ndarray,
        targets: np.ndarray,
        pool: int,
        schedule_steps: int,
        ridge_lambda: float = 1e-3,
    ) -> "RidgeDenoiser":
        x = np.asarray(features, dtype=float)
        y = np.asarray(targets, dtype=float)
        gram = x.T @ x + ridge_lambda * np.eye(x.shape[1])
        weights = np.linalg.solve(gram, x.T @ y)
        return cls(weights=weights, pool=pool, schedule_steps=schedule_steps)
