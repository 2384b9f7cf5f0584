"""Synthetic dynamic scenes with ground-truth motion and a closed control loop.

Scenes are a small set of rigid bodies made of labeled Gaussians: a toy
kinematic gripper plus blob objects inside a unit-ish box, observed by a
small camera rig. Each body carries a per-interval twist; ground-truth
displacements and the supervision images at both timesteps follow from it.

The control loop is perceive (ground-truth or fitted field) -> register
gripper motion -> refine -> execute, repeated until the goal pose is reached
or the cycle budget runs out. Kinematics are idealized: executing a step
moves the gripper pose directly, optionally with bounded actuation noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np

from .action import compute_init_action
from .field import GaussianField, GRIPPER_LABEL, transformed
from .fitter import FitConfig, SupervisionSet, fit
from .geometry import Camera, Quaternion, Se3, se3_compose, se3_exp, se3_log
from .refine import (
    ActionSequence,
    DenoiseSchedule,
    OracleDenoiser,
    RidgeDenoiser,
    add_noise,
    cosine_schedule,
    render_action_guidance,
    refine_action,
    strided_schedule,
)
from .renderer import RenderConfig, render


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class CameraSpec:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    role: str = "supervision"       # or "eval"

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=float).reshape(3))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=float).reshape(3))
        if self.role not in ("supervision", "eval"):
            raise SceneSpecError(f"unknown camera role {self.role!r}")

    def build(self) -> Camera:
        return Camera.look_at(
            self.position, self.look_at, self.up,
            self.fx, self.fy, self.cx, self.cy, self.width, self.height,
        )


@dataclass(frozen=True)
class ObjectSpec:
    label: int
    count: int
    color: np.ndarray
    center: np.ndarray
    radius: float
    twist: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "twist", np.asarray(self.twist, dtype=float).reshape(6))
        if self.label < 2:
            raise SceneSpecError("object labels start at 2")
        if self.count < 1 or self.radius <= 0:
            raise SceneSpecError("object needs a positive count and radius")


@dataclass(frozen=True)
class GripperSpec:
    count: int
    extent: float
    pose: Se3
    twist: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        object.__setattr__(self, "twist", np.asarray(self.twist, dtype=float).reshape(6))
        if self.count < 6:
            raise SceneSpecError("gripper needs at least 6 points")
        if self.extent <= 0:
            raise SceneSpecError("gripper extent must be positive")


MAX_TWIST_ROTATION = math.pi / 4.0    # per interval


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    bounds: np.ndarray
    gripper: GripperSpec
    objects: tuple[ObjectSpec, ...]
    cameras: tuple[CameraSpec, ...]
    dt: int = 8
    background: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float).reshape(2, 3))
        object.__setattr__(self, "background", np.asarray(self.background, dtype=float).reshape(3))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.dt < 1:
            raise SceneSpecError("dt must be >= 1")
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise SceneSpecError("duplicate object labels")
        for twist in [self.gripper.twist] + [o.twist for o in self.objects]:
            if np.linalg.norm(twist[:3]) >= MAX_TWIST_ROTATION:
                raise SceneSpecError("per-interval rotation must stay below 45 degrees")
        self._check_overlap()

    def _check_overlap(self):
        centers = [self.gripper.pose.translation]
        radii = [self.gripper.extent]
        for obj in self.objects:
            centers.append(obj.center)
            radii.append(obj.radius)
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                if np.linalg.norm(centers[i] - centers[j]) < radii[i] + radii[j]:
                    raise SceneSpecError(f"bodies {i} and {j} overlap at the initial time")

    def supervision_cameras(self) -> list[Camera]:
        return [c.build() for c in self.cameras if c.role == "supervision"]

    def eval_cameras(self) -> list[Camera]:
        return [c.build() for c in self.cameras if c.role == "eval"]

    def render_config(self) -> RenderConfig:
        return RenderConfig(background=self.background)


def _se3_to_json(p: Se3) -> dict:
    return {"q": list(p.rotation.normalized().as_array()), "t": list(p.translation)}


def _se3_from_json(doc: dict) -> Se3:
    return Se3(Quaternion.from_array(np.array(doc["q"])), np.array(doc["t"]))


def scene_spec_to_json(spec: SceneSpec) -> str:
    doc = {
        "seed": spec.seed,
        "bounds": [list(spec.bounds[0]), list(spec.bounds[1])],
        "dt": spec.dt,
        "background": list(spec.background),
        "gripper": {
            "count": spec.gripper.count,
            "extent": spec.gripper.extent,
            "pose": _se3_to_json(spec.gripper.pose),
            "twist": list(spec.gripper.twist),
        },
        "objects": [
            {
                "label": o.label,
                "count": o.count,
                "color": list(o.color),
                "center": list(o.center),
                "radius": o.radius,
                "twist": list(o.twist),
            }
            for o in spec.objects
        ],
        "cameras": [
            {
                "role": c.role,
                "position": list(c.position),
                "look_at": list(c.look_at),
                "up": list(c.up),
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height,
            }
            for c in spec.cameras
        ],
    }
    return json.dumps(doc, indent=2)


def _reject_unknown(doc: dict, known: set[str], where: str) -> None:
    unknown = set(doc) - known
    if unknown:
        raise SceneSpecError(f"unknown {where} keys: {sorted(unknown)}")


def scene_spec_from_json(doc: str | dict) -> SceneSpec:
    data = json.loads(doc) if isinstance(doc, str) else doc
    _reject_unknown(data, {"seed", "bounds", "dt", "background", "gripper", "objects", "cameras"}, "scene")
    grip = data["gripper"]
    _reject_unknown(grip, {"count", "extent", "pose", "twist"}, "gripper")
    objects = []
    for o in data.get("objects", []):
        _reject_unknown(o, {"label", "count", "color", "center", "radius", "twist"}, "object")
        objects.append(
            ObjectSpec(
                label=int(o["label"]), count=int(o["count"]), color=np.array(o["color"]),
                center=np.array(o["center"]), radius=float(o["radius"]),
                twist=np.array(o.get("twist", np.zeros(6))),
            )
        )
    cameras = []
    for c in data["cameras"]:
        _reject_unknown(
            c, {"role", "position", "look_at", "up", "fx", "fy", "cx", "cy", "width", "height"}, "camera"
        )
        cameras.append(
            CameraSpec(
                position=np.array(c["position"]), look_at=np.array(c["look_at"]),
                up=np.array(c["up"]), fx=float(c["fx"]), fy=float(c["fy"]),
                cx=float(c["cx"]), cy=float(c["cy"]),
                width=int(c["width"]), height=int(c["height"]),
                role=c.get("role", "supervision"),
            )
        )
    return SceneSpec(
        seed=int(data["seed"]),
        bounds=np.array(data["bounds"]),
        gripper=GripperSpec(
            count=int(grip["count"]), extent=float(grip["extent"]),
            pose=_se3_from_json(grip["pose"]), twist=np.array(grip.get("twist", np.zeros(6))),
        ),
        objects=tuple(objects),
        cameras=tuple(cameras),
        dt=int(data.get("dt", 8)),
        background=np.array(data.get("background", [0.0, 0.0, 0.0])),
    )


def gripper_primitive(count: int, extent: float, seed) -> GaussianField:
    """U-shaped gripper in its local frame: a crossbar and two fingers
    opening toward +x, all points labeled as gripper."""
    rng = np.random.default_rng(seed)
    h = extent / 2.0
    per = count // 3
    rest = count - 2 * per
    ts = [np.linspace(-h, h, rest), np.linspace(-h, h, per), np.linspace(-h, h, per)]
    bar = np.stack([np.full(rest, -h), ts[0], np.zeros(rest)], axis=1)
    finger_a = np.stack([ts[1], np.full(per, -h), np.zeros(per)], axis=1)
    finger_b = np.stack([ts[2], np.full(per, h), np.zeros(per)], axis=1)
    mu = np.concatenate([bar, finger_a, finger_b])
    mu += rng.normal(0.0, 0.004, mu.shape)
    spacing = 2.0 * h / max(per, 1)
    scale = max(0.012, 0.8 * spacing)
    # Strong per-point color texture keeps every splat visually distinct,
    # which is what pins its position and displacement during fitting.
    color = np.array([0.3, 0.5, 0.85]) + rng.uniform(-0.25, 0.15, (count, 3))
    rotation = np.zeros((count, 4))
    rotation[:, 0] = 1.0
    return GaussianField(
        mu=mu,
        dmu=np.zeros((count, 3)),
        color=np.clip(color, 0.05, 1.0),
        opacity=np.full(count, 1.8),
        rotation=rotation,
        log_scale=np.full((count, 3), np.log(scale)),
        label=np.full(count, GRIPPER_LABEL, dtype=np.uint8),
    )


def object_cloud(obj: ObjectSpec, seed) -> GaussianField:
    """Blob of Gaussians around the local origin, labeled per the spec."""
    rng = np.random.default_rng(seed)
    mu = rng.normal(0.0, obj.radius / 2.2, (obj.count, 3))
    mu = np.clip(mu, -obj.radius, obj.radius)
    scale = max(0.02, 1.4 * obj.radius / max(obj.count, 2) ** (1.0 / 3.0))
    color = obj.color + rng.uniform(-0.08, 0.08, (obj.count, 3))
    rotation = np.zeros((obj.count, 4))
    rotation[:, 0] = 1.0
    return GaussianField(
        mu=mu,
        dmu=np.zeros((obj.count, 3)),
        color=np.clip(color, 0.0, 1.0),
        opacity=np.full(obj.count, 2.0),
        rotation=rotation,
        log_scale=np.full((obj.count, 3), np.log(scale)),
        label=np.full(obj.count, obj.label, dtype=np.uint8),
    )


def _body_seeds(spec: SceneSpec) -> list:
    return np.random.SeedSequence(spec.seed).spawn(1 + len(spec.objects))


def _concat_fields(parts: list[GaussianField], t: int, dt: int) -> GaussianField:
    return GaussianField(
        mu=np.concatenate([p.mu for p in parts]),
        dmu=np.concatenate([p.dmu for p in parts]),
        color=np.concatenate([p.color for p in parts]),
        opacity=np.concatenate([p.opacity for p in parts]),
        rotation=np.concatenate([p.rotation for p in parts]),
        log_scale=np.concatenate([p.log_scale for p in parts]),
        label=np.concatenate([p.label for p in parts]),
        t=t,
        dt=dt,
    )


def _assemble(
    spec: SceneSpec,
    gripper_pose: Se3,
    object_poses: list[Se3],
    gripper_step: Se3 | None,
    move_objects: bool,
    t: int = 0,
) -> GaussianField:
    """Ground-truth field at the given body poses.

    `gripper_step` is the world-frame transform the gripper will undergo over
    the interval; it defines the gripper displacements. Object displacements
    come from their own twists when `move_objects` is set.
    """
    seeds = _body_seeds(spec)
    parts = []
    for obj, pose, seed in zip(spec.objects, object_poses, seeds[1:]):
        body = transformed(object_cloud(obj, seed), pose)
        if move_objects and np.any(obj.twist):
            moved = se3_exp(obj.twist)
            body.dmu = moved.apply(body.mu) - body.mu
        parts.append(body)
    grip = transformed(gripper_primitive(spec.gripper.count, spec.gripper.extent, seeds[0]), gripper_pose)
    if gripper_step is not None:
        grip.dmu = gripper_step.apply(grip.mu) - grip.mu
    parts.append(grip)
    return _concat_fields(parts, t=t, dt=spec.dt)


def initial_object_poses(spec: SceneSpec) -> list[Se3]:
    return [Se3.from_translation(obj.center) for obj in spec.objects]


def render_views(f: GaussianField, cameras: list[Camera], cfg: RenderConfig) -> list:
    return [(cam, render(f, cam, cfg).image) for cam in cameras]


def generate_scene(spec: SceneSpec) -> tuple[GaussianField, SupervisionSet]:
    """Ground-truth field with its per-twist displacements, plus supervision
    renders at both timesteps from the rig's supervision cameras."""
    from .field import advance

    field_gt = _assemble(
        spec,
        gripper_pose=spec.gripper.pose,
        object_poses=initial_object_poses(spec),
        gripper_step=se3_exp(spec.gripper.twist),
        move_objects=True,
    )
    cams = spec.supervision_cameras()
    cfg = spec.render_config()
    supervision = SupervisionSet(
        current=render_views(field_gt, cams, cfg),
        future=render_views(advance(field_gt, 1.0), cams, cfg),
    )
    return field_gt, supervision


def perturb_field(
    f: GaussianField,
    seed: int,
    mu_sigma: float = 0.02,
    color_sigma: float = 0.05,
    opacity_sigma: float = 0.3,
    rotation_sigma: float = 0.05,
    scale_sigma: float = 0.1,
) -> GaussianField:
    """Noisy copy of a field with displacements reset to zero, the standard
    starting point for fitting experiments."""
    rng = np.random.default_rng(seed)
    out = f.copy()
    out.mu = f.mu + rng.normal(0.0, mu_sigma, f.mu.shape)
    out.dmu = np.zeros_like(f.dmu)
    out.color = np.clip(f.color + rng.normal(0.0, color_sigma, f.color.shape), 0.0, 1.0)
    out.opacity = f.opacity + rng.normal(0.0, opacity_sigma, f.opacity.shape)
    out.rotation = f.rotation + rng.normal(0.0, rotation_sigma, f.rotation.shape)
    out.rotation /= np.linalg.norm(out.rotation, axis=1, keepdims=True)
    out.log_scale = f.log_scale + rng.normal(0.0, scale_sigma, f.log_scale.shape)
    return out


def pose_errors(a: Se3, b: Se3) -> tuple[float, float]:
    """Translation distance and rotation angle (degrees) between two poses."""
    trans = float(np.linalg.norm(a.translation - b.translation))
    rel = se3_compose(a, b.inverse())
    return trans, math.degrees(rel.rotation.angle())


@dataclass(frozen=True)
class ControllerConfig:
    goal: Se3
    budget: int = 20
    mode: str = "gt"                  # or "fitted"
    denoiser: str = "oracle"          # or "ridge"
    seed: int = 0
    success_translation: float = 0.02
    success_rotation_deg: float = 2.0
    max_step_translation: float = 0.15
    max_step_rotation: float = 0.3
    actuation_noise: float = 0.0
    refine_steps: int = 3
    refine_depth: float = 0.12
    fit_iterations_first: int = 500
    fit_iterations: int = 160
    grasp_distance: float = 0.04

    def __post_init__(self):
        if self.mode not in ("gt", "fitted"):
            raise ValueError(f"unknown perception mode {self.mode!r}")
        if self.denoiser not in ("oracle", "ridge"):
            raise ValueError(f"unknown denoiser {self.denoiser!r}")


@dataclass
class EpisodeState:
    """World state of one episode; the field is the current ground truth."""

    field: GaussianField
    gripper_pose: Se3
    object_poses: list[Se3]
    goal_pose: Se3
    spec: SceneSpec
    step: int = 0
    success: bool = False
    failed: bool = False


@dataclass
class EpisodeReport:
    steps: int
    final_translation_error: float
    final_rotation_error_deg: float
    success: bool
    per_step: list[dict]


def initial_state(spec: SceneSpec, goal: Se3) -> EpisodeState:
    poses = initial_object_poses(spec)
    f = _assemble(spec, spec.gripper.pose, poses, gripper_step=None, move_objects=False)
    return EpisodeState(
        field=f,
        gripper_pose=spec.gripper.pose,
        object_poses=poses,
        goal_pose=goal,
        spec=spec,
    )


def execute(
    state: EpisodeState,
    step: Se3,
    gripper_cmd: float = 0.0,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> EpisodeState:
    """Apply one world-frame action step to the gripper pose.

    Optional actuation noise perturbs the reached translation, clipped at
    three sigma. A pose leaving the scene bounds marks the episode failed.
    The gripper Gaussians move rigidly with the pose.
    """
    new_pose = se3_compose(step, state.gripper_pose)
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("actuation noise requires a random generator")
        jitter = np.clip(rng.normal(0.0, noise_sigma, 3), -3.0 * noise_sigma, 3.0 * noise_sigma)
        new_pose = Se3(new_pose.rotation, new_pose.translation + jitter)
    lo, hi = state.spec.bounds
    failed = state.failed or bool(
        np.any(new_pose.translation < lo) or np.any(new_pose.translation > hi)
    )
    f = _assemble(state.spec, new_pose, state.object_poses, gripper_step=None, move_objects=False)
    return replace(state, field=f, gripper_pose=new_pose, step=state.step + 1, failed=failed)


def _clamped_goal_twist(state: EpisodeState, ctrl: ControllerConfig) -> np.ndarray:
    """World-frame twist toward the goal, scaled into per-interval limits."""
    rel = se3_compose(state.goal_pose, state.gripper_pose.inverse())
    xi = se3_log(rel)
    scale = 1.0
    rot = float(np.linalg.norm(xi[:3]))
    trans = float(np.linalg.norm(xi[3:]))
    if rot > ctrl.max_step_rotation:
        scale = min(scale, ctrl.max_step_rotation / rot)
    if trans > ctrl.max_step_translation:
        scale = min(scale, ctrl.max_step_translation / trans)
    return scale * xi


def _gripper_targets(state: EpisodeState, steps: list[Se3], ctrl: ControllerConfig) -> np.ndarray:
    """Ground-truth open/close channel: close once the goal is within reach."""
    g = np.zeros(len(steps))
    pose = state.gripper_pose
    for j, step in enumerate(steps):
        pose = se3_compose(step, pose)
        trans, _ = pose_errors(pose, state.goal_pose)
        g[j] = 1.0 if trans < ctrl.grasp_distance else 0.0
    return g


def _warm_started(prev: GaussianField, executed: Se3) -> GaussianField:
    """Carry a fitted field across a cycle: move its gripper points by the
    commanded transform and drop the consumed displacements."""
    out = prev.copy()
    mask = prev.label == GRIPPER_LABEL
    rot = executed.rotation.normalized()
    out.mu[mask] = prev.mu[mask] @ rot.to_matrix().T + executed.translation
    out.dmu = np.zeros_like(prev.dmu)
    w, x, y, z = rot.w, rot.x, rot.y, rot.z
    pw, px, py, pz = (prev.rotation[mask, i] for i in range(4))
    out.rotation[mask] = np.stack(
        [
            w * pw - x * px - y * py - z * pz,
            w * px + x * pw + y * pz - z * py,
            w * py - x * pz + y * pw + z * px,
            w * pz + x * py - y * px + z * pw,
        ],
        axis=1,
    )
    return out


def run_episode(
    spec: SceneSpec,
    ctrl: ControllerConfig,
    ridge: RidgeDenoiser | None = None,
    guidance_hook=None,
) -> EpisodeReport:
    """Closed perceive-act loop toward the configured goal pose.

    Perception is either the ground-truth field or a field fitted to the
    supervision renders; the registered motion is refined by the configured
    denoiser and executed step by step. Terminates on the success thresholds
    or when the cycle budget is exhausted.
    """
    if ctrl.denoiser == "ridge" and ridge is None:
        raise ValueError("ridge denoiser requested but none was provided")
    rng = np.random.default_rng(ctrl.seed)
    state = initial_state(spec, ctrl.goal)
    cams = spec.supervision_cameras()
    render_cfg = spec.render_config()
    base_schedule = cosine_schedule(50)
    schedule = strided_schedule(base_schedule, ctrl.refine_steps, depth=ctrl.refine_depth)
    seeds = _body_seeds(spec)
    primitive = gripper_primitive(spec.gripper.count, spec.gripper.extent, seeds[0])

    per_step: list[dict] = []
    fitted_prev: GaussianField | None = None
    success = False
    cycles = 0
    for cycle in range(ctrl.budget + 1):
        trans_err, rot_err = pose_errors(state.gripper_pose, state.goal_pose)
        per_step.append({"cycle": cycle, "translation_error": trans_err, "rotation_error_deg": rot_err})
        if trans_err < ctrl.success_translation and rot_err < ctrl.success_rotation_deg:
            success = True
            break
        if cycle == ctrl.budget or state.failed:
            break
        cycles = cycle + 1

        xi = _clamped_goal_twist(state, ctrl)
        gripper_step = se3_exp(xi)
        env = _assemble(
            spec, state.gripper_pose, state.object_poses, gripper_step=gripper_step,
            move_objects=True,
        )

        if ctrl.mode == "gt":
            percept = env
        else:
            from .field import advance

            supervision = SupervisionSet(
                current=render_views(env, cams, render_cfg),
                future=render_views(advance(env, 1.0), cams, render_cfg),
            )
            if fitted_prev is None:
                init = perturb_field(env, seed=ctrl.seed + 101)
                iters = ctrl.fit_iterations_first
            else:
                init = fitted_prev
                iters = ctrl.fit_iterations
            fit_cfg = FitConfig(iterations=iters, seed=ctrl.seed)
            percept, _ = fit(init, supervision, fit_cfg, render_cfg)
            fitted_prev = None  # reassigned below once the cycle's command is known

        init_action = compute_init_action(percept, GRIPPER_LABEL, horizon=spec.dt)

        if ctrl.denoiser == "oracle":
            target = np.tile(xi / spec.dt, (spec.dt, 1))
            target_g = _gripper_targets(state, [se3_exp(r) for r in target], ctrl)
            denoiser = OracleDenoiser(target, target_g, schedule)
        else:
            denoiser = ridge

        refined = refine_action(
            init_action,
            percept,
            state.gripper_pose,
            cams,
            primitive,
            denoiser,
            schedule,
            render_cfg=render_cfg,
        )
        if guidance_hook is not None:
            guidance_hook(cycle, refined)

        executed = Se3.identity()
        for step, g_cmd in zip(refined.steps, refined.gripper):
            state = execute(state, step, g_cmd, noise_sigma=ctrl.actuation_noise, rng=rng)
            executed = se3_compose(step, executed)
            if state.failed:
                break
        new_object_poses = []
        for obj, pose in zip(spec.objects, state.object_poses):
            new_object_poses.append(se3_compose(se3_exp(obj.twist), pose) if np.any(obj.twist) else pose)
        state.object_poses = new_object_poses
        if ctrl.mode == "fitted":
            fitted_prev = _warm_started(percept, executed)

    trans_err, rot_err = pose_errors(state.gripper_pose, state.goal_pose)
    return EpisodeReport(
        steps=cycles,
        final_translation_error=trans_err,
        final_rotation_error_deg=rot_err,
        success=success and not state.failed,
        per_step=per_step,
    )


def sweep(
    spec: SceneSpec,
    ctrl: ControllerConfig,
    grid_x: np.ndarray,
    grid_y: np.ndarray,
    goal_z: float,
    ridge: RidgeDenoiser | None = None,
) -> list[dict]:
    """Run one episode per grid cell with the goal translated to the cell.

    The goal keeps the controller's goal rotation; per-cell seeds derive from
    the controller seed and the cell index.
    """
    rows = []
    for i, x in enumerate(np.asarray(grid_x, dtype=float)):
        for j, y in enumerate(np.asarray(grid_y, dtype=float)):
            goal = Se3(ctrl.goal.rotation, np.array([x, y, goal_z]))
            cell_ctrl = replace(ctrl, goal=goal, seed=ctrl.seed + 1000 * i + j)
            report = run_episode(spec, cell_ctrl, ridge=ridge)
            rows.append(
                {
                    "i": i,
                    "j": j,
                    "x": float(x),
                    "y": float(y),
                    "z": float(goal_z),
                    "success": report.success,
                    "steps": report.steps,
                    "translation_error": report.final_translation_error,
                    "rotation_error_deg": report.final_rotation_error_deg,
                }
            )
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("i,j,x,y,z,success,steps,translation_error,rotation_error_deg\n")
        for r in rows:
            fh.write(
                f"{r['i']},{r['j']},{r['x']!r},{r['y']!r},{r['z']!r},"
                f"{int(r['success'])},{r['steps']},{r['translation_error']!r},{r['rotation_error_deg']!r}\n"
            )


def write_episode_csv(report: EpisodeReport, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("cycle,translation_error,rotation_error_deg\n")
        for row in report.per_step:
            fh.write(f"{row['cycle']},{row['translation_error']!r},{row['rotation_error_deg']!r}\n")
        fh.write(
            f"# success={int(report.success)} steps={report.steps} "
            f"final_translation={report.final_translation_error!r} "
            f"final_rotation_deg={report.final_rotation_error_deg!r}\n"
        )


def train_ridge_denoiser(
    spec: SceneSpec,
    schedule: DenoiseSchedule,
    samples: int = 400,
    seed: int = 0,
    pool: int = 8,
    ridge_lambda: float = 3e-2,
) -> RidgeDenoiser:
    """Fit the linear denoiser on forward-noised rollouts of random motions.

    Each sample poses the gripper somewhere reachable, draws a bounded goal
    twist, noises the corresponding per-step action at a random schedule
    level, renders guidance at the candidate's terminal pose and regresses
    the injected noise (plus the open/close channel).
    """
    rng = np.random.default_rng(seed)
    cams = spec.supervision_cameras()
    render_cfg = spec.render_config()
    seeds = _body_seeds(spec)
    primitive = gripper_primitive(spec.gripper.count, spec.gripper.extent, seeds[0])
    object_poses = initial_object_poses(spec)

    features = []
    targets = []
    for s in range(samples):
        offset = rng.uniform(-0.25, 0.25, 3)
        pose = Se3(spec.gripper.pose.rotation, spec.gripper.pose.translation + offset)
        xi = np.concatenate([rng.uniform(-0.06, 0.06, 3), rng.uniform(-0.12, 0.12, 3)])
        x0 = np.tile(xi / spec.dt, (spec.dt, 1))
        near = rng.uniform() < 0.3
        g_gt = np.zeros(spec.dt) if not near else np.concatenate(
            [np.zeros(spec.dt - 2), np.ones(2)]
        )
        scene = _assemble(spec, pose, object_poses, gripper_step=None, move_objects=False)
        clean = ActionSequence(steps=[se3_exp(r) for r in x0], gripper=g_gt, horizon=spec.dt)
        k = int(rng.integers(1, schedule.steps + 1))
        noisy = add_noise(clean, k, schedule, seed=int(rng.integers(0, 2**31)))
        eps = (noisy.twists - math.sqrt(schedule.alpha_bar[k]) * x0) / math.sqrt(
            1.0 - schedule.alpha_bar[k]
        )

        total = Se3.identity()
        for row in noisy.twists:
            total = se3_compose(se3_exp(row), total)
        relative = se3_compose(pose.inverse(), se3_compose(total, pose))
        guidance = render_action_guidance(scene, pose, relative, cams, primitive, render_cfg)

        features.append(RidgeDenoiser.featurize(noisy, guidance, k, pool, schedule.steps))
        targets.append(np.concatenate([eps.ravel(), g_gt]))

    return RidgeDenoiser.train(
        np.stack(features), np.stack(targets), pool=pool, schedule_steps=schedule.steps,
        ridge_lambda=ridge_lambda,
    )


def default_scene_spec(seed: int = 7, image_size: int = 48) -> SceneSpec:
    """Two-body episode scene: gripper plus one object, two supervision
    cameras and one held-out camera."""
    half = image_size / 2.0
    focal = image_size * 1.45
    cam_kwargs = dict(fx=focal, fy=focal, cx=half, cy=half, width=image_size, height=image_size)
    return SceneSpec(
        seed=seed,
        bounds=np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
        gripper=GripperSpec(
            count=60,
            extent=0.5,
            pose=Se3.from_translation([-0.42, 0.0, 0.0]),
            twist=np.array([0.0, 0.0, 0.1, 0.1, 0.04, 0.0]),
        ),
        objects=(
            ObjectSpec(
                label=2,
                count=40,
                color=np.array([0.85, 0.25, 0.2]),
                center=np.array([0.45, 0.05, 0.0]),
                radius=0.16,
            ),
        ),
        cameras=(
            CameraSpec(position=np.array([0.0, -2.1, 0.8]), look_at=np.zeros(3),
                       up=np.array([0.0, 0.0, 1.0]), role="supervision", **cam_kwargs),
            CameraSpec(position=np.array([1.6, 1.4, 1.0]), look_at=np.zeros(3),
                       up=np.array([0.0, 0.0, 1.0]), role="supervision", **cam_kwargs),
            CameraSpec(position=np.array([-1.7, 1.3, 0.9]), look_at=np.zeros(3),
                       up=np.array([0.0, 0.0, 1.0]), role="eval", **cam_kwargs),
        ),
        dt=8,
    )


def reconstruction_scene_spec(seed: int = 11, image_size: int = 64) -> SceneSpec:
    """Denser two-body scene with four supervision views and one held-out
    view, sized for reconstruction-quality experiments."""
    half = image_size / 2.0
    focal = image_size * 1.45
    cam_kwargs = dict(fx=focal, fy=focal, cx=half, cy=half, width=image_size, height=image_size)
    positions = [
        np.array([0.0, -2.1, 0.8]),
        np.array([1.8, -1.0, 1.1]),
        np.array([1.5, 1.6, 0.9]),
        np.array([-1.6, 1.5, 1.0]),
    ]
    cams = [
        CameraSpec(position=p, look_at=np.zeros(3), up=np.array([0.0, 0.0, 1.0]),
                   role="supervision", **cam_kwargs)
        for p in positions
    ]
    cams.append(
        CameraSpec(position=np.array([-1.9, -1.2, 1.2]), look_at=np.zeros(3),
                   up=np.array([0.0, 0.0, 1.0]), role="eval", **cam_kwargs)
    )
    return SceneSpec(
        seed=seed,
        bounds=np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
        gripper=GripperSpec(
            count=90,
            extent=0.5,
            pose=Se3.from_translation([-0.42, 0.0, 0.0]),
            twist=np.array([0.0, 0.0, 0.12, 0.1, 0.05, 0.0]),
        ),
        objects=(
            ObjectSpec(
                label=2,
                count=110,
                color=np.array([0.85, 0.25, 0.2]),
                center=np.array([0.45, 0.05, 0.0]),
                radius=0.18,
            ),
        ),
        cameras=tuple(cams),
        dt=8,
    )
