"""Analysis-by-synthesis optimization of a Gaussian field.

Fits positions, displacements and appearance against multi-view images at the
current and future timesteps with a per-parameter-group Adam loop. Future
views are rendered from the displaced field, which is the only path through
which displacement gradients arise.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .field import FieldDelta, GaussianField, advance
from .geometry import Camera, SCALE_FLOOR
from .metrics import ssim_with_gradient
from .renderer import RenderConfig, render, render_backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Opacity logits are kept in a finite band; sigmoid(20) is within 1e-8 of 1.
OPACITY_LOGIT_LIMIT = 20.0

DIVERGENCE_LOSS = 1e6

_PARAM_GROUPS = ("mu", "dmu", "color", "opacity", "rotation", "log_scale")


class NonFiniteGradientError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Optimization blew up; carries the loss history collected so far."""

    def __init__(self, message: str, history: list[tuple[float, float, float]]):
        super().__init__(message)
        self.history = history


@dataclass
class SupervisionSet:
    """Posed target images at the current and future timesteps."""

    current: list[tuple[Camera, np.ndarray]]
    future: list[tuple[Camera, np.ndarray]]


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    lr_mu: float = 1.6e-3
    lr_dmu: float = 1.6e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    ssim_weight: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lr_mu", "lr_dmu", "lr_color", "lr_opacity", "lr_rotation", "lr_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must be in [0, 1]")

    def group_rates(self) -> dict[str, float]:
        return {
            "mu": self.lr_mu,
            "dmu": self.lr_dmu,
            "color": self.lr_color,
            "opacity": self.lr_opacity,
            "rotation": self.lr_rotation,
            "log_scale": self.lr_scale,
        }


_RATE_KEYS = {"mu": "lr_mu", "dmu": "lr_dmu", "color": "lr_color",
              "opacity": "lr_opacity", "rotation": "lr_rotation", "scale": "lr_scale"}


def fit_config_from_json(doc: str | dict) -> FitConfig:
    """Parse a FitConfig document, rejecting unknown keys."""
    data = json.loads(doc) if isinstance(doc, str) else dict(doc)
    known = {"iterations", "learning_rates", "ssim_weight", "seed"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
    kwargs = {}
    if "iterations" in data:
        kwargs["iterations"] = int(data["iterations"])
    if "ssim_weight" in data:
        kwargs["ssim_weight"] = float(data["ssim_weight"])
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    rates = data.get("learning_rates", {})
    unknown = set(rates) - set(_RATE_KEYS)
    if unknown:
        raise ValueError(f"unknown learning rate keys: {sorted(unknown)}")
    for key, attr in _RATE_KEYS.items():
        if key in rates:
            kwargs[attr] = float(rates[key])
    return FitConfig(**kwargs)


@dataclass
class AdamState:
    m: FieldDelta
    v: FieldDelta
    step: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=FieldDelta.zeros(n), v=FieldDelta.zeros(n), step=0)


def photometric_loss(
    rendered: np.ndarray, target: np.ndarray, ssim_weight: float
) -> tuple[float, np.ndarray]:
    """(1 - w) * MSE + w * (1 - SSIM) with its analytic image-space gradient."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    mse = float(np.mean(diff * diff))
    grad = (1.0 - ssim_weight) * 2.0 * diff / diff.size
    loss = (1.0 - ssim_weight) * mse
    if ssim_weight > 0.0:
        ssim, ssim_grad = ssim_with_gradient(rendered, target)
        loss += ssim_weight * (1.0 - ssim)
        grad -= ssim_weight * ssim_grad
    return loss, grad


def _view_term(
    f: GaussianField, cam: Camera, target: np.ndarray, ssim_weight: float, render_cfg: RenderConfig
) -> tuple[float, FieldDelta]:
    out = render(f, cam, render_cfg)
    loss, grad = photometric_loss(out.image, target, ssim_weight)
    return loss, render_backward(f, cam, render_cfg, grad)


def total_loss(
    f: GaussianField,
    supervision: SupervisionSet,
    cfg: FitConfig,
    render_cfg: RenderConfig | None = None,
    threads: int = 1,
) -> tuple[float, FieldDelta, tuple[float, float]]:
    """Photometric loss summed over all views and both timesteps.

    Current views are rendered from the field itself, future views from the
    fully advanced field; position gradients of the latter fall on both the
    positions and the displacements. The (current, future) term split is
    returned for loss-history reporting. Per-view work may run on a thread
    pool; the reduction order is fixed by view index either way.
    """
    render_cfg = render_cfg or RenderConfig()
    future_field = advance(f, 1.0) if supervision.future else None
    jobs = [(f, cam, img) for cam, img in supervision.current]
    jobs += [(future_field, cam, img) for cam, img in supervision.future]

    def run(job):
        fld, cam, img = job
        return _view_term(fld, cam, img, cfg.ssim_weight, render_cfg)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    delta = FieldDelta.zeros(len(f))
    n_current = len(supervision.current)
    current_term = future_term = 0.0
    for k, (loss_k, delta_k) in enumerate(results):
        if k < n_current:
            current_term += loss_k
            delta.add(delta_k)
        else:
            future_term += loss_k
            # The advanced field renders at mu + dmu, so its position
            # gradient belongs to both parameters of the source field.
            delta_k.dmu = delta_k.mu
            delta.add(delta_k)
    return current_term + future_term, delta, (current_term, future_term)


def adam_step(
    f: GaussianField, delta: FieldDelta, state: AdamState, cfg: FitConfig
) -> tuple[GaussianField, AdamState]:
    """One bias-corrected Adam update, returning new field and state.

    After the update, quaternions are renormalized and scales, opacity logits
    and colors are clamped in parameter space.
    """
    if not delta.all_finite():
        raise NonFiniteGradientError("gradient contains non-finite entries")
    out = f.copy()
    step = state.step + 1
    new_state = AdamState(m=FieldDelta.zeros(len(f)), v=FieldDelta.zeros(len(f)), step=step)
    bias1 = 1.0 - ADAM_BETA1 ** step
    bias2 = 1.0 - ADAM_BETA2 ** step
    rates = cfg.group_rates()
    for name in _PARAM_GROUPS:
        g = getattr(delta, name)
        m = ADAM_BETA1 * getattr(state.m, name) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * getattr(state.v, name) + (1.0 - ADAM_BETA2) * (g * g)
        setattr(new_state.m, name, m)
        setattr(new_state.v, name, v)
        update = rates[name] * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        setattr(out, name, getattr(f, name) - update)
    out.rotation = out.rotation / np.linalg.norm(out.rotation, axis=1, keepdims=True)
    out.log_scale = np.maximum(out.log_scale, np.log(SCALE_FLOOR))
    out.opacity = np.clip(out.opacity, -OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT)
    out.color = np.clip(out.color, 0.0, 1.0)
    return out, new_state


def fit(
    f: GaussianField,
    supervision: SupervisionSet,
    cfg: FitConfig,
    render_cfg: RenderConfig | None = None,
    threads: int = 1,
) -> tuple[GaussianField, list[tuple[float, float, float]]]:
    """Run the optimization loop; returns the final field and loss history.

    History rows are (total, current term, future term) evaluated before each
    update. Raises DivergenceError, carrying the partial history, when the
    loss exceeds DIVERGENCE_LOSS or stops being finite.
    """
    render_cfg = render_cfg or RenderConfig()
    state = AdamState.zeros(len(f))
    history: list[tuple[float, float, float]] = []
    current = f
    for _ in range(cfg.iterations):
        loss, delta, terms = total_loss(current, supervision, cfg, render_cfg, threads)
        history.append((loss, terms[0], terms[1]))
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss diverged at {loss}", history)
        current, state = adam_step(current, delta, state, cfg)
    return current, history


def write_loss_history(history: list[tuple[float, float, float]], path) -> None:
    """Loss history CSV: iteration, total, current-term, future-term."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iteration,total,current,future\n")
        for i, (total, cur, fut) in enumerate(history):
            fh.write(f"{i},{total!r},{cur!r},{fut!r}\n")


def initialize_field(
    bounds: np.ndarray, count: int, seed: int, t: int = 0, dt: int = 8
) -> GaussianField:
    """Generic initialization: uniform centers in the bounding box, zero
    displacement, gray color, opacity logit 0, isotropic scale set to twice
    the mean nearest-neighbor distance."""
    bounds = np.asarray(bounds, dtype=float).reshape(2, 3)
    rng = np.random.default_rng(seed)
    mu = rng.uniform(bounds[0], bounds[1], size=(count, 3))
    if count > 1:
        dist, _ = cKDTree(mu).query(mu, k=2)
        scale = 2.0 * float(np.mean(dist[:, 1]))
    else:
        scale = 0.1 * float(np.max(bounds[1] - bounds[0]))
    scale = max(scale, SCALE_FLOOR)
    rotation = np.zeros((count, 4))
    rotation[:, 0] = 1.0
    return GaussianField(
        mu=mu,
        dmu=np.zeros((count, 3)),
        color=np.full((count, 3), 0.5),
        opacity=np.zeros(count),
        rotation=rotation,
        log_scale=np.full((count, 3), np.log(scale)),
        label=np.zeros(count, dtype=np.uint8),
        t=t,
        dt=dt,
    )
