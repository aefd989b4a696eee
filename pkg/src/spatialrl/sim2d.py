"""Planar pushing world: an actuated disk gripper and one free square block.

Dynamics are integrated with semi-implicit Euler over a few substeps per control
step; contact is a penalty spring-damper between the gripper disk and the block
rectangle. Rendering is a top-down orthographic software rasterizer with signed
distance anti-aliasing over a fixed seeded background texture.

World coordinates map linearly onto pixel centres: the workspace corner
``(xmin, ymin)`` is pixel ``(0, 0)`` and ``(xmax, ymax)`` is ``(W-1, H-1)``.
Pixel positions are reported as ``(column, row)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from . import InvalidInputError
from .archive import config_hash, read_json, write_json

Bounds = tuple[float, float, float, float]
DEFAULT_BOUNDS: Bounds = (-0.5, 0.5, -0.5, 0.5)


@dataclass(frozen=True)
class WorldState:
    gripper_pos: np.ndarray
    gripper_vel: np.ndarray
    block_pos: np.ndarray
    block_vel: np.ndarray
    block_angle: float = 0.0
    block_angvel: float = 0.0

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.gripper_pos, self.gripper_vel, self.block_pos,
                               self.block_vel, [self.block_angle, self.block_angvel]]).astype(float)

    @classmethod
    def from_vector(cls, v) -> "WorldState":
        v = np.asarray(v, dtype=float)
        return cls(v[0:2].copy(), v[2:4].copy(), v[4:6].copy(), v[6:8].copy(), float(v[8]), float(v[9]))

    @classmethod
    def at_rest(cls, gripper_pos, block_pos, block_angle: float = 0.0) -> "WorldState":
        return cls(np.asarray(gripper_pos, float), np.zeros(2), np.asarray(block_pos, float),
                   np.zeros(2), float(block_angle), 0.0)

    def robot_state(self) -> np.ndarray:
        """Configuration of the robot alone: gripper position and velocity."""
        return np.concatenate([self.gripper_pos, self.gripper_vel])


@dataclass(frozen=True)
class EpisodeConfig:
    T: int = 100
    dt: float = 0.05
    damping: float = 2.0
    block_damping: float = 10.0
    angular_damping: float = 15.0
    block_mass: float = 0.5
    gripper_mass: float = 1.0
    contact_stiffness: float = 3000.0
    contact_damping: float = 30.0
    gripper_radius: float = 0.05
    block_half_size: float = 0.06
    action_bound: float = 10.0
    substeps: int = 10
    workspace_bounds: Bounds = DEFAULT_BOUNDS

    @property
    def duration(self) -> float:
        return self.T * self.dt


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 64
    workspace_bounds: Bounds = DEFAULT_BOUNDS
    gripper_radius: float = 0.05
    block_half_size: float = 0.06
    gripper_color: tuple[float, float, float] = (0.10, 0.12, 0.55)
    block_color: tuple[float, float, float] = (0.95, 0.85, 0.25)
    background_texture_seed: int = 7
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 4:
            raise InvalidInputError("image_size must be >= 16 and divisible by 4")


# ---------------------------------------------------------------------------
# dynamics


def _check_state(state: WorldState) -> None:
    if not np.all(np.isfinite(state.to_vector())):
        raise InvalidInputError("non-finite world state")


def _contact(g, gv, b, bv, theta, omega, cfg: EpisodeConfig):
    """Penalty contact between gripper disk and block square.

    Returns (force on gripper, torque on block about its centre, penetration).
    The block receives the opposite force.
    """
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    p = R.T @ (g - b)
    h = cfg.block_half_size
    r = cfg.gripper_radius
    if abs(p[0]) < h and abs(p[1]) < h:
        # centre inside the block: exit through the nearest face
        depth = h - np.abs(p)
        ax = int(np.argmin(depth))
        n_local = np.zeros(2)
        n_local[ax] = 1.0 if p[ax] >= 0 else -1.0
        q = p.copy()
        q[ax] = h * n_local[ax]
        pen = r + depth[ax]
    else:
        q = np.clip(p, -h, h)
        diff = p - q
        dist = float(np.hypot(diff[0], diff[1]))
        if dist >= r:
            return np.zeros(2), 0.0, 0.0
        n_local = diff / dist
        pen = r - dist
    n = R @ n_local
    arm = R @ q
    v_contact = bv + omega * np.array([-arm[1], arm[0]])
    vrel = float((gv - v_contact) @ n)
    mag = max(0.0, cfg.contact_stiffness * pen - cfg.contact_damping * vrel)
    f_g = mag * n
    f_b = -f_g
    torque = arm[0] * f_b[1] - arm[1] * f_b[0]
    return f_g, torque, pen


def contact_penetration(state: WorldState, cfg: EpisodeConfig) -> float:
    _, _, pen = _contact(state.gripper_pos, state.gripper_vel, state.block_pos, state.block_vel,
                         state.block_angle, state.block_angvel, cfg)
    return pen


def energy(state: WorldState, cfg: EpisodeConfig) -> float:
    """Kinetic energy plus the elastic energy stored in the contact spring."""
    h = cfg.block_half_size
    inertia = cfg.block_mass * (2 * h) ** 2 / 6.0
    pen = contact_penetration(state, cfg)
    return float(0.5 * cfg.gripper_mass * state.gripper_vel @ state.gripper_vel
                 + 0.5 * cfg.block_mass * state.block_vel @ state.block_vel
                 + 0.5 * inertia * state.block_angvel ** 2
                 + 0.5 * cfg.contact_stiffness * pen ** 2)


def _clamp(pos, vel, bounds):
    lo = np.array([bounds[0], bounds[2]])
    hi = np.array([bounds[1], bounds[3]])
    out = np.clip(pos, lo, hi)
    hit = out != pos
    vel = np.where(hit, 0.0, vel)
    return out, vel


def step(state: WorldState, action, cfg: EpisodeConfig) -> WorldState:
    """Advance the world by one control step of ``cfg.dt`` seconds under a 2D force."""
    action = np.asarray(action, dtype=float)
    if action.shape != (2,) or not np.all(np.isfinite(action)):
        raise InvalidInputError(f"action must be a finite 2-vector, got {action!r}")
    _check_state(state)
    force = np.clip(action, -cfg.action_bound, cfg.action_bound)

    g, gv = state.gripper_pos.astype(float).copy(), state.gripper_vel.astype(float).copy()
    b, bv = state.block_pos.astype(float).copy(), state.block_vel.astype(float).copy()
    th, om = float(state.block_angle), float(state.block_angvel)
    inertia = cfg.block_mass * (2 * cfg.block_half_size) ** 2 / 6.0
    h = cfg.dt / cfg.substeps
    decay_g = np.exp(-cfg.damping * h)
    decay_b = np.exp(-cfg.block_damping * h)
    decay_w = np.exp(-cfg.angular_damping * h)
    for _ in range(cfg.substeps):
        f_g, torque, _ = _contact(g, gv, b, bv, th, om, cfg)
        gv = (gv + h * (force + f_g) / cfg.gripper_mass) * decay_g
        bv = (bv - h * f_g / cfg.block_mass) * decay_b
        om = (om + h * torque / inertia) * decay_w
        g = g + h * gv
        b = b + h * bv
        th = th + h * om
        g, gv = _clamp(g, gv, cfg.workspace_bounds)
        b, bv = _clamp(b, bv, cfg.workspace_bounds)
    th = float((th + np.pi) % (2 * np.pi) - np.pi)
    return WorldState(g, gv, b, bv, th, om)


def rollout(state: WorldState, actions: Sequence, cfg: EpisodeConfig) -> list[WorldState]:
    states = [state]
    for a in actions:
        states.append(step(states[-1], a, cfg))
    return states


# ---------------------------------------------------------------------------
# rendering


def _pixel_grid(cfg: RenderConfig):
    n = cfg.image_size
    xmin, xmax, ymin, ymax = cfg.workspace_bounds
    xs = xmin + (xmax - xmin) * np.arange(n) / (n - 1)
    ys = ymin + (ymax - ymin) * np.arange(n) / (n - 1)
    X, Y = np.meshgrid(xs, ys)  # rows follow y, columns follow x
    px = (xmax - xmin) / (n - 1)
    return X, Y, px


@functools.lru_cache(maxsize=8)
def _background_cached(cfg: RenderConfig) -> np.ndarray:
    n = cfg.image_size
    rng = np.random.default_rng(cfg.background_texture_seed)
    coarse = rng.uniform(size=(9, 9, 3))
    t = np.linspace(0, 8, n)
    i0 = np.clip(np.floor(t).astype(int), 0, 7)
    w = (t - i0)[:, None]
    rows = coarse[i0] * (1 - w[..., None]) + coarse[i0 + 1] * w[..., None]
    smooth = rows[:, i0] * (1 - w.T[..., None]) + rows[:, i0 + 1] * w.T[..., None]
    base = np.array([0.42, 0.47, 0.40])
    img = base * (0.8 + 0.35 * smooth) + 0.02 * rng.standard_normal((n, n, 3))
    # static distractor blobs
    X, Y, px = _pixel_grid(cfg)
    for _ in range(3):
        cx, cy = rng.uniform(-0.45, 0.45, size=2)
        rad = rng.uniform(0.03, 0.06)
        col = rng.uniform(0.2, 0.7, size=3)
        cov = np.clip(0.5 - (np.hypot(X - cx, Y - cy) - rad) / px, 0.0, 1.0)[..., None]
        img = img * (1 - 0.6 * cov) + 0.6 * cov * col
    return np.clip(img, 0.0, 1.0)


def background(cfg: RenderConfig) -> np.ndarray:
    return _background_cached(cfg).copy()


def _box_sdf(X, Y, center, angle, half):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = X - center[0], Y - center[1]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    qx, qy = np.abs(lx) - half, np.abs(ly) - half
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def block_coverage(state: WorldState, cfg: RenderConfig) -> np.ndarray:
    X, Y, px = _pixel_grid(cfg)
    sd = _box_sdf(X, Y, state.block_pos, state.block_angle, cfg.block_half_size)
    return np.clip(0.5 - sd / px, 0.0, 1.0)


def gripper_coverage(state: WorldState, cfg: RenderConfig) -> np.ndarray:
    X, Y, px = _pixel_grid(cfg)
    sd = np.hypot(X - state.gripper_pos[0], Y - state.gripper_pos[1]) - cfg.gripper_radius
    return np.clip(0.5 - sd / px, 0.0, 1.0)


def render(state: WorldState, cfg: RenderConfig) -> np.ndarray:
    """Render an ``H x W x 3`` float image in [0, 1]; deterministic in (state, cfg)."""
    _check_state(state)
    img = _background_cached(cfg)
    cb = block_coverage(state, cfg)[..., None]
    img = img * (1 - cb) + cb * np.asarray(cfg.block_color)
    cg = gripper_coverage(state, cfg)[..., None]
    img = img * (1 - cg) + cg * np.asarray(cfg.gripper_color)
    return np.clip(img, 0.0, 1.0)


def observe(state: WorldState, cfg: RenderConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Camera image: the render plus optional Gaussian pixel noise."""
    img = render(state, cfg)
    if rng is not None and cfg.noise_sigma > 0:
        img = np.clip(img + cfg.noise_sigma * rng.standard_normal(img.shape), 0.0, 1.0)
    return img


def world_to_pixel(pos, cfg: RenderConfig) -> np.ndarray:
    xmin, xmax, ymin, ymax = cfg.workspace_bounds
    n = cfg.image_size - 1
    pos = np.asarray(pos, dtype=float)
    return np.stack([(pos[..., 0] - xmin) / (xmax - xmin) * n,
                     (pos[..., 1] - ymin) / (ymax - ymin) * n], axis=-1)


def true_pixel_position(state: WorldState, cfg: RenderConfig) -> np.ndarray:
    """Exact image position ``(column, row)`` of the block centre."""
    return world_to_pixel(state.block_pos, cfg)


# ---------------------------------------------------------------------------
# recordings


def write_recording(directory: str | Path, frames: Sequence[np.ndarray], states: Sequence[WorldState],
                    actions: Sequence, episode: EpisodeConfig, render_cfg: RenderConfig,
                    extra: dict | None = None) -> None:
    """Write frames as ``frame_%04d.png`` plus a ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        PILImage.fromarray(arr).save(d / f"frame_{i:04d}.png", optimize=False)
    manifest = {
        "n_frames": len(frames),
        "dt": episode.dt,
        "states": [s.to_vector() for s in states],
        "actions": [np.asarray(a, float) for a in actions],
        "episode_config": episode,
        "render_config": render_cfg,
        "config_hash": config_hash({"episode": episode, "render": render_cfg}),
    }
    if extra:
        manifest.update(extra)
    write_json(d / "manifest.json", manifest)


def read_recording(directory: str | Path):
    """Load a recording: returns (frames float array, states, actions, manifest)."""
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    frames = np.stack([np.asarray(PILImage.open(d / f"frame_{i:04d}.png"), dtype=np.float64) / 255.0
                       for i in range(manifest["n_frames"])])
    states = [WorldState.from_vector(v) for v in manifest["states"]]
    actions = np.asarray(manifest["actions"], dtype=float)
    return frames, states, actions, manifest

