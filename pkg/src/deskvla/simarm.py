"""Deterministic 5R arm + gripper with two synthetic cameras and a press-the-button task.

The plant is first order: every tick each joint moves toward its command by
at most ``max_velocity * dt``. There is no dynamics and no contact model; a
press is registered when the end-effector enters the button column from
above and travels at least ``press_depth`` below the button surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DEFAULT_LIMITS, JointLimits, NumericError, check_finite

TABLE_RGB = (96, 92, 88)
WRIST_BG_RGB = (72, 70, 66)
BUTTON_RGB = (210, 40, 30)
BUTTON_LIT_RGB = (40, 220, 70)
EE_RGB = (40, 90, 235)

HOME_POSE = (0.0, 0.0, 90.0, 90.0, 0.0, 1.0)


@dataclass(frozen=True)
class CameraFailure:
    view: str  # "top" or "wrist"
    start_tick: int
    end_tick: int  # exclusive


@dataclass(frozen=True)
class SimConfig:
    limits: JointLimits = DEFAULT_LIMITS
    tick_rate: float = 20.0
    link_lengths: tuple[float, ...] = (0.24, 0.24, 0.20, 0.12, 0.08)
    # 0.4 m x 0.4 m button area in front of the base: (x_min, x_max), (y_min, y_max)
    button_bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.10, 0.50), (-0.20, 0.20))
    button_height: float = 0.03
    button_size: float = 0.04
    press_depth: float = 0.005
    success_radius: float = 0.025
    pixel_noise_std: float = 0.0  # 8-bit intensity levels
    joint_noise_std: float = 0.0  # degrees
    camera_failures: tuple[CameraFailure, ...] = ()
    top_shape: tuple[int, int] = (64, 64)
    wrist_shape: tuple[int, int] = (32, 32)
    # top camera footprint on the table, centred on the button area
    top_view_bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.05, 0.55), (-0.25, 0.25))
    wrist_focal_px: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.tick_rate <= 0:
            raise ValueError("tick_rate must be positive")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if len(self.link_lengths) != 5:
            raise ValueError("five link lengths expected")

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_rate

    @property
    def top_pixels_per_meter(self) -> float:
        (x0, x1), _ = self.top_view_bounds
        return self.top_shape[0] / (x1 - x0)


@dataclass(frozen=True)
class SimState:
    joints: np.ndarray
    velocities: np.ndarray
    button: np.ndarray  # x, y, z of the button surface centre
    pressed: bool = False
    armed: bool = False
    tick: int = 0
    ee: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def distance_to_button(self) -> float:
        return float(np.linalg.norm(self.ee - self.button))


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def forward_kinematics(joints, links=SimConfig.link_lengths) -> np.ndarray:
    """End-effector position by composing joint rotations along the chain.

    Pan rotates about the base z axis, lift/elbow/wrist flex pitch about the
    local y axis (positive leans forward), and wrist roll spins the last link
    about its own axis.
    """
    th = np.radians(np.asarray(joints, dtype=np.float64)[:5])
    l1, l2, l3, l4, l5 = links
    R = _rot_z(th[0])
    p = R @ np.array([0.0, 0.0, l1])
    for angle, length in ((th[1], l2), (th[2], l3), (th[3], l4)):
        R = R @ _rot_y(angle)
        p = p + R @ np.array([0.0, 0.0, length])
    R = R @ _rot_z(th[4])
    return p + R @ np.array([0.0, 0.0, l5])


def tool_pitch(r: float) -> float:
    """Tool angle from vertical (degrees) used by the scripted expert at radius r."""
    return float(np.interp(r, [0.1, 0.3, 0.55], [215.0, 180.0, 135.0]))


def inverse_kinematics(target, cfg: SimConfig = SimConfig(), pitch: float | None = None) -> np.ndarray | None:
    """Elbow-up solution for the five arm joints, or None if unreachable/out of limits."""
    x, y, z = (float(v) for v in target)
    l1, l2, l3, l4, l5 = cfg.link_lengths
    lt = l4 + l5
    r = math.hypot(x, y)
    psi = math.radians(tool_pitch(r) if pitch is None else pitch)
    wr = r - lt * math.sin(psi)
    dz = z - lt * math.cos(psi) - l1
    c3 = (wr * wr + dz * dz - l2 * l2 - l3 * l3) / (2 * l2 * l3)
    if abs(c3) > 1:
        return None
    t3 = math.acos(c3)
    t2 = math.atan2(wr, dz) - math.atan2(l3 * math.sin(t3), l2 + l3 * math.cos(t3))
    t4 = psi - t2 - t3
    q = np.degrees([math.atan2(y, x), t2, t3, t4, 0.0])
    lim = cfg.limits
    if np.any(q < lim.lo[:5]) or np.any(q > lim.hi[:5]):
        return None
    return q


# a demonstrated press travels this many press depths below the surface, leaving margin for imitation error
PRESS_OVERTRAVEL = 3.0


def press_target_z(cfg: SimConfig) -> float:
    return cfg.button_height - PRESS_OVERTRAVEL * cfg.press_depth


def reachable(xy, cfg: SimConfig = SimConfig()) -> bool:
    x, y = xy
    for z in (press_target_z(cfg), cfg.button_height + 0.08):
        if inverse_kinematics((x, y, z), cfg) is None:
            return False
    return True


def _state_at(joints, button, cfg: SimConfig, **kw) -> SimState:
    ee = forward_kinematics(joints, cfg.link_lengths)
    return SimState(joints=np.asarray(joints, dtype=np.float64), button=button, ee=ee, **kw)


def reset(cfg: SimConfig = SimConfig(), seed: int | None = None) -> SimState:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    (x0, x1), (y0, y1) = cfg.button_bounds
    button = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), cfg.button_height])
    return _state_at(np.array(HOME_POSE), button, cfg, velocities=np.zeros(6))


def step(state: SimState, command, cfg: SimConfig = SimConfig()) -> SimState:
    cmd = np.asarray(command, dtype=np.float64).reshape(-1)
    check_finite(cmd, "command")
    if cmd.shape != (6,):
        raise ValueError("command must have 6 values")
    lim = cfg.limits
    cmd = np.clip(cmd, lim.lo, lim.hi)
    max_move = lim.vmax * cfg.dt
    delta = np.clip(cmd - state.joints, -max_move, max_move)
    joints = np.clip(state.joints + delta, lim.lo, lim.hi)
    ee = forward_kinematics(joints, cfg.link_lengths)
    top = state.button[2]
    within = math.hypot(ee[0] - state.button[0], ee[1] - state.button[1]) <= cfg.success_radius
    armed = within and (ee[2] >= top or state.armed)
    pressed = state.pressed or (armed and ee[2] <= top - cfg.press_depth)
    return SimState(
        joints=joints,
        velocities=(joints - state.joints) / cfg.dt,
        button=state.button,
        pressed=pressed,
        armed=armed,
        tick=state.tick + 1,
        ee=ee,
    )


def check_success(state: SimState) -> bool:
    return bool(state.pressed)


# -- rendering -------------------------------------------------------------


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel interval [i, i+1) covered by [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _paint_square(img: np.ndarray, rc: tuple[float, float], half: float, rgb) -> None:
    """Anti-aliased axis-aligned square centred at fractional pixel (row, col)."""
    h, w, _ = img.shape
    cov = np.outer(_coverage_1d(rc[0] - half, rc[0] + half, h), _coverage_1d(rc[1] - half, rc[1] + half, w))
    if not cov.any():
        return
    img[:] = img * (1 - cov[..., None]) + cov[..., None] * np.asarray(rgb, dtype=np.float64)


def top_pixel(xy, cfg: SimConfig) -> tuple[float, float]:
    """Fractional (row, col) of a table point; rows follow +x, columns follow +y."""
    (x0, _), (y0, _) = cfg.top_view_bounds
    ppm = cfg.top_pixels_per_meter
    return (xy[0] - x0) * ppm, (xy[1] - y0) * ppm


def _camera_failed(view: str, tick: int, cfg: SimConfig) -> bool:
    return any(f.view == view and f.start_tick <= tick < f.end_tick for f in cfg.camera_failures)


def _finish(img: np.ndarray, cfg: SimConfig, rng) -> np.ndarray:
    if cfg.pixel_noise_std > 0 and rng is not None:
        img = img + rng.normal(0.0, cfg.pixel_noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_top(state: SimState, cfg: SimConfig, rng=None) -> np.ndarray:
    h, w = cfg.top_shape
    img = np.empty((h, w, 3))
    img[:] = TABLE_RGB
    ppm = cfg.top_pixels_per_meter
    colour = BUTTON_LIT_RGB if state.pressed else BUTTON_RGB
    _paint_square(img, top_pixel(state.button[:2], cfg), 0.5 * cfg.button_size * ppm, colour)
    _paint_square(img, top_pixel(state.ee[:2], cfg), 1.5, EE_RGB)
    return _finish(img, cfg, rng)


def render_wrist(state: SimState, cfg: SimConfig, rng=None) -> np.ndarray:
    """Downward-looking camera at the end-effector, image axes aligned with the table."""
    h, w = cfg.wrist_shape
    img = np.empty((h, w, 3))
    img[:] = WRIST_BG_RGB
    height = max(state.ee[2] - state.button[2], 0.01)
    off = state.button[:2] - state.ee[:2]
    dist = math.sqrt(height**2 + float(off @ off))
    f = cfg.wrist_focal_px
    centre = (0.5 * h + f * off[0] / height, 0.5 * w + f * off[1] / height)
    half = 0.5 * f * cfg.button_size / dist
    colour = BUTTON_LIT_RGB if state.pressed else BUTTON_RGB
    if abs(centre[0] - 0.5 * h) < 4 * h and abs(centre[1] - 0.5 * w) < 4 * w:
        _paint_square(img, centre, half, colour)
    return _finish(img, cfg, rng)


def render_views(state: SimState, cfg: SimConfig = SimConfig(), rng=None) -> tuple[np.ndarray, np.ndarray]:
    top = render_top(state, cfg, rng)
    wrist = render_wrist(state, cfg, rng)
    if _camera_failed("top", state.tick, cfg):
        top = np.zeros_like(top)
    if _camera_failed("wrist", state.tick, cfg):
        wrist = np.zeros_like(wrist)
    return top, wrist


def sense_joints(state: SimState, cfg: SimConfig = SimConfig(), rng=None) -> np.ndarray:
    q = state.joints.copy()
    if cfg.joint_noise_std > 0 and rng is not None:
        q[:5] = q[:5] + rng.normal(0.0, cfg.joint_noise_std, size=5)
        q = np.clip(q, cfg.limits.lo, cfg.limits.hi)
    return q


def with_button(state: SimState, xy) -> SimState:
    return replace(state, button=np.array([xy[0], xy[1], state.button[2]]))
