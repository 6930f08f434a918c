"""Robot model shared by every other module: joint limits, normalization, clamping.

Physical joint values are degrees; the gripper is dimensionless in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = ("shoulder_pan", "shoulder_lift", "elbow_flex", "wrist_flex", "wrist_roll", "gripper")
N_JOINTS = 6


class RangeError(ValueError):
    """A value lies outside its permitted range."""


class NumericError(ValueError):
    """A value is NaN or infinite."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


@dataclass(frozen=True)
class JointLimits:
    lower: tuple[float, ...] = (-180.0, -90.0, -135.0, -90.0, -180.0, 0.0)
    upper: tuple[float, ...] = (180.0, 90.0, 135.0, 90.0, 180.0, 1.0)
    # deg/s for the five arm joints, units/s for the gripper
    max_velocity: tuple[float, ...] = (90.0, 90.0, 90.0, 90.0, 90.0, 2.0)

    def __post_init__(self):
        for name in ("lower", "upper", "max_velocity"):
            if len(getattr(self, name)) != N_JOINTS:
                raise ShapeError(f"{name} needs {N_JOINTS} entries")
        for j in range(N_JOINTS):
            if not self.lower[j] < self.upper[j]:
                raise RangeError(f"{JOINT_NAMES[j]}: min {self.lower[j]} !< max {self.upper[j]}")
            if not self.max_velocity[j] > 0:
                raise RangeError(f"{JOINT_NAMES[j]}: velocity limit must be positive")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=np.float64)

    @property
    def vmax(self) -> np.ndarray:
        return np.asarray(self.max_velocity, dtype=np.float64)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)


DEFAULT_LIMITS = JointLimits()

# normalized action space: five joints in [-1, 1], gripper in [0, 1]
ACTION_LOW = np.array([-1.0, -1.0, -1.0, -1.0, -1.0, 0.0])
ACTION_HIGH = np.ones(N_JOINTS)


@dataclass
class JointVector:
    """Six values: five joint angles in degrees plus the gripper opening."""

    values: np.ndarray
    validated: bool = field(default=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape != (N_JOINTS,):
            raise ShapeError(f"expected {N_JOINTS} joint values, got {self.values.shape}")

    def validate(self, lim: JointLimits = DEFAULT_LIMITS) -> "JointVector":
        check_within_limits(self.values, lim)
        return JointVector(self.values.copy(), validated=True)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (N_JOINTS,):
        raise ShapeError(f"expected {N_JOINTS} values, got shape {v.shape}")
    return v


def check_finite(x, what: str = "value") -> None:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
        raise NumericError(f"non-finite {what} at index {bad[0]}")


def check_within_limits(j, lim: JointLimits = DEFAULT_LIMITS) -> None:
    v = _as_vec(j)
    check_finite(v, "joint value")
    for i in range(N_JOINTS):
        if v[i] < lim.lower[i] or v[i] > lim.upper[i]:
            raise RangeError(
                f"{JOINT_NAMES[i]}={v[i]:.6g} outside [{lim.lower[i]}, {lim.upper[i]}]"
            )


def check_action(a) -> None:
    v = _as_vec(a)
    if np.any(np.isnan(v)):
        raise NumericError("NaN in normalized action")
    for i in range(N_JOINTS):
        if v[i] < ACTION_LOW[i] or v[i] > ACTION_HIGH[i]:
            raise RangeError(
                f"normalized {JOINT_NAMES[i]}={v[i]:.6g} outside [{ACTION_LOW[i]}, {ACTION_HIGH[i]}]"
            )


def normalize_action(j, lim: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    """Map physical joints affinely so that each joint min -> -1 and max -> +1.

    The gripper already lives in [0, 1] and passes through unchanged.
    """
    v = _as_vec(j)
    check_within_limits(v, lim)
    out = (v - lim.midpoint) / lim.half_range
    out[5] = v[5]
    return out


def denormalize_action(a, lim: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    v = _as_vec(a)
    check_action(v)
    out = lim.midpoint + v * lim.half_range
    out[5] = v[5]
    # affine round-off can leave endpoints an ulp outside the limits
    return np.clip(out, lim.lo, lim.hi)


def normalize_batch(j: np.ndarray, lim: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    """Vectorized normalize over a trailing joint axis, without range checks."""
    j = np.asarray(j, dtype=np.float64)
    out = (j - lim.midpoint) / lim.half_range
    out[..., 5] = j[..., 5]
    return out


def denormalize_batch(a: np.ndarray, lim: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = lim.midpoint + a * lim.half_range
    out[..., 5] = a[..., 5]
    return out


def clamp_joints(j, lim: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    v = _as_vec(j)
    check_finite(v, "joint value")
    return np.clip(v, lim.lo, lim.hi)
