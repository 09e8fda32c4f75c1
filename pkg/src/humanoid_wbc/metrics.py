"""Motion-tracking reward terms and rollout quality/stability metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from ._validation import InputError

TERM_NAMES = (
    "z_lin_vel",
    "xy_ang_vel",
    "joint_torque",
    "joint_acc",
    "action_rate",
    "energy",
    "termination",
    "joint_limit",
    "orientation",
    "feet_slide",
    "hip_deviation",
    "leg_deviation",
    "keypoint_tracking",
    "joint_tracking",
    "single_stance",
)
TRACKING_TERMS = ("keypoint_tracking", "joint_tracking")
BONUS_TERMS = ("single_stance",)

FEET_FORCE_THRESHOLD = 100.0
STANCE_HEIGHT_THRESHOLD = 0.05
STANCE_WINDOW = (0.1, 0.5)


@dataclass
class RobotState:
    """Measured quantities of one control step.

    Vectors over joints have length n; ``keypoints`` is (K, 3) in the body
    frame; ``feet_force`` is (F,) and ``feet_vel_xy`` is (F, 2).
    """

    root_lin_vel: np.ndarray
    root_ang_vel: np.ndarray
    projected_gravity: np.ndarray
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    joint_acc: np.ndarray
    joint_torque: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    keypoints: np.ndarray
    feet_force: np.ndarray
    feet_vel_xy: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InputError(f"RobotState.{f.name} contains non-finite values")
            setattr(self, f.name, arr)
        for name in ("root_lin_vel", "root_ang_vel", "projected_gravity"):
            if getattr(self, name).shape != (3,):
                raise InputError(f"RobotState.{name} must be a 3-vector")
        if abs(np.linalg.norm(self.projected_gravity) - 1.0) > 1e-6:
            raise InputError("projected gravity must be a unit vector")
        n = self.joint_pos.shape
        for name in ("joint_vel", "joint_acc", "joint_torque", "action", "prev_action"):
            if getattr(self, name).shape != n:
                raise InputError(f"RobotState.{name} must match joint_pos shape {n}")
        self.keypoints = self.keypoints.reshape(-1, 3)
        self.feet_vel_xy = self.feet_vel_xy.reshape(-1, 2)
        if self.feet_force.shape != (self.feet_vel_xy.shape[0],):
            raise InputError("feet_force and feet_vel_xy disagree on the number of feet")

    def to_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**{f.name: data[f.name] for f in fields(cls)})
        except KeyError as exc:
            raise InputError(f"RobotState missing field {exc}") from exc


@dataclass
class ReferenceFrame:
    keypoints: np.ndarray
    joint_pos: np.ndarray
    feet_height_diff: float = 0.0
    stance_time: float = 0.0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
        self.joint_pos = np.asarray(self.joint_pos, dtype=float)
        self.feet_height_diff = float(self.feet_height_diff)
        self.stance_time = float(self.stance_time)
        if not (np.all(np.isfinite(self.keypoints)) and np.all(np.isfinite(self.joint_pos))
                and np.isfinite(self.feet_height_diff) and np.isfinite(self.stance_time)):
            raise InputError("ReferenceFrame contains non-finite values")
        if self.stance_time < 0:
            raise InputError("stance_time must be non-negative")

    def to_dict(self):
        return {
            "keypoints": self.keypoints.tolist(),
            "joint_pos": self.joint_pos.tolist(),
            "feet_height_diff": self.feet_height_diff,
            "stance_time": self.stance_time,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data["keypoints"], data["joint_pos"], data.get("feet_height_diff", 0.0),
                       data.get("stance_time", 0.0))
        except KeyError as exc:
            raise InputError(f"ReferenceFrame missing field {exc}") from exc


@dataclass
class MetricWeights:
    z_lin_vel: float = -0.2
    xy_ang_vel: float = -0.05
    joint_torque: float = -2e-6
    joint_acc: float = -1e-7
    action_rate: float = -0.05
    energy: float = -1e-6
    termination: float = -200.0
    joint_limit: float = -1.0
    orientation: float = -10.0
    feet_slide: float = -0.1
    hip_deviation: float = -0.03
    leg_deviation: float = -0.01
    keypoint_tracking: float = 1.0
    joint_tracking: float = 1.0
    single_stance: float = 1.5

    def __post_init__(self):
        for name in TERM_NAMES:
            w = getattr(self, name)
            if name in TRACKING_TERMS:
                if not w > 0:
                    raise InputError(f"tracking weight {name} must be positive")
            elif name in BONUS_TERMS:
                if not w >= 0:
                    raise InputError(f"bonus weight {name} must be non-negative")
            elif not w <= 0:
                raise InputError(f"penalty weight {name} must be non-positive")

    def as_dict(self):
        return {name: getattr(self, name) for name in TERM_NAMES}


@dataclass
class RewardBreakdown:
    terms: dict
    weighted: dict
    total: float


def keypoint_kernel(sq_err):
    return np.exp(-sq_err / 2.0)


def joint_kernel(sq_err):
    return np.exp(-sq_err / 4.0)


def reward_terms(state, ref, weights=None, terminated=False, model=None):
    """Evaluate every reward row for one step.

    ``model`` supplies joint limits, default angles and the ``hip``/``leg`` joint
    groups; without it the limit and deviation rows are zero.
    """
    weights = weights or MetricWeights()
    n = state.joint_pos.shape[0]
    if ref.joint_pos.shape != (n,):
        raise InputError("reference joint vector does not match the state")
    if ref.keypoints.shape != state.keypoints.shape:
        raise InputError("reference keypoints do not match the state")
    if model is not None and model.n_joints != n:
        raise InputError("model joint count does not match the state")

    t = {}
    t["z_lin_vel"] = state.root_lin_vel[2] ** 2
    t["xy_ang_vel"] = state.root_ang_vel[0] ** 2 + state.root_ang_vel[1] ** 2
    t["joint_torque"] = np.sum(state.joint_torque**2)
    t["joint_acc"] = np.sum(state.joint_acc**2)
    t["action_rate"] = np.sum((state.action - state.prev_action) ** 2)
    t["energy"] = np.sum((state.joint_torque * state.joint_vel) ** 2)
    t["termination"] = 1.0 if terminated else 0.0
    if model is not None:
        outside = (state.joint_pos < model.lower) | (state.joint_pos > model.upper)
        t["joint_limit"] = float(np.count_nonzero(outside))
        dev = np.abs(state.joint_pos - model.default_angles)
        t["hip_deviation"] = float(np.sum(dev[list(model.joint_groups.get("hip", ()))]))
        t["leg_deviation"] = float(np.sum(dev[list(model.joint_groups.get("leg", ()))]))
    else:
        t["joint_limit"] = t["hip_deviation"] = t["leg_deviation"] = 0.0
    # tilt components of gravity in the body frame; zero when upright
    t["orientation"] = state.projected_gravity[0] ** 2 + state.projected_gravity[1] ** 2
    loaded = state.feet_force > FEET_FORCE_THRESHOLD
    t["feet_slide"] = np.sum(loaded * np.sum(state.feet_vel_xy**2, axis=1))
    t["keypoint_tracking"] = keypoint_kernel(np.sum((state.keypoints - ref.keypoints) ** 2))
    t["joint_tracking"] = joint_kernel(np.sum((state.joint_pos - ref.joint_pos) ** 2))
    lo, hi = STANCE_WINDOW
    stance = ref.feet_height_diff > STANCE_HEIGHT_THRESHOLD and lo <= ref.stance_time <= hi
    t["single_stance"] = ref.stance_time if stance else 0.0

    terms = {k: float(t[k]) for k in TERM_NAMES}
    w = weights.as_dict()
    weighted = {k: w[k] * terms[k] for k in TERM_NAMES}
    # fixed summation order keeps totals reproducible
    total = 0.0
    for k in TERM_NAMES:
        total += weighted[k]
    return RewardBreakdown(terms, weighted, total)


def motion_quality(rollout, keypoint_weight=0.5, joint_weight=0.5):
    """Mean over frames of the weighted keypoint/joint tracking kernels, in (0, 1].

    ``rollout`` is a sequence of ``(RobotState, ReferenceFrame)`` pairs.
    """
    rollout = list(rollout)
    if not rollout:
        raise InputError("rollout is empty")
    kp_err = np.array([np.sum((s.keypoints - r.keypoints) ** 2) for s, r in rollout])
    jt_err = np.array([np.sum((s.joint_pos - r.joint_pos) ** 2) for s, r in rollout])
    return quality_from_errors(kp_err, jt_err, keypoint_weight, joint_weight)


def quality_from_errors(kp_sq_err, joint_sq_err, keypoint_weight=0.5, joint_weight=0.5):
    """Array form of :func:`motion_quality` from per-frame squared errors."""
    kp_sq_err = np.asarray(kp_sq_err, dtype=float)
    if kp_sq_err.size == 0:
        raise InputError("rollout is empty")
    per_frame = keypoint_weight * keypoint_kernel(kp_sq_err) + joint_weight * joint_kernel(np.asarray(joint_sq_err))
    return float(np.mean(per_frame))


def tilt_angle(projected_gravity):
    """Angle (rad) between projected gravity and the body's down axis."""
    g = np.asarray(projected_gravity, dtype=float)
    g = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return np.arccos(np.clip(-g[..., 2], -1.0, 1.0))


def stability(rollout, horizon, tilt_threshold=0.8):
    """Fraction of ``horizon`` survived before the first fall (tilt above threshold).

    ``rollout`` holds :class:`RobotState` objects or raw projected-gravity vectors.
    """
    if horizon < 1:
        raise InputError("horizon must be at least 1")
    gravity = [s.projected_gravity if isinstance(s, RobotState) else s for s in rollout]
    gravity = np.asarray(gravity, dtype=float).reshape(-1, 3)[:horizon]
    if gravity.shape[0] == 0:
        return 0.0
    fallen = np.nonzero(tilt_angle(gravity) > tilt_threshold)[0]
    survived = fallen[0] if fallen.size else gravity.shape[0]
    return float(survived) / float(horizon)


class Difficulty(str, enum.Enum):
    EASY = "Easy"
    HARD = "Hard"


def peak_keypoint_speed(keypoints, fps, root=None):
    kp = np.asarray(keypoints, dtype=float)
    if kp.ndim == 2:
        kp = kp.reshape(kp.shape[0], -1, 3)
    if kp.ndim != 3 or kp.shape[0] < 2:
        raise InputError("need a (T>=2, K, 3) keypoint trajectory")
    if root is not None:
        kp = kp + np.asarray(root, dtype=float)[:, None, :3]
    speed = np.linalg.norm(np.diff(kp, axis=0), axis=2) * fps
    return float(np.max(speed))


def classify_motion(keypoints, fps, threshold=0.8, root=None):
    """Hard iff peak keypoint speed (optionally with root translation added) exceeds ``threshold`` m/s."""
    return Difficulty.HARD if peak_keypoint_speed(keypoints, fps, root) > threshold else Difficulty.EASY


def random_state_pair(rng, model, n_feet=2):
    """Random (RobotState, ReferenceFrame) with magnitudes that exercise every reward term."""
    n, K = model.n_joints, model.n_keypoints
    g = rng.normal(size=3)
    g /= np.linalg.norm(g)
    state = RobotState(
        rng.normal(size=3), rng.normal(size=3), g, rng.normal(size=n), rng.normal(size=n),
        10 * rng.normal(size=n), 30 * rng.normal(size=n), rng.normal(size=n), rng.normal(size=n),
        rng.normal(size=(K, 3)), rng.uniform(0, 3 * FEET_FORCE_THRESHOLD, n_feet), rng.normal(size=(n_feet, 2)),
    )
    ref = ReferenceFrame(rng.normal(size=(K, 3)), rng.normal(size=n), rng.uniform(0, 2 * STANCE_HEIGHT_THRESHOLD),
                         rng.uniform(0, 0.6))
    return state, ref
