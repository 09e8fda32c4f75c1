"""Kinematic tree description, forward kinematics, Jacobians, and SO(3) helpers.

Joints are 1-DoF revolute joints listed in topological order. Each joint frame
sits at ``offset`` (expressed in the parent joint frame) and rotates about its
local ``axis`` by ``q``. Keypoints are rigidly attached to a joint frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._validation import InputError, check_rotation

_RENORMALIZE_EVERY = 100


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: tuple
    axis: tuple
    limits: tuple
    default: float = 0.0


@dataclass(frozen=True)
class Keypoint:
    name: str
    joint: int
    offset: tuple


@dataclass(frozen=True)
class MirrorPair:
    a: int
    b: int
    sign: float = 1.0


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True, eq=False)
class RobotModel:
    """A tree of revolute joints with keypoints and a left/right mirror map.

    ``joint_groups`` maps group names (``"hip"``, ``"leg"``) to joint indices and
    ``keypoint_mirror`` lists keypoint index pairs swapped under reflection; both
    are optional and only used by the metric and symmetry code.
    """

    joints: tuple
    keypoints: tuple
    end_effectors: tuple = ()
    mirror_map: tuple = ()
    keypoint_mirror: tuple = ()
    joint_groups: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.joints)
        if n == 0:
            raise InputError("model needs at least one joint")
        for i, j in enumerate(self.joints):
            if not (-1 <= j.parent < i):
                raise InputError(f"joint {j.name!r}: parent {j.parent} breaks topological order")
            axis = np.asarray(j.axis, dtype=float)
            if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise InputError(f"joint {j.name!r}: axis must be a unit 3-vector")
            if len(j.offset) != 3:
                raise InputError(f"joint {j.name!r}: offset must be a 3-vector")
            lo, hi = j.limits
            if not lo <= hi:
                raise InputError(f"joint {j.name!r}: limits must satisfy lo <= hi")
        for k in self.keypoints:
            if not 0 <= k.joint < n:
                raise InputError(f"keypoint {k.name!r}: joint index {k.joint} out of range")
        names = [k.name for k in self.keypoints]
        for e in self.end_effectors:
            if e not in names:
                raise InputError(f"end effector {e!r} is not a keypoint")
        perm, sign = _pairs_to_perm(self.mirror_map, n)
        if not np.array_equal(perm[perm], np.arange(n)):
            raise InputError("mirror_map is not an involution")
        kperm, _ = _pairs_to_perm(self.keypoint_mirror, len(self.keypoints))
        if not np.array_equal(kperm[kperm], np.arange(len(self.keypoints))):
            raise InputError("keypoint_mirror is not an involution")
        for group, idx in self.joint_groups.items():
            if any(not 0 <= i < n for i in idx):
                raise InputError(f"joint group {group!r} has out-of-range indices")

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_keypoints(self):
        return len(self.keypoints)

    @cached_property
    def lower(self):
        return np.array([j.limits[0] for j in self.joints], dtype=float)

    @cached_property
    def upper(self):
        return np.array([j.limits[1] for j in self.joints], dtype=float)

    @cached_property
    def default_angles(self):
        return np.array([j.default for j in self.joints], dtype=float)

    @cached_property
    def mid_range(self):
        return 0.5 * (self.lower + self.upper)

    @cached_property
    def ancestors(self):
        """Boolean (K, n) mask: joint j moves keypoint k."""
        mask = np.zeros((self.n_keypoints, self.n_joints), dtype=bool)
        for k, kp in enumerate(self.keypoints):
            j = kp.joint
            while j >= 0:
                mask[k, j] = True
                j = self.joints[j].parent
        return mask

    @cached_property
    def joint_mirror(self):
        """(permutation, sign) arrays with ``mirrored[i] = sign[i] * q[perm[i]]``."""
        return _pairs_to_perm(self.mirror_map, self.n_joints)

    @cached_property
    def keypoint_perm(self):
        return _pairs_to_perm(self.keypoint_mirror, self.n_keypoints)[0]

    @cached_property
    def end_effector_indices(self):
        names = [k.name for k in self.keypoints]
        return [names.index(e) for e in self.end_effectors]

    def keypoint_index(self, name):
        for i, k in enumerate(self.keypoints):
            if k.name == name:
                return i
        raise InputError(f"unknown keypoint {name!r}")

    def to_dict(self):
        jn = [j.name for j in self.joints]
        kn = [k.name for k in self.keypoints]
        out = {
            "joints": [
                {
                    "name": j.name,
                    "parent": None if j.parent < 0 else jn[j.parent],
                    "offset": list(map(float, j.offset)),
                    "axis": list(map(float, j.axis)),
                    "limits": [float(j.limits[0]), float(j.limits[1])],
                    "default": float(j.default),
                }
                for j in self.joints
            ],
            "keypoints": [
                {"name": k.name, "joint": jn[k.joint], "offset": list(map(float, k.offset))}
                for k in self.keypoints
            ],
            "end_effectors": list(self.end_effectors),
            "mirror_map": [{"a": jn[p.a], "b": jn[p.b], "sign": float(p.sign)} for p in self.mirror_map],
        }
        if self.keypoint_mirror:
            out["keypoint_mirror"] = [{"a": kn[p.a], "b": kn[p.b]} for p in self.keypoint_mirror]
        if self.joint_groups:
            out["joint_groups"] = {g: [jn[i] for i in idx] for g, idx in self.joint_groups.items()}
        return out

    @classmethod
    def from_dict(cls, data):
        try:
            raw_joints = data["joints"]
            names = [j["name"] for j in raw_joints]

            def joint_ref(ref):
                if ref is None:
                    return -1
                if isinstance(ref, int):
                    return ref
                if ref not in names:
                    raise InputError(f"unknown joint {ref!r}")
                return names.index(ref)

            joints = tuple(
                Joint(
                    name=j["name"],
                    parent=joint_ref(j.get("parent")),
                    offset=tuple(float(v) for v in j["offset"]),
                    axis=tuple(float(v) for v in j["axis"]),
                    limits=(float(j["limits"][0]), float(j["limits"][1])),
                    default=float(j.get("default", 0.0)),
                )
                for j in raw_joints
            )
            keypoints = tuple(
                Keypoint(k["name"], joint_ref(k["joint"]), tuple(float(v) for v in k["offset"]))
                for k in data["keypoints"]
            )
            knames = [k.name for k in keypoints]
            mirror = tuple(
                MirrorPair(joint_ref(m["a"]), joint_ref(m["b"]), float(m.get("sign", 1.0)))
                for m in data.get("mirror_map", [])
            )
            kmirror = tuple(
                MirrorPair(knames.index(m["a"]), knames.index(m["b"]))
                for m in data.get("keypoint_mirror", [])
            )
            groups = {g: tuple(joint_ref(r) for r in refs) for g, refs in data.get("joint_groups", {}).items()}
        except (KeyError, TypeError, IndexError) as exc:
            raise InputError(f"malformed robot model: {exc}") from exc
        return cls(
            joints=joints,
            keypoints=keypoints,
            end_effectors=tuple(data.get("end_effectors", [])),
            mirror_map=mirror,
            keypoint_mirror=kmirror,
            joint_groups=groups,
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _pairs_to_perm(pairs, n):
    perm = np.arange(n)
    sign = np.ones(n)
    for p in pairs:
        a, b, s = int(p.a), int(p.b), float(p.sign)
        if not (0 <= a < n and 0 <= b < n):
            raise InputError(f"mirror pair ({a}, {b}) out of range")
        if s not in (1.0, -1.0):
            raise InputError("mirror sign must be +1 or -1")
        perm[a], perm[b] = b, a
        sign[a] = sign[b] = s
    return perm, sign


# -- SO(3) ------------------------------------------------------------------

def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_exp(rotvec):
    """Rodrigues' formula."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec)
    K = skew(rotvec)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1 - np.cos(theta)) / theta**2) * K @ K


def axis_rotation(axis, angle):
    return rotation_exp(np.asarray(axis, dtype=float) * angle)


def rotation_log(R):
    """Rotation vector of ``R``; uses the symmetric part for the axis near pi."""
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(vee)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < 1e-6:
        return 0.5 * vee * (1.0 + theta**2 / 6.0)
    if theta < 2.5:
        return theta / (2.0 * np.sin(theta)) * vee
    # aa^T = (sym(R) - cos I) / (1 - cos)
    B = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ vee < 0:
        axis = -axis
    return theta * axis


def right_jacobian_inverse(phi):
    """Inverse right Jacobian of SO(3): d log(R exp(d)) / d d at d = 0."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        coef = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def orientation_error(actual, target):
    """Rotation vector ``log(target^T actual)``; zero iff the rotations coincide."""
    actual = check_rotation(actual, "actual")
    target = check_rotation(target, "target")
    return rotation_log(target.T @ actual)


def geodesic_angle(R1, R2):
    R = R1.T @ R2
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(vee), 0.5 * (np.trace(R) - 1.0)))


def _orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    return u @ vt


# -- kinematics -------------------------------------------------------------

def _check_q(model, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_joints,):
        raise InputError(f"q must have length {model.n_joints}, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InputError("q contains non-finite values")
    return q


def joint_frames(model, q):
    """World rotations (n,3,3), origins (n,3), and world axes (n,3) of every joint."""
    q = _check_q(model, q)
    n = model.n_joints
    rot = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    axes = np.empty((n, 3))
    depth = np.zeros(n, dtype=int)
    for i, j in enumerate(model.joints):
        if j.parent < 0:
            Rp, pp = np.eye(3), np.zeros(3)
        else:
            Rp, pp = rot[j.parent], pos[j.parent]
            depth[i] = depth[j.parent] + 1
        pos[i] = pp + Rp @ np.asarray(j.offset)
        axes[i] = Rp @ np.asarray(j.axis)
        R = Rp @ axis_rotation(j.axis, q[i])
        if depth[i] and depth[i] % _RENORMALIZE_EVERY == 0:
            R = _orthonormalize(R)
        rot[i] = R
    return rot, pos, axes


def keypoint_positions(model, q):
    """(K, 3) array of keypoint positions in the base frame."""
    rot, pos, _ = joint_frames(model, q)
    return np.array([pos[k.joint] + rot[k.joint] @ np.asarray(k.offset) for k in model.keypoints])


def forward_kinematics(model, q):
    """Base-frame poses of every keypoint at joint configuration ``q``."""
    rot, pos, _ = joint_frames(model, q)
    return [
        Pose(position=pos[k.joint] + rot[k.joint] @ np.asarray(k.offset), rotation=rot[k.joint].copy())
        for k in model.keypoints
    ]


def position_jacobian(model, q, keypoint):
    """3 x n Jacobian of one keypoint position with respect to the joint angles."""
    if not 0 <= keypoint < model.n_keypoints:
        raise InputError(f"keypoint index {keypoint} out of range")
    rot, pos, axes = joint_frames(model, q)
    kp = model.keypoints[keypoint]
    p = pos[kp.joint] + rot[kp.joint] @ np.asarray(kp.offset)
    mask = model.ancestors[keypoint]
    J = np.zeros((3, model.n_joints))
    J[:, mask] = np.cross(axes[mask], p - pos[mask]).T
    return J


def rotation_jacobian(model, q, keypoint):
    """3 x n world-frame angular velocity Jacobian of a keypoint's frame."""
    _, _, axes = joint_frames(model, q)
    J = np.zeros((3, model.n_joints))
    mask = model.ancestors[keypoint]
    J[:, mask] = axes[mask].T
    return J


def clamp_to_limits(q, model):
    """Box projection onto ``[lower, upper]``."""
    q = np.asarray(q, dtype=float)
    return np.minimum(np.maximum(q, model.lower), model.upper)


# -- model factories ----------------------------------------------------------

def serial_chain(lengths, axes=None, limits=(-np.pi, np.pi), keypoints="all"):
    """Open serial chain; joint i+1 sits ``lengths[i]`` along x of joint i.

    With ``keypoints="all"`` every link end gets a keypoint, with ``"tip"`` only
    the last one.
    """
    lengths = [float(v) for v in lengths]
    n = len(lengths)
    if axes is None:
        axes = [(0.0, 0.0, 1.0)] * n
    if np.ndim(limits) == 1:
        limits = [tuple(limits)] * n
    joints = []
    for i in range(n):
        offset = (0.0, 0.0, 0.0) if i == 0 else (lengths[i - 1], 0.0, 0.0)
        a = np.asarray(axes[i], dtype=float)
        joints.append(Joint(f"j{i}", i - 1, offset, tuple(a / np.linalg.norm(a)), tuple(map(float, limits[i]))))
    idx = range(n) if keypoints == "all" else [n - 1]
    kps = [Keypoint(f"k{i}", i, (lengths[i], 0.0, 0.0)) for i in idx]
    return RobotModel(joints=tuple(joints), keypoints=tuple(kps), end_effectors=(kps[-1].name,))


def random_serial_chain(rng, n_joints, keypoints="all"):
    """Random limb-like chain for tests and benchmarks.

    Consecutive joints never share an axis (no collinear twist pairs), axes get a
    small random tilt, and ranges span less than pi as for humanoid joints.
    """
    lengths = rng.uniform(0.15, 0.4, size=n_joints)
    basis = np.eye(3)
    axes = []
    prev = -1
    for _ in range(n_joints):
        choice = int(rng.choice([c for c in range(3) if c != prev]))
        prev = choice
        axes.append(_unit(basis[choice] + 0.2 * rng.normal(size=3)))
    lo = rng.uniform(-1.5, -0.5, size=n_joints)
    hi = rng.uniform(0.5, 1.5, size=n_joints)
    return serial_chain(lengths, axes=axes, limits=list(zip(lo, hi)), keypoints=keypoints)


def _unit(v):
    return v / np.linalg.norm(v)


def toy_humanoid():
    """8-joint floating-base toy humanoid: hip roll/pitch and shoulder pitch/roll per side.

    Roll joints (x axis) change sign under left/right reflection; pitch joints do not.
    """
    spec = [
        # name, parent, offset, axis, limits, default
        ("l_hip_roll", None, (0.0, 0.1, -0.1), (1, 0, 0), (-0.6, 0.6), 0.05),
        ("l_hip_pitch", "l_hip_roll", (0.0, 0.0, -0.05), (0, 1, 0), (-1.6, 1.2), -0.2),
        ("r_hip_roll", None, (0.0, -0.1, -0.1), (1, 0, 0), (-0.6, 0.6), -0.05),
        ("r_hip_pitch", "r_hip_roll", (0.0, 0.0, -0.05), (0, 1, 0), (-1.6, 1.2), -0.2),
        ("l_shoulder_pitch", None, (0.0, 0.18, 0.35), (0, 1, 0), (-2.5, 2.0), 0.2),
        ("l_shoulder_roll", "l_shoulder_pitch", (0.0, 0.05, 0.0), (1, 0, 0), (-0.4, 2.2), 0.15),
        ("r_shoulder_pitch", None, (0.0, -0.18, 0.35), (0, 1, 0), (-2.5, 2.0), 0.2),
        ("r_shoulder_roll", "r_shoulder_pitch", (0.0, -0.05, 0.0), (1, 0, 0), (-2.2, 0.4), -0.15),
    ]
    data = {
        "joints": [
            {"name": n, "parent": p, "offset": list(o), "axis": list(a), "limits": list(lim), "default": d}
            for n, p, o, a, lim, d in spec
        ],
        "keypoints": [
            {"name": "l_knee", "joint": "l_hip_pitch", "offset": [0.0, 0.0, -0.35]},
            {"name": "l_foot", "joint": "l_hip_pitch", "offset": [0.05, 0.0, -0.7]},
            {"name": "r_knee", "joint": "r_hip_pitch", "offset": [0.0, 0.0, -0.35]},
            {"name": "r_foot", "joint": "r_hip_pitch", "offset": [0.05, 0.0, -0.7]},
            {"name": "l_elbow", "joint": "l_shoulder_roll", "offset": [0.0, 0.0, -0.25]},
            {"name": "l_hand", "joint": "l_shoulder_roll", "offset": [0.05, 0.0, -0.5]},
            {"name": "r_elbow", "joint": "r_shoulder_roll", "offset": [0.0, 0.0, -0.25]},
            {"name": "r_hand", "joint": "r_shoulder_roll", "offset": [0.05, 0.0, -0.5]},
        ],
        "end_effectors": ["l_foot", "r_foot", "l_hand", "r_hand"],
        "mirror_map": [
            {"a": "l_hip_roll", "b": "r_hip_roll", "sign": -1},
            {"a": "l_hip_pitch", "b": "r_hip_pitch", "sign": 1},
            {"a": "l_shoulder_pitch", "b": "r_shoulder_pitch", "sign": 1},
            {"a": "l_shoulder_roll", "b": "r_shoulder_roll", "sign": -1},
        ],
        "keypoint_mirror": [
            {"a": "l_knee", "b": "r_knee"},
            {"a": "l_foot", "b": "r_foot"},
            {"a": "l_elbow", "b": "r_elbow"},
            {"a": "l_hand", "b": "r_hand"},
        ],
        "joint_groups": {
            "hip": ["l_hip_roll", "r_hip_roll"],
            "leg": ["l_hip_pitch", "r_hip_pitch"],
        },
    }
    return RobotModel.from_dict(data)


def _batch_axis_rotation(axis, angles):
    K = skew(np.asarray(axis, dtype=float))
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def batch_joint_frames(model, Q):
    """Vectorised :func:`joint_frames` over a (T, n) trajectory."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != model.n_joints:
        raise InputError(f"trajectory must have shape (T, {model.n_joints}), got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InputError("trajectory contains non-finite values")
    T, n = Q.shape
    rot = np.empty((T, n, 3, 3))
    pos = np.empty((T, n, 3))
    axes = np.empty((T, n, 3))
    for i, j in enumerate(model.joints):
        if j.parent < 0:
            pos[:, i] = j.offset
            axes[:, i] = j.axis
            rot[:, i] = _batch_axis_rotation(j.axis, Q[:, i])
        else:
            Rp = rot[:, j.parent]
            pos[:, i] = pos[:, j.parent] + Rp @ np.asarray(j.offset)
            axes[:, i] = Rp @ np.asarray(j.axis)
            rot[:, i] = Rp @ _batch_axis_rotation(j.axis, Q[:, i])
    return rot, pos, axes


def batch_keypoints(model, Q, with_jacobian=False):
    """Keypoint positions (T, K, 3) for a trajectory, optionally with Jacobians (T, K, 3, n).

    Also returns the keypoint frame rotations (T, K, 3, 3) and world joint axes (T, n, 3).
    """
    rot, pos, axes = batch_joint_frames(model, Q)
    attach = np.array([k.joint for k in model.keypoints])
    offsets = np.array([k.offset for k in model.keypoints], dtype=float)
    kp_rot = rot[:, attach]
    kp_pos = pos[:, attach] + np.einsum("tkij,kj->tki", kp_rot, offsets)
    if not with_jacobian:
        return kp_pos, kp_rot, axes, None
    # column j of keypoint k: axis_j x (p_k - p_j)
    lever = kp_pos[:, :, None, :] - pos[:, None, :, :]
    cols = np.cross(axes[:, None, :, :], lever)
    cols *= model.ancestors[None, :, :, None]
    return kp_pos, kp_rot, axes, np.swapaxes(cols, 2, 3)
