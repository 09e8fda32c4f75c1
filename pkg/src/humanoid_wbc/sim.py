"""Batched toy humanoid environment with domain randomization and an oracle teacher.

The plant is a joint-space surrogate: each joint is a PD-tracked second-order
system behind a first-order actuator lag. The floating base moves kinematically
along a commanded planar velocity plus decaying push impulses, and carries a
roll/pitch tilt state driven by disturbances and by the reaction of joint
accelerations. All environments of a batch are stepped together; each has its
own RNG stream, so results do not depend on batch composition.

Observation layout (width 9 + 2n)::

    [base linear velocity (3, body frame), base angular velocity (3),
     projected gravity (3), joint positions (n), joint velocities (n)]
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import formats
from ._validation import InputError
from .model import axis_rotation

DT = 0.02
CONTROL_HZ = 50
FALL_TILT = 0.8

MODES = ("Reset", "Startup", "Interval")

# (mode, parameter, range, period); the README maps each row onto the surrogate
TABLE_DEFAULTS = (
    ("Reset", "init_lin_vel", (-0.5, 0.5), None),
    ("Reset", "init_ang_vel", (-0.5, 0.5), None),
    ("Reset", "joint_pos_scale", (0.5, 1.5), None),
    ("Reset", "joint_vel", (0.0, 0.0), None),
    ("Startup", "friction_static", (0.2, 0.6), None),
    ("Startup", "friction_dynamic", (0.2, 0.6), None),
    ("Startup", "restitution", (0.0, 0.4), None),
    ("Startup", "link_mass_scale", (0.9, 1.1), None),
    ("Startup", "base_mass_delta", (-1.0, 1.0), None),
    ("Startup", "armature_scale", (0.8, 1.2), None),
    ("Startup", "default_pos_offset", (-0.05, 0.05), None),
    ("Reset", "base_torque", (-5.0, 5.0), None),
    ("Interval", "push_vel", (-1.0, 1.0), (10.0, 15.0)),
)
PARAMETERS = {p: m for m, p, _, _ in TABLE_DEFAULTS}


@dataclass(frozen=True)
class RandomizationEntry:
    mode: str
    parameter: str
    range: tuple
    period: tuple = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown randomization mode {self.mode!r}")
        if self.parameter not in PARAMETERS:
            raise InputError(f"unknown randomization parameter {self.parameter!r}")
        if PARAMETERS[self.parameter] != self.mode:
            raise InputError(f"{self.parameter} must use mode {PARAMETERS[self.parameter]}")
        lo, hi = (float(v) for v in self.range)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise InputError(f"{self.parameter}: invalid range {self.range}")
        object.__setattr__(self, "range", (lo, hi))
        if self.mode == "Interval":
            if self.period is None:
                raise InputError(f"{self.parameter}: Interval entries need a period range")
            plo, phi = (float(v) for v in self.period)
            if not (0 < plo <= phi and np.isfinite(phi)):
                raise InputError(f"{self.parameter}: invalid period {self.period}")
            object.__setattr__(self, "period", (plo, phi))
        elif self.period is not None:
            raise InputError(f"{self.parameter}: only Interval entries take a period")


class RandomizationConfig:
    """Domain-randomization table.

    Reset rows are resampled at every reset, Startup rows once per environment
    lifetime, Interval rows at random periods. Parameters absent from the table
    take their nominal value (midpoint of the default range, 1 for scales).
    """

    def __init__(self, entries):
        self.entries = {}
        for e in entries:
            if not isinstance(e, RandomizationEntry):
                e = RandomizationEntry(**e)
            if e.parameter in self.entries:
                raise InputError(f"duplicate randomization entry {e.parameter}")
            self.entries[e.parameter] = e

    @classmethod
    def default(cls):
        return cls([RandomizationEntry(m, p, r, per) for m, p, r, per in TABLE_DEFAULTS])

    @classmethod
    def nominal(cls):
        """Every range collapsed to its nominal point (pushes disabled)."""
        out = []
        for m, p, r, per in TABLE_DEFAULTS:
            v = 1.0 if p.endswith("_scale") else 0.5 * (r[0] + r[1])
            if p == "push_vel":
                v = 0.0
            out.append(RandomizationEntry(m, p, (v, v), per))
        return cls(out)

    def with_range(self, parameter, lo, hi):
        e = self.entries[parameter]
        entries = dict(self.entries)
        entries[parameter] = replace(e, range=(lo, hi))
        return RandomizationConfig(entries.values())

    def range(self, parameter):
        e = self.entries.get(parameter)
        if e is None:
            m, _, r, _ = next(t for t in TABLE_DEFAULTS if t[1] == parameter)
            v = 1.0 if parameter.endswith("_scale") else 0.5 * (r[0] + r[1])
            return (v, v)
        return e.range

    def sample(self, rng, parameter, size=None):
        lo, hi = self.range(parameter)
        return rng.uniform(lo, hi, size=size) if hi > lo else np.full(size if size else (), lo)

    def to_rows(self):
        rows = []
        for e in self.entries.values():
            row = {"mode": e.mode, "parameter": e.parameter, "range": list(e.range)}
            if e.period is not None:
                row["period"] = list(e.period)
            rows.append(row)
        return rows

    def save(self, path):
        formats.write_json(path, {"rows": self.to_rows()}, kind="randomization")

    @classmethod
    def load(cls, path):
        data = formats.read_json(path, kind="randomization")
        try:
            return cls([RandomizationEntry(r["mode"], r["parameter"], tuple(r["range"]),
                                           tuple(r["period"]) if r.get("period") else None)
                        for r in data["rows"]])
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed randomization file: {exc}") from exc


@dataclass(frozen=True)
class DynamicsParams:
    kp: float = 60.0
    kd: float = 8.0
    lag: float = 0.04
    inertia: float = 1.0
    disturbance_gain: float = 1.0
    tilt_stiffness: float = 40.0
    tilt_damping: float = 8.0
    tilt_inertia: float = 1.0
    base_mass: float = 10.0
    reaction_gain: float = 0.002
    push_tilt_gain: float = 0.5
    push_decay: float = 1.0
    yaw_torque_gain: float = 0.02

    def __post_init__(self):
        if not (self.kp >= 0 and self.kd >= 0):
            raise InputError("gains must be non-negative")
        if not self.lag > 0 or not self.inertia > 0:
            raise InputError("lag constant and inertia must be positive")


@dataclass
class PrivilegedParams:
    """Simulation-only quantities (teacher inputs, never observed by the student)."""

    kp: np.ndarray
    kd: np.ndarray
    inertia: np.ndarray
    alpha: np.ndarray
    default_angles: np.ndarray
    dist_amp: np.ndarray
    dist_freq: np.ndarray
    dist_phase: np.ndarray
    base_torque: np.ndarray
    tilt_inertia: np.ndarray
    friction_static: np.ndarray
    friction_dynamic: np.ndarray
    restitution: np.ndarray

    def disturbance(self, t):
        return self.dist_amp * np.sin(self.dist_freq * t + self.dist_phase)

    def take(self, idx):
        return PrivilegedParams(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


@dataclass
class SimState:
    theta: np.ndarray
    theta_dot: np.ndarray
    actuator: np.ndarray
    base_pose: np.ndarray  # x, y, yaw (world)
    base_vel: np.ndarray  # commanded vx, vy, yaw rate (world)
    push_vel: np.ndarray  # vx, vy impulse component (world)
    tilt: np.ndarray  # roll, pitch
    tilt_rate: np.ndarray
    theta_acc: np.ndarray
    time: np.ndarray
    next_push: np.ndarray

    def copy(self):
        return SimState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, idx):
        return SimState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @property
    def n_envs(self):
        return self.theta.shape[0]


def base_rotation(roll, pitch):
    return axis_rotation([1.0, 0.0, 0.0], roll) @ axis_rotation([0.0, 1.0, 0.0], pitch)


def projected_gravity(tilt):
    """Gravity direction in the body frame for (roll, pitch) tilt, batched over rows."""
    tilt = np.atleast_2d(tilt)
    r, p = tilt[:, 0], tilt[:, 1]
    # R = Rx(r) Ry(p); body gravity = R^T (0, 0, -1)
    g = np.stack([np.sin(p) * np.cos(r), -np.sin(r), -np.cos(r) * np.cos(p)], axis=1)
    return g


def tilt_angle(tilt):
    g = projected_gravity(tilt)
    return np.arccos(np.clip(-g[:, 2], -1.0, 1.0))


def observe(state):
    """Proprioceptive observation; uses only non-privileged state fields."""
    yaw = state.base_pose[:, 2]
    v = state.base_vel[:, :2] + state.push_vel
    c, s = np.cos(yaw), np.sin(yaw)
    v_body = np.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1], np.zeros_like(yaw)], axis=1)
    omega = np.stack([state.tilt_rate[:, 0], state.tilt_rate[:, 1], state.base_vel[:, 2]], axis=1)
    return np.hstack([v_body, omega, projected_gravity(state.tilt), state.theta, state.theta_dot])


def observation_dim(n_joints):
    return 9 + 2 * n_joints


def _reaction_matrix(model):
    """Roll/pitch reaction of joint accelerations: x and y components of each joint axis."""
    axes = np.array([j.axis for j in model.joints])
    return axes[:, :2].T.copy()


class ToyEnv:
    """``n_envs`` independent toy robots stepped in lockstep at 50 Hz."""

    def __init__(self, model, n_envs=64, dynamics=None, randomization=None, seed=0, disturbances=True):
        if n_envs < 1:
            raise InputError("n_envs must be at least 1")
        self.model = model
        self.n_envs = int(n_envs)
        self.n_joints = model.n_joints
        self.dt = DT
        self.dynamics = dynamics or DynamicsParams()
        self.randomization = randomization or RandomizationConfig.default()
        self.disturbances = disturbances
        self.seed = seed
        self._seeds = np.random.SeedSequence(seed).spawn(self.n_envs)
        self.rngs = [np.random.default_rng(s) for s in self._seeds]
        self._reaction = _reaction_matrix(model)
        self.params = self._startup()
        self.state = None
        # initial yaw rate, carried as a decaying offset on the command
        self._yaw_offset = np.zeros(self.n_envs)

    @property
    def obs_dim(self):
        return observation_dim(self.n_joints)

    def _startup(self):
        d, r, n = self.dynamics, self.randomization, self.n_joints
        rows = []
        for rng in self.rngs:
            fs = r.sample(rng, "friction_static")
            fd = r.sample(rng, "friction_dynamic")
            rest = r.sample(rng, "restitution")
            mass = r.sample(rng, "link_mass_scale", n)
            arm = r.sample(rng, "armature_scale", n)
            base_dm = r.sample(rng, "base_mass_delta")
            offset = r.sample(rng, "default_pos_offset", n)
            freq = rng.uniform(0.5, 3.0, n) * 2 * np.pi
            phase = rng.uniform(0, 2 * np.pi, n)
            rows.append((fs, fd, rest, mass, arm, base_dm, offset, freq, phase))
        fs, fd, rest, mass, arm, base_dm, offset, freq, phase = (np.array(v, dtype=float) for v in zip(*rows))
        amp = d.disturbance_gain * 0.5 * (fs + fd) * (1.0 + rest) if self.disturbances else np.zeros(self.n_envs)
        E = self.n_envs
        return PrivilegedParams(
            kp=np.full((E, n), d.kp),
            kd=np.full((E, n), d.kd),
            inertia=d.inertia * mass * arm,
            alpha=np.full((E, n), 1.0 - np.exp(-DT / d.lag)),
            default_angles=self.model.default_angles + offset,
            dist_amp=np.repeat(amp[:, None], n, axis=1),
            dist_freq=freq,
            dist_phase=phase,
            base_torque=np.zeros((E, 3)),
            tilt_inertia=d.tilt_inertia * (1.0 + base_dm / d.base_mass),
            friction_static=fs,
            friction_dynamic=fd,
            restitution=rest,
        )

    def _sample_push_period(self, rng):
        e = self.randomization.entries.get("push_vel")
        if e is None:
            return np.inf
        return rng.uniform(*e.period)

    def reset(self, env_ids=None):
        """Resample Reset rows for the given envs (all by default); returns observations."""
        r = self.randomization
        E, n = self.n_envs, self.n_joints
        if self.state is None:
            z = np.zeros
            self.state = SimState(z((E, n)), z((E, n)), z((E, n)), z((E, 3)), z((E, 3)), z((E, 2)), z((E, 2)),
                                  z((E, 2)), z((E, n)), z(E), z(E))
        ids = range(E) if env_ids is None else np.atleast_1d(env_ids)
        s, p = self.state, self.params
        for i in ids:
            rng = self.rngs[i]
            lin = r.sample(rng, "init_lin_vel", 2)
            ang = r.sample(rng, "init_ang_vel", 3)
            q = p.default_angles[i] * r.sample(rng, "joint_pos_scale", n)
            q = np.clip(q, self.model.lower, self.model.upper)
            s.theta[i] = q
            s.theta_dot[i] = r.sample(rng, "joint_vel", n)
            s.actuator[i] = q
            s.base_pose[i] = 0.0
            s.base_vel[i] = 0.0
            s.push_vel[i] = lin
            s.tilt[i] = 0.0
            s.tilt_rate[i] = ang[:2]
            s.base_vel[i, 2] = 0.0
            s.theta_acc[i] = 0.0
            s.time[i] = 0.0
            s.next_push[i] = self._sample_push_period(rng)
            p.base_torque[i] = r.sample(rng, "base_torque", 3)
            self._yaw_offset[i] = ang[2]
        return observe(self.state)

    def step(self, action, base_command=None):
        """Advance one control period; returns (observation, fallen mask)."""
        if self.state is None:
            raise InputError("call reset() before step()")
        a = np.asarray(action, dtype=float)
        if a.shape != (self.n_envs, self.n_joints):
            raise InputError(f"action must be ({self.n_envs}, {self.n_joints}), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("action contains non-finite values")
        a = np.clip(a, self.model.lower, self.model.upper)
        cmd = np.zeros((self.n_envs, 3)) if base_command is None else np.asarray(base_command, dtype=float)
        if cmd.shape != (self.n_envs, 3):
            raise InputError("base_command must be (n_envs, 3): vx, vy, yaw rate")
        s, p, d = self.state, self.params, self.dynamics
        dt = self.dt

        s.actuator += p.alpha * (a - s.actuator)
        dist = p.disturbance(s.time[:, None])
        acc = (p.kp * (s.actuator - s.theta) - p.kd * s.theta_dot) / p.inertia + dist
        s.theta_dot += dt * acc
        s.theta += dt * s.theta_dot
        lo, hi = self.model.lower, self.model.upper
        hit = (s.theta < lo) | (s.theta > hi)
        if np.any(hit):
            s.theta = np.clip(s.theta, lo, hi)
            s.theta_dot[hit] = 0.0
        s.theta_acc = acc

        # base: commanded planar motion plus a decaying push impulse
        s.push_vel *= np.exp(-dt / d.push_decay)
        push_dv = np.zeros((self.n_envs, 2))
        due = s.time + 0.5 * dt >= s.next_push
        for i in np.nonzero(due)[0]:
            rng = self.rngs[i]
            push_dv[i] = self.randomization.sample(rng, "push_vel", 2)
            s.next_push[i] = s.time[i] + self._sample_push_period(rng)
        s.push_vel += push_dv
        yaw_rate = cmd[:, 2] + self._yaw_offset + d.yaw_torque_gain * p.base_torque[:, 2]
        self._yaw_offset = self._yaw_offset * np.exp(-dt / d.push_decay)
        s.base_vel = np.column_stack([cmd[:, :2], yaw_rate])
        v = s.base_vel[:, :2] + s.push_vel
        s.base_pose[:, :2] += dt * v
        s.base_pose[:, 2] += dt * yaw_rate

        # tilt: spring-damper driven by base torque, pushes and joint reaction
        reaction = d.reaction_gain * acc @ self._reaction.T
        tilt_acc = (-d.tilt_stiffness * s.tilt - d.tilt_damping * s.tilt_rate + p.base_torque[:, :2]) / \
            p.tilt_inertia[:, None] + reaction
        s.tilt_rate += dt * tilt_acc + d.push_tilt_gain * np.column_stack([push_dv[:, 1], push_dv[:, 0]])
        s.tilt += dt * s.tilt_rate
        s.time += dt
        return observe(s), self.fallen()

    def place_on_reference(self, env_ids, joint_pos, joint_vel=None):
        """Move freshly reset envs onto a reference pose, keeping their reset perturbation.

        The randomized deviation of each env's reset pose from its default pose is
        added to ``joint_pos``; ``joint_vel`` is added to the sampled joint velocity.
        Returns observations for all envs.
        """
        ids = np.atleast_1d(env_ids)
        s, p = self.state, self.params
        q_ref = np.broadcast_to(np.asarray(joint_pos, dtype=float), (len(ids), self.n_joints))
        q = np.clip(q_ref + s.theta[ids] - p.default_angles[ids], self.model.lower, self.model.upper)
        s.theta[ids] = q
        s.actuator[ids] = q
        if joint_vel is not None:
            s.theta_dot[ids] += np.broadcast_to(np.asarray(joint_vel, dtype=float), (len(ids), self.n_joints))
        return observe(s)

    def fallen(self):
        return tilt_angle(self.state.tilt) > FALL_TILT

    def privileged(self):
        return self.params


@dataclass
class TeacherReference:
    """Reference joints at the current and next control step (n or (E, n))."""

    joint_now: np.ndarray
    joint_next: np.ndarray
    keypoints_next: np.ndarray = field(default=None)


def teacher_oracle(state, reference, params, lower=None, upper=None, decay=0.9):
    """Lag- and disturbance-compensated joint targets tracking the reference.

    Chooses the action that makes the next joint position equal to
    ``ref_next + decay * (theta - ref_now)`` on the nominal discrete plant,
    so the tracking error shrinks geometrically. Inputs may be batched.
    """
    if reference is None:
        raise InputError("teacher needs a reference frame")
    th, thd, u_f = state.theta, state.theta_dot, state.actuator
    ref_now = np.broadcast_to(np.asarray(reference.joint_now, dtype=float), th.shape)
    ref_next = np.broadcast_to(np.asarray(reference.joint_next, dtype=float), th.shape)
    t = state.time[:, None] if np.ndim(state.time) else state.time
    dist = params.disturbance(t)
    want = ref_next + decay * (th - ref_now)
    v_next = (want - th) / DT
    acc = (v_next - thd) / DT
    u_next = th + (params.inertia * (acc - dist) + params.kd * thd) / params.kp
    a = u_f + (u_next - u_f) / params.alpha
    if lower is not None:
        a = np.clip(a, lower, upper)
    return a


def rollout_log(path, frames):
    """Write rollout frames (dicts of arrays/scalars) as JSON lines."""
    def clean(fr):
        return {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in fr.items()}

    formats.write_jsonl(path, [clean(f) for f in frames], kind="rollout")


__all__ = [
    "DT", "CONTROL_HZ", "FALL_TILT", "RandomizationEntry", "RandomizationConfig", "DynamicsParams",
    "PrivilegedParams", "SimState", "ToyEnv", "TeacherReference", "teacher_oracle", "observe",
    "observation_dim", "projected_gravity", "tilt_angle", "base_rotation", "rollout_log",
]
