"""Teacher-student distillation (DAgger), motion curriculum and latent-space tools.

A :class:`DAggerRunner` owns a batch of toy environments, the reference motion
each environment follows and every student's observation history. At each
control step the student acts, the privileged teacher labels the visited state,
and the pair is appended to an :class:`ExperienceBuffer`. Episodes end when the
robot falls or when its keypoint displacement over a short window stops
matching the reference displacement; displacements rather than absolute
positions are compared so that drift accumulated earlier in the episode does not
count against the robot.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score

from . import formats
from ._validation import InputError, NumericalError
from .cvae import CVAEStudent, decode, encode, save_student
from .metrics import Difficulty, classify_motion, quality_from_errors, stability
from .model import batch_keypoints
from .sim import DT, RandomizationConfig, TeacherReference, ToyEnv, projected_gravity, teacher_oracle
from .textenc import default_encoder, similarity

CURRICULUM_THRESHOLD = 0.8
DISPLACEMENT_DT = 0.1


# -- reference motions ----------------------------------------------------------

@dataclass
class Motion:
    """A looping reference: joint angles (T, n) and root planar velocity (T, 3).

    ``root_vel`` rows are (vx, vy, yaw rate) in the world frame at zero heading.
    """

    name: str
    caption: str
    joints: np.ndarray
    root_vel: np.ndarray
    fps: float = 50.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        self.root_vel = np.asarray(self.root_vel, dtype=float)
        if self.joints.ndim != 2 or self.joints.shape[0] < 2:
            raise InputError(f"motion {self.name!r}: joints must be (T>=2, n)")
        if self.root_vel.shape != (self.joints.shape[0], 3):
            raise InputError(f"motion {self.name!r}: root_vel must be (T, 3)")
        if not self.caption.strip():
            raise InputError(f"motion {self.name!r} has no caption")

    @property
    def n_frames(self):
        return self.joints.shape[0]

    def root_positions(self):
        """Integrated root (x, y, yaw) over one loop, starting at the origin."""
        pos = np.zeros((self.n_frames, 3))
        pos[1:] = np.cumsum(self.root_vel[:-1], axis=0) / self.fps
        return pos

    def to_dict(self):
        return {"name": self.name, "caption": self.caption, "joints": self.joints.tolist(),
                "root_vel": self.root_vel.tolist(), "fps": self.fps}


def world_keypoints(body_kp, root):
    """Rotate body-frame keypoints (..., K, 3) by root yaw and add root (x, y); root is (..., 3)."""
    root = np.asarray(root, dtype=float)
    c, s = np.cos(root[..., 2:3]), np.sin(root[..., 2:3])
    x = c * body_kp[..., 0] - s * body_kp[..., 1] + root[..., 0:1]
    y = s * body_kp[..., 0] + c * body_kp[..., 1] + root[..., 1:2]
    return np.stack([x, y, body_kp[..., 2]], axis=-1)


class MotionLibrary:
    """Named motions with captions and Easy/Hard labels from :func:`classify_motion`."""

    def __init__(self, model, motions, speed_threshold=0.8, encoder=None):
        if not motions:
            raise InputError("motion library is empty")
        self.model = model
        self.motions = list(motions)
        names = [m.name for m in self.motions]
        if len(set(names)) != len(names):
            raise InputError("motion names must be unique")
        self.speed_threshold = speed_threshold
        self.encoder = encoder or default_encoder()
        self.keypoints = []
        self.labels = []
        for m in self.motions:
            if m.joints.shape[1] != model.n_joints:
                raise InputError(f"motion {m.name!r} has {m.joints.shape[1]} joints, model has {model.n_joints}")
            kp, _, _, _ = batch_keypoints(model, m.joints)
            self.keypoints.append(kp)
            world = world_keypoints(kp, m.root_positions())
            self.labels.append(classify_motion(world, m.fps, threshold=speed_threshold))
        self.embeddings = np.array([self.encoder.embed(m.caption) for m in self.motions])

    def __len__(self):
        return len(self.motions)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.motions[self.index(key)]
        return self.motions[key]

    def index(self, name):
        for i, m in enumerate(self.motions):
            if m.name == name:
                return i
        raise InputError(f"no motion named {name!r}")

    def label(self, i):
        return self.labels[i]

    def easy(self):
        return [i for i, lab in enumerate(self.labels) if lab == Difficulty.EASY]

    def hard(self):
        return [i for i, lab in enumerate(self.labels) if lab == Difficulty.HARD]

    def nearest(self, text):
        """Index of the motion whose caption embedding is closest to ``text``."""
        v = self.encoder.embed(text)
        return int(np.argmax([similarity(v, e) for e in self.embeddings]))

    def subset(self, names):
        return MotionLibrary(self.model, [self[n] for n in names], self.speed_threshold, self.encoder)

    def save(self, path):
        formats.write_json(path, {"motions": [m.to_dict() for m in self.motions],
                                  "labels": [lab.value for lab in self.labels]}, kind="motion_library")

    @classmethod
    def load(cls, path, model):
        data = formats.read_json(path, kind="motion_library")
        try:
            motions = [Motion(d["name"], d["caption"], d["joints"], d["root_vel"], d.get("fps", 50.0))
                       for d in data["motions"]]
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed motion library: {exc}") from exc
        lib = cls(model, motions)
        stored = data.get("labels")
        if stored is not None and stored != [lab.value for lab in lib.labels]:
            raise InputError("stored Easy/Hard labels disagree with classify_motion")
        return lib


TOY_CAPTIONS = {
    "stand": "a person stands still",
    "wave": "a man waves his right hand",
    "raise_arms": "a person raises both arms",
    "walk": "a person walks forward",
    "shuffle": "a person shuffles from left to right",
    "run": "a person runs forward briskly",
}


def _joint(model, name):
    return [j.name for j in model.joints].index(name)


def toy_motion(model, kind, n_frames=100, fps=50.0):
    """Periodic reference motions for :func:`humanoid_wbc.model.toy_humanoid`.

    Every frequency divides the loop length, so the motion loops seamlessly.
    """
    if kind not in TOY_CAPTIONS:
        raise InputError(f"unknown toy motion {kind!r}; choose from {sorted(TOY_CAPTIONS)}")
    t = np.arange(n_frames) / fps
    period = n_frames / fps
    w = 2 * np.pi / period  # one cycle per loop
    q = np.tile(model.default_angles, (n_frames, 1))
    vel = np.zeros((n_frames, 3))
    J = lambda name: _joint(model, name)  # noqa: E731
    if kind == "wave":
        q[:, J("r_shoulder_roll")] = -1.1 + 0.3 * np.sin(w * t)
        q[:, J("r_shoulder_pitch")] = -0.3
    elif kind == "raise_arms":
        lift = 0.4 * (1 - np.cos(w * t)) / 2
        q[:, J("l_shoulder_pitch")] = 0.2 - lift
        q[:, J("r_shoulder_pitch")] = 0.2 - lift
    elif kind in ("walk", "run"):
        amp, cycles, speed = (0.35, 2, 0.6) if kind == "walk" else (0.6, 3, 1.5)
        s = np.sin(cycles * w * t)
        q[:, J("l_hip_pitch")] = -0.2 + amp * s
        q[:, J("r_hip_pitch")] = -0.2 - amp * s
        q[:, J("l_shoulder_pitch")] = 0.2 - 0.6 * amp * s
        q[:, J("r_shoulder_pitch")] = 0.2 + 0.6 * amp * s
        vel[:, 0] = speed
    elif kind == "shuffle":
        s = np.sin(w * t)
        q[:, J("l_hip_roll")] = 0.05 + 0.15 * np.sin(2 * w * t)
        q[:, J("r_hip_roll")] = -0.05 + 0.15 * np.sin(2 * w * t)
        vel[:, 1] = 0.5 * s
    q = np.clip(q, model.lower, model.upper)
    return Motion(kind, TOY_CAPTIONS[kind], q, vel, fps)


def toy_motion_library(model, kinds=("stand", "wave", "raise_arms", "walk", "shuffle", "run"), **kw):
    return MotionLibrary(model, [toy_motion(model, k) for k in kinds], **kw)


# -- experience buffer --------------------------------------------------------

class ExperienceBuffer:
    """FIFO ring buffer of (history, text id, o_t, teacher action) rows."""

    def __init__(self, capacity, history_dim, obs_dim, action_dim):
        if capacity < 1:
            raise InputError("capacity must be positive")
        self.capacity = int(capacity)
        self.history = np.zeros((self.capacity, history_dim))
        self.text_id = np.zeros(self.capacity, dtype=np.int64)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.action = np.zeros((self.capacity, action_dim))
        self.size = 0
        self.head = 0  # next write position
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, history, text_id, obs, action):
        history = np.atleast_2d(history)
        m = history.shape[0]
        if m == 0:
            return
        if not (len(np.atleast_1d(text_id)) == np.atleast_2d(obs).shape[0] == np.atleast_2d(action).shape[0] == m):
            raise InputError("buffer rows disagree on count")
        # if more rows than capacity arrive, only the newest survive
        rows = np.arange(m)[-self.capacity:]
        pos = (self.head + np.arange(m)) % self.capacity
        pos = pos[-self.capacity:]
        self.history[pos] = history[rows]
        self.text_id[pos] = np.atleast_1d(text_id)[rows]
        self.obs[pos] = np.atleast_2d(obs)[rows]
        self.action[pos] = np.atleast_2d(action)[rows]
        self.head = (self.head + m) % self.capacity
        self.size = min(self.capacity, self.size + m)
        self.inserted += m

    def order(self):
        """Buffer positions from oldest to newest."""
        start = (self.head - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, rng, batch_size):
        if self.size == 0:
            raise InputError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=min(batch_size, self.size))

    def rows(self, idx, embeddings):
        """Flat ``[history, text, o_t]`` inputs and teacher actions for logical indices."""
        pos = self.order()[idx]
        X = np.hstack([self.history[pos], embeddings[self.text_id[pos]], self.obs[pos]])
        return X, self.action[pos]


# -- relative displacement ------------------------------------------------------

def relative_displacement_error(p_t, p_prev, ref_t, ref_prev, axis=None):
    """``||(p_t - p_prev) - (ref_t - ref_prev)||^2``; sums over ``axis`` (all by default)."""
    d = (np.asarray(p_t, dtype=float) - np.asarray(p_prev, dtype=float)) - (
        np.asarray(ref_t, dtype=float) - np.asarray(ref_prev, dtype=float))
    return np.sum(d * d, axis=axis)


# -- configuration ------------------------------------------------------------

@dataclass
class DAggerConfig:
    n_envs: int = 1024
    iterations: int = 1000
    horizon: int = 1
    batch_size: int = 1024 * 64
    learning_rate: float = 1e-5
    epochs_per_iteration: int = 1
    updates_per_iteration: int = 0  # 0 = derive from one epoch over the buffer
    kl_weight: float = 1e-3
    buffer_capacity: int = 1024 * 512
    history_len: int = 20
    history_stride: int = 5
    displacement_dt: float = DISPLACEMENT_DT
    displacement_threshold: float = 0.01  # m^2 for the worst keypoint, i.e. 10 cm
    phase_window: int = 0  # re-index the reference within +-window frames; 0 keeps the clock
    curriculum_threshold: float = CURRICULUM_THRESHOLD
    progress_window: int = 50
    use_curriculum: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_envs", "iterations", "batch_size", "epochs_per_iteration", "buffer_capacity",
                     "history_len", "history_stride", "progress_window"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be positive")
        if self.horizon < 0 or self.updates_per_iteration < 0 or self.phase_window < 0:
            raise InputError("horizon, updates_per_iteration and phase_window must be non-negative")
        if not (self.learning_rate > 0 and self.displacement_dt > 0 and self.displacement_threshold > 0):
            raise InputError("learning_rate, displacement_dt and displacement_threshold must be positive")
        if not self.kl_weight >= 0:
            raise InputError("kl_weight must be non-negative")
        if not 0 <= self.curriculum_threshold <= 1:
            raise InputError("curriculum_threshold must lie in [0, 1]")

    @property
    def displacement_steps(self):
        return max(1, int(round(self.displacement_dt / DT)))

    @classmethod
    def benchmark(cls, **overrides):
        """Desk-scale settings used by the toy benchmark and tests."""
        base = dict(n_envs=64, iterations=2000, horizon=2, batch_size=256, learning_rate=1e-3,
                    buffer_capacity=64 * 32, history_len=4, history_stride=5, phase_window=3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as exc:
            raise InputError(f"bad DAgger config: {exc}") from exc


def benchmark_student(kind, obs_dim, action_dim, config, random_state=0, latent_dim=16,
                      encoder_hidden=(128, 64), decoder_hidden=(64, 128)):
    """Desk-scale CVAE student or its parameter-matched plain-MLP counterpart."""
    from .cvae import CVAEConfig, MLPStudent, budget_matched_hidden

    cvae = CVAEStudent(obs_dim=obs_dim, action_dim=action_dim, history_len=config.history_len, text_dim=512,
                       latent_dim=latent_dim, encoder_hidden=encoder_hidden, decoder_hidden=decoder_hidden,
                       kl_weight=config.kl_weight, learning_rate=config.learning_rate, random_state=random_state)
    if kind == "cvae":
        return cvae
    if kind == "mlp":
        cfg = cvae.make_config()
        assert isinstance(cfg, CVAEConfig)
        return MLPStudent(input_dim=cfg.input_dim, action_dim=action_dim, hidden=budget_matched_hidden(cfg),
                          learning_rate=config.learning_rate, random_state=random_state,
                          history_len=config.history_len)
    raise InputError(f"unknown student kind {kind!r}")


# -- observation history --------------------------------------------------------

class HistoryTracker:
    """Per-env window of [o_k, a_{k-1}] frames, subsampled every ``stride`` steps."""

    def __init__(self, n_envs, obs_dim, action_dim, history_len, stride, include_actions=True):
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.history_len, self.stride = history_len, stride
        self.include_actions = include_actions
        self.step_dim = obs_dim + (action_dim if include_actions else 0)
        self.window = (history_len - 1) * stride + 1
        self.frames = np.zeros((n_envs, self.window, self.step_dim))
        # newest frame is last; sample indices oldest first
        self.sample_idx = self.window - 1 - stride * np.arange(history_len)[::-1]

    @property
    def history_dim(self):
        return self.history_len * self.step_dim

    def _frame(self, obs, prev_action):
        return np.hstack([obs, prev_action]) if self.include_actions else obs

    def reset(self, ids, obs, prev_action):
        f = self._frame(obs, prev_action)
        self.frames[ids] = f[:, None, :]

    def push(self, obs, prev_action):
        self.frames[:, :-1] = self.frames[:, 1:]
        self.frames[:, -1] = self._frame(obs, prev_action)

    def flat(self):
        return self.frames[:, self.sample_idx].reshape(self.frames.shape[0], -1)


# -- the DAgger runner ----------------------------------------------------------

class DAggerRunner:
    """Environment batch plus per-env reference bookkeeping for data collection."""

    def __init__(self, env, library, config, teacher=teacher_oracle, include_actions=True):
        if env.n_joints != library.model.n_joints:
            raise InputError("environment and motion library disagree on joint count")
        self.env = env
        self.library = library
        self.config = config
        self.teacher = teacher
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
        E, n = env.n_envs, env.n_joints
        self.tracker = HistoryTracker(E, env.obs_dim, n, config.history_len, config.history_stride, include_actions)
        self.active = curriculum_schedule(library, 0.0, config.curriculum_threshold) if config.use_curriculum \
            else list(range(len(library)))
        # motions padded to a common length so per-env lookups are single gathers
        M, T = len(library), max(m.n_frames for m in library.motions)
        self.n_frames = np.array([m.n_frames for m in library.motions])
        self.q_table = np.zeros((M, T, n))
        self.vel_table = np.zeros((M, T, 3))
        self.kp_table = np.zeros((M, T, library.model.n_keypoints, 3))
        for j, m in enumerate(library.motions):
            self.q_table[j, :m.n_frames] = m.joints
            self.vel_table[j, :m.n_frames] = m.root_vel
            self.kp_table[j, :m.n_frames] = library.keypoints[j]
        self.motion = np.zeros(E, dtype=np.int64)
        self.phase = np.zeros(E, dtype=np.int64)
        self.ref_root = np.zeros((E, 3))
        D = config.displacement_steps
        K = library.model.n_keypoints
        self.robot_kp = np.zeros((E, D + 1, K, 3))
        self.ref_kp = np.zeros((E, D + 1, K, 3))
        self.body_kp = np.zeros((E, D + 1, K, 3))
        self.age = np.zeros(E, dtype=np.int64)
        self.prev_action = np.zeros((E, n))
        self.episodes = 0
        self.terminations = {"fall": 0, "displacement": 0}
        self.obs = env.reset()
        self._start(np.arange(E), initial=True)

    def set_active(self, motions):
        self.active = list(motions)

    def _start(self, ids, initial=False):
        if len(ids) == 0:
            return
        if not initial:
            self.obs = self.obs.copy()
            self.obs[ids] = self.env.reset(ids)[ids]
        for i in ids:
            self.motion[i] = self.active[int(self.rng.integers(len(self.active)))]
            self.phase[i] = int(self.rng.integers(self.n_frames[self.motion[i]]))
        self.ref_root[ids] = 0.0
        self.age[ids] = 0
        # reference-state initialisation: start each episode on its reference frame
        ref = self.reference()
        vel = (ref.joint_next[ids] - ref.joint_now[ids]) / DT
        self.obs = self.env.place_on_reference(ids, ref.joint_now[ids], vel)
        s = self.env.state
        self.prev_action[ids] = s.theta[ids]
        self.tracker.reset(ids, self.obs[ids], self.prev_action[ids])
        kp, _, _, _ = batch_keypoints(self.library.model, self.env.state.theta[ids])
        self.body_kp[ids] = kp[:, None]
        rk = self._robot_world_kp()[ids]
        fk = self._ref_world_kp(ids)
        self.robot_kp[ids] = rk[:, None]
        self.ref_kp[ids] = fk[:, None]
        self.episodes += len(ids)

    def _robot_world_kp(self):
        kp, _, _, _ = batch_keypoints(self.library.model, self.env.state.theta)
        return world_keypoints(kp, self.env.state.base_pose)

    def _ref_world_kp(self, ids=None):
        ids = np.arange(self.env.n_envs) if ids is None else np.asarray(ids)
        kp = self.kp_table[self.motion[ids], self._frames(0)[ids]]
        return world_keypoints(kp, self.ref_root[ids])

    def _frames(self, offset=0):
        return (self.phase + offset) % self.n_frames[self.motion]

    def reference(self):
        now = self.q_table[self.motion, self._frames(0)]
        nxt = self.q_table[self.motion, self._frames(1)]
        return TeacherReference(now, nxt)

    def reference_joints(self):
        return self.reference().joint_now

    def inputs(self):
        """Student inputs (flat rows), text ids and current observations."""
        text = self.library.embeddings[self.motion]
        return np.hstack([self.tracker.flat(), text, self.obs])

    def teacher_action(self):
        m = self.library.model
        return self.teacher(self.env.state, self.reference(), self.env.params, m.lower, m.upper)

    def advance(self, action):
        """Step every env with ``action``; returns per-env squared keypoint and joint errors."""
        action = np.clip(np.asarray(action, dtype=float), self.library.model.lower, self.library.model.upper)
        root_vel = self.vel_table[self.motion, self._frames(0)]
        yaw = self.ref_root[:, 2]
        c, s = np.cos(yaw), np.sin(yaw)
        cmd = np.column_stack([c * root_vel[:, 0] - s * root_vel[:, 1], s * root_vel[:, 0] + c * root_vel[:, 1],
                               root_vel[:, 2]])
        self.obs, fallen = self.env.step(action, cmd)
        self.ref_root += DT * cmd
        self.phase = (self.phase + 1) % self.n_frames[self.motion]
        self.age += 1
        self.prev_action = action
        self.tracker.push(self.obs, action)

        kp, _, _, _ = batch_keypoints(self.library.model, self.env.state.theta)
        self.body_kp[:, :-1] = self.body_kp[:, 1:]
        self.body_kp[:, -1] = kp
        if self.config.phase_window:
            self._reindex()

        # tracking errors against the new reference frame, in the body frame
        ref_kp = self.kp_table[self.motion, self._frames(0)]
        ref_q = self.reference_joints()
        kp_err = np.sum((kp - ref_kp) ** 2, axis=(1, 2))
        q_err = np.sum((self.env.state.theta - ref_q) ** 2, axis=1)

        # relative displacement over the window governs termination
        self.robot_kp[:, :-1] = self.robot_kp[:, 1:]
        self.ref_kp[:, :-1] = self.ref_kp[:, 1:]
        self.robot_kp[:, -1] = world_keypoints(kp, self.env.state.base_pose)
        self.ref_kp[:, -1] = world_keypoints(ref_kp, self.ref_root)
        # worst keypoint: squared displacement error over the window (m^2)
        rel = relative_displacement_error(self.robot_kp[:, -1], self.robot_kp[:, 0], self.ref_kp[:, -1],
                                          self.ref_kp[:, 0], axis=2).max(axis=1)
        drifted = (self.age >= self.config.displacement_steps) & (rel > self.config.displacement_threshold)
        done = fallen | drifted
        self.terminations["fall"] += int(np.count_nonzero(fallen))
        self.terminations["displacement"] += int(np.count_nonzero(drifted & ~fallen))
        self._start(np.nonzero(done)[0])
        return kp_err, q_err

    def _reindex(self):
        """Shift each reference clock to the nearby frame whose keypoint displacement
        over the window best matches the robot's own (ties keep the smaller shift)."""
        D, w = self.config.displacement_steps, self.config.phase_window
        shifts = np.array(sorted(range(-w, w + 1), key=lambda d: (abs(d), d)))
        ids = np.nonzero(self.age >= D)[0]
        if ids.size == 0:
            return
        T = self.n_frames[self.motion[ids]][:, None]
        cand = self.phase[ids][:, None] + shifts[None, :]
        m = self.motion[ids][:, None]
        ref_now, ref_prev = self.kp_table[m, cand % T], self.kp_table[m, (cand - D) % T]
        robot_disp = (self.body_kp[ids, -1] - self.body_kp[ids, 0])[:, None]
        err = relative_displacement_error(robot_disp, 0.0, ref_now, ref_prev, axis=(2, 3))
        # argmin returns the first minimum, i.e. the smallest shift among ties
        self.phase[ids] = (cand[np.arange(ids.size), np.argmin(err, axis=1)]) % T[:, 0]


def as_policy(student):
    """Adapt an estimator with ``predict`` to the collector's policy signature."""
    if hasattr(student, "predict"):
        return lambda X, runner: student.predict(X)
    return student


@dataclass
class CollectStats:
    steps: int = 0
    quality: float = float("nan")
    kp_err: list = field(default_factory=list)
    q_err: list = field(default_factory=list)


def collect(runner, student, buffer, horizon):
    """Run ``horizon`` student-driven steps; store teacher labels for every visited state.

    ``student`` is an estimator with ``predict`` or a callable ``(X, runner) -> actions``.
    """
    policy = as_policy(student)
    stats = CollectStats()
    E = runner.env.n_envs
    for _ in range(horizon):
        X = runner.inputs()
        a_student = np.asarray(policy(X, runner), dtype=float)
        if a_student.shape != (E, runner.env.n_joints):
            raise InputError(f"student produced actions of shape {a_student.shape}")
        a_teacher = runner.teacher_action()
        hist_dim = runner.tracker.history_dim
        buffer.add(X[:, :hist_dim], runner.motion.copy(), runner.obs, a_teacher)
        kp_err, q_err = runner.advance(a_student)
        stats.kp_err.append(kp_err)
        stats.q_err.append(q_err)
        stats.steps += 1
    if stats.steps:
        stats.quality = quality_from_errors(np.concatenate(stats.kp_err), np.concatenate(stats.q_err))
    return stats


def curriculum_schedule(library, progress, threshold=CURRICULUM_THRESHOLD):
    """Easy motions always; Hard motions once ``progress`` exceeds ``threshold`` (strict)."""
    if not 0.0 <= progress <= 1.0:
        raise InputError("progress must lie in [0, 1]")
    easy = library.easy()
    if progress > threshold or not easy:
        return list(range(len(library)))
    return easy


@dataclass
class DAggerResult:
    student: object
    curve: list
    config: DAggerConfig
    terminations: dict = field(default_factory=dict)
    episodes: int = 0

    def column(self, name):
        return np.array([row[name] for row in self.curve])

    def write_curve(self, path):
        cols = ["iteration", "mse", "loss", "recon", "kl", "quality", "progress", "n_active", "buffer"]
        formats.write_csv(path, cols, [[row[c] for c in cols] for row in self.curve], kind="loss_curve")


def dagger_train(config, library, student, env=None, teacher=teacher_oracle, randomization=None,
                 checkpoint_path=None, checkpoint_every=0, callback=None):
    """Iterate collect -> sample -> update. Deterministic given ``config.seed``."""
    if len(library) == 0:
        raise InputError("motion library is empty")
    if env is None:
        env = ToyEnv(library.model, config.n_envs, randomization=randomization, seed=config.seed)
    include_actions = getattr(student, "include_past_actions", True)
    runner = DAggerRunner(env, library, config, teacher, include_actions=include_actions)
    if hasattr(student, "initialize") and not _is_fitted(student):
        student.initialize()
    buffer = ExperienceBuffer(config.buffer_capacity, runner.tracker.history_dim, env.obs_dim, env.n_joints)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    window = deque(maxlen=config.progress_window)
    curve = []
    for it in range(1, config.iterations + 1):
        stats = collect(runner, student, buffer, config.horizon)
        if not math.isnan(stats.quality):
            window.append(stats.quality)
        progress = float(np.mean(window)) if window else 0.0
        if config.use_curriculum:
            runner.set_active(curriculum_schedule(library, progress, config.curriculum_threshold))
        if len(buffer) == 0:
            continue
        n_updates = config.updates_per_iteration or max(
            1, math.ceil(config.epochs_per_iteration * len(buffer) / config.batch_size))
        mse = loss = kl = recon = 0.0
        for u in range(n_updates):
            X, y = buffer.rows(buffer.sample(rng, config.batch_size), library.embeddings)
            if u == 0:
                mse = student.imitation_mse(X, y)
            try:
                loss, info = student.partial_fit(X, y)
            except NumericalError as exc:
                if checkpoint_path:
                    save_student(checkpoint_path, student)
                raise NumericalError(f"training diverged at iteration {it}: {exc}") from exc
            kl, recon = info["kl"], info["recon"]
        if not np.isfinite(mse):
            if checkpoint_path:
                save_student(checkpoint_path, student)
            raise NumericalError(f"non-finite imitation error at iteration {it}")
        row = {"iteration": it, "mse": mse, "loss": loss, "recon": recon, "kl": kl, "quality": stats.quality,
               "progress": progress, "n_active": len(runner.active), "buffer": len(buffer)}
        curve.append(row)
        if callback is not None:
            callback(row)
        if checkpoint_path and checkpoint_every and it % checkpoint_every == 0:
            save_student(checkpoint_path, student)
    return DAggerResult(student, curve, config, dict(runner.terminations), runner.episodes)


def _is_fitted(student):
    return hasattr(student, "params_") or hasattr(student, "tensors_")


# -- deployment rollouts --------------------------------------------------------

def make_env_factory(model, n_envs=1, seed=0, randomization=None, disturbances=True):
    rand = randomization or RandomizationConfig.nominal()

    def factory():
        return ToyEnv(model, n_envs, randomization=rand, seed=seed, disturbances=disturbances)

    return factory


def _student_dims(student):
    cfg = student.params_.config if hasattr(student, "params_") else None
    if cfg is not None:
        return cfg.history_len, cfg.include_past_actions
    raise InputError("interpolation requires a fitted CVAEStudent")


def _start_pose(env, motion):
    if motion is None:
        return env.reset()
    env.reset()
    q0 = np.clip(motion.joints[0], env.model.lower, env.model.upper)
    env.state.theta[:] = q0
    env.state.actuator[:] = q0
    env.state.theta_dot[:] = (motion.joints[1] - motion.joints[0]) * motion.fps
    from .sim import observe

    return observe(env.state)


def _base_commands(motion, horizon, n_envs):
    if motion is None:
        return np.zeros((horizon, n_envs, 3))
    idx = np.arange(horizon) % motion.n_frames
    return np.repeat(motion.root_vel[idx][:, None, :], n_envs, axis=1)


def rollout(policy_fn, env_factory, horizon, history_len, stride=5, include_actions=True, motion=None):
    """Closed-loop rollout; ``policy_fn(hist_flat, obs, step) -> actions``.

    Returns a dict of per-step arrays (actions, observations, joints, tilt gravity).
    """
    env = env_factory()
    obs = _start_pose(env, motion)
    tracker = HistoryTracker(env.n_envs, env.obs_dim, env.n_joints, history_len, stride, include_actions)
    tracker.reset(np.arange(env.n_envs), obs, env.state.theta.copy())
    cmds = _base_commands(motion, horizon, env.n_envs)
    actions, observations, joints, gravity = [], [], [], []
    for k in range(horizon):
        a = np.asarray(policy_fn(tracker.flat(), obs, k), dtype=float)
        actions.append(a)
        observations.append(obs)
        obs, _ = env.step(a, cmds[k])
        a_exec = np.clip(a, env.model.lower, env.model.upper)
        tracker.push(obs, a_exec)
        joints.append(env.state.theta.copy())
        gravity.append(projected_gravity(env.state.tilt))
    return {"actions": np.array(actions), "obs": np.array(observations), "joints": np.array(joints),
            "gravity": np.array(gravity)}


def student_rollout(student, text, env_factory, horizon, stride=5, motion=None, encoder=None):
    """Deploy a student (mean-latent inference) under one fixed text command."""
    emb = (encoder or default_encoder()).embed(text)
    hl, inc = _history_spec(student)

    def policy(hist, obs, k):
        X = np.hstack([hist, np.broadcast_to(emb, (hist.shape[0], emb.size)), obs])
        return student.predict(X)

    return rollout(policy, env_factory, horizon, hl, stride, inc, motion)


def _history_spec(student):
    if hasattr(student, "params_"):
        return student.params_.config.history_len, student.params_.config.include_past_actions
    return student.history_len, getattr(student, "include_past_actions", True)


def interpolate_rollout(student, text_a, text_b, alpha, env_factory, horizon, stride=5, motion=None, encoder=None):
    """Roll out actions decoded from ``(1 - alpha) * mu_a + alpha * mu_b``.

    ``alpha`` is a scalar or a per-step schedule of length ``horizon``.
    """
    alphas = np.broadcast_to(np.asarray(alpha, dtype=float), (horizon,))
    if np.any((alphas < 0) | (alphas > 1)):
        raise InputError("alpha must lie in [0, 1]")
    hl, inc = _student_dims(student)
    enc = encoder or default_encoder()
    emb_a, emb_b = enc.embed(text_a), enc.embed(text_b)
    params = student.params_

    def policy(hist, obs, k):
        mu_a = encode(params, hist, np.broadcast_to(emb_a, (hist.shape[0], emb_a.size))).mu
        mu_b = encode(params, hist, np.broadcast_to(emb_b, (hist.shape[0], emb_b.size))).mu
        z = (1.0 - alphas[k]) * mu_a + alphas[k] * mu_b
        return decode(params, z, obs)

    return rollout(policy, env_factory, horizon, hl, stride, inc, motion)


def alpha_sweep_gap(student, text_a, text_b, step, env_factory, horizon, **kw):
    """Largest per-step action difference between rollouts at adjacent alphas."""
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise InputError("alpha step must divide 1")
    alphas = np.arange(n + 1) / n
    runs = [interpolate_rollout(student, text_a, text_b, a, env_factory, horizon, **kw)["actions"] for a in alphas]
    gaps = [np.max(np.linalg.norm(b - a, axis=-1)) for a, b in zip(runs[:-1], runs[1:])]
    return float(np.max(gaps))


def alpha_decode_gap(student, text_a, text_b, step, env_factory, horizon, stride=5, motion=None, encoder=None):
    """Open-loop counterpart of :func:`alpha_sweep_gap`.

    Every alpha is decoded on the same inputs, those seen by the alpha = 0
    rollout, so the result measures the policy's continuity in alpha without the
    closed-loop sensitivity of the plant.
    """
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise InputError("alpha step must divide 1")
    alphas = np.arange(n + 1) / n
    hl, inc = _student_dims(student)
    enc = encoder or default_encoder()
    emb_a, emb_b = enc.embed(text_a), enc.embed(text_b)
    params = student.params_
    worst = [0.0]

    def policy(hist, obs, k):
        mu_a = encode(params, hist, np.broadcast_to(emb_a, (hist.shape[0], emb_a.size))).mu
        mu_b = encode(params, hist, np.broadcast_to(emb_b, (hist.shape[0], emb_b.size))).mu
        acts = np.array([decode(params, (1.0 - a) * mu_a + a * mu_b, obs) for a in alphas])
        worst[0] = max(worst[0], float(np.max(np.linalg.norm(np.diff(acts, axis=0), axis=-1))))
        return acts[0]

    rollout(policy, env_factory, horizon, hl, stride, inc, motion)
    return worst[0]


def teacher_rollout(motion, model, env_factory, horizon):
    """Privileged-teacher deployment on one motion (used when no student is given)."""
    env = env_factory()
    _start_pose(env, motion)
    cmds = _base_commands(motion, horizon, env.n_envs)
    joints, actions, gravity = [], [], []
    for k in range(horizon):
        ref = TeacherReference(motion.joints[k % motion.n_frames], motion.joints[(k + 1) % motion.n_frames])
        a = teacher_oracle(env.state, ref, env.params, model.lower, model.upper)
        env.step(a, cmds[k])
        actions.append(a)
        joints.append(env.state.theta.copy())
        gravity.append(projected_gravity(env.state.tilt))
    return {"actions": np.array(actions), "joints": np.array(joints), "gravity": np.array(gravity)}


def evaluate_student(student, library, env_factory, horizon, stride=5):
    """Per-motion motion_quality and stability of a deployed student.

    The robot starts on the first reference frame and runs open-ended; quality
    compares each step with the reference frame at the same time index.
    """
    out = {}
    for i, m in enumerate(library.motions):
        run = student_rollout(student, m.caption, env_factory, horizon, stride, motion=m, encoder=library.encoder)
        idx = np.arange(1, horizon + 1) % m.n_frames
        q = run["joints"]  # (T, E, n)
        T, E, n = q.shape
        kp, _, _, _ = batch_keypoints(library.model, q.reshape(T * E, n))
        kp = kp.reshape(T, E, -1, 3)
        ref_kp = library.keypoints[i][idx][:, None]
        kp_err = np.sum((kp - ref_kp) ** 2, axis=(2, 3)).ravel()
        q_err = np.sum((q - m.joints[idx][:, None]) ** 2, axis=2).ravel()
        stab = float(np.mean([stability(run["gravity"][:, e], horizon) for e in range(E)]))
        out[m.name] = {"quality": quality_from_errors(kp_err, q_err), "stability": stab}
    return out


def script_rollout(script, library, env_factory, student=None, stride=5):
    """Execute a parsed command script at 50 Hz; returns one frame dict per control step.

    The text embedding is recomputed only when the command changes. Without a
    student the privileged teacher tracks the motion whose caption is nearest
    to each command.
    """
    env = env_factory()
    obs = env.reset()
    model = library.model
    frames = []
    hl, inc = _history_spec(student) if student is not None else (1, True)
    tracker = HistoryTracker(env.n_envs, env.obs_dim, env.n_joints, hl, stride, inc)
    tracker.reset(np.arange(env.n_envs), obs, env.state.theta.copy())
    step = 0
    last_text, emb = None, None
    for cmd in script:
        n_steps = int(round(cmd.duration / DT))
        if cmd.text != last_text:
            emb = library.encoder.embed(cmd.text)
            last_text = cmd.text
        mi = library.nearest(cmd.text)
        motion = library[mi]
        for k in range(n_steps):
            ref = TeacherReference(motion.joints[k % motion.n_frames], motion.joints[(k + 1) % motion.n_frames])
            if student is None:
                a = teacher_oracle(env.state, ref, env.params, model.lower, model.upper)
            else:
                X = np.hstack([tracker.flat(), np.broadcast_to(emb, (env.n_envs, emb.size)), obs])
                a = student.predict(X)
            cmd_vel = np.broadcast_to(motion.root_vel[k % motion.n_frames], (env.n_envs, 3))
            obs, fallen = env.step(a, cmd_vel)
            tracker.push(obs, np.clip(a, model.lower, model.upper))
            kp, _, _, _ = batch_keypoints(model, env.state.theta[:1])
            frames.append({"step": step, "time": round((step + 1) * DT, 10), "command": cmd.text,
                           "motion": motion.name, "action": np.asarray(a)[0].tolist(),
                           "joints": env.state.theta[0].tolist(), "keypoints": kp[0].tolist(),
                           "ref_joints": ref.joint_next.tolist(),
                           "ref_keypoints": library.keypoints[mi][(k + 1) % motion.n_frames].tolist(),
                           "projected_gravity": projected_gravity(env.state.tilt[:1])[0].tolist(),
                           "fallen": bool(fallen[0])})
            step += 1
    return frames


def frames_from_run(run, model, env_index=0, **extra):
    """Per-step JSON-ready frames for one env of a :func:`rollout` result."""
    q = run["joints"][:, env_index]
    kp, _, _, _ = batch_keypoints(model, q)
    frames = []
    for k in range(q.shape[0]):
        fr = {"step": k, "time": round((k + 1) * DT, 10), "action": run["actions"][k, env_index].tolist(),
              "joints": q[k].tolist(), "keypoints": kp[k].tolist(),
              "projected_gravity": run["gravity"][k, env_index].tolist()}
        fr.update({key: (val[k] if isinstance(val, (list, np.ndarray)) else val) for key, val in extra.items()})
        frames.append(fr)
    return frames


# -- latent analysis ------------------------------------------------------------

@dataclass
class LatentDump:
    commands: list
    steps: np.ndarray
    latents: np.ndarray
    projection: np.ndarray
    explained_variance: float
    silhouette: float
    separation: float

    def write(self, path):
        header = ["command", "step"] + [f"mu_{i}" for i in range(self.latents.shape[1])] + ["pc_0", "pc_1"]
        rows = [[c, int(s)] + [repr(float(v)) for v in mu] + [repr(float(p)) for p in pc]
                for c, s, mu, pc in zip(self.commands, self.steps, self.latents, self.projection)]
        formats.write_csv(path, header, rows, kind="latents")

    def summary(self):
        # JSON has no NaN/inf: undefined scores (a single command) become null
        def finite(v):
            return float(v) if np.isfinite(v) else None

        return {"explained_variance": self.explained_variance, "silhouette": finite(self.silhouette),
                "separation": finite(self.separation), "n_rows": int(self.latents.shape[0])}


def centroid_separation(latents, labels):
    """Minimum inter-centroid distance divided by mean within-command spread."""
    labels = np.asarray(labels)
    groups = sorted(set(labels.tolist()))
    cents = np.array([latents[labels == g].mean(axis=0) for g in groups])
    spread = np.mean([np.mean(np.linalg.norm(latents[labels == g] - c, axis=1)) for g, c in zip(groups, cents)])
    d = [np.linalg.norm(a - b) for i, a in enumerate(cents) for b in cents[i + 1:]]
    if not d:
        return float("inf")
    return float(min(d) / max(spread, 1e-300))


def dump_latents(student, commands, env_factory, horizon, stride=5, encoder=None):
    """Latent means along a rollout per command, plus a 2-D PCA projection."""
    if not commands or horizon < 1:
        raise InputError("need at least one command and a positive horizon")
    hl, inc = _student_dims(student)
    enc = encoder or default_encoder()
    params = student.params_
    rows_c, rows_s, rows_mu = [], [], []
    for text in commands:
        emb = enc.embed(text)
        mus = []

        def policy(hist, obs, k, emb=emb, mus=mus):
            mu = encode(params, hist, np.broadcast_to(emb, (hist.shape[0], emb.size))).mu
            mus.append(mu)
            return decode(params, mu, obs)

        rollout(policy, env_factory, horizon, hl, stride, inc)
        for k, mu in enumerate(mus):
            for e in range(mu.shape[0]):
                rows_c.append(text)
                rows_s.append(k)
                rows_mu.append(mu[e])
    latents = np.array(rows_mu)
    n_comp = min(2, latents.shape[0], latents.shape[1])
    pca = PCA(n_components=n_comp, svd_solver="full")
    proj = pca.fit_transform(latents)
    if n_comp < 2:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 2 - n_comp))])
    total_var = float(np.sum(np.var(latents, axis=0)))
    explained = float(np.sum(pca.explained_variance_ratio_)) if total_var > 0 else 1.0
    labels = np.array(rows_c)
    n_groups = len(set(commands))
    sil = float(silhouette_score(latents, labels)) if 1 < n_groups < len(labels) else float("nan")
    return LatentDump(rows_c, np.array(rows_s), latents, proj, min(max(explained, 0.0), 1.0), sil,
                      centroid_separation(latents, labels))


__all__ = [
    "Motion", "MotionLibrary", "toy_motion", "toy_motion_library", "ExperienceBuffer",
    "relative_displacement_error", "DAggerConfig", "DAggerRunner", "HistoryTracker", "collect",
    "curriculum_schedule", "dagger_train", "DAggerResult", "interpolate_rollout", "alpha_sweep_gap",
    "alpha_decode_gap",
    "student_rollout", "teacher_rollout", "evaluate_student", "script_rollout", "dump_latents",
    "LatentDump", "benchmark_student", "make_env_factory", "world_keypoints", "frames_from_run", "centroid_separation",
]
