from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humanoid_wbc import formats
from humanoid_wbc._validation import InputError, NumericalError
from humanoid_wbc.cvae import CVAEStudent, load_student
from humanoid_wbc.distill import (
    DAggerConfig,
    DAggerRunner,
    ExperienceBuffer,
    HistoryTracker,
    Motion,
    MotionLibrary,
    alpha_decode_gap,
    alpha_sweep_gap,
    benchmark_student,
    collect,
    curriculum_schedule,
    dagger_train,
    dump_latents,
    evaluate_student,
    interpolate_rollout,
    make_env_factory,
    relative_displacement_error,
    script_rollout,
    student_rollout,
    toy_motion,
    toy_motion_library,
    world_keypoints,
)
from humanoid_wbc.metrics import Difficulty
from humanoid_wbc.model import batch_keypoints, serial_chain, toy_humanoid
from humanoid_wbc.sim import DT, RandomizationConfig, ToyEnv
from humanoid_wbc.textenc import Command

OBS_DIM, N_JOINTS = 25, 8


@pytest.fixture(scope="module")
def model():
    return toy_humanoid()


@pytest.fixture(scope="module")
def library(model):
    return toy_motion_library(model)


@pytest.fixture(scope="module")
def small_lib(library):
    return library.subset(["wave", "walk"])


def tiny_config(**kw):
    base = dict(n_envs=4, iterations=5, horizon=2, batch_size=32, learning_rate=1e-3, updates_per_iteration=1,
                buffer_capacity=256, history_len=3, history_stride=2, phase_window=2)
    base.update(kw)
    return DAggerConfig(**base)


def tiny_student(config, seed=0, **kw):
    args = dict(obs_dim=OBS_DIM, action_dim=N_JOINTS, history_len=config.history_len, latent_dim=4,
                encoder_hidden=(16,), decoder_hidden=(16,), learning_rate=config.learning_rate, random_state=seed)
    args.update(kw)
    return CVAEStudent(**args)


def quiet_env(model, n=4, seed=0):
    return ToyEnv(model, n, randomization=RandomizationConfig.nominal(), seed=seed, disturbances=False)


@pytest.fixture(scope="module")
def trained(model, small_lib):
    cfg = tiny_config(iterations=30)
    student = tiny_student(cfg)
    dagger_train(cfg, small_lib, student)
    return student


# -- motions and library ----------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(joints=np.zeros((1, 8)), root_vel=np.zeros((1, 3))),
        dict(joints=np.zeros((5, 8)), root_vel=np.zeros((4, 3))),
        dict(joints=np.zeros(5), root_vel=np.zeros((5, 3))),
        dict(joints=np.zeros((5, 8)), root_vel=np.zeros((5, 3)), caption="  "),
    ],
)
def test_motion_validation(kw):
    args = dict(name="m", caption="a person stands")
    args.update(kw)
    with pytest.raises(InputError):
        Motion(**args)


def test_root_positions_integrate_velocity():
    vel = np.tile([1.0, -0.5, 0.2], (5, 1))
    m = Motion("m", "c", np.zeros((5, 2)), vel, fps=10.0)
    np.testing.assert_allclose(m.root_positions()[-1], 4 * np.array([1.0, -0.5, 0.2]) / 10.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_world_keypoints_is_rigid(yaw, x, y, seed):
    kp = np.random.default_rng(seed).normal(size=(5, 3))
    w = world_keypoints(kp, np.array([x, y, yaw]))
    d0 = np.linalg.norm(kp[:, None] - kp[None], axis=-1)
    d1 = np.linalg.norm(w[:, None] - w[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-12)
    np.testing.assert_array_equal(w[:, 2], kp[:, 2])


def test_world_keypoints_identity_at_origin():
    kp = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(world_keypoints(kp, np.zeros(3)), kp)


@pytest.mark.parametrize("kind", ["stand", "wave", "raise_arms", "walk", "shuffle", "run"])
def test_toy_motions_loop_and_respect_limits(model, kind):
    m = toy_motion(model, kind)
    assert np.all(m.joints >= model.lower) and np.all(m.joints <= model.upper)
    # the frame after the last one is the first: the step across the seam matches interior steps
    steps = np.abs(np.diff(np.vstack([m.joints, m.joints[:1]]), axis=0))
    assert steps[-1].max() <= steps.max() + 1e-12


def test_unknown_toy_motion(model):
    with pytest.raises(InputError):
        toy_motion(model, "moonwalk")


def test_labels_match_direct_speed_oracle(library):
    for m, kp, lab in zip(library.motions, library.keypoints, library.labels):
        root = m.root_positions()
        c, s = np.cos(root[:, 2])[:, None], np.sin(root[:, 2])[:, None]
        world = np.stack([c * kp[..., 0] - s * kp[..., 1] + root[:, :1], s * kp[..., 0] + c * kp[..., 1] + root[:, 1:2],
                          kp[..., 2]], axis=-1)
        peak = max(np.linalg.norm(world[t + 1] - world[t], axis=1).max() * m.fps for t in range(m.n_frames - 1))
        assert lab == (Difficulty.HARD if peak > 0.8 else Difficulty.EASY)


def test_toy_library_has_both_difficulties(library):
    assert [library.motions[i].name for i in library.easy()] == ["stand", "wave", "raise_arms"]
    assert [library.motions[i].name for i in library.hard()] == ["walk", "shuffle", "run"]


@pytest.mark.parametrize("text,name", [("a man waves his right hand", "wave"), ("walks forward", "walk"),
                                       ("run forward briskly", "run")])
def test_nearest_caption(library, text, name):
    assert library[library.nearest(text)].name == name


def test_library_round_trip(tmp_path, model, library):
    library.save(tmp_path / "lib.json")
    back = MotionLibrary.load(tmp_path / "lib.json", model)
    assert [m.name for m in back.motions] == [m.name for m in library.motions]
    assert back.labels == library.labels
    np.testing.assert_array_equal(back.embeddings, library.embeddings)


def test_library_rejects_tampered_labels(tmp_path, model, library):
    library.save(tmp_path / "lib.json")
    data = formats.read_json(tmp_path / "lib.json", kind="motion_library")
    data["labels"] = ["Hard"] * len(data["labels"])
    formats.write_json(tmp_path / "bad.json", data, kind="motion_library")
    with pytest.raises(InputError):
        MotionLibrary.load(tmp_path / "bad.json", model)


def test_library_rejects_bad_motions(model):
    m = toy_motion(model, "wave")
    with pytest.raises(InputError):
        MotionLibrary(model, [])
    with pytest.raises(InputError):
        MotionLibrary(model, [m, m])
    with pytest.raises(InputError):
        MotionLibrary(serial_chain([0.3, 0.3, 0.3]), [m])


# -- buffer -----------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(0, 20), max_size=10))
def test_buffer_is_fifo_against_deque(capacity, sizes):
    buf = ExperienceBuffer(capacity, 2, 1, 1)
    oracle = deque(maxlen=capacity)
    counter = 0
    for m in sizes:
        ids = np.arange(counter, counter + m)
        counter += m
        buf.add(np.column_stack([ids, -ids]).astype(float), ids % 3, ids[:, None].astype(float),
                ids[:, None].astype(float))
        oracle.extend(ids.tolist())
        assert len(buf) == len(oracle) <= capacity
        X, y = buf.rows(np.arange(len(buf)), np.eye(3))
        assert y[:, 0].tolist() == list(oracle)
        np.testing.assert_array_equal(X[:, 2:5], np.eye(3)[np.array(list(oracle), dtype=int) % 3])
    assert buf.inserted == counter


def test_buffer_errors():
    with pytest.raises(InputError):
        ExperienceBuffer(0, 1, 1, 1)
    buf = ExperienceBuffer(4, 1, 1, 1)
    with pytest.raises(InputError):
        buf.sample(np.random.default_rng(0), 2)
    with pytest.raises(InputError):
        buf.add(np.zeros((2, 1)), [0], np.zeros((2, 1)), np.zeros((2, 1)))


# -- relative displacement -------------------------------------------------------


def test_relative_displacement_examples():
    p = np.array([1.0, 2.0, 3.0])
    assert relative_displacement_error(p, p, p, p) == 0.0
    assert relative_displacement_error([1, 0, 0], [0, 0, 0], [0, 1, 0], [0, 0, 0]) == 2.0
    ref_t, ref_prev = np.array([0.5, 0.25, 0.0]), np.array([0.125, 0.375, 0.75])
    off = np.array([1.0, 2.0, 3.0])
    assert relative_displacement_error(ref_t + off, ref_prev + off, ref_t, ref_prev) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100), st.floats(-100, 100))
def test_relative_displacement_offset_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    p_t, p_prev, r_t, r_prev = rng.normal(size=(4, 6, 3))
    off_p, off_r = a * rng.normal(size=3), b * rng.normal(size=3)
    # dyadic offsets keep the cancellation exact in floating point
    off_p, off_r = np.round(off_p * 4) / 4, np.round(off_r * 4) / 4
    p_t, p_prev, r_t, r_prev = (np.round(x * 2**20) / 2**20 for x in (p_t, p_prev, r_t, r_prev))
    base = relative_displacement_error(p_t, p_prev, r_t, r_prev)
    assert relative_displacement_error(p_t + off_p, p_prev + off_p, r_t, r_prev) == base
    assert relative_displacement_error(p_t, p_prev, r_t + off_r, r_prev + off_r) == base
    assert base >= 0.0


# -- configuration and curriculum --------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(n_envs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(displacement_dt=-0.1),
     dict(curriculum_threshold=1.5), dict(kl_weight=-1.0), dict(phase_window=-1), dict(horizon=-1)],
)
def test_config_validation(kw):
    with pytest.raises(InputError):
        DAggerConfig(**kw)


def test_config_defaults_and_round_trip():
    cfg = DAggerConfig()
    assert (cfg.batch_size, cfg.buffer_capacity, cfg.learning_rate) == (1024 * 64, 1024 * 512, 1e-5)
    assert cfg.displacement_steps == 5 and cfg.curriculum_threshold == 0.8
    assert DAggerConfig.from_dict(DAggerConfig.benchmark().to_dict()) == DAggerConfig.benchmark()
    with pytest.raises(InputError):
        DAggerConfig.from_dict({"bogus": 1})


def test_curriculum_examples(library):
    easy = library.easy()
    assert curriculum_schedule(library, 0.0) == easy
    assert curriculum_schedule(library, 1.0) == list(range(len(library)))
    assert curriculum_schedule(library, 0.79) == easy
    assert curriculum_schedule(library, 0.81) == list(range(len(library)))
    with pytest.raises(InputError):
        curriculum_schedule(library, 1.2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_curriculum_is_monotone(library, a, b):
    lo, hi = sorted((a, b))
    assert set(curriculum_schedule(library, lo)) <= set(curriculum_schedule(library, hi))


# -- history ------------------------------------------------------------------------


def test_history_is_oldest_first_with_stride():
    tr = HistoryTracker(1, 1, 1, history_len=3, stride=2)
    tr.reset([0], np.array([[0.0]]), np.array([[0.0]]))
    for k in range(1, 7):
        tr.push(np.array([[float(k)]]), np.array([[-float(k)]]))
    # frames at steps 2, 4, 6; newest is the current step
    np.testing.assert_array_equal(tr.flat(), [[2.0, -2.0, 4.0, -4.0, 6.0, -6.0]])


def test_history_without_actions():
    tr = HistoryTracker(2, 2, 3, history_len=2, stride=1, include_actions=False)
    assert tr.history_dim == 4
    tr.reset([0, 1], np.ones((2, 2)), np.zeros((2, 3)))
    assert tr.flat().shape == (2, 4)


# -- collection ---------------------------------------------------------------------


def runner_for(model, library, n=4, **kw):
    cfg = tiny_config(n_envs=n, **kw)
    return DAggerRunner(quiet_env(model, n), library, cfg), cfg


def teacher_policy(X, runner):
    return runner.teacher_action()


def new_buffer(runner, cap=1000):
    return ExperienceBuffer(cap, runner.tracker.history_dim, runner.env.obs_dim, runner.env.n_joints)


def test_collect_horizon_zero_leaves_buffer(model, small_lib):
    r, _ = runner_for(model, small_lib)
    buf = new_buffer(r)
    collect(r, teacher_policy, buf, 0)
    assert len(buf) == 0


def test_collect_counts(model, small_lib):
    r, _ = runner_for(model, small_lib)
    buf = new_buffer(r)
    collect(r, teacher_policy, buf, 25)
    assert len(buf) == 100 == buf.inserted


def test_student_equal_teacher_labels_equal_actions(model, small_lib):
    r, _ = runner_for(model, small_lib)
    executed = []

    def policy(X, runner):
        a = runner.teacher_action()
        executed.append(a)
        return a

    buf = new_buffer(r)
    collect(r, policy, buf, 10)
    X, y = buf.rows(np.arange(len(buf)), small_lib.embeddings)
    np.testing.assert_array_equal(y, np.concatenate(executed))


def test_collect_rejects_bad_action_shape(model, small_lib):
    r, _ = runner_for(model, small_lib)
    with pytest.raises(InputError):
        collect(r, lambda X, runner: np.zeros((4, 3)), new_buffer(r), 1)


def test_runner_rejects_mismatched_env(model, small_lib):
    env = ToyEnv(serial_chain([0.3, 0.3, 0.3]), 2, randomization=RandomizationConfig.nominal())
    with pytest.raises(InputError):
        DAggerRunner(env, small_lib, tiny_config())


def test_teacher_tracking_never_trips_displacement(model, small_lib):
    r, _ = runner_for(model, small_lib)
    r.set_active([0, 1])
    collect(r, teacher_policy, new_buffer(r, 10), 200)
    assert r.terminations == {"fall": 0, "displacement": 0}


def test_frozen_robot_on_walk_trips_displacement(model, small_lib):
    r, _ = runner_for(model, small_lib, phase_window=0)
    r.set_active([small_lib.index("walk")])
    r._start(np.arange(4))
    frozen = r.env.state.theta.copy()
    r.env.state.theta_dot[:] = 0.0
    collect(r, lambda X, runner: frozen, new_buffer(r, 10), 30)
    assert r.terminations["displacement"] > 0


@pytest.mark.parametrize("shift", [-2, -1, 1, 2])
def test_reindex_recovers_frame_shift(model, small_lib, shift):
    r, cfg = runner_for(model, small_lib, phase_window=2)
    r.set_active([small_lib.index("wave")])
    r._start(np.arange(4))
    D = cfg.displacement_steps
    r.age[:] = D
    phase = r.phase.copy()
    T = r.n_frames[r.motion]
    for k in range(D + 1):
        r.body_kp[:, k] = r.kp_table[r.motion, (phase + shift - D + k) % T]
    r._reindex()
    np.testing.assert_array_equal(r.phase, (phase + shift) % T)


def test_reindex_keeps_clock_when_on_reference(model, small_lib):
    r, cfg = runner_for(model, small_lib, phase_window=3)
    r.set_active([small_lib.index("stand")] if "stand" in [m.name for m in small_lib.motions] else [0])
    r._start(np.arange(4))
    D = cfg.displacement_steps
    r.age[:] = D
    phase = r.phase.copy()
    T = r.n_frames[r.motion]
    for k in range(D + 1):
        r.body_kp[:, k] = r.kp_table[r.motion, (phase - D + k) % T]
    r._reindex()
    np.testing.assert_array_equal(r.phase, phase)


# -- training ---------------------------------------------------------------------------


def zero_teacher(state, reference, params, lower=None, upper=None):
    return np.zeros_like(state.theta)


def test_zero_teacher_is_learned(model, small_lib):
    # default schedule: one epoch over the buffer per iteration
    cfg = tiny_config(iterations=200, horizon=1, use_curriculum=False, learning_rate=1e-2, updates_per_iteration=0)
    res = dagger_train(cfg, small_lib, tiny_student(cfg), teacher=zero_teacher)
    assert np.all(res.column("recon")[-20:] < 1e-4)
    assert np.all(res.column("mse")[-20:] < 1e-4)


def test_training_is_bit_reproducible(small_lib):
    cfg = tiny_config(iterations=8)
    a = dagger_train(cfg, small_lib, tiny_student(cfg, seed=3))
    b = dagger_train(cfg, small_lib, tiny_student(cfg, seed=3))
    assert a.curve == b.curve
    for k in a.student.params_.tensors:
        np.testing.assert_array_equal(a.student.params_.tensors[k], b.student.params_.tensors[k])


def test_curve_rows_and_csv(tmp_path, small_lib):
    cfg = tiny_config(iterations=4)
    res = dagger_train(cfg, small_lib, tiny_student(cfg))
    assert [row["iteration"] for row in res.curve] == [1, 2, 3, 4]
    assert all(row["buffer"] <= cfg.buffer_capacity for row in res.curve)
    res.write_curve(tmp_path / "curve.csv")
    header, rows = formats.read_csv(tmp_path / "curve.csv", kind="loss_curve")
    assert header[:3] == ["iteration", "mse", "loss"] and len(rows) == 4


def test_divergence_saves_last_finite_state(tmp_path, small_lib):
    def huge_teacher(state, reference, params, lower=None, upper=None):
        # finite labels whose squared error overflows
        return np.full_like(state.theta, 1e200)

    cfg = tiny_config(iterations=3)
    student = tiny_student(cfg)
    student.initialize()
    before = {k: v.copy() for k, v in student.params_.tensors.items()}
    path = tmp_path / "ckpt.json"
    with pytest.raises(NumericalError), np.errstate(over="ignore", invalid="ignore"):
        dagger_train(cfg, small_lib, student, teacher=huge_teacher, checkpoint_path=path)
    saved = load_student(path)
    for k, v in before.items():
        np.testing.assert_array_equal(saved.params_.tensors[k], v)


def test_periodic_checkpoint(tmp_path, small_lib):
    cfg = tiny_config(iterations=4)
    student = tiny_student(cfg)
    dagger_train(cfg, small_lib, student, checkpoint_path=tmp_path / "c.json", checkpoint_every=2)
    back = load_student(tmp_path / "c.json")
    np.testing.assert_array_equal(back.predict(np.zeros((1, back.params_.config.input_dim))),
                                  student.predict(np.zeros((1, student.params_.config.input_dim))))


def test_benchmark_students_match_budget():
    cfg = DAggerConfig.benchmark()
    cvae = benchmark_student("cvae", OBS_DIM, N_JOINTS, cfg)
    mlp = benchmark_student("mlp", OBS_DIM, N_JOINTS, cfg)
    cvae.initialize()
    mlp.initialize()
    n_cvae = sum(v.size for v in cvae.params_.tensors.values())
    n_mlp = sum(v.size for v in mlp.tensors_.values())
    assert abs(n_mlp - n_cvae) / n_cvae < 0.02
    with pytest.raises(InputError):
        benchmark_student("rnn", OBS_DIM, N_JOINTS, cfg)


# -- deployment ------------------------------------------------------------------------


def factory(model):
    return make_env_factory(model, n_envs=2, seed=4)


@pytest.mark.parametrize("alpha,text", [(0.0, "a man waves his right hand"), (1.0, "a person walks forward")])
def test_interpolation_endpoints(model, trained, alpha, text):
    a, b = "a man waves his right hand", "a person walks forward"
    run = interpolate_rollout(trained, a, b, alpha, factory(model), 30)
    pure = student_rollout(trained, text, factory(model), 30)
    np.testing.assert_array_equal(run["actions"], pure["actions"])
    np.testing.assert_array_equal(run["joints"], pure["joints"])


def test_interpolation_schedule_and_errors(model, trained):
    sched = np.linspace(0, 1, 20)
    run = interpolate_rollout(trained, "wave", "walk", sched, factory(model), 20)
    assert run["actions"].shape == (20, 2, N_JOINTS)
    with pytest.raises(InputError):
        interpolate_rollout(trained, "wave", "walk", 1.5, factory(model), 5)
    with pytest.raises(InputError):
        alpha_sweep_gap(trained, "wave", "walk", 0.3, factory(model), 5)


def test_alpha_sweep_gap_is_finite(model, trained):
    gap = alpha_sweep_gap(trained, "a man waves his right hand", "a person walks forward", 0.5, factory(model), 10)
    assert np.isfinite(gap) and gap >= 0


def test_alpha_decode_gap_shrinks_with_step(model, trained):
    a, b = "a man waves his right hand", "a person walks forward"
    gaps = [alpha_decode_gap(trained, a, b, step, factory(model), 10) for step in (0.5, 0.25, 0.125)]
    assert np.all(np.isfinite(gaps))
    assert gaps[0] > gaps[1] > gaps[2] > 0
    with pytest.raises(InputError):
        alpha_decode_gap(trained, a, b, 0.3, factory(model), 5)


def test_dump_latents(tmp_path, model, trained):
    cmds = ["a man waves his right hand", "a person walks forward"]
    a = dump_latents(trained, cmds, factory(model), 15)
    b = dump_latents(trained, cmds, factory(model), 15)
    np.testing.assert_array_equal(a.latents, b.latents)
    assert a.latents.shape == (2 * 15 * 2, 4)
    assert 0.0 <= a.explained_variance <= 1.0
    assert -1.0 <= a.silhouette <= 1.0
    a.write(tmp_path / "lat.csv")
    header, rows = formats.read_csv(tmp_path / "lat.csv", kind="latents")
    assert header[:2] == ["command", "step"] and len(rows) == 60
    np.testing.assert_array_equal(np.array([r[2:6] for r in rows], dtype=float), a.latents)
    with pytest.raises(InputError):
        dump_latents(trained, [], factory(model), 5)


def test_evaluate_student_ranges(model, small_lib, trained):
    out = evaluate_student(trained, small_lib, factory(model), 20)
    assert set(out) == {"wave", "walk"}
    for v in out.values():
        assert 0.0 <= v["quality"] <= 1.0 and 0.0 <= v["stability"] <= 1.0


def test_script_rollout_teacher(model, library):
    script = [Command("wave your right hand", 0.5), Command("walk forward", 0.3)]
    frames = script_rollout(script, library, factory(model))
    assert len(frames) == 40
    assert [f["motion"] for f in frames[:25]] == ["wave"] * 25
    assert frames[-1]["motion"] == "walk"
    np.testing.assert_allclose([f["time"] for f in frames], DT * np.arange(1, 41))
    assert not any(f["fallen"] for f in frames)


def test_script_embeds_only_on_change(model, library, trained):
    calls = []

    class Spy:
        def __init__(self, enc):
            self.enc = enc

        def embed(self, text):
            calls.append(text)
            return self.enc.embed(text)

    lib = MotionLibrary(model, library.motions, encoder=library.encoder)
    lib.encoder = Spy(library.encoder)
    script = [Command("walk forward", 0.1), Command("walk forward", 0.1), Command("wave", 0.1)]
    frames = script_rollout(script, lib, factory(model), student=trained)
    assert len(frames) == 15
    # one student embedding per change plus one nearest-caption lookup per command
    assert calls.count("walk forward") == 1 + 2
    assert calls.count("wave") == 1 + 1


def test_keypoint_table_matches_fk(model, small_lib):
    r, _ = runner_for(model, small_lib)
    for j, m in enumerate(small_lib.motions):
        kp, _, _, _ = batch_keypoints(model, m.joints)
        np.testing.assert_array_equal(r.kp_table[j, :m.n_frames], kp)
