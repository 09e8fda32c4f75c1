import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humanoid_wbc._validation import InputError
from humanoid_wbc.metrics import (
    TERM_NAMES,
    TRACKING_TERMS,
    Difficulty,
    MetricWeights,
    ReferenceFrame,
    RobotState,
    classify_motion,
    motion_quality,
    reward_terms,
    stability,
    tilt_angle,
)
from humanoid_wbc.model import keypoint_positions, toy_humanoid


def rest_pair(model=None):
    model = model or toy_humanoid()
    n, K = model.n_joints, model.n_keypoints
    q = model.default_angles.copy()
    kp = keypoint_positions(model, q)
    z = np.zeros(n)
    state = RobotState(
        root_lin_vel=np.zeros(3), root_ang_vel=np.zeros(3), projected_gravity=[0, 0, -1.0],
        joint_pos=q, joint_vel=z, joint_acc=z, joint_torque=z, action=q, prev_action=q,
        keypoints=kp, feet_force=np.zeros(2), feet_vel_xy=np.zeros((2, 2)),
    )
    ref = ReferenceFrame(kp.copy(), q.copy(), 0.0, 0.0)
    assert kp.shape == (K, 3)
    return state, ref


def with_changes(state, **kw):
    d = {k: np.asarray(v) for k, v in state.to_dict().items()}
    d.update(kw)
    return RobotState(**d)


def test_perfect_tracking_fixed_point():
    model = toy_humanoid()
    state, ref = rest_pair(model)
    out = reward_terms(state, ref, model=model)
    for name in TERM_NAMES:
        expected = 1.0 if name in TRACKING_TERMS else 0.0
        assert out.terms[name] == expected
    assert out.total == 2.0


def test_keypoint_error_two_gives_exp_minus_one():
    state, ref = rest_pair()
    kp = state.keypoints.copy()
    kp[0] += [1.0, 1.0, 0.0]
    out = reward_terms(with_changes(state, keypoints=kp), ref)
    assert abs(out.terms["keypoint_tracking"] - 0.36787944117144233) < 1e-12


def test_termination_contribution():
    state, ref = rest_pair()
    out = reward_terms(state, ref, terminated=True)
    assert out.weighted["termination"] == -200.0
    assert out.total == 2.0 - 200.0


def hand_state(model):
    """Fixed non-trivial state with every row active."""
    n = model.n_joints
    rng = np.random.default_rng(123)
    g = np.array([0.1, -0.2, -1.0])
    g /= np.linalg.norm(g)
    q = model.default_angles + rng.uniform(-0.3, 0.3, n)
    q[0] = model.upper[0] + 0.1
    q[3] = model.lower[3] - 0.2
    kp = keypoint_positions(model, q)
    state = RobotState(
        root_lin_vel=[0.3, -0.1, 0.25], root_ang_vel=[0.4, -0.7, 1.1], projected_gravity=g,
        joint_pos=q, joint_vel=rng.normal(size=n), joint_acc=rng.normal(size=n) * 50,
        joint_torque=rng.normal(size=n) * 20, action=rng.normal(size=n), prev_action=rng.normal(size=n),
        keypoints=kp, feet_force=[150.0, 40.0], feet_vel_xy=[[0.2, -0.1], [0.5, 0.5]],
    )
    ref = ReferenceFrame(kp + 0.05, q - 0.1, 0.08, 0.3)
    return state, ref


def closed_form(state, ref, model):
    """Row-by-row evaluation written with explicit loops."""
    s = state
    n = len(s.joint_pos)
    v = {}
    v["z_lin_vel"] = s.root_lin_vel[2] * s.root_lin_vel[2]
    v["xy_ang_vel"] = s.root_ang_vel[0] * s.root_ang_vel[0] + s.root_ang_vel[1] * s.root_ang_vel[1]
    v["joint_torque"] = sum(s.joint_torque[i] ** 2 for i in range(n))
    v["joint_acc"] = sum(s.joint_acc[i] ** 2 for i in range(n))
    v["action_rate"] = sum((s.action[i] - s.prev_action[i]) ** 2 for i in range(n))
    v["energy"] = sum((s.joint_torque[i] * s.joint_vel[i]) ** 2 for i in range(n))
    v["termination"] = 0.0
    v["joint_limit"] = float(sum(1 for i in range(n) if not model.lower[i] <= s.joint_pos[i] <= model.upper[i]))
    v["orientation"] = s.projected_gravity[0] ** 2 + s.projected_gravity[1] ** 2
    v["feet_slide"] = sum(
        (s.feet_vel_xy[f][0] ** 2 + s.feet_vel_xy[f][1] ** 2) for f in range(2) if s.feet_force[f] > 100
    )
    v["hip_deviation"] = sum(abs(s.joint_pos[i] - model.default_angles[i]) for i in model.joint_groups["hip"])
    v["leg_deviation"] = sum(abs(s.joint_pos[i] - model.default_angles[i]) for i in model.joint_groups["leg"])
    d2 = sum(sum((s.keypoints[k][c] - ref.keypoints[k][c]) ** 2 for c in range(3)) for k in range(len(s.keypoints)))
    v["keypoint_tracking"] = math.exp(-d2 / 2)
    j2 = sum((s.joint_pos[i] - ref.joint_pos[i]) ** 2 for i in range(n))
    v["joint_tracking"] = math.exp(-j2 / 4)
    v["single_stance"] = ref.stance_time if (ref.feet_height_diff > 0.05 and 0.1 <= ref.stance_time <= 0.5) else 0.0
    return v


@pytest.mark.parametrize("name", TERM_NAMES)
def test_each_row_matches_closed_form(name):
    model = toy_humanoid()
    state, ref = hand_state(model)
    out = reward_terms(state, ref, model=model)
    expected = closed_form(state, ref, model)[name]
    assert abs(out.terms[name] - expected) <= 1e-9 * max(1.0, abs(expected))
    assert out.weighted[name] == getattr(MetricWeights(), name) * out.terms[name]


def test_hand_state_activates_rows():
    model = toy_humanoid()
    state, ref = hand_state(model)
    t = reward_terms(state, ref, model=model).terms
    assert t["joint_limit"] == 2.0
    assert t["single_stance"] == 0.3
    assert t["feet_slide"] == pytest.approx(0.05, abs=1e-15)


def test_total_is_weighted_sum():
    model = toy_humanoid()
    state, ref = hand_state(model)
    w = MetricWeights()
    out = reward_terms(state, ref, w, terminated=True, model=model)
    assert abs(out.total - sum(getattr(w, k) * out.terms[k] for k in TERM_NAMES)) < 1e-9


@pytest.mark.parametrize(
    "dh,t,expected",
    [(0.06, 0.3, 0.3), (0.05, 0.3, 0.0), (0.06, 0.1, 0.1), (0.06, 0.5, 0.5), (0.06, 0.55, 0.0), (0.06, 0.05, 0.0)],
)
def test_stance_window(dh, t, expected):
    state, ref = rest_pair()
    ref = ReferenceFrame(ref.keypoints, ref.joint_pos, dh, t)
    assert reward_terms(state, ref).terms["single_stance"] == expected


@pytest.mark.parametrize("force,active", [(100.0, False), (100.5, True), (0.0, False)])
def test_feet_slide_threshold(force, active):
    state, ref = rest_pair()
    s = with_changes(state, feet_force=np.array([force, 0.0]), feet_vel_xy=np.array([[0.3, 0.4], [1.0, 1.0]]))
    assert reward_terms(s, ref).terms["feet_slide"] == (0.25 if active else 0.0)


def test_upright_orientation_is_zero_and_tilted_positive():
    state, ref = rest_pair()
    assert reward_terms(state, ref).terms["orientation"] == 0.0
    g = np.array([0.0, np.sin(0.3), -np.cos(0.3)])
    assert reward_terms(with_changes(state, projected_gravity=g), ref).terms["orientation"] == pytest.approx(
        np.sin(0.3) ** 2, abs=1e-15
    )


def random_pair(seed, model):
    rng = np.random.default_rng(seed)
    n, K = model.n_joints, model.n_keypoints
    g = rng.normal(size=3)
    g /= np.linalg.norm(g)
    state = RobotState(
        rng.normal(size=3), rng.normal(size=3), g, rng.normal(size=n), rng.normal(size=n),
        rng.normal(size=n) * 10, rng.normal(size=n) * 30, rng.normal(size=n), rng.normal(size=n),
        rng.normal(size=(K, 3)), rng.uniform(0, 300, 2), rng.normal(size=(2, 2)),
    )
    ref = ReferenceFrame(rng.normal(size=(K, 3)), rng.normal(size=n), rng.uniform(0, 0.1), rng.uniform(0, 0.6))
    return state, ref


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_sign_properties(seed, terminated):
    model = toy_humanoid()
    state, ref = random_pair(seed, model)
    out = reward_terms(state, ref, terminated=terminated, model=model)
    for name in TERM_NAMES:
        if name in TRACKING_TERMS:
            assert 0.0 < out.terms[name] <= 1.0
        elif name != "single_stance":
            assert out.weighted[name] <= 0.0


def test_dimension_and_nan_errors():
    state, ref = rest_pair()
    with pytest.raises(InputError):
        reward_terms(state, ReferenceFrame(ref.keypoints, ref.joint_pos[:-1]))
    with pytest.raises(InputError):
        reward_terms(state, ReferenceFrame(ref.keypoints[:-1], ref.joint_pos))
    with pytest.raises(InputError):
        with_changes(state, joint_vel=np.full(state.joint_pos.shape, np.nan))
    with pytest.raises(InputError):
        with_changes(state, projected_gravity=np.array([0, 0, -2.0]))
    with pytest.raises(InputError):
        ReferenceFrame(ref.keypoints, ref.joint_pos, 0.0, -1.0)


def test_weight_sign_validation():
    with pytest.raises(InputError):
        MetricWeights(keypoint_tracking=0.0)
    with pytest.raises(InputError):
        MetricWeights(termination=5.0)


def test_state_dict_round_trip():
    state, ref = random_pair(4, toy_humanoid())
    again = RobotState.from_dict(state.to_dict())
    for k, v in state.to_dict().items():
        assert again.to_dict()[k] == v
    assert ReferenceFrame.from_dict(ref.to_dict()).to_dict() == ref.to_dict()


def test_motion_quality_examples():
    state, ref = rest_pair()
    assert motion_quality([(state, ref)] * 5) == 1.0
    kp = state.keypoints.copy()
    kp[2] += [0.0, 1.0, 1.0]
    s2 = with_changes(state, keypoints=kp)
    assert abs(motion_quality([(s2, ref)] * 4) - (0.5 * math.exp(-1) + 0.5)) < 1e-12
    with pytest.raises(InputError):
        motion_quality([])


def test_motion_quality_monotone_in_error_scale():
    state, ref = rest_pair()
    offset = np.random.default_rng(0).normal(size=state.keypoints.shape)
    scores = [motion_quality([(with_changes(state, keypoints=state.keypoints + c * offset), ref)])
              for c in np.linspace(0, 3, 13)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert scores[0] == 1.0 and scores[-1] < 1.0


def test_stability_examples():
    up = np.array([0.0, 0.0, -1.0])
    down = np.array([np.sin(1.0), 0.0, -np.cos(1.0)])
    assert stability([up] * 100, 100) == 1.0
    assert stability([up] * 50 + [down] * 50, 100) == 0.5
    assert stability([up] * 200, 100) == 1.0
    with pytest.raises(InputError):
        stability([up], 0)


def test_stability_threshold_boundary():
    just_below = np.array([np.sin(0.79), 0.0, -np.cos(0.79)])
    assert abs(tilt_angle(just_below) - 0.79) < 1e-12
    assert stability([just_below] * 10, 10) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 59), st.integers(0, 59))
def test_stability_nonincreasing_with_earlier_falls(horizon, a, b):
    up, down = [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]
    rollout = [up] * horizon
    if a < horizon:
        rollout[a] = down
    s1 = stability(rollout, horizon)
    early = min(a, b)
    if early < horizon:
        rollout[early] = down
    assert stability(rollout, horizon) <= s1


def test_classify_motion():
    static = np.zeros((10, 4, 3))
    assert classify_motion(static, 50) == Difficulty.EASY
    t = np.arange(20) / 50.0
    moving = np.zeros((20, 2, 3))
    moving[:, :, 0] = 3.0 * t[:, None]
    assert classify_motion(moving, 50) == Difficulty.HARD
    with pytest.raises(InputError):
        classify_motion(static[:1], 50)


def test_classify_boundary_is_strict():
    # 0.016 m per frame at 50 fps is exactly 0.8 m/s
    kp = np.zeros((3, 1, 3))
    kp[:, 0, 0] = [0.0, 0.016, 0.032]
    speed_ok = classify_motion(kp, 50, threshold=0.8 + 1e-9)
    assert speed_ok == Difficulty.EASY
    assert classify_motion(kp, 50, threshold=0.7) == Difficulty.HARD
    assert classify_motion(kp, 50, threshold=0.8) == classify_motion(kp, 50, threshold=0.8)


def test_classify_with_root_translation():
    kp = np.zeros((5, 2, 3))
    root = np.zeros((5, 3))
    root[:, 1] = np.arange(5) * 0.1
    assert classify_motion(kp, 50) == Difficulty.EASY
    assert classify_motion(kp, 50, root=root) == Difficulty.HARD
