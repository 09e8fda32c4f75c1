"""Left/right mirror operators, symmetry loss and mirror data augmentation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import formats
from ._validation import InputError
from .metrics import ReferenceFrame, RobotState

# sign pattern of the body-frame 3-vectors under reflection through the x-z plane
LINEAR_SIGN = np.array([1.0, -1.0, 1.0])
ANGULAR_SIGN = np.array([-1.0, 1.0, -1.0])
BASE_BLOCK = 9  # root linear velocity, root angular velocity, projected gravity

DEFAULT_SYMMETRY_WEIGHT = 0.1


def _check_signed_perm(perm, sign, what):
    perm = np.asarray(perm, dtype=int)
    sign = np.asarray(sign, dtype=float)
    n = perm.shape[0]
    if perm.ndim != 1 or sign.shape != (n,):
        raise InputError(f"{what}: permutation and sign must be 1-D of equal length")
    if n and (perm.min() < 0 or perm.max() >= n):
        raise InputError(f"{what}: permutation index out of range")
    if not np.array_equal(perm[perm], np.arange(n)):
        raise InputError(f"{what}: mirror map is not an involution")
    if not np.all(np.isin(sign, (-1.0, 1.0))):
        raise InputError(f"{what}: signs must be +1 or -1")
    if not np.array_equal(sign[perm], sign):
        raise InputError(f"{what}: paired channels must share the same sign")
    return perm, sign


def _pairs_from_perm(perm, sign, keys):
    a_key, b_key = keys
    out = []
    for i, j in enumerate(perm):
        if i < j or (i == j and sign[i] < 0):
            out.append({a_key: int(i), b_key: int(j), "sign": float(sign[i])})
    return out


def _perm_from_pairs(pairs, n, keys, what):
    a_key, b_key = keys
    perm = np.arange(n)
    sign = np.ones(n)
    seen = set()
    for p in pairs:
        try:
            a, b, s = int(p[a_key]), int(p[b_key]), float(p.get("sign", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{what}: malformed entry {p!r}") from exc
        if not (0 <= a < n and 0 <= b < n):
            raise InputError(f"{what}: index out of range in {p!r}")
        if a in seen or b in seen:
            raise InputError(f"{what}: index listed twice in {p!r}")
        seen.update((a, b))
        perm[a], perm[b] = b, a
        sign[a] = sign[b] = s
    return _check_signed_perm(perm, sign, what)


class MirrorSpec:
    """Signed permutations mirroring actions (joint space) and observations.

    ``mirror(x)[i] = sign[i] * x[perm[i]]`` for both spaces.
    """

    def __init__(self, joint_perm, joint_sign, state_perm, state_sign):
        self.joint_perm, self.joint_sign = _check_signed_perm(joint_perm, joint_sign, "joint map")
        self.state_perm, self.state_sign = _check_signed_perm(state_perm, state_sign, "state map")

    @property
    def n_joints(self):
        return self.joint_perm.shape[0]

    @property
    def state_dim(self):
        return self.state_perm.shape[0]

    @classmethod
    def for_observation(cls, model, joint_blocks=2, history=1, extra_dims=0):
        """Spec for observations laid out as ``[v, w, g, joint blocks...]``.

        ``joint_blocks`` counts n-sized joint-space blocks after the base block
        (positions, velocities, optionally past actions). The whole layout may be
        repeated ``history`` times, followed by ``extra_dims`` unmirrored channels
        (for example a text embedding).
        """
        jp, js = model.joint_mirror
        n = model.n_joints
        perm = [np.arange(3), np.arange(3, 6), np.arange(6, 9)]
        sign = [LINEAR_SIGN, ANGULAR_SIGN, LINEAR_SIGN]
        for b in range(joint_blocks):
            perm.append(BASE_BLOCK + b * n + jp)
            sign.append(js)
        frame_perm, frame_sign = np.concatenate(perm), np.concatenate(sign)
        d = frame_perm.shape[0]
        hist_perm = np.concatenate([frame_perm + k * d for k in range(history)])
        hist_sign = np.tile(frame_sign, history)
        if extra_dims:
            hist_perm = np.concatenate([hist_perm, d * history + np.arange(extra_dims)])
            hist_sign = np.concatenate([hist_sign, np.ones(extra_dims)])
        return cls(jp, js, hist_perm, hist_sign)

    def to_dict(self):
        return {
            "n_joints": self.n_joints,
            "state_dim": self.state_dim,
            "joint_pairs": _pairs_from_perm(self.joint_perm, self.joint_sign, ("a", "b")),
            "state_channels": _pairs_from_perm(self.state_perm, self.state_sign, ("i", "j")),
        }

    @classmethod
    def from_dict(cls, data):
        pairs = data.get("joint_pairs", [])
        channels = data.get("state_channels", [])
        n = data.get("n_joints")
        d = data.get("state_dim")
        if n is None:
            n = 1 + max([max(p["a"], p["b"]) for p in pairs], default=-1)
        if d is None:
            d = 1 + max([max(c["i"], c["j"]) for c in channels], default=-1)
        jp, js = _perm_from_pairs(pairs, int(n), ("a", "b"), "joint_pairs")
        sp, ss = _perm_from_pairs(channels, int(d), ("i", "j"), "state_channels")
        return cls(jp, js, sp, ss)

    def save(self, path):
        formats.write_json(path, self.to_dict(), kind="mirror_spec")

    @classmethod
    def load(cls, path):
        return cls.from_dict(formats.read_json(path, kind="mirror_spec"))

    def __eq__(self, other):
        return (
            isinstance(other, MirrorSpec)
            and np.array_equal(self.joint_perm, other.joint_perm)
            and np.array_equal(self.joint_sign, other.joint_sign)
            and np.array_equal(self.state_perm, other.state_perm)
            and np.array_equal(self.state_sign, other.state_sign)
        )

    def action_matrix(self):
        return _signed_perm_matrix(self.joint_perm, self.joint_sign)

    def state_matrix(self):
        return _signed_perm_matrix(self.state_perm, self.state_sign)


def _signed_perm_matrix(perm, sign):
    n = perm.shape[0]
    P = np.zeros((n, n))
    P[np.arange(n), perm] = sign
    return P


def _apply(x, perm, sign, what):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != perm.shape[0]:
        raise InputError(f"{what} has last dimension {x.shape[-1] if x.ndim else 0}, expected {perm.shape[0]}")
    return sign * x[..., perm]


def mirror_state(s, spec):
    """Mirror an observation vector (or a batch along the last axis)."""
    return _apply(s, spec.state_perm, spec.state_sign, "state")


def mirror_action(a, spec):
    """Mirror a joint-space action vector (or a batch along the last axis)."""
    return _apply(a, spec.joint_perm, spec.joint_sign, "action")


def symmetry_loss(policy, batch, spec):
    """Mean over the batch of ``||pi(s) - M(pi(s_mirrored))||^2``.

    ``policy`` maps a (B, d) array of states to a (B, n) array of actions.
    """
    S = np.asarray(batch, dtype=float)
    if S.ndim == 1:
        S = S[None]
    if S.shape[0] == 0:
        raise InputError("symmetry loss needs a non-empty batch")
    a = np.asarray(policy(S), dtype=float)
    a_m = mirror_action(np.asarray(policy(mirror_state(S, spec)), dtype=float), spec)
    return float(np.mean(np.sum((a - a_m) ** 2, axis=-1)))


def symmetrize(policy, spec):
    """Mirror-equivariant policy ``s -> (pi(s) + M(pi(M(s)))) / 2``."""

    def wrapped(S):
        a = np.asarray(policy(S), dtype=float)
        return 0.5 * (a + mirror_action(np.asarray(policy(mirror_state(S, spec)), dtype=float), spec))

    return wrapped


def augment_batch(states, actions, spec):
    """Append the mirrored copy of every (state, action) pair."""
    S = np.asarray(states, dtype=float)
    A = np.asarray(actions, dtype=float)
    if S.shape[0] != A.shape[0]:
        raise InputError("states and actions must have the same number of rows")
    if S.shape[0] == 0:
        return S.reshape(0, spec.state_dim), A.reshape(0, spec.n_joints)
    return (
        np.concatenate([S, mirror_state(S, spec)], axis=0),
        np.concatenate([A, mirror_action(A, spec)], axis=0),
    )


def _foot_perm(n_feet):
    return np.arange(n_feet)[::-1]


def mirror_robot_state(state, model):
    """Reflect a :class:`RobotState` through the sagittal plane.

    Feet are assumed ordered left-to-right, so mirroring reverses their order.
    """
    jp, js = model.joint_mirror
    kp = model.keypoint_perm
    fp = _foot_perm(state.feet_force.shape[0])
    return RobotState(
        root_lin_vel=LINEAR_SIGN * state.root_lin_vel,
        root_ang_vel=ANGULAR_SIGN * state.root_ang_vel,
        projected_gravity=LINEAR_SIGN * state.projected_gravity,
        joint_pos=js * state.joint_pos[jp],
        joint_vel=js * state.joint_vel[jp],
        joint_acc=js * state.joint_acc[jp],
        joint_torque=js * state.joint_torque[jp],
        action=js * state.action[jp],
        prev_action=js * state.prev_action[jp],
        keypoints=state.keypoints[kp] * LINEAR_SIGN,
        feet_force=state.feet_force[fp],
        feet_vel_xy=state.feet_vel_xy[fp] * LINEAR_SIGN[:2],
    )


def mirror_reference(ref, model):
    jp, js = model.joint_mirror
    return ReferenceFrame(
        keypoints=ref.keypoints[model.keypoint_perm] * LINEAR_SIGN,
        joint_pos=js * ref.joint_pos[jp],
        feet_height_diff=ref.feet_height_diff,
        stance_time=ref.stance_time,
    )


class SymmetricLinearPolicy(RegressorMixin, BaseEstimator):
    """Affine policy ``a = W s + b`` fitted by imitation plus a symmetry penalty.

    Minimises ``mean ||W s + b - a||^2 + symmetry_weight * L_sym + alpha ||W, b||^2``
    where ``L_sym`` is :func:`symmetry_loss` on the training states. The objective
    is quadratic, so the minimiser is found by one linear solve.
    """

    def __init__(self, spec=None, symmetry_weight=DEFAULT_SYMMETRY_WEIGHT, alpha=1e-8):
        self.spec = spec
        self.symmetry_weight = symmetry_weight
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(X.shape[0], -1)
        if self.symmetry_weight < 0 or self.alpha < 0:
            raise InputError("symmetry_weight and alpha must be non-negative")
        N, d = X.shape
        n = y.shape[1]
        Xa = np.hstack([X, np.ones((N, 1))])
        C = Xa.T @ Xa / N
        # column-major vec: vec(A Theta B) = (B^T kron A) vec(Theta)
        H = np.kron(C, np.eye(n))
        if self.symmetry_weight > 0:
            if self.spec is None:
                raise InputError("a MirrorSpec is required when symmetry_weight > 0")
            if self.spec.state_dim != d or self.spec.n_joints != n:
                raise InputError("MirrorSpec dimensions do not match the data")
            Q = np.zeros((d + 1, d + 1))
            Q[:d, :d] = self.spec.state_matrix()
            Q[d, d] = 1.0
            K = np.eye(n * (d + 1)) - np.kron(Q.T, self.spec.action_matrix())
            H = H + self.symmetry_weight * K.T @ np.kron(C, np.eye(n)) @ K
        H = H + self.alpha * np.eye(n * (d + 1))
        rhs = (y.T @ Xa / N).reshape(-1, order="F")
        theta = np.linalg.solve(H, rhs).reshape(n, d + 1, order="F")
        self.coef_ = theta[:, :d]
        self.intercept_ = theta[:, d]
        self.n_features_in_ = d
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_.T + self.intercept_

    def equivariance_error(self, X):
        """:func:`symmetry_loss` of the fitted policy on ``X``."""
        return symmetry_loss(self.predict, X, self.spec)
