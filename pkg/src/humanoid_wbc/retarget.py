"""Whole-sequence keypoint retargeting with Levenberg-Marquardt.

All frames are solved jointly: the unknown is the stacked trajectory
``vec(Q) = [q_1, ..., q_T]`` and the cost is

    sum_t ||x_t(q_t) - x*_t||^2 + w_ori ||dr_t(q_t)||^2 + w_smooth sum_t ||q_t - q_{t-1}||^2

Each iteration solves ``(J^T J + lam I + w_smooth S^T S) dq = -grad`` with ``S``
the frame-difference operator, projects ``Q + dq`` onto the joint box, and
accepts the candidate only if the cost drops.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import InputError, NumericalError, as_float_array
from .formats import read_json, write_json
from .model import batch_keypoints, clamp_to_limits, right_jacobian_inverse, rotation_log


@dataclass
class RetargetProblem:
    """Per-frame targets.

    ``positions`` is (T, K, 3) and lines up with ``keypoints`` (model keypoint
    indices, default all). ``rotations`` is an optional (T, E, 3, 3) array of
    target orientations for ``end_effectors`` (model keypoint indices, default
    the model's end effectors).
    """

    positions: np.ndarray
    rotations: np.ndarray | None = None
    w_ori: float = 0.0
    w_smooth: float = 0.0
    keypoints: list | None = None
    end_effectors: list | None = None

    def __post_init__(self):
        self.positions = as_float_array(self.positions, "positions", ndim=3)
        T, K, three = self.positions.shape
        if T < 1 or three != 3:
            raise InputError(f"positions must be (T>=1, K, 3), got {self.positions.shape}")
        if self.rotations is not None:
            self.rotations = as_float_array(self.rotations, "rotations", ndim=4)
            if self.rotations.shape[0] != T or self.rotations.shape[2:] != (3, 3):
                raise InputError(f"rotations must be (T, E, 3, 3), got {self.rotations.shape}")
        if not (np.isfinite(self.w_ori) and np.isfinite(self.w_smooth)) or self.w_ori < 0 or self.w_smooth < 0:
            raise InputError("weights must be finite and non-negative")

    @property
    def n_frames(self):
        return self.positions.shape[0]

    def resolve(self, model):
        """Keypoint and end-effector index lists for ``model``."""
        kp = list(range(model.n_keypoints)) if self.keypoints is None else list(self.keypoints)
        if len(kp) != self.positions.shape[1]:
            raise InputError(f"{self.positions.shape[1]} target keypoints but {len(kp)} indices")
        if any(not 0 <= k < model.n_keypoints for k in kp):
            raise InputError("target keypoint index out of range")
        if self.rotations is None:
            return kp, []
        ee = list(model.end_effector_indices) if self.end_effectors is None else list(self.end_effectors)
        if len(ee) != self.rotations.shape[1]:
            raise InputError(f"{self.rotations.shape[1]} rotation targets but {len(ee)} end effectors")
        return kp, ee


@dataclass
class LMConfig:
    lambda_init: float = 1e-3
    lambda_increase: float = 2.0
    lambda_decrease: float = 3.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e12
    max_iterations: int = 200
    step_tol: float = 1e-12
    residual_tol: float = 1e-20
    rel_tol: float = 1e-15

    def __post_init__(self):
        if self.lambda_init <= 0 or self.lambda_min <= 0 or self.lambda_max <= self.lambda_min:
            raise InputError("damping bounds must be positive and ordered")
        if self.lambda_increase <= 1 or self.lambda_decrease <= 1:
            raise InputError("damping factors must exceed 1")
        if self.max_iterations < 1 or self.step_tol <= 0 or self.residual_tol <= 0 or self.rel_tol < 0:
            raise InputError("iteration count and tolerances must be positive")


@dataclass
class RetargetResult:
    Q: np.ndarray
    objective_history: list
    frame_rmse: np.ndarray
    keypoint_errors: np.ndarray
    iterations: int
    converged: bool
    reason: str
    damping: float = field(default=0.0)

    @property
    def mean_keypoint_error(self):
        return float(np.mean(self.keypoint_errors))


def smoothness_matrix(T, n):
    """Sparse (T-1)n x Tn block-bidiagonal difference operator with blocks (-I, I)."""
    if T < 1 or n < 1:
        raise InputError("T and n must be at least 1")
    if T == 1:
        return sp.csr_matrix((0, n))
    rows = (T - 1) * n
    diag = sp.eye(rows, T * n, k=n, format="csr") - sp.eye(rows, T * n, k=0, format="csr")
    return diag.tocsr()


def _data_terms(problem, model, Q, with_jacobian):
    """Per-frame position/orientation residuals (T, m) and Jacobians (T, m, n)."""
    kp, ee = problem.resolve(model)
    kp_pos, kp_rot, axes, kp_jac = batch_keypoints(model, Q, with_jacobian)
    T = Q.shape[0]
    parts = [(kp_pos[:, kp] - problem.positions).reshape(T, -1)]
    jac_parts = [kp_jac[:, kp].reshape(T, -1, model.n_joints)] if with_jacobian else []
    if ee:
        sw = np.sqrt(problem.w_ori)
        ori = np.empty((T, len(ee), 3))
        ori_jac = np.empty((T, len(ee), 3, model.n_joints)) if with_jacobian else None
        for t in range(T):
            for e, k in enumerate(ee):
                Ra = kp_rot[t, k]
                phi = rotation_log(problem.rotations[t, e].T @ Ra)
                ori[t, e] = phi
                if with_jacobian:
                    # d log(Rt^T Ra exp(d)) = Jr^-1(phi) d, with d = Ra^T (axis_j dq_j)
                    cols = (axes[t] * model.ancestors[k][:, None]) @ Ra
                    ori_jac[t, e] = right_jacobian_inverse(phi) @ cols.T
        parts.append(sw * ori.reshape(T, -1))
        if with_jacobian:
            jac_parts.append(sw * ori_jac.reshape(T, -1, model.n_joints))
    f = np.concatenate(parts, axis=1)
    J = np.concatenate(jac_parts, axis=1) if with_jacobian else None
    return f, J


def _check_trajectory(problem, model, Q):
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (problem.n_frames, model.n_joints):
        raise InputError(f"trajectory must be ({problem.n_frames}, {model.n_joints}), got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InputError("trajectory contains non-finite values")
    return Q


def build_residuals(problem, model, Q):
    """Stacked residual: per-frame position and orientation blocks, then smoothness blocks."""
    Q = _check_trajectory(problem, model, Q)
    f, _ = _data_terms(problem, model, Q, with_jacobian=False)
    parts = [f.ravel()]
    if problem.w_smooth > 0 and problem.n_frames > 1:
        parts.append(np.sqrt(problem.w_smooth) * np.diff(Q, axis=0).ravel())
    return np.concatenate(parts)


def residual_jacobian(problem, model, Q, include_smoothness=True):
    """Sparse Jacobian of :func:`build_residuals` with respect to ``vec(Q)``."""
    Q = _check_trajectory(problem, model, Q)
    _, J = _data_terms(problem, model, Q, with_jacobian=True)
    blocks = sp.block_diag(list(J), format="csr")
    if include_smoothness and problem.w_smooth > 0 and problem.n_frames > 1:
        S = smoothness_matrix(problem.n_frames, model.n_joints)
        blocks = sp.vstack([blocks, np.sqrt(problem.w_smooth) * S], format="csr")
    return blocks


def lm_step(J, f, lam, w_smooth=0.0, S=None, q=None, free=None):
    """Solve ``(J^T J + lam I + w_smooth S^T S) dq = -(J^T f + w_smooth S^T S q)``.

    ``q`` is the current stacked iterate; pass it when ``J``/``f`` hold only the
    data rows so the smoothness gradient enters the right-hand side. Without
    ``q`` the right-hand side is the literal ``-J^T f``. ``free`` optionally
    restricts the solve to a subset of variables; the rest get a zero step.
    """
    if not np.isfinite(lam) or lam < 0:
        raise InputError("damping must be finite and non-negative")
    f = np.asarray(f, dtype=float)
    sparse = sp.issparse(J) or (S is not None and sp.issparse(S))
    if sparse:
        J = sp.csr_matrix(J)
        n = J.shape[1]
        A = (J.T @ J).tocsc() + lam * sp.eye(n, format="csc")
    else:
        J = np.atleast_2d(np.asarray(J, dtype=float))
        n = J.shape[1]
        A = J.T @ J + lam * np.eye(n)
    g = J.T @ f
    if w_smooth > 0 and S is not None and S.shape[0] > 0:
        StS = S.T @ S
        A = A + w_smooth * (sp.csc_matrix(StS) if sparse else np.asarray(StS.todense() if sp.issparse(StS) else StS))
        if q is not None:
            g = g + w_smooth * (StS @ np.asarray(q, dtype=float))
    dq = np.zeros(n)
    if free is not None:
        free = np.asarray(free, dtype=bool)
        A = A[free][:, free]
        g = g[free]
    if not np.any(g):
        return dq
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.sparse.linalg.MatrixRankWarning)
            if sparse:
                step = scipy.sparse.linalg.spsolve(sp.csc_matrix(A), -g)
            else:
                step = scipy.linalg.solve(A, -g, assume_a="pos")
    except (np.linalg.LinAlgError, RuntimeError, ValueError, scipy.sparse.linalg.MatrixRankWarning) as exc:
        raise NumericalError(f"damped normal equations are singular: {exc}") from exc
    step = np.asarray(step).ravel()
    if not np.all(np.isfinite(step)):
        raise NumericalError("damped normal equations are singular (non-finite step)")
    if free is None:
        return step
    dq[free] = step
    return dq


def default_initial_trajectory(model, T):
    return np.tile(model.mid_range, (T, 1))


def _objective(problem, model, Q):
    f, _ = _data_terms(problem, model, Q, with_jacobian=False)
    value = float(np.sum(f * f))
    if problem.w_smooth > 0 and Q.shape[0] > 1:
        value += problem.w_smooth * float(np.sum(np.diff(Q, axis=0) ** 2))
    return value


def retarget_sequence(model, problem, config=None, q_init=None):
    """Solve the whole-sequence retargeting problem; see the module docstring."""
    config = config or LMConfig()
    T, n = problem.n_frames, model.n_joints
    Q = default_initial_trajectory(model, T) if q_init is None else _check_trajectory(problem, model, q_init)
    if np.any(Q < model.lower) or np.any(Q > model.upper):
        raise InputError("initial trajectory violates joint limits")
    problem.resolve(model)
    S = smoothness_matrix(T, n)
    lower = np.tile(model.lower, T)
    upper = np.tile(model.upper, T)

    cost = _objective(problem, model, Q)
    if not np.isfinite(cost):
        raise NumericalError("initial objective is not finite")
    history = [cost]
    lam = config.lambda_init
    reason = "max_iterations"
    converged = False
    need_jacobian = True
    it = 0
    for it in range(1, config.max_iterations + 1):
        if cost <= config.residual_tol:
            reason, converged = "residual_tol", True
            break
        if need_jacobian:
            f, Jb = _data_terms(problem, model, Q, with_jacobian=True)
            J = sp.block_diag(list(Jb), format="csr")
            f = f.ravel()
            need_jacobian = False
        # freeze joints resting on a bound whose descent direction points outward
        q = Q.ravel()
        grad = J.T @ f
        if problem.w_smooth > 0 and T > 1:
            grad = grad + problem.w_smooth * (S.T @ (S @ q))
        free = ~(((q <= lower) & (grad > 0)) | ((q >= upper) & (grad < 0)))
        try:
            dq = lm_step(J, f, lam, problem.w_smooth, S, q=q, free=None if free.all() else free)
        except NumericalError:
            dq = None
        if dq is not None:
            candidate = clamp_to_limits(Q + dq.reshape(T, n), model)
            new_cost = _objective(problem, model, candidate)
            if not np.isfinite(new_cost):
                raise NumericalError(f"objective became non-finite at iteration {it}")
        if dq is not None and new_cost < cost:
            step = float(np.max(np.abs(candidate - Q)))
            improvement = cost - new_cost
            Q, cost = candidate, new_cost
            history.append(cost)
            lam = max(lam / config.lambda_decrease, config.lambda_min)
            need_jacobian = True
            if step < config.step_tol:
                reason, converged = "step_tol", True
                break
            if improvement <= config.rel_tol * history[-2]:
                reason, converged = "rel_tol", True
                break
        else:
            if lam >= config.lambda_max:
                reason, converged = "damping_ceiling", True
                break
            lam = min(lam * config.lambda_increase, config.lambda_max)

    kp, _ = problem.resolve(model)
    kp_pos = batch_keypoints(model, Q)[0][:, kp]
    err = np.linalg.norm(kp_pos - problem.positions, axis=2)
    return RetargetResult(
        Q=Q,
        objective_history=history,
        frame_rmse=np.sqrt(np.mean(err**2, axis=1)),
        keypoint_errors=err,
        iterations=it,
        converged=converged,
        reason=reason,
        damping=lam,
    )


class LMRetargeter(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit(X)`` retargets a (T, K, 3) keypoint sequence.

    ``transform`` re-solves new targets warm-started from the fitted trajectory
    when frame counts agree; ``inverse_transform`` maps joint trajectories back
    to keypoint positions.
    """

    def __init__(self, model=None, w_ori=0.0, w_smooth=0.01, lambda_init=1e-3, lambda_increase=2.0,
                 lambda_decrease=3.0, max_iterations=200, step_tol=1e-12):
        self.model = model
        self.w_ori = w_ori
        self.w_smooth = w_smooth
        self.lambda_init = lambda_init
        self.lambda_increase = lambda_increase
        self.lambda_decrease = lambda_decrease
        self.max_iterations = max_iterations
        self.step_tol = step_tol

    def _config(self):
        return LMConfig(lambda_init=self.lambda_init, lambda_increase=self.lambda_increase,
                        lambda_decrease=self.lambda_decrease, max_iterations=self.max_iterations,
                        step_tol=self.step_tol)

    def _targets(self, X):
        if self.model is None:
            raise InputError("LMRetargeter needs a robot model")
        X = as_float_array(X, "X")
        if X.ndim == 2:
            X = X.reshape(X.shape[0], -1, 3)
        return X

    def _solve(self, X, rotations, q_init):
        problem = RetargetProblem(X, rotations, w_ori=self.w_ori, w_smooth=self.w_smooth)
        return retarget_sequence(self.model, problem, self._config(), q_init)

    def fit(self, X, y=None, rotations=None, q_init=None):
        result = self._solve(self._targets(X), rotations, q_init)
        self.result_ = result
        self.trajectory_ = result.Q
        self.objective_history_ = result.objective_history
        self.n_features_in_ = self.model.n_keypoints * 3
        return self

    def fit_transform(self, X, y=None, rotations=None, q_init=None):
        return self.fit(X, y, rotations=rotations, q_init=q_init).trajectory_

    def transform(self, X, rotations=None):
        check_is_fitted(self, "trajectory_")
        X = self._targets(X)
        q_init = self.trajectory_ if X.shape[0] == self.trajectory_.shape[0] else None
        return self._solve(X, rotations, q_init).Q

    def inverse_transform(self, Q):
        if self.model is None:
            raise InputError("LMRetargeter needs a robot model")
        pos = batch_keypoints(self.model, np.atleast_2d(Q))[0]
        return pos.reshape(pos.shape[0], -1)


# -- motion / result files ----------------------------------------------------

def load_motion(path, model):
    """Read a motion target file into a :class:`RetargetProblem` (weights from the file, default 0)."""
    data = read_json(path)
    try:
        names = data["keypoints"]
        frames = data["frames"]
        positions = np.array([fr["positions"] for fr in frames], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed motion file ({exc})") from exc
    kp = [model.keypoint_index(n) for n in names]
    rotations = None
    ee = None
    if frames and all("rotations" in fr for fr in frames):
        rotations = np.array([fr["rotations"] for fr in frames], dtype=float)
        ee_names = data.get("end_effectors", list(model.end_effectors))
        ee = [model.keypoint_index(n) for n in ee_names]
    problem = RetargetProblem(
        positions, rotations, w_ori=float(data.get("w_ori", 0.0)), w_smooth=float(data.get("w_smooth", 0.0)),
        keypoints=kp, end_effectors=ee,
    )
    return problem, float(data.get("fps", 50.0)), names


def save_motion(path, positions, keypoint_names, fps=50.0, rotations=None, end_effectors=None):
    frames = []
    for t in range(len(positions)):
        fr = {"positions": np.asarray(positions[t]).tolist()}
        if rotations is not None:
            fr["rotations"] = np.asarray(rotations[t]).tolist()
        frames.append(fr)
    data = {"fps": float(fps), "keypoints": list(keypoint_names), "frames": frames}
    if end_effectors is not None:
        data["end_effectors"] = list(end_effectors)
    return write_json(path, data, kind="motion")


def save_result(path, result, model, fps=50.0):
    return write_json(path, {
        "fps": float(fps),
        "joint_names": [j.name for j in model.joints],
        "frames": [{"joints": q.tolist(), "rmse": float(r)} for q, r in zip(result.Q, result.frame_rmse)],
        "objective_history": [float(v) for v in result.objective_history],
        "mean_keypoint_error": result.mean_keypoint_error,
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "reason": result.reason,
    }, kind="retarget_result")


def load_result(path):
    data = read_json(path, kind="retarget_result")
    Q = np.array([fr["joints"] for fr in data["frames"]], dtype=float)
    return Q, data


def synthetic_trajectory(rng, model, T, amplitude=(0.1, 0.4), frequency=(0.3, 1.5)):
    """Smooth in-limits sinusoidal joint trajectory about mid-range, for self-consistent targets."""
    t = np.linspace(0.0, 1.0, T)[:, None]
    half = 0.5 * (model.upper - model.lower)
    amp = rng.uniform(*amplitude, size=model.n_joints)
    freq = rng.uniform(*frequency, size=model.n_joints)
    phase = rng.uniform(0.0, 2 * np.pi, size=model.n_joints)
    return model.mid_range + half * amp * np.sin(2 * np.pi * freq * t + phase)
