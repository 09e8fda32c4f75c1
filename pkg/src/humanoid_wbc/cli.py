"""Command-line interface: ``humanoid-wbc <subcommand> [flags]``.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on numerical failure.
Every subcommand writes its primary artifact to ``--out`` plus a run manifest
(``<out>.manifest.json``, or ``<out>/manifest.json`` for directory outputs).
Option precedence is flags > ``--config`` file > built-in defaults. Log
verbosity comes from the ``HUMANOID_WBC_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, formats
from ._validation import InputError, NumericalError
from .cvae import load_student, save_student
from .distill import (
    DAggerConfig,
    MotionLibrary,
    benchmark_student,
    dagger_train,
    dump_latents,
    frames_from_run,
    interpolate_rollout,
    make_env_factory,
    script_rollout,
    toy_motion_library,
)
from .metrics import quality_from_errors, random_state_pair, reward_terms, stability
from .model import RobotModel, toy_humanoid
from .retarget import LMConfig, load_motion, retarget_sequence, save_result
from .sim import observation_dim, rollout_log
from .symmetry import (
    MirrorSpec,
    mirror_action,
    mirror_reference,
    mirror_robot_state,
    mirror_state,
    symmetrize,
    symmetry_loss,
)
from .textenc import read_script

LOG_ENV = "HUMANOID_WBC_LOG"
COMMANDS = ("retarget", "eval-motion", "train-student", "rollout", "interpolate", "dump-latents", "mirror-check")
log = logging.getLogger("humanoid_wbc")


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run manifest ---------------------------------------------------------------

@dataclass
class RunManifest:
    """Provenance record written next to every artifact."""

    command: str
    seed: int
    tool_version: str = __version__
    argv: list = field(default_factory=list)
    config_hashes: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    created: str = ""

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = formats.file_sha256(path)

    def add_output(self, path):
        self.outputs[str(path)] = formats.file_sha256(path)

    def write(self, path):
        formats.write_json(path, asdict(self), kind="run_manifest")

    @classmethod
    def load(cls, path, verify=True):
        """Read a manifest; with ``verify`` every recorded file hash is recomputed and compared."""
        data = formats.read_json(path, kind="run_manifest")
        known = {f.name for f in fields(cls)}
        man = cls(**{k: v for k, v in data.items() if k in known})
        if verify:
            for group in (man.inputs, man.outputs):
                for p, digest in group.items():
                    if not Path(p).exists():
                        raise InputError(f"manifest lists missing file {p}")
                    if formats.file_sha256(p) != digest:
                        raise InputError(f"hash mismatch for {p}")
        return man


def _hash_dict(d):
    return hashlib.sha256(formats.dumps(d).encode()).hexdigest()


# -- parser -------------------------------------------------------------------

def _common(p, out_help):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file of option defaults; keys are flag names with dashes as underscores")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--manifest", type=Path, default=None, help="manifest path (default derived from --out)")


def _model_flag(p):
    p.add_argument("--model", type=Path, default=None, help="robot model JSON (default: built-in 8-joint toy humanoid)")


def _library_flags(p):
    p.add_argument("--library", type=Path, default=None,
                   help="motion library JSON (default: built-in toy motions)")
    p.add_argument("--motions", default=None,
                   help="comma-separated motion names to keep from the library (default: all)")


def build_parser():
    parser = _Parser(prog="humanoid-wbc", description="Desk-scale language-directed whole-body control toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs = {}

    p = subs["retarget"] = sub.add_parser("retarget", help="whole-sequence LM retargeting of keypoint targets")
    _common(p, "output result JSON (joints per frame, objective history)")
    p.add_argument("--model", type=Path, required=True, help="robot model JSON")
    p.add_argument("--motion", type=Path, required=True, help="motion target JSON (fps, keypoints, frames)")
    p.add_argument("--max-iterations", type=int, default=200, help="LM iteration cap (default 200)")
    p.add_argument("--lambda-init", type=float, default=1e-3, help="initial LM damping (default 1e-3)")
    p.add_argument("--w-smooth", type=float, default=None, help="smoothness weight; overrides the motion file")
    p.add_argument("--w-ori", type=float, default=None, help="orientation weight; overrides the motion file")

    p = subs["eval-motion"] = sub.add_parser("eval-motion", help="motion quality and stability of a rollout")
    _common(p, "output metrics JSON")
    p.add_argument("--rollout", type=Path, required=True,
                   help="rollout JSON-lines with joints, keypoints, ref_joints, ref_keypoints per frame")
    p.add_argument("--tilt-threshold", type=float, default=0.8, help="fall tilt in rad (default 0.8)")

    p = subs["train-student"] = sub.add_parser("train-student", help="DAgger distillation of a student policy")
    _common(p, "output directory (config, loss curve, checkpoints, manifest)")
    _model_flag(p)
    _library_flags(p)
    p.add_argument("--preset", choices=("benchmark", "full"), default="benchmark",
                   help="base DAgger settings: desk-scale benchmark or full-size defaults (default benchmark)")
    p.add_argument("--student", choices=("cvae", "mlp"), default="cvae", help="student architecture (default cvae)")
    p.add_argument("--iterations", type=int, default=None, help="DAgger iterations (overrides preset)")
    p.add_argument("--n-envs", type=int, default=None, help="parallel environments (overrides preset)")
    p.add_argument("--batch-size", type=int, default=None, help="minibatch size (overrides preset)")
    p.add_argument("--learning-rate", type=float, default=None, help="Adam learning rate (overrides preset)")
    p.add_argument("--latent-dim", type=int, default=16, help="CVAE latent width (default 16)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint period in iterations (0 = final only)")

    p = subs["rollout"] = sub.add_parser("rollout", help="execute a command script at 50 Hz")
    _common(p, "output rollout JSON-lines")
    _model_flag(p)
    _library_flags(p)
    p.add_argument("--script", type=Path, required=True, help="command script, one 'text: seconds' per line")
    p.add_argument("--student", type=Path, default=None,
                   help="student checkpoint (default: privileged teacher on the nearest caption)")

    p = subs["interpolate"] = sub.add_parser("interpolate", help="roll out a latent interpolation of two commands")
    _common(p, "output rollout JSON-lines")
    _model_flag(p)
    p.add_argument("--student", type=Path, required=True, help="CVAE student checkpoint")
    p.add_argument("--text-a", required=True, help="command at alpha = 0")
    p.add_argument("--text-b", required=True, help="command at alpha = 1")
    p.add_argument("--alpha", type=float, default=0.5, help="fixed interpolation weight in [0, 1] (default 0.5)")
    p.add_argument("--ramp", action="store_true", help="ramp alpha linearly from 0 to 1 instead of --alpha")
    p.add_argument("--steps", type=int, default=100, help="control steps (default 100)")

    p = subs["dump-latents"] = sub.add_parser("dump-latents", help="latent means per command plus a 2-D projection")
    _common(p, "output latent CSV")
    p.add_argument("--student", type=Path, required=True, help="CVAE student checkpoint")
    p.add_argument("--commands", nargs="+", required=True, help="commands to roll out")
    p.add_argument("--steps", type=int, default=50, help="control steps per command (default 50)")
    p.add_argument("--n-envs", type=int, default=1, help="environments per command (default 1)")

    p = subs["mirror-check"] = sub.add_parser("mirror-check", help="verify mirror-symmetry invariants on a model")
    _common(p, "output report JSON")
    _model_flag(p)
    p.add_argument("--samples", type=int, default=1000, help="random states/actions to test (default 1000)")
    p.add_argument("--tolerance", type=float, default=1e-9, help="reward invariance tolerance (default 1e-9)")
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
    if args.config is not None:
        cfg = formats.read_json(args.config)
        sub = subs[args.command]
        dests = {a.dest for a in sub._actions}
        extra = {}
        defaults = {}
        for key, value in cfg.items():
            if key in ("schema_version", "kind"):
                continue
            if key in dests and key not in ("config", "out", "manifest"):
                defaults[key] = Path(value) if isinstance(sub.get_default(key), Path) else value
            elif args.command == "train-student" and key in {f.name for f in fields(DAggerConfig)}:
                extra[key] = value
            else:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        args.dagger_overrides = extra
    else:
        args.dagger_overrides = {}
    return args


# -- helpers --------------------------------------------------------------------

def _load_model(path):
    if path is None:
        return toy_humanoid()
    try:
        return RobotModel.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: cannot read robot model ({exc})") from exc


def _load_library(args, model):
    lib = MotionLibrary.load(args.library, model) if args.library else toy_motion_library(model)
    if args.motions:
        lib = lib.subset([m.strip() for m in args.motions.split(",") if m.strip()])
    return lib


def _manifest_path(args, directory=False):
    if args.manifest is not None:
        return args.manifest
    return args.out / "manifest.json" if directory else args.out.with_name(args.out.name + ".manifest.json")


def _effective(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}


# -- subcommands ----------------------------------------------------------------

def cmd_retarget(args, man):
    model = _load_model(args.model)
    problem, fps, _ = load_motion(args.motion, model)
    overrides = {k: getattr(args, k) for k in ("w_smooth", "w_ori") if getattr(args, k) is not None}
    problem = replace(problem, **overrides)
    result = retarget_sequence(model, problem, LMConfig(lambda_init=args.lambda_init,
                                                        max_iterations=args.max_iterations))
    save_result(args.out, result, model, fps)
    man.add_input(args.model)
    man.add_input(args.motion)
    man.add_output(args.out)
    man.results = {"mean_keypoint_error": result.mean_keypoint_error,
                   "final_keypoint_rmse": float(np.sqrt(np.mean(result.frame_rmse ** 2))),
                   "iterations": int(result.iterations), "converged": bool(result.converged),
                   "objective_final": float(result.objective_history[-1]), "n_frames": int(problem.n_frames)}


def _frame_array(frames, key, path):
    try:
        return np.array([fr[key] for fr in frames], dtype=float)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: every frame needs a numeric {key!r} field") from exc


def cmd_eval_motion(args, man):
    frames = formats.read_jsonl(args.rollout)
    if not frames:
        raise InputError(f"{args.rollout}: rollout is empty")
    kp = _frame_array(frames, "keypoints", args.rollout)
    ref_kp = _frame_array(frames, "ref_keypoints", args.rollout)
    q = _frame_array(frames, "joints", args.rollout)
    ref_q = _frame_array(frames, "ref_joints", args.rollout)
    if kp.shape != ref_kp.shape or q.shape != ref_q.shape:
        raise InputError("robot and reference arrays differ in shape")
    kp_err = np.sum((kp - ref_kp) ** 2, axis=(1, 2))
    q_err = np.sum((q - ref_q) ** 2, axis=1)
    out = {"n_frames": len(frames), "quality": quality_from_errors(kp_err, q_err),
           "mean_keypoint_sq_error": float(np.mean(kp_err)), "mean_joint_sq_error": float(np.mean(q_err)),
           "stability": None}
    if all("projected_gravity" in fr for fr in frames):
        g = _frame_array(frames, "projected_gravity", args.rollout)
        out["stability"] = stability(g, len(frames), args.tilt_threshold)
    formats.write_json(args.out, out, kind="motion_eval")
    man.add_input(args.rollout)
    man.add_output(args.out)
    man.results = out


def cmd_train_student(args, man):
    model = _load_model(args.model)
    lib = _load_library(args, model)
    base = DAggerConfig.benchmark() if args.preset == "benchmark" else DAggerConfig()
    values = base.to_dict()
    values.update(args.dagger_overrides)
    for key in ("iterations", "n_envs", "batch_size", "learning_rate"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    values["seed"] = args.seed
    config = DAggerConfig.from_dict(values)
    student = benchmark_student(args.student, observation_dim(model.n_joints), model.n_joints, config,
                                random_state=args.seed, latent_dim=args.latent_dim)
    args.out.mkdir(parents=True, exist_ok=True)
    formats.write_json(args.out / "config.json", {"dagger": config.to_dict(), "student": args.student,
                                                  "student_params": _jsonable(student.get_params()),
                                                  "motions": [m.name for m in lib.motions]}, kind="train_config")
    ckpt = args.out / "checkpoint.json"
    try:
        res = dagger_train(config, lib, student, checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every,
                           callback=lambda row: log.info("iteration %d mse %.6g", row["iteration"], row["mse"]))
    finally:
        man.add_output(args.out / "config.json")
        if ckpt.exists():
            man.add_output(ckpt)
    res.write_curve(args.out / "loss_curve.csv")
    save_student(args.out / "student.json", student)
    for name in ("loss_curve.csv", "student.json"):
        man.add_output(args.out / name)
    if args.library:
        man.add_input(args.library)
    if args.model:
        man.add_input(args.model)
    mse = res.column("mse")
    man.results = {"iterations": len(res.curve), "mse_first": float(mse[0]), "mse_final": float(mse[-1]),
                   "terminations": res.terminations, "episodes": res.episodes}


def _jsonable(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


def cmd_rollout(args, man):
    model = _load_model(args.model)
    lib = _load_library(args, model)
    script = read_script(args.script)
    student = load_student(args.student) if args.student else None
    frames = script_rollout(script, lib, make_env_factory(model, n_envs=1, seed=args.seed), student=student)
    rollout_log(args.out, frames)
    man.add_input(args.script)
    if args.student:
        man.add_input(args.student)
    man.add_output(args.out)
    man.results = {"n_frames": len(frames), "duration_s": float(sum(c.duration for c in script)),
                   "fell": any(fr["fallen"] for fr in frames)}


def cmd_interpolate(args, man):
    model = _load_model(args.model)
    student = load_student(args.student)
    if args.steps < 1:
        raise InputError("--steps must be positive")
    alpha = np.linspace(0.0, 1.0, args.steps) if args.ramp else args.alpha
    run = interpolate_rollout(student, args.text_a, args.text_b, alpha, make_env_factory(model, 1, args.seed),
                              args.steps)
    alphas = np.broadcast_to(np.asarray(alpha, dtype=float), (args.steps,))
    frames = frames_from_run(run, model, alpha=[float(a) for a in alphas])
    rollout_log(args.out, frames)
    man.add_input(args.student)
    man.add_output(args.out)
    man.results = {"n_frames": len(frames)}


def cmd_dump_latents(args, man):
    student = load_student(args.student)
    if not hasattr(student, "params_"):
        raise InputError("dump-latents needs a CVAE student checkpoint")
    model = toy_humanoid()
    n = student.params_.config.action_dim
    if n != model.n_joints:
        raise InputError(f"student acts on {n} joints; the built-in environment has {model.n_joints}")
    dump = dump_latents(student, args.commands, make_env_factory(model, args.n_envs, args.seed), args.steps)
    dump.write(args.out)
    man.add_input(args.student)
    man.add_output(args.out)
    man.results = dump.summary()


def mirror_report(model, samples, seed, tolerance):
    """Involution, symmetrized-policy and reward-invariance checks; returns a JSON-ready dict."""
    rng = np.random.default_rng(seed)
    spec = MirrorSpec.for_observation(model)
    S = rng.normal(size=(samples, spec.state_dim))
    A = rng.normal(size=(samples, spec.n_joints))
    state_inv = bool(np.array_equal(mirror_state(mirror_state(S, spec), spec), S))
    action_inv = bool(np.array_equal(mirror_action(mirror_action(A, spec), spec), A))
    W = rng.normal(size=(spec.state_dim, spec.n_joints))
    sym_loss = float(symmetry_loss(symmetrize(lambda X: X @ W, spec), S, spec))
    worst = 0.0
    robot_inv = True
    for _ in range(samples):
        state, ref = random_state_pair(rng, model)
        r0 = reward_terms(state, ref, model=model).total
        ms, mr = mirror_robot_state(state, model), mirror_reference(ref, model)
        r1 = reward_terms(ms, mr, model=model).total
        worst = max(worst, abs(r1 - r0))
        back = mirror_robot_state(ms, model)
        robot_inv &= all(np.array_equal(a, b) for a, b in zip(state.to_dict().values(), back.to_dict().values()))
    ok = state_inv and action_inv and robot_inv and sym_loss == 0.0 and worst <= tolerance
    return {"samples": samples, "state_involution": state_inv, "action_involution": action_inv,
            "robot_state_involution": bool(robot_inv), "symmetrized_policy_loss": sym_loss,
            "reward_invariance_max_abs": worst, "tolerance": tolerance, "passed": bool(ok)}


def cmd_mirror_check(args, man):
    if args.samples < 1:
        raise InputError("--samples must be positive")
    model = _load_model(args.model)
    report = mirror_report(model, args.samples, args.seed, args.tolerance)
    formats.write_json(args.out, report, kind="mirror_report")
    if args.model:
        man.add_input(args.model)
    man.add_output(args.out)
    man.results = report
    if not report["passed"]:
        raise NumericalError("mirror-symmetry invariants violated; see report")


HANDLERS = {"retarget": cmd_retarget, "eval-motion": cmd_eval_motion, "train-student": cmd_train_student,
            "rollout": cmd_rollout, "interpolate": cmd_interpolate, "dump-latents": cmd_dump_latents,
            "mirror-check": cmd_mirror_check}


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    man = RunManifest(command=args.command, seed=args.seed, argv=argv)
    man.config_hashes["effective"] = _hash_dict(_effective(args))
    if args.config is not None:
        man.config_hashes[str(args.config)] = formats.file_sha256(args.config)
    start = time.perf_counter()
    code = 0
    try:
        HANDLERS[args.command](args, man)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = 2
    except (InputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    man.timings = {"wall_clock_s": time.perf_counter() - start}
    man.created = datetime.now(timezone.utc).isoformat()
    path = _manifest_path(args, directory=args.command == "train-student")
    path.parent.mkdir(parents=True, exist_ok=True)
    man.results.setdefault("exit_code", code)
    man.write(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
