"""Retargeting, tracking metrics, mirror symmetry and CVAE teacher-student
distillation for text-directed humanoid whole-body control, at desk scale."""

__version__ = "0.1.0"

from ._validation import InputError, NumericalError
from .cvae import CVAEStudent, MLPStudent, load_student, save_student
from .distill import DAggerConfig, MotionLibrary, dagger_train, toy_motion_library
from .metrics import MetricWeights, ReferenceFrame, RobotState, motion_quality, reward_terms, stability
from .model import RobotModel, forward_kinematics, toy_humanoid
from .retarget import LMConfig, LMRetargeter, RetargetProblem, retarget_sequence
from .sim import RandomizationConfig, ToyEnv, teacher_oracle
from .symmetry import MirrorSpec, SymmetricLinearPolicy, mirror_action, mirror_state
from .textenc import TextEncoder, embed_text, parse_script

__all__ = [
    "__version__", "InputError", "NumericalError", "CVAEStudent", "MLPStudent", "load_student", "save_student",
    "DAggerConfig", "MotionLibrary", "dagger_train", "toy_motion_library", "MetricWeights", "ReferenceFrame",
    "RobotState", "motion_quality", "reward_terms", "stability", "RobotModel", "forward_kinematics",
    "toy_humanoid", "LMConfig", "LMRetargeter", "RetargetProblem", "retarget_sequence", "RandomizationConfig",
    "ToyEnv", "teacher_oracle", "MirrorSpec", "SymmetricLinearPolicy", "mirror_action", "mirror_state",
    "TextEncoder", "embed_text", "parse_script",
]
