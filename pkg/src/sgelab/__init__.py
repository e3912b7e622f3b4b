"""Strategy-guided exploration for group-relative policy optimization at desk scale."""

from .kernels import BACKEND
from .core import EnvSpec, Goal, Group, Observation, Trajectory, validate_trajectory
from .envs import make_env
from .policy import PolicyConfig, build_base_policy
from .evaluation import evaluate, pass_at_k
from .sge import Buffers, collect_groups
from .train import Trainer, TrainerConfig, update_step

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Buffers",
    "EnvSpec",
    "Goal",
    "Group",
    "Observation",
    "PolicyConfig",
    "Trainer",
    "TrainerConfig",
    "Trajectory",
    "build_base_policy",
    "collect_groups",
    "evaluate",
    "make_env",
    "pass_at_k",
    "update_step",
    "validate_trajectory",
]
