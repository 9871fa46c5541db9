from .core import (
    EvalResult,
    ExpertPolicy,
    NoisyExpertPolicy,
    Policy,
    RandomPolicy,
    RowStreams,
    ScoreReference,
    dump_rollouts,
    evaluate_policy,
    generate_dataset,
    joint_execute,
    make_env,
    rollout,
    score_reference,
)
from .maze import LAYOUTS, PointMaze
from .stage import StageTask

__all__ = [
    "EvalResult",
    "ExpertPolicy",
    "LAYOUTS",
    "NoisyExpertPolicy",
    "PointMaze",
    "Policy",
    "RandomPolicy",
    "RowStreams",
    "ScoreReference",
    "StageTask",
    "dump_rollouts",
    "evaluate_policy",
    "generate_dataset",
    "joint_execute",
    "make_env",
    "rollout",
    "score_reference",
]
