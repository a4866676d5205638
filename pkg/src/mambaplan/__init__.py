"""State-space motion planning toolkit.

An end-to-end trajectory planner built on selective state-space sequence
mixing, with a synthetic scenario harness, a rule-based driving score, and
microbenchmarks comparing attention and state-space mixing costs.
"""

from .estimator import TrajectoryPlanner, validate_samples
from .metrics import (
    AgentTrack,
    DrivableMask,
    MetricThresholds,
    OrientedBox,
    ScenarioLog,
    SubScores,
    pdms,
    score_scenario,
)
from .planner import (
    COMMANDS,
    ConfigError,
    EgoStatus,
    ModelConfig,
    Trajectory,
    ade,
    forward,
    init_model,
)
from .scenarios import (
    KINDS,
    GenerationError,
    ScenarioSample,
    ScenarioSpec,
    generate_scenario,
    generate_set,
    read_set,
    write_set,
)
from .training import (
    Checkpoint,
    OptimizerParams,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AgentTrack",
    "COMMANDS",
    "Checkpoint",
    "ConfigError",
    "DrivableMask",
    "EgoStatus",
    "GenerationError",
    "KINDS",
    "MetricThresholds",
    "ModelConfig",
    "OptimizerParams",
    "OrientedBox",
    "ScenarioLog",
    "ScenarioSample",
    "ScenarioSpec",
    "SubScores",
    "TrainingDiverged",
    "Trajectory",
    "TrajectoryPlanner",
    "ade",
    "forward",
    "generate_scenario",
    "generate_set",
    "init_model",
    "load_checkpoint",
    "pdms",
    "read_set",
    "save_checkpoint",
    "score_scenario",
    "train",
    "validate_samples",
    "write_set",
]
