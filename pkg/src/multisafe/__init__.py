"""Multi-agent safe Q-learning with GP reward bounds and learned opponent models."""

from .agents import AgentConfig, MultiSafeQAgent, make_agent
from .environment import EnvModel, JointUnsafeSpec, quadcopter_env, rover_env
from .gp import BetaSchedule, GPosterior, KernelSpec
from .harness import EpisodeLog, ExperimentConfig, MetricsSummary, quadcopter_config, rover_config, run_experiment
from .safety import SafetyConfig

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "MultiSafeQAgent",
    "make_agent",
    "EnvModel",
    "JointUnsafeSpec",
    "quadcopter_env",
    "rover_env",
    "BetaSchedule",
    "GPosterior",
    "KernelSpec",
    "EpisodeLog",
    "ExperimentConfig",
    "MetricsSummary",
    "quadcopter_config",
    "rover_config",
    "run_experiment",
    "SafetyConfig",
]
