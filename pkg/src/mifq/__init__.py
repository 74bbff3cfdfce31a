"""Multi-agent inverse factorized soft Q-learning (MIFQ) on desk-scale Dec-POMDPs."""
from .envs import MinerLite, SpreadLite, TwoStepTeam, make_env
from .ilcore import Learner, TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Learner", "MinerLite", "SpreadLite", "TrainConfig", "TwoStepTeam", "make_env",
           "train", "__version__"]
