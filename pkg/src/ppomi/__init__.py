"""PPO-based black-box model inversion on synthetic worlds."""

from .errors import (
    BudgetError,
    CapabilityError,
    ConfigError,
    DiagnosticsError,
    PpoMiError,
    ResultsIOError,
    ShapeError,
    TrainingError,
    UsageError,
)
from .mdp import MdpConfig
from .ppo import AttackOutcome, PpoConfig, run_attack
from .worldgen import Oracle, WorldConfig, build_world, load_world, save_world

__version__ = "0.1.0"
