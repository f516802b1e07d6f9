"""Split federated learning with dynamic tier scheduling, simulated
deterministically on a virtual clock."""

from .config import RunConfig, load_config
from .data import Dataset, partition_dirichlet, partition_iid, synth_blobs
from .errors import (
    ConfigError,
    DTFLError,
    InputError,
    NumericError,
    ParseError,
    ProtocolError,
    ShapeError,
    StateError,
)
from .protocol import AggregationMode, GlobalModelState, RoundContext, run_round
from .scheduler import ClientHistory, TierProfileTable, profile_tiers, schedule
from .simulator import ChurnPolicy, ResourceProfile, ResourceSimulator
from .split_model import BlockStack, TierSplit, build_stack, split

__version__ = "0.1.0"

__all__ = [
    "AggregationMode",
    "BlockStack",
    "ChurnPolicy",
    "ClientHistory",
    "ConfigError",
    "Dataset",
    "DTFLError",
    "GlobalModelState",
    "InputError",
    "NumericError",
    "ParseError",
    "ProtocolError",
    "ResourceProfile",
    "ResourceSimulator",
    "RoundContext",
    "RunConfig",
    "ShapeError",
    "StateError",
    "TierProfileTable",
    "TierSplit",
    "build_stack",
    "load_config",
    "partition_dirichlet",
    "partition_iid",
    "profile_tiers",
    "run_round",
    "schedule",
    "split",
    "synth_blobs",
]
