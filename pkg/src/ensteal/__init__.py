"""Model extraction experiments against a query-budgeted hard-label oracle.

The package trains a committee of substitute networks on labels bought from
a black-box target model, picks each round's queries actively (consensus
entropy, committee disagreement, diversity baselines), optionally grows the
training set with filtered pseudo-labels plus consistency training, and
measures how well adversarial examples crafted on the substitutes carry
over to the target. Everything runs on seeded float64 numpy and reproduces
bit for bit.
"""

from .datapool import Dataset, ImageLayout, PoolState
from .ensemble import EnsembleSpec, EnsembleState, make_default_ensemble
from .errors import (
    AttackFailedError,
    BudgetExhaustedError,
    InvalidConfigError,
    InvalidInputError,
    RemoteUnavailableError,
    StageError,
    TrainingDivergedError,
)
from .numkit import MlpModel, MlpSpec, SgdConfig
from .victim import QueryBudget, VictimOracle

__version__ = "0.1.0"

__all__ = [
    "AttackFailedError",
    "BudgetExhaustedError",
    "Dataset",
    "EnsembleSpec",
    "EnsembleState",
    "ImageLayout",
    "InvalidConfigError",
    "InvalidInputError",
    "MlpModel",
    "MlpSpec",
    "PoolState",
    "QueryBudget",
    "RemoteUnavailableError",
    "SgdConfig",
    "StageError",
    "TrainingDivergedError",
    "VictimOracle",
    "make_default_ensemble",
    "__version__",
]
