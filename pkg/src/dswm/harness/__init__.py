from .config import ConfigError, ExperimentConfig, derive_seed
from .pipeline import (AcceptanceFailure, Manifest, MissingPrerequisite, eval_rollouts, make_datasets,
                       reproduce_all, train, train_agents)
