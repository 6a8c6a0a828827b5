from .base import LossBreakdown, ModelConfig, Params, SequenceNoise, onehot_actions
from .dswm import DSWM, DswmStep, dswm_step
from .training import (TrainConfig, build_model, load_model, save_model, train_dswm, train_model,
                       train_world, write_curves_csv)
from .world import WorldModel, WorldStep, world_step
