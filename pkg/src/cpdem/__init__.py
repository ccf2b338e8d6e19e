"""Parametric deep energy method: one network for a whole family of materials."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .constitutive import EnergyModel, lame_from_E_nu
from .domain import DirichletAnsatz, build_grid
from .loss import ExpectedEnergy, ParameterDistribution, PointObjective, Problem
from .network import ModelArchitecture, default_architecture, init_network
from .optim import TrainSchedule, finetune, train

__version__ = "0.1.0"
