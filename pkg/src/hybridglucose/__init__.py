"""Hybrid minimal-model glucose forecasting with learned meal absorption rates."""
from .absorption import (
    AbsorptionTemplate,
    BumpModel,
    BumpParams,
    MealEvent,
    NeuralModel,
    SquareModel,
    SquareParams,
    TemplateMixtureModel,
    total_control_uG,
)
from .odecore import PatientParams, PhysioState, bergman_rhs, integrate, integrate_forced
from .simulator import Dataset, SimulationConfig, generate_dataset
from .training import TrainingConfig, train

__version__ = "0.1.0"
