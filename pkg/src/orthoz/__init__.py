"""Two-stage semiparametric estimation with orthogonal moments and Monte Carlo
verification of its root-n asymptotics."""

from .errors import (
    ContractViolation,
    EvaluationError,
    OrthozError,
    SingularJacobian,
    SingularMatrix,
    UnsupportedOperation,
)
from .firststage import LearnerSpec, NuisanceFunction, fit, mse_against_truth, rate_certificate
from .moments import MeanMoment, MomentModel, NaivePlrMoment, Observation, PlrMoment, get_model
from .montecarlo import ExperimentConfig, PlrDgp, aggregate, rate_slope, run_experiment, run_replication
from .secondstage import EstimateResult, SplitPlan, infer, solve_z, split, two_stage

__version__ = "0.1.0"

__all__ = [
    "ContractViolation", "EvaluationError", "OrthozError", "SingularJacobian", "SingularMatrix",
    "UnsupportedOperation", "LearnerSpec", "NuisanceFunction", "fit", "mse_against_truth",
    "rate_certificate", "MeanMoment", "MomentModel", "NaivePlrMoment", "Observation", "PlrMoment",
    "get_model", "ExperimentConfig", "PlrDgp", "aggregate", "rate_slope", "run_experiment",
    "run_replication", "EstimateResult", "SplitPlan", "infer", "solve_z", "split", "two_stage",
]
