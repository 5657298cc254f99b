"""Matrix-free stochastic Newton methods with sweep-exact cost accounting."""

from .bounds import BOUNDS, BoundCheckReport, verify_bound
from .data import Batch, Dataset, gaussian_mixture, load_dataset_csv, sample_batch, save_dataset_csv, subsample
from .errors import (
    AccountingError,
    ConfigError,
    DegenerateSketchError,
    DimensionError,
    NonFiniteLossError,
    NumericalError,
    RegularizationError,
    SnkError,
    StepRejectedError,
)
from .harness import ExperimentSpec, batch_sensitivity, run_ensemble, spectrum_probe, summarize_dir
from .krylov import ForcingSchedule, cg_solve, gmres_solve, krylov_polynomial_check, minres_solve
from .lowrank import HessianOperator, LowRankFactor, MatrixOperator, randomized_eig, smw_solve
from .models import FeedforwardAutoencoder, QuadraticProblem, SweepLedger, make_saddle_problem
from .numerics import SeededRng
from .optimizer import OptimizerConfig, RunTrace, run, sweep_budget_report

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
