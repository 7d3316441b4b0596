"""State estimation by iterated pseudo-linear window optimization.

Public surface: system models with exact coefficient factorizations, the
horizon QP machinery, the window estimator, EKF/UKF/nonlinear-MHE baselines,
observability diagnostics, and the Monte Carlo benchmark harness.
"""

from .baselines import (
    GaussianBelief,
    NonlinearMhe,
    UkfParams,
    ekf_predict,
    ekf_step,
    ekf_update,
    ukf_predict,
    ukf_step,
    ukf_update,
    unscented_weights,
)
from .config import BenchmarkConfig, ESTIMATOR_ORDER, load_config
from .diagnostics import BoundsLog, ObservabilityReport, bounds_monitor, observability_gramian
from .estimator import (
    ArrivalCost,
    EstimatorConfig,
    ScdMhe,
    StepOutcome,
    WindowEstimate,
    riccati_update,
    update_arrival,
    warm_start,
)
from .exceptions import (
    ConfigError,
    ConvergenceError,
    CovarianceError,
    FilterError,
    ModelError,
    QpError,
    RankDeficiencyError,
    ScdMheError,
)
from .harness import (
    SummaryTable,
    TrialResult,
    run_linear_check,
    run_monte_carlo,
    run_trial,
    simulate_truth,
)
from .models import (
    LinearModel,
    NoiseSpec,
    QuadrotorKinematics,
    QuadrotorParams,
    SystemModel,
    control_signal,
)
from .qp import EqualityQP, HorizonKkt, QPSolution, assemble_linearized_qp, assemble_qp, dump_qp, solve_kkt
from .rng import GaussianStream, mix_seed

__version__ = "0.1.0"
