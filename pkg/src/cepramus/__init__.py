"""Sparse hierarchical-Bayesian EEG source localization with randomized
multiresolution scanning on an analytic three-shell spherical head model."""

from .errors import (
    CepramusError,
    ConfigError,
    ConstraintError,
    DegenerateDataError,
    EmptyRoiError,
    HyperparameterError,
    LevelSizeError,
    RootBracketError,
    SeriesTruncationError,
    ShapeError,
    SourceOutOfDomainError,
    ZeroMassError,
)
from .model import (
    CurrentEstimate,
    Dipole,
    DipoleConfig,
    HyperParams,
    LeadField,
    MeasurementVector,
    OrientationMode,
    Reference,
    SourceSpace,
    Updater,
    amplitude_field,
    project_to_constraint,
    scale_measurement,
)
from .forward import (
    ElectrodeLayout,
    NoiseSpec,
    ShellModel,
    SimulationResult,
    ary_shell_model,
    ball_source_space,
    build_leadfield,
    dipole_potential,
    fibonacci_cap_layout,
    preset_configuration,
    simulate_measurement,
)
from .solvers import (
    CepResult,
    SolverTrace,
    gamma_update_em,
    gamma_update_ias,
    lasso_objective,
    log_marginal_posterior,
    run_cep,
    solve_lasso_irls,
    solve_weighted_ridge,
)
from .multires import (
    MultiresolutionDecomposition,
    RamusConfig,
    RamusResult,
    ScalingMode,
    plan_level_sizes,
    prolong_estimate,
    prolong_gamma,
    restrict_leadfield,
    run_ramus,
    sample_decomposition,
)
from .hyperprior import (
    REFERENCE_KAPPA,
    expectation_ratio,
    reference_theta,
    solve_kappa_match,
    theta_from_noise,
)
from .metrics import (
    DipoleMetrics,
    MetricsReport,
    RoiSpec,
    accuracy_measures,
    evaluate_estimate,
    hard_threshold_focality,
    limited_emd,
    roi_mass_center,
)
from .harness import ExperimentConfig, SolverCellConfig, load_config, run_experiment, sweep

__version__ = "0.1.0"
