"""Voltage-sample simulation and radial topology learning for distribution grids."""

__version__ = "0.1.0"

from .experiment import ExperimentPlan, ExperimentResult, emit_plotdata, run_experiment
from .learner import (
    LearnedTopology,
    LearnerConfig,
    edge_error,
    learn,
    learnable_edges,
)
from .network import (
    GridNetwork,
    IncidenceMatrix,
    LineImpedance,
    check_assumption2,
    incidence,
    load_case,
    save_case,
    validate_radial,
)
from .powerflow import (
    InjectionProfile,
    VoltageSolution,
    acpf_solve,
    block_impedance,
    lcpf3_solve,
    lcpf_solve,
)
from .sampling import LoadModel, SampleSet, draw_injections, generate_samples
from .stats import (
    CovarianceAccumulator,
    CovarianceSource,
    SampleMatrix,
    TestConfig,
    VariableLayout,
    analytic_covariance_lcpf,
    ci_test,
    empirical_covariance,
    inverse_pattern_check,
    quartet,
)

__all__ = [
    "ExperimentPlan",
    "ExperimentResult",
    "emit_plotdata",
    "run_experiment",
    "LearnedTopology",
    "LearnerConfig",
    "edge_error",
    "learn",
    "learnable_edges",
    "GridNetwork",
    "IncidenceMatrix",
    "LineImpedance",
    "check_assumption2",
    "incidence",
    "load_case",
    "save_case",
    "validate_radial",
    "InjectionProfile",
    "VoltageSolution",
    "acpf_solve",
    "block_impedance",
    "lcpf3_solve",
    "lcpf_solve",
    "LoadModel",
    "SampleSet",
    "draw_injections",
    "generate_samples",
    "CovarianceAccumulator",
    "CovarianceSource",
    "SampleMatrix",
    "TestConfig",
    "VariableLayout",
    "analytic_covariance_lcpf",
    "ci_test",
    "empirical_covariance",
    "inverse_pattern_check",
    "quartet",
    "__version__",
]
