"""Spectral Galerkin / linearly implicit Euler solver for the stochastic Cahn-Hilliard equation
with Neumann boundary conditions, plus coupled strong-error convergence studies."""

__version__ = "0.1.0"

from .exceptions import (
    CHSPDEError,
    ConfigError,
    DomainError,
    ParameterError,
    RegularityError,
    ResourceError,
    SolverError,
    StepFailure,
    StepsizeError,
    StudyAborted,
    UndersamplingError,
)
from .spectral import (
    DiagonalSymbol,
    Eigensystem,
    SpectralField,
    apply_diagonal,
    build_eigensystem,
    complement_project,
    full_norm,
    mean_project,
    sobolev_norm,
    to_physical,
    to_spectral,
)
from .noise import (
    ConvolutionTrack,
    NoiseSpec,
    PathBundle,
    build_convolution,
    convolution_at,
    make_noise_spec,
    read_track,
    sample_path_bundle,
    write_track,
)
from .model import Potential, double_well, energy, make_potential, nemytskii_PN_f, one_sided_check, zero_potential
from .stepper import (
    ImplicitEulerStepper,
    SchemeState,
    SolverConfig,
    run_trajectory,
    solve_implicit,
    step_full,
    validate_stepsize,
)
from .harness import (
    ErrorReport,
    RateFit,
    Resolution,
    StudyPlan,
    fit_rate,
    holder_diagnostics,
    mass_invariant_check,
    regularity_diagnostics,
    simulate_paths,
    strong_error_study,
)
from .config import RunConfig, dump_config, load_config, parse_config
