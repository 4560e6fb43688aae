"""Multirate coupling-window time integration for two interface-coupled
advection-diffusion subdomains."""

from .coupling import (
    ContractionError,
    SolverError,
    Trajectory,
    WindowConfig,
    WindowOperator,
    WindowSolution,
    assemble_window,
    check_flux_conservation,
    coupled_system,
    export_trajectory_csv,
    flux_solve,
    interfacial_energy_term,
    run_simulation,
    solve_window_direct,
    solve_window_fixed_point,
    step_restriction_ratio,
    trace_projection,
)
from .dgit import SubstepBlock, assemble_substep, cn_substep, integrate, solve_substep
from .fespace import AdvectionSpec, FeOperators, ProblemSpec, assemble, coercivity_probe, from_matrices
from .mesh import InterfaceMap, MatchError, Mesh, build_mesh, match_interfaces
from .timepoly import (
    DtildeReport,
    Interval,
    SchemeError,
    SchemeSpec,
    TimePoly,
    backward_euler,
    build_dtilde,
    continuous_galerkin,
    crank_nicolson,
    dg,
    downwind,
    gauss_rule,
    j_decompose,
    j_reconstruct,
    legendre_eval,
    project_l2,
    project_l2_broken,
    shipped_schemes,
)
from .verify import (
    ErrorReport,
    ManufacturedCase,
    RateTable,
    ReferenceTrajectory,
    convergence_study,
    energy_report,
    error_norms,
    mms_case,
    prepare_initial_state,
    reference_solve,
    residual_check,
)

__version__ = "0.1.0"
