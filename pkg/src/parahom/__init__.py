"""parahom: a Monte Carlo laboratory for monotone envelopes, parabolic
subdifferential measures, and effective operators of random fully nonlinear
uniformly parabolic equations in space-time environments with unit range of
dependence."""

__version__ = "0.1.0"

from .lattice import (
    CubeIndex,
    Field,
    GridSpec,
    cfl_dt,
    children,
    cube_of_point,
    grid_for_box,
    grid_for_cube,
    parabolic_boundary_mask,
    restrict,
)
from .environment import (
    CellDraw,
    Environment,
    EnvironmentSpec,
    F_range_on_cube,
    boundedness_audit,
    ellipticity_audit,
    pucci,
)
from .solver import (
    CFLViolation,
    NumericalBlowup,
    ReducedSolution,
    SolveRequest,
    Solution,
    SolverError,
    discrete_F,
    discrete_residual,
    solve_dirichlet,
    solve_reduced,
    solve_sampled,
)
from .envelope import (
    EnvelopeResult,
    SubdiffMeasure,
    convex_envelope_slice,
    envelope_regularity,
    fiber_measure_from_extremes,
    monotone_envelope,
    running_min,
    subdiff_measure_contact,
    subdiff_measure_fiber,
)
from .mu import (
    MuSample,
    MuStats,
    check_abp,
    check_bounds,
    check_lipschitz_ell,
    check_subadditivity,
    check_variance_decay,
    estimate_mu,
    estimate_mu_star,
    hypercone_constant,
    lower_bound_constant,
    mc_moments,
    ptf_constant,
    upper_bound_constant,
)
from .effective import (
    BracketError,
    CorrectorRun,
    EffectiveEstimate,
    FbarTable,
    build_fbar_table,
    corrector_decay,
    estimate_fbar,
    pava_decreasing,
    solve_homogenized,
    solve_homogenized_sampled,
)
