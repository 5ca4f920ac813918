"""Spectral multipliers on two-step stratified Lie groups: numerics and experiments."""
from .group import (
    Grid,
    GridFunction,
    GroupPoint,
    GroupSpecError,
    TwoStepGroup,
    ball_volume_mc,
    bracket,
    builtin_group,
    convolve,
    dilate,
    group_to_spec,
    homogeneous_norm,
    invert,
    multiply,
    parse_builtin,
    parse_group_spec,
)
from .spectral import (
    AssumptionReport,
    ClusteringError,
    ExponentTable,
    SpectralDecomposition,
    check_assumption_A,
    check_assumption_B,
    classify_group,
    critical_exponent,
    exponents,
    j_matrix,
    kernel_projection,
    projection_lipschitz_constant,
    spectral_decompose,
    stein_tomas,
    stein_tomas_conjugate,
)

from .specfun import (
    LaguerreParams,
    hermite_apply,
    laguerre_iter,
    laguerre_norm_sq,
    laguerre_norm_sq_exact,
    laguerre_phi,
    laguerre_table,
)
from .kernels import (
    CapPartition,
    FFTPlan,
    KernelEvaluator,
    KernelSample,
    Multiplier,
    NodeSet,
    QuadratureSpec,
    ScalePartition,
    bump,
    cap_partition,
    dyadic_multiplier_pieces,
    eigvp,
    evaluate_kernel,
    min_scale_ell0,
    radial_profile_integral,
    smooth_step,
    sphere_rule,
)
from .verify import (
    DEFAULTS,
    GOLDENS,
    Check,
    ExperimentReport,
    calibrate_radius,
    calibrate_threshold,
    localization_data,
    localization_profile,
    norm_M2,
    plancherel_closed_form,
    plancherel_crosscheck,
    propagation_covariance,
    propagation_profile,
    propagation_support_fraction,
    restriction_ratio_experiment,
    sobolev_embedding_check,
    sobolev_norm,
    sqrt_piece_multiplier,
    weighted_moments,
    weighted_plancherel_slope,
    young_ratio,
)

__version__ = "0.1.0"
