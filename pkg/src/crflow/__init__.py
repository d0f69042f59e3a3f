"""Numerical laboratory for the Webster scalar curvature flow on the CR sphere."""

from .basis import (
    BasisIndex,
    BasisTable,
    SpectralField,
    analyze,
    apply_sublaplacian,
    build_basis,
    integrate,
    levi_product,
    load_fixture,
    synthesize,
)
from .conformal import (
    ConformalState,
    alpha,
    conformal_sublaplacian,
    energy,
    normalized_energy,
    renormalize_volume,
    volume_theta,
    webster_curvature,
    yamabe_invariant,
    yamabe_quotient,
)
from .flow import (
    FlowConfig,
    F_p,
    G_2,
    GuardConstants,
    MonitorRecord,
    RunResult,
    Tolerances,
    alpha_prime,
    dissipation_check,
    guard_constants,
    rhs,
    run,
    step,
)
from .mobius import (
    CenterOfMass,
    HeisenbergPoint,
    MoebiusParams,
    balance,
    bubble,
    cayley,
    center_of_mass,
    concentration_profile,
    dilate,
    group_product,
    inverse_cayley,
    jacobian_factor,
    moebius_apply,
    pullback,
    site_count,
    translate,
)
from .diagnostics import (
    DecayFit,
    SpectralDeficit,
    aubin_deficit,
    conformal_eigenpairs,
    decay_fit,
    eigenvalue_lower_guard,
    kazdan_warner_residual,
    sbc_check,
    spectral_deficit,
)
from .presets import PRESETS, FieldSpec

__version__ = "0.1.0"
