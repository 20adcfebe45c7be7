"""annkin: DSMC simulation and analysis of a hard-sphere gas whose colliding
pairs annihilate with fixed probability alpha (and scatter elastically
otherwise), including self-similar rescaling, decay-coefficient estimation
and the moment/entropy diagnostics that test the predicted algebraic decay
of density and temperature.
"""

from .core import (
    ConfigError,
    ParticleEnsemble,
    MomentRecord,
    MomentSigma,
    CoefficientSet,
    RadialHistogram,
    Snapshot,
    Trajectory,
    SimConfig,
    compute_moments,
    jensen_check,
)
from .collision import (
    post_collision,
    sample_sigma,
    povzner_rho,
    alpha_star,
    maxwellian_density,
    maxwellian_coefficients,
    povzner_angular_check,
)
from .dsmc import (
    HAVE_NUMBA,
    MajorantViolationError,
    SimState,
    init_state,
    load_checkpoint,
    run,
    save_checkpoint,
    step,
    tau_accumulate,
)
from .rescale import to_selfsimilar, estimate_coefficients, reconstruct_moments
from .profile import extract_profile, profile_distance, profile_coefficients, predicted_rates
from . import diagnostics

__version__ = "0.1.0"
