"""Right-invariant Sobolev geometry on diffeomorphism groups of the flat torus."""

from .flow import (
    DegenerateFlowError,
    Diffeo,
    FlowOptions,
    NoConvergenceError,
    TimeVelocity,
    compose,
    decompose_velocity,
    integrate_flow,
    invert,
    jacobian_min,
)
from .geodesic import (
    BvpProblem,
    DistanceConfig,
    GeodesicResult,
    distance_estimate,
    gradient_check,
    reparametrize_constant_speed,
    solve_bvp,
)
from .matching import (
    Kernel,
    LandmarkState,
    RegistrationProblem,
    karcher_mean,
    kernel_velocity,
    landmark_match,
    landmark_shoot,
    register_images,
)
from .metric import DiffeoPath, EnergyReport, path_energy, right_translate, theta, theta_inverse
from .spectral import (
    AdmissibilityError,
    GridSpec,
    InvalidInputError,
    MetricSpec,
    ScalarField,
    VectorField,
    apply_operator,
    cutoff_filter,
    sample_at,
    sobolev_inner,
    sobolev_norm,
    spectral_derivative,
    transform,
    inverse_transform,
)

__version__ = "0.1.0"
