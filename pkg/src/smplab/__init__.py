"""Numerical laboratory for first-order optimality of controlled jump diffusions."""

__version__ = "0.1.0"

from .model import (
    DELTA_SING,
    ControlLaw,
    ControlledCoefficients,
    FeedbackLaw,
    LevyMeasure,
    OpenLoopLaw,
    SpikedLaw,
    TimeGrid,
    build_lq_coefficients,
    validate_coefficients,
)
from .simulate import (
    LinearCoefficients,
    NoiseBundle,
    PathBundle,
    euler_forward,
    gamma_process,
    linear_closed_form,
    sample_noise,
)
from .malliavin import (
    Brownian,
    Compose,
    Constant,
    Jump,
    PolynomialBasis,
    bm_integral,
    check_duality,
    clark_ocone_reconstruct,
    constant,
    evaluate,
    hm_derivative,
    jump_integral,
    project_conditional,
    square_map,
)
from .bsde import AdjointTriple, extract_qr, solve_linear_explicit, solve_regression
from .smp import (
    SmpVerdict,
    SpikeSpec,
    adjoint_for,
    check_necessary_condition,
    hamiltonian,
    hamiltonian_du,
    performance_J,
    spike_perturb,
    variational_Z,
)
from .lqsolver import (
    LqParams,
    LqSolution,
    closed_form_unconstrained,
    compare_to_unconstrained,
    solve_constrained,
)
