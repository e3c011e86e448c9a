"""Stochastic heat equations driven by symmetric Levy generators.

Kernels and their functionals, lattice noise, a mild-solution solver with a
deterministic second-moment oracle for the linear (parabolic Anderson) case,
and verdict-style checks of the quantitative bounds.
"""

__version__ = "0.1.0"

from .errors import (
    AllocationLimit,
    ConfigInvalid,
    DivergentResolvent,
    GridMismatch,
    HorizonExceeded,
    InsufficientRange,
    LevyHeatError,
    NoRoot,
    OffsetOutOfRange,
    QuadratureUnderresolved,
    TruncationTooSmall,
)
from .levy_kernel import (
    KernelFunctionals,
    KernelModel,
    QuadratureSpec,
    brownian,
    frak_T,
    g_eval,
    gamma_k,
    kernel_functionals,
    p_eval,
    p_eval_many,
    p0_eval,
    p0_integral,
    psi_eval,
    resolvent_identity_check,
    stable,
    tabulated,
    theta_estimate,
    upsilon_eval,
)
from .measure_init import (
    FiniteMeasure,
    delta,
    fourier_u0,
    heat_convolve,
    heat_convolve_many,
    heat_convolve_rows,
    make_positive_definite_example,
    measure_from_json,
    measure_to_json,
)
from .conv_calculus import (
    SpaceTimeGrid,
    check_lemma_pp,
    check_lemma_star2,
    check_lemma_star2_grid,
    st_convolve,
    time_convolve_at_origin,
)
from .solver import (
    FieldLattice,
    MomentRow,
    MomentTable,
    SigmaSpec,
    StabilityRow,
    evolve,
    mc_moments,
    pam_second_moment_oracle,
    picard_iterate,
    positivity_scan,
    sigma_custom,
    sigma_linear,
    sigma_saturating,
    stability_bound,
    stability_compare,
)
from .noise_field import (
    NoiseLattice,
    dump_noise,
    iter_noise_rows,
    load_noise,
    sample_noise,
    shift_noise,
)
from .analysis import (
    NOT_APPLICABLE,
    BoundVerdict,
    ModulusStat,
    check_exist_unique_bound,
    lyapunov_fit,
    modulus_estimate,
    nochaos_sup_scan,
    small_t_scan,
    tail_decay_fit,
)
from .cli import (
    ExperimentConfig,
    kernel_info,
    load_experiment_config,
    main,
)

__all__ = [
    "AllocationLimit",
    "ConfigInvalid",
    "DivergentResolvent",
    "GridMismatch",
    "HorizonExceeded",
    "InsufficientRange",
    "KernelFunctionals",
    "KernelModel",
    "LevyHeatError",
    "NoRoot",
    "OffsetOutOfRange",
    "QuadratureSpec",
    "QuadratureUnderresolved",
    "TruncationTooSmall",
    "BoundVerdict",
    "ExperimentConfig",
    "FieldLattice",
    "FiniteMeasure",
    "ModulusStat",
    "MomentRow",
    "MomentTable",
    "NOT_APPLICABLE",
    "NoiseLattice",
    "SigmaSpec",
    "SpaceTimeGrid",
    "StabilityRow",
    "brownian",
    "check_exist_unique_bound",
    "dump_noise",
    "iter_noise_rows",
    "load_noise",
    "sample_noise",
    "shift_noise",
    "check_lemma_pp",
    "check_lemma_star2",
    "check_lemma_star2_grid",
    "delta",
    "evolve",
    "fourier_u0",
    "frak_T",
    "g_eval",
    "gamma_k",
    "heat_convolve",
    "heat_convolve_many",
    "heat_convolve_rows",
    "kernel_functionals",
    "kernel_info",
    "load_experiment_config",
    "lyapunov_fit",
    "main",
    "make_positive_definite_example",
    "mc_moments",
    "measure_from_json",
    "measure_to_json",
    "modulus_estimate",
    "nochaos_sup_scan",
    "p_eval",
    "p_eval_many",
    "p0_eval",
    "p0_integral",
    "pam_second_moment_oracle",
    "picard_iterate",
    "positivity_scan",
    "psi_eval",
    "resolvent_identity_check",
    "sigma_custom",
    "sigma_linear",
    "sigma_saturating",
    "small_t_scan",
    "st_convolve",
    "stability_bound",
    "stability_compare",
    "stable",
    "tabulated",
    "tail_decay_fit",
    "theta_estimate",
    "time_convolve_at_origin",
    "upsilon_eval",
    "__version__",
]
