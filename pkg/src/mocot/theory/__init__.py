"""Numerical laboratory for the sequential-reasoning bounds."""

from .bounds import (
    BoundCheckResult,
    flat_success_upper_bound,
    modular_success_lower_bound,
    spurious_suppression_bound,
    typed_disent_bound,
    wilson_interval,
)
from .info import (
    CouplingModel,
    MediatorMixture,
    binary_entropy,
    conditional_mutual_information,
    copy_coupling,
    coupling_kl,
    interaction_information,
    kl_divergence_bits,
    leakage_mixture,
    mediator_mixture,
    mutual_information,
    noisy_function_coupling,
    product_joint,
    value_decomposition_gap,
)
from .suite import render_json, render_text, run_bound_checks
from .synthetic import (
    LogitTablePolicy,
    SyntheticMDPSpec,
    TypedModule,
    UniformPolicy,
    ValidMassPolicy,
    VerifierModel,
    enumerate_flat_success,
    simulate_flat,
    simulate_modular,
    simulate_spurious,
    spurious_mass,
    state_distribution,
    valid_step_mass,
)

__all__ = [name for name in dir() if not name.startswith("_")]
