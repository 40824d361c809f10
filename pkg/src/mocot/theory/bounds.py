"""Closed-form bound values and the result record for a single bound check.

Monte-Carlo checks use Wilson score intervals at the 0.99 level; a bound
counts as satisfied only when the interval sits on the correct side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .info import binary_entropy

Z_99 = 2.5758293035489004  # two-sided 0.99 normal quantile
_EQ_TOL = 1e-12


def wilson_interval(successes: int, trials: int, z: float = Z_99) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes outside [0, trials]")
    phat = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (phat + z2 / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z2 / (4 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass(frozen=True)
class BoundCheckResult:
    name: str
    direction: str  # "upper": estimate <= bound; "lower": estimate >= bound; "equal"
    bound_value: float
    empirical_estimate: float
    confidence_interval: tuple[float, float]
    satisfied: bool
    trials: int
    exact_probability: float | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "direction": self.direction,
            "bound": self.bound_value,
            "estimate": self.empirical_estimate,
            "ci_low": self.confidence_interval[0],
            "ci_high": self.confidence_interval[1],
            "satisfied": self.satisfied,
            "trials": self.trials,
            "exact": self.exact_probability,
        }


def check_result(
    name: str,
    direction: str,
    bound_value: float,
    estimate: float,
    ci: tuple[float, float],
    trials: int,
    exact: float | None = None,
) -> BoundCheckResult:
    """Assemble a result; ``satisfied`` means the CI respects the bound direction."""
    bound_value, estimate = float(bound_value), float(estimate)
    ci = (float(ci[0]), float(ci[1]))
    if direction == "upper":
        satisfied = ci[0] <= bound_value + _EQ_TOL
    elif direction == "lower":
        satisfied = ci[1] >= bound_value - _EQ_TOL
    elif direction == "equal":
        satisfied = abs(estimate - bound_value) <= _EQ_TOL
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return BoundCheckResult(
        name, direction, bound_value, estimate, ci, bool(satisfied), trials, exact
    )


def exact_result(name: str, direction: str, bound_value: float, value: float) -> BoundCheckResult:
    """Result for an exactly computed quantity (point interval, zero trials)."""
    return check_result(name, direction, bound_value, value, (value, value), 0)


# --- closed forms -------------------------------------------------------------

def flat_success_upper_bound(valid_mass_upper: float, horizon: int) -> float:
    """Per-step valid mass to the power of the horizon."""
    if not 0.0 < valid_mass_upper <= 1.0:
        raise ValueError("valid_mass_upper outside (0,1]")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return valid_mass_upper ** horizon


def modular_success_lower_bound(
    false_reject: float,
    coupling_leakage: float,
    valid_mass_lower: Sequence[float],
    module_lengths: Sequence[int],
) -> float:
    """(1 - alpha) * (1 - c*eps) * prod_k p_k ** T_k."""
    if len(valid_mass_lower) != len(module_lengths):
        raise ValueError("per-module masses and lengths misaligned")
    if not valid_mass_lower:
        raise ValueError("need at least one module")
    if not 0.0 <= false_reject < 1.0:
        raise ValueError("false_reject outside [0,1)")
    if not 0.0 <= coupling_leakage < 1.0:
        raise ValueError("coupling_leakage outside [0,1)")
    product = (1.0 - false_reject) * (1.0 - coupling_leakage)
    for mass, length in zip(valid_mass_lower, module_lengths):
        if not 0.0 < mass <= 1.0:
            raise ValueError("per-module valid mass outside (0,1]")
        if length < 1:
            raise ValueError("module length must be >= 1")
        product *= mass ** length
    return product


def spurious_suppression_bound(false_accept: float, modules: int, interface_fraction: float) -> float:
    """beta + K * delta."""
    if not 0.0 <= false_accept < 1.0:
        raise ValueError("false_accept outside [0,1)")
    if modules < 1:
        raise ValueError("modules must be >= 1")
    if not 0.0 <= interface_fraction < 1.0:
        raise ValueError("interface_fraction outside [0,1)")
    return false_accept + modules * interface_fraction


def typed_disent_bound(leakage_bits: float, interface_fraction: float, subspace_size: int) -> float:
    """leakage + H2(delta) + delta * log2(B_t), in bits."""
    if leakage_bits < 0:
        raise ValueError("leakage_bits must be >= 0")
    if not 0.0 <= interface_fraction < 1.0:
        raise ValueError("interface_fraction outside [0,1)")
    if subspace_size < 1:
        raise ValueError("subspace_size must be >= 1")
    return leakage_bits + binary_entropy(interface_fraction) + interface_fraction * math.log2(
        subspace_size
    )
