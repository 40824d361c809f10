"""The fixed bound-check grid: one row per quantitative claim, checked by
exact computation where feasible and Monte-Carlo with Wilson intervals
elsewhere. Emitted by the CLI as JSON plus an aligned text table.
"""

from __future__ import annotations

import json

import numpy as np

from .bounds import (
    BoundCheckResult,
    check_result,
    exact_result,
    typed_disent_bound,
)
from .info import (
    coupling_kl,
    copy_coupling,
    leakage_mixture,
    mediator_mixture,
    value_decomposition_gap,
)
from .synthetic import (
    SyntheticMDPSpec,
    TypedModule,
    UniformPolicy,
    ValidMassPolicy,
    VerifierModel,
    enumerate_flat_success,
    simulate_flat,
    simulate_modular,
    simulate_spurious,
)

DEFAULT_TRIALS = 100_000
DEFAULT_SEED = 20240502

# Monte-Carlo grid for the flat exponential-decay bound: (per-step mass, horizon).
FLAT_GRID = ((0.5, 6), (0.7, 5), (0.9, 8), (0.6, 10), (0.8, 4), (0.55, 7), (0.95, 12))

# Modular lower-bound configurations: (alpha, c*eps, per-module mass, lengths).
MODULAR_GRID = (
    (0.1, 0.05, (0.8, 0.8, 0.8), (2, 2, 2)),
    (0.0, 0.0, (0.9, 0.85), (3, 2)),
    (0.2, 0.1, (0.7, 0.8, 0.9), (2, 3, 1)),
    (0.3, 0.0, (0.95,), (5,)),
)

# Spurious-suppression configurations: (beta, modules, delta).
SPURIOUS_GRID = ((0.05, 6, 0.01), (0.0, 3, 0.0), (0.2, 3, 0.05))

# Typed-disentanglement grid: mediator fidelity x interface prob x subspace size.
DISENT_FIDELITIES = (0.0, 0.5, 0.9)
DISENT_INTERFACES = (0.0, 0.1, 0.3)
DISENT_SIZES = (2, 4)

VALUE_LEAKAGES = (0.0, 0.1, 0.2, 0.4)


def _flat_spec(mass: float, horizon: int, seed: int) -> tuple[SyntheticMDPSpec, object]:
    if mass == 0.5:
        spec = SyntheticMDPSpec(state_count=8, horizon=horizon, valid_fraction=0.5, seed=seed)
        return spec, UniformPolicy()
    spec = SyntheticMDPSpec(state_count=10, horizon=horizon, valid_fraction=0.5, seed=seed)
    return spec, ValidMassPolicy(mass)


def _modular_spec(masses: tuple[float, ...], lengths: tuple[int, ...], seed: int) -> tuple[
    SyntheticMDPSpec, dict, VerifierModel | None
]:
    modules = tuple(
        TypedModule(f"t{i}", 6, length, mass, mass)
        for i, (mass, length) in enumerate(zip(masses, lengths))
    )
    spec = SyntheticMDPSpec(
        state_count=6 * len(modules),
        horizon=sum(lengths),
        valid_fraction=0.5,
        typed_partition=modules,
        interface_fraction=0.0,
        seed=seed,
    )
    policies = {m.type_id: ValidMassPolicy(m.valid_mass_lower) for m in modules}
    return spec, policies, None


def _spurious_spec(modules: int, delta: float, seed: int) -> SyntheticMDPSpec:
    state_count = 100
    interface = round(delta * state_count)
    per_module = (state_count - interface) // modules
    remainder = (state_count - interface) - per_module * modules
    sizes = [per_module + (1 if i < remainder else 0) for i in range(modules)]
    return SyntheticMDPSpec(
        state_count=state_count,
        horizon=modules,
        valid_fraction=0.2,
        typed_partition=tuple(
            TypedModule(f"t{i}", size, 1, 0.5, 1.0) for i, size in enumerate(sizes)
        ),
        interface_fraction=delta,
        seed=seed,
    )


def _value_gap_family(lam: float) -> float:
    """Exact gap for the two-module leakage family at a given mixing weight."""
    marginals = [np.array([0.7, 0.3]), np.array([0.6, 0.4])]
    rewards = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
    entangled = copy_coupling(2, 2) * 0.0
    entangled[1, 1] = 1.0  # leakage drags both modules onto their zero-reward outcome
    joint = leakage_mixture(marginals, entangled, lam)
    return value_decomposition_gap(rewards, joint, marginals)


def run_bound_checks(trials: int = DEFAULT_TRIALS, seed: int = DEFAULT_SEED) -> list[BoundCheckResult]:
    """Run the whole grid and return one result row per check."""
    results: list[BoundCheckResult] = []

    # Flat trajectories: exact uniform case, then the Monte-Carlo grid.
    exact_spec = SyntheticMDPSpec(state_count=8, horizon=6, valid_fraction=0.5, seed=seed)
    exact_value = enumerate_flat_success(exact_spec, UniformPolicy())
    results.append(exact_result("flat-exact-uniform-k0.5-B8-T6", "equal", 0.5 ** 6, exact_value))
    for i, (mass, horizon) in enumerate(FLAT_GRID):
        spec, policy = _flat_spec(mass, horizon, seed + i)
        results.append(
            simulate_flat(spec, policy, trials, name=f"flat-mc-p{mass}-T{horizon}")
        )

    # Modular lower bound.
    for i, (alpha, leak, masses, lengths) in enumerate(MODULAR_GRID):
        spec, policies, _ = _modular_spec(masses, lengths, seed + 100 + i)
        verifier = VerifierModel(alpha, 0.0)
        results.append(
            simulate_modular(
                spec,
                policies,
                verifier,
                trials,
                coupling_leakage=leak,
                name=f"modular-mc-a{alpha}-ce{leak}-K{len(masses)}",
            )
        )

    # Spurious suppression.
    for i, (beta, modules, delta) in enumerate(SPURIOUS_GRID):
        spec = _spurious_spec(modules, delta, seed + 200 + i)
        verifier = VerifierModel(0.1, beta)
        name = f"spurious-mc-b{beta}-K{modules}-d{delta}"
        result = simulate_spurious(spec, verifier, trials, name=name)
        if beta == 0.0 and delta == 0.0:
            # Disjoint supports: the frequency must be exactly zero.
            result = check_result(
                name + "-exact-zero",
                "equal",
                0.0,
                result.empirical_estimate,
                result.confidence_interval,
                result.trials,
            )
        results.append(result)

    # Typed disentanglement: exact conditional MI against the closed form.
    for size in DISENT_SIZES:
        for fidelity in DISENT_FIDELITIES:
            for delta in DISENT_INTERFACES:
                family = mediator_mixture(size, fidelity, delta)
                mi = family.model.conditional_mi()
                bound = typed_disent_bound(family.leakage_bits, delta, size)
                name = f"disent-exact-B{size}-f{fidelity}-d{delta}"
                direction = "equal" if (fidelity == 0.0 and delta == 0.0) else "upper"
                target = 0.0 if direction == "equal" else bound
                results.append(exact_result(name, direction, target, mi))

    # Value decomposition: exact zero when independent, monotone in leakage.
    gaps = [_value_gap_family(lam) for lam in VALUE_LEAKAGES]
    results.append(exact_result("value-gap-independent", "equal", 0.0, gaps[0]))
    monotone = all(gaps[i] <= gaps[i + 1] + 1e-12 for i in range(len(gaps) - 1))
    results.append(
        BoundCheckResult(
            name="value-gap-monotone-in-leakage",
            direction="lower",
            bound_value=0.0,
            empirical_estimate=gaps[-1],
            confidence_interval=(gaps[-1], gaps[-1]),
            satisfied=monotone,
            trials=0,
        )
    )

    # Weak-coupling KL on the same leakage family grows with the mixing weight.
    marginals = [np.full(4, 0.25), np.full(4, 0.25)]
    kls = [
        coupling_kl(leakage_mixture(marginals, copy_coupling(4, 2), lam))
        for lam in VALUE_LEAKAGES
    ]
    results.append(
        BoundCheckResult(
            name="coupling-kl-monotone-in-leakage",
            direction="lower",
            bound_value=0.0,
            empirical_estimate=kls[-1],
            confidence_interval=(kls[-1], kls[-1]),
            satisfied=all(kls[i] <= kls[i + 1] + 1e-12 for i in range(len(kls) - 1)),
            trials=0,
        )
    )
    return results


def render_json(results: list[BoundCheckResult]) -> str:
    payload = {
        "checks": [r.to_dict() for r in results],
        "all_satisfied": all(r.satisfied for r in results),
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def render_text(results: list[BoundCheckResult]) -> str:
    headers = ("check", "dir", "bound", "estimate", "ci", "trials", "ok")
    rows = []
    for r in results:
        rows.append(
            (
                r.name,
                r.direction,
                f"{r.bound_value:.8g}",
                f"{r.empirical_estimate:.8g}",
                f"[{r.confidence_interval[0]:.6g}, {r.confidence_interval[1]:.6g}]",
                str(r.trials),
                "PASS" if r.satisfied else "FAIL",
            )
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"
