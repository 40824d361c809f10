"""Synthetic sequential-reasoning models: parametric state spaces, simple
policies over them, a two-error-rate verifier, and the Monte-Carlo /
exact-enumeration simulators the bound checks run on.

States are plain integers. Validity is a fixed subset of states per step
(history-independent by construction), so exact probabilities exist in
closed form while the simulators still walk real state sequences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ..errors import EnumerationError
from .bounds import (
    BoundCheckResult,
    check_result,
    flat_success_upper_bound,
    modular_success_lower_bound,
    spurious_suppression_bound,
    wilson_interval,
)

ENUMERATION_CUTOFF = 10 ** 6
MIN_TRIALS = 10 ** 4


@dataclass(frozen=True)
class TypedModule:
    """One typed reasoning module: subspace size, step count, valid-mass bounds."""

    type_id: str
    size: int
    steps: int
    valid_mass_lower: float
    valid_mass_upper: float

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("module subspace needs at least 2 states")
        if self.steps < 1:
            raise ValueError("module needs at least 1 step")
        if not 0.0 < self.valid_mass_lower <= self.valid_mass_upper <= 1.0:
            raise ValueError("need 0 < lower <= upper <= 1")


@dataclass(frozen=True)
class SyntheticMDPSpec:
    """Parametric state space shared by the flat and modular simulators."""

    state_count: int
    horizon: int
    valid_fraction: float
    symbolic_irrelevant_fraction: float = 0.0
    typed_partition: tuple[TypedModule, ...] = ()
    interface_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.state_count < 2:
            raise ValueError("state_count must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ValueError("valid_fraction outside (0,1)")
        if self.valid_fraction * self.state_count < 1:
            raise ValueError("valid set would be empty")
        if not 0.0 <= self.symbolic_irrelevant_fraction < 1.0:
            raise ValueError("symbolic fraction outside [0,1)")
        if not 0.0 <= self.interface_fraction < 1.0:
            raise ValueError("interface fraction outside [0,1)")
        if self.valid_count + self.symbolic_count > self.state_count:
            raise ValueError("valid and symbolic sets overlap")
        if self.typed_partition:
            covered = sum(m.size for m in self.typed_partition) + self.interface_count
            if covered != self.state_count:
                raise ValueError(
                    f"typed partition plus interface covers {covered} of {self.state_count} states"
                )
            if sum(m.steps for m in self.typed_partition) != self.horizon:
                raise ValueError("module lengths must sum to the horizon")

    @property
    def valid_count(self) -> int:
        return round(self.valid_fraction * self.state_count)

    @property
    def symbolic_count(self) -> int:
        return round(self.symbolic_irrelevant_fraction * self.state_count)

    @property
    def interface_count(self) -> int:
        return round(self.interface_fraction * self.state_count)

    def valid_states(self) -> np.ndarray:
        return np.arange(self.valid_count)

    def symbolic_states(self) -> np.ndarray:
        # Irrelevant symbolic states live at the top of the index range,
        # disjoint from the valid set.
        return np.arange(self.state_count - self.symbolic_count, self.state_count)


@dataclass(frozen=True)
class UniformPolicy:
    """Uniform over the whole state space."""


@dataclass(frozen=True)
class ValidMassPolicy:
    """Places ``valid_mass`` on the valid set (uniform within), rest elsewhere."""

    valid_mass: float

    def __post_init__(self):
        if not 0.0 < self.valid_mass <= 1.0:
            raise ValueError("valid_mass outside (0,1]")


@dataclass(frozen=True)
class LogitTablePolicy:
    """Softmax over an explicit per-state logit table."""

    logits: tuple[float, ...]

    def __post_init__(self):
        if any(not math.isfinite(l) for l in self.logits):
            raise ValueError("logits must be finite")


Policy = UniformPolicy | ValidMassPolicy | LogitTablePolicy


def state_distribution(policy: Policy, state_count: int, valid_states: np.ndarray) -> np.ndarray:
    """Exact per-step distribution over states for a policy."""
    if isinstance(policy, UniformPolicy):
        return np.full(state_count, 1.0 / state_count)
    if isinstance(policy, ValidMassPolicy):
        n_valid = len(valid_states)
        n_invalid = state_count - n_valid
        if n_valid == 0:
            raise ValueError("empty valid set")
        probs = np.zeros(state_count)
        if n_invalid == 0:
            probs[valid_states] = 1.0 / n_valid
            return probs
        probs[:] = (1.0 - policy.valid_mass) / n_invalid
        probs[valid_states] = policy.valid_mass / n_valid
        return probs
    if isinstance(policy, LogitTablePolicy):
        if len(policy.logits) != state_count:
            raise ValueError("logit table size mismatch")
        logits = np.asarray(policy.logits, dtype=float)
        exps = np.exp(logits - logits.max())
        return exps / exps.sum()
    raise TypeError(f"unknown policy type {type(policy).__name__}")


def valid_step_mass(policy: Policy, spec: SyntheticMDPSpec, valid_states: np.ndarray | None = None) -> float:
    states = spec.valid_states() if valid_states is None else valid_states
    return float(state_distribution(policy, spec.state_count, states)[states].sum())


def spurious_mass(policy: Policy, spec: SyntheticMDPSpec) -> float:
    """Exact per-step policy mass on the irrelevant symbolic states."""
    symbolic = spec.symbolic_states()
    if len(symbolic) == 0:
        raise ValueError("spec defines no symbolic-irrelevant states")
    probs = state_distribution(policy, spec.state_count, spec.valid_states())
    return float(probs[symbolic].sum())


@dataclass(frozen=True)
class VerifierModel:
    """False-reject and false-accept rates of the symbolic checker."""

    false_reject: float  # must stay below 1/2
    false_accept: float

    def __post_init__(self):
        if not 0.0 <= self.false_reject < 0.5:
            raise ValueError("false_reject outside [0, 0.5)")
        if not 0.0 <= self.false_accept < 1.0:
            raise ValueError("false_accept outside [0,1)")


# --- flat (unstructured) trajectories ----------------------------------------------

def enumerate_flat_success(
    spec: SyntheticMDPSpec, policy: Policy, valid_states: np.ndarray | None = None
) -> float:
    """Exact P(trajectory valid) by literal enumeration of all state sequences."""
    space = spec.state_count ** spec.horizon
    if space > ENUMERATION_CUTOFF:
        raise EnumerationError(f"{space} trajectories exceed the enumeration cutoff")
    states = spec.valid_states() if valid_states is None else valid_states
    probs = state_distribution(policy, spec.state_count, states)
    valid = np.zeros(spec.state_count, dtype=bool)
    valid[states] = True
    total = 0.0
    for trajectory in itertools.product(range(spec.state_count), repeat=spec.horizon):
        if all(valid[s] for s in trajectory):
            total += math.prod(probs[s] for s in trajectory)
    return total


def _worker_batches(trials: int, workers: int, seed: int) -> list[tuple[np.random.Generator, int]]:
    """Per-worker seeded substreams with an (almost) even split of the trials.

    Workers spawn from one seed sequence, so results are reproducible for a
    fixed (seed, workers) pair and merge deterministically by worker index.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        return [(np.random.default_rng(seed), trials)]
    counts = [trials // workers + (1 if i < trials % workers else 0) for i in range(workers)]
    streams = np.random.SeedSequence(seed).spawn(workers)
    return [(np.random.default_rng(s), n) for s, n in zip(streams, counts) if n > 0]


def simulate_flat(
    spec: SyntheticMDPSpec,
    policy: Policy,
    trials: int,
    seed: int | None = None,
    valid_states: np.ndarray | None = None,
    name: str = "flat-success",
    workers: int = 1,
) -> BoundCheckResult:
    """Monte-Carlo estimate of P(trajectory valid) against the exponential bound.

    Includes the exact enumeration value whenever the trajectory space is
    below the cutoff. Trials split across ``workers`` independent substreams.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}")
    states = spec.valid_states() if valid_states is None else valid_states
    probs = state_distribution(policy, spec.state_count, states)
    valid = np.zeros(spec.state_count, dtype=bool)
    valid[states] = True
    successes = 0
    for rng, batch in _worker_batches(trials, workers, spec.seed if seed is None else seed):
        sampled = rng.choice(spec.state_count, size=(batch, spec.horizon), p=probs)
        successes += int(valid[sampled].all(axis=1).sum())
    estimate = successes / trials
    bound = flat_success_upper_bound(float(probs[states].sum()), spec.horizon)
    exact = None
    if spec.state_count ** spec.horizon <= ENUMERATION_CUTOFF:
        exact = enumerate_flat_success(spec, policy, states)
    ci = wilson_interval(successes, trials)
    return check_result(name, "upper", bound, estimate, ci, trials, exact)


# --- modular trajectories -------------------------------------------------------------

def simulate_modular(
    spec: SyntheticMDPSpec,
    policies: dict[str, Policy],
    verifier: VerifierModel,
    trials: int,
    coupling_leakage: float = 0.0,
    seed: int | None = None,
    name: str = "modular-success",
    workers: int = 1,
) -> BoundCheckResult:
    """Estimate P(valid answer survives verification) against the lower bound.

    Each module samples its steps inside its typed subspace; a coupling
    corruption event (probability ``coupling_leakage``) invalidates the
    composition; the verifier falsely rejects a valid composition with
    probability alpha. False accepts cannot create a valid outcome, so the
    estimate is unaffected by beta.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}")
    if not spec.typed_partition:
        raise ValueError("spec has no typed partition")
    if not 0.0 <= coupling_leakage < 1.0:
        raise ValueError("coupling_leakage outside [0,1)")
    module_probs = []
    masses = []
    for module in spec.typed_partition:
        policy = policies[module.type_id]
        n_valid = max(1, round(spec.valid_fraction * module.size))
        valid_states = np.arange(n_valid)
        probs = state_distribution(policy, module.size, valid_states)
        mass = float(probs[valid_states].sum())
        if not module.valid_mass_lower - 1e-12 <= mass <= module.valid_mass_upper + 1e-12:
            raise ValueError(
                f"module {module.type_id}: policy valid mass {mass:.6f} outside "
                f"[{module.valid_mass_lower}, {module.valid_mass_upper}]"
            )
        masses.append(module.valid_mass_lower)
        module_probs.append((module, n_valid, probs))

    successes = 0
    for rng, batch in _worker_batches(trials, workers, spec.seed if seed is None else seed):
        all_valid = np.ones(batch, dtype=bool)
        for module, n_valid, probs in module_probs:
            sampled = rng.choice(module.size, size=(batch, module.steps), p=probs)
            all_valid &= (sampled < n_valid).all(axis=1)
        coupling_draw = rng.random(batch)  # drawn regardless, keeping streams aligned
        if coupling_leakage > 0.0:
            all_valid &= ~(coupling_draw < coupling_leakage)
        gate = rng.random(batch)
        accepted = np.where(all_valid, gate >= verifier.false_reject, gate < verifier.false_accept)
        successes += int((all_valid & accepted).sum())
    estimate = successes / trials
    bound = modular_success_lower_bound(
        verifier.false_reject,
        coupling_leakage,
        masses,
        [m.steps for m in spec.typed_partition],
    )
    ci = wilson_interval(successes, trials)
    return check_result(name, "lower", bound, estimate, ci, trials)


def simulate_spurious(
    spec: SyntheticMDPSpec,
    verifier: VerifierModel,
    trials: int,
    seed: int | None = None,
    name: str = "spurious-involvement",
    workers: int = 1,
) -> BoundCheckResult:
    """Estimate P(final output involves a spurious symbolic move).

    Worst-case model: every composition carries symbolic content that the
    checker may falsely accept (probability beta), and each of the K typed
    modules strays across the type interface independently with probability
    delta; involvement is the union.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}")
    if not spec.typed_partition:
        raise ValueError("spec has no typed partition")
    modules = len(spec.typed_partition)
    successes = 0
    for rng, batch in _worker_batches(trials, workers, spec.seed if seed is None else seed):
        crossed = (rng.random((batch, modules)) < spec.interface_fraction).any(axis=1)
        falsely_accepted = rng.random(batch) < verifier.false_accept
        successes += int((crossed | falsely_accepted).sum())
    estimate = successes / trials
    bound = spurious_suppression_bound(verifier.false_accept, modules, spec.interface_fraction)
    ci = wilson_interval(successes, trials)
    return check_result(name, "upper", bound, estimate, ci, trials)
