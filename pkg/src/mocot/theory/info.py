"""Exact discrete information quantities and the coupling constructions the
bound checks run against. Everything here is computed from explicit joint
tables; nothing is estimated from samples. Logs are base 2 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SupportMismatchError

_NORM_TOL = 1e-9


def _check_normalized(table: np.ndarray, name: str = "table") -> np.ndarray:
    table = np.asarray(table, dtype=float)
    if np.any(table < -1e-15):
        raise ValueError(f"{name} has negative entries")
    if abs(table.sum() - 1.0) > _NORM_TOL:
        raise ValueError(f"{name} does not normalize to 1 (sum={table.sum()!r})")
    return np.clip(table, 0.0, None)


def binary_entropy(p: float) -> float:
    """H2(p) in bits; 0 at both endpoints."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("probability outside [0,1]")
    if p in (0.0, 1.0):
        return 0.0
    return float(-(p * np.log2(p) + (1 - p) * np.log2(1 - p)))


def entropy_bits(p: np.ndarray) -> float:
    p = _check_normalized(p, "distribution")
    mask = p > 0
    return float(-(p[mask] * np.log2(p[mask])).sum())


def kl_divergence_bits(p: np.ndarray, q: np.ndarray) -> float:
    """D_KL(p || q) in bits; raises when p puts mass outside q's support."""
    p = _check_normalized(p, "p")
    q = _check_normalized(q, "q")
    if p.shape != q.shape:
        raise ValueError("shape mismatch")
    bad = (p > 0) & (q <= 0)
    if np.any(bad):
        raise SupportMismatchError(
            f"p has mass at {np.argwhere(bad)[0].tolist()} where q has none"
        )
    mask = p > 0
    return float((p[mask] * (np.log2(p[mask]) - np.log2(q[mask]))).sum())


def mutual_information(joint_xy: np.ndarray) -> float:
    """Exact I(X;Y) in bits from a joint table."""
    return conditional_mutual_information(np.asarray(joint_xy, dtype=float)[None, :, :])


def conditional_mutual_information(joint_cxy: np.ndarray) -> float:
    """Exact I(X;Y|C) in bits from a joint table over (context, x, y)."""
    joint = _check_normalized(joint_cxy, "joint")
    if joint.ndim != 3:
        raise ValueError("expected a 3-axis table (context, x, y)")
    total = 0.0
    for c in range(joint.shape[0]):
        pc = joint[c].sum()
        if pc <= 0:
            continue
        pxy = joint[c] / pc
        px = pxy.sum(axis=1, keepdims=True)
        py = pxy.sum(axis=0, keepdims=True)
        mask = pxy > 0
        ratio = pxy[mask] / (px @ py)[mask]
        total += pc * float((pxy[mask] * np.log2(ratio)).sum())
    return max(total, 0.0)


def interaction_information(joint_cexy: np.ndarray) -> float:
    """I(E;X;Y|C) = I(X;Y|C) - I(X;Y|C,E), in bits (may be negative)."""
    joint = _check_normalized(joint_cexy, "joint")
    if joint.ndim != 4:
        raise ValueError("expected a 4-axis table (context, event, x, y)")
    collapsed = joint.sum(axis=1)  # marginalize the event
    n_c, n_e = joint.shape[0], joint.shape[1]
    conditioned = joint.reshape(n_c * n_e, joint.shape[2], joint.shape[3])
    return conditional_mutual_information(collapsed) - conditional_mutual_information(conditioned)


# --- coupling constructions -----------------------------------------------------

@dataclass(frozen=True)
class CouplingModel:
    """Joint table p(context, z_perc, z_abs), normalized to 1."""

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", _check_normalized(self.table, "coupling table"))
        if self.table.ndim != 3:
            raise ValueError("coupling table must have axes (context, x, y)")

    def conditional_mi(self) -> float:
        return conditional_mutual_information(self.table)


@dataclass(frozen=True)
class MediatorMixture:
    """Interface mixture: with probability ``interface_prob`` the pair comes
    from a fully entangled table, otherwise from a mediator channel whose
    exact dependence supplies the leakage term of the bound."""

    model: CouplingModel
    mediator_component: CouplingModel
    interface_component: CouplingModel
    interface_prob: float
    leakage_bits: float  # exact MI of the mediator component

    def event_table(self) -> np.ndarray:
        """Joint over (context, event, x, y) with event 1 = interface draw."""
        off = (1.0 - self.interface_prob) * self.mediator_component.table
        on = self.interface_prob * self.interface_component.table
        return np.stack([off, on], axis=1)


def mediator_channel(size: int, fidelity: float) -> np.ndarray:
    """p(x | s) = fidelity * 1[x = s] + (1 - fidelity) / size."""
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError("fidelity outside [0,1]")
    return fidelity * np.eye(size) + (1.0 - fidelity) * np.full((size, size), 1.0 / size)


def mediator_mixture(size: int, fidelity: float, interface_prob: float) -> MediatorMixture:
    """Build the mixture family for a typed subspace of ``size`` states.

    fidelity 0 makes x and y independent (leakage 0); fidelity 1 copies the
    mediator into both (leakage log2 size). interface_prob is the chance of
    drawing from the maximally entangled x = y table instead.
    """
    if size < 2:
        raise ValueError("size must be >= 2")
    if not 0.0 <= interface_prob < 1.0:
        raise ValueError("interface_prob outside [0,1)")
    channel = mediator_channel(size, fidelity)
    mediator_xy = (channel.T / size) @ channel  # sum_s P(s) p(x|s) p(y|s)
    mediator = CouplingModel(mediator_xy[None, :, :])
    interface = CouplingModel((np.eye(size) / size)[None, :, :])
    mixed = (1.0 - interface_prob) * mediator.table + interface_prob * interface.table
    return MediatorMixture(
        model=CouplingModel(mixed),
        mediator_component=mediator,
        interface_component=interface,
        interface_prob=interface_prob,
        leakage_bits=mediator.conditional_mi(),
    )


def noisy_function_coupling(size: int, noise: float, seed: int = 0) -> CouplingModel:
    """Abstract state as a noisy function of the perceptual state.

    x is uniform and y follows a random permutation of x, flipped to uniform
    with probability ``noise``; for noise < 1 the pair is dependent.
    """
    if size < 2:
        raise ValueError("size must be >= 2")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise outside [0,1]")
    rng = np.random.default_rng(seed)
    mapping = rng.permutation(size)
    table = np.full((size, size), noise / size)
    table[np.arange(size), mapping] += 1.0 - noise
    return CouplingModel((table / size)[None, :, :])


# --- weak coupling over sub-trajectories ------------------------------------------

def coupling_kl(joint: np.ndarray) -> float:
    """Max over ordered module pairs (i != j) and conditioning values of
    D_KL(p(tau_i | tau_j) || p(tau_i)), in bits. Zero-probability
    conditioning values are skipped."""
    joint = _check_normalized(joint, "joint")
    if joint.ndim < 2:
        raise ValueError("need at least two modules")
    k = joint.ndim
    worst = 0.0
    for i in range(k):
        p_i = joint.sum(axis=tuple(a for a in range(k) if a != i))
        for j in range(k):
            if j == i:
                continue
            pair = joint.sum(axis=tuple(a for a in range(k) if a not in (i, j)))
            if j < i:  # axes collapse in order; put i first
                pair = pair.T
            p_j = pair.sum(axis=0)
            for v in range(pair.shape[1]):
                if p_j[v] <= 0:
                    continue
                conditional = pair[:, v] / p_j[v]
                worst = max(worst, kl_divergence_bits(conditional, p_i))
    return worst


def product_joint(marginals: list[np.ndarray]) -> np.ndarray:
    """Outer product of per-module distributions (fully independent modules)."""
    joint = np.asarray(marginals[0], dtype=float)
    for marginal in marginals[1:]:
        joint = np.multiply.outer(joint, np.asarray(marginal, dtype=float))
    return joint


def copy_coupling(size: int, modules: int) -> np.ndarray:
    """All modules equal to one uniform outcome (maximal entanglement)."""
    joint = np.zeros((size,) * modules)
    for v in range(size):
        joint[(v,) * modules] = 1.0 / size
    return joint


def leakage_mixture(marginals: list[np.ndarray], entangled: np.ndarray, lam: float) -> np.ndarray:
    """(1 - lam) * independent product + lam * entangled joint."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam outside [0,1]")
    independent = product_joint(marginals)
    entangled = _check_normalized(entangled, "entangled joint")
    if entangled.shape != independent.shape:
        raise ValueError("entangled joint shape mismatch")
    return (1.0 - lam) * independent + lam * entangled


# --- value decomposition ------------------------------------------------------------

def value_decomposition_gap(
    module_rewards: list[np.ndarray],
    joint: np.ndarray,
    standalone: list[np.ndarray],
) -> float:
    """|V - sum_k V_k| computed exactly.

    V is the expected total reward under the coupled joint (module k's
    reward read off its marginal); V_k is module k's expected reward under
    its standalone distribution.
    """
    joint = _check_normalized(joint, "joint")
    if joint.ndim != len(module_rewards) or joint.ndim != len(standalone):
        raise ValueError("modules misaligned across joint, rewards, and standalone")
    coupled_value = 0.0
    standalone_value = 0.0
    for k, (rewards, solo) in enumerate(zip(module_rewards, standalone)):
        rewards = np.asarray(rewards, dtype=float)
        marginal = joint.sum(axis=tuple(a for a in range(joint.ndim) if a != k))
        if rewards.shape != marginal.shape:
            raise ValueError(f"module {k}: reward vector shape mismatch")
        coupled_value += float((marginal * rewards).sum())
        standalone_value += float((_check_normalized(solo, f"standalone {k}") * rewards).sum())
    return abs(coupled_value - standalone_value)
