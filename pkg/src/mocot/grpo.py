"""Group-relative advantages, the KL-regularized gradient coefficient, and a
desk-scale toy-policy trainer that exercises the full optimization loop with
the structured reward.

Rewards are normalized within each group of outputs for the same prompt
(population statistics, zero-variance groups carry no signal) and every
token of an output receives the output's normalized reward as its
advantage. The toy policy treats whole output templates as atomic actions,
which collapses token-level advantages to sequence level without changing
the math.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .vera import DEFAULT_WEIGHTS, ReferenceRecord, VeraWeights, reward_format, vera_total
from .metrics import rouge_l
from .parsing import extract_option_letter, parse_tagged_output
from .errors import ParseError

DEGENERACY_FLOOR = 1e-12


@dataclass(frozen=True)
class RewardGroup:
    prompt_id: str
    rewards: tuple[float, ...]

    def __post_init__(self):
        if len(self.rewards) < 2:
            raise ValueError("a reward group needs at least 2 outputs")
        if any(not math.isfinite(r) for r in self.rewards):
            raise ValueError("rewards must be finite")


@dataclass(frozen=True)
class AdvantageSet:
    advantages: tuple[float, ...]
    degenerate: bool


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    kl_coefficient: float = 0.02
    clip_range: float = 0.2
    clip_enabled: bool = False  # the plain gradient coefficient has no clip
    inner_updates: int = 2
    outer_iterations: int = 4
    steps_per_iteration: int = 15
    learning_rate: float = 0.7
    seed: int = 7

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")
        if self.clip_range <= 0:
            raise ValueError("clip_range must be > 0")
        if self.inner_updates < 1:
            raise ValueError("inner_updates must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def normalize_group(group: RewardGroup) -> AdvantageSet:
    """(reward - group mean) / population std, or all zeros when variance is ~0."""
    n = len(group.rewards)
    mean = math.fsum(group.rewards) / n
    variance = math.fsum((r - mean) ** 2 for r in group.rewards) / n
    std = math.sqrt(variance)
    if std < DEGENERACY_FLOOR:
        return AdvantageSet((0.0,) * n, degenerate=True)
    return AdvantageSet(tuple((r - mean) / std for r in group.rewards), degenerate=False)


def gradient_coefficient(advantage: float, p_ref: float, p_cur: float, beta: float) -> float:
    """advantage + beta * (p_ref / p_cur - 1); the KL term vanishes at p_ref = p_cur."""
    if p_cur <= 0:
        raise ValueError("current probability must be positive")
    return advantage + beta * (p_ref / p_cur - 1.0)


def export_advantages(path: str | Path, groups: Sequence[tuple[RewardGroup, AdvantageSet]]) -> None:
    """JSONL rows {prompt_id, output_id, reward, advantage, degenerate}."""
    with open(path, "w", encoding="utf-8") as handle:
        for group, adv in groups:
            for i, (reward, a) in enumerate(zip(group.rewards, adv.advantages)):
                row = {
                    "prompt_id": group.prompt_id,
                    "output_id": i,
                    "reward": reward,
                    "advantage": a,
                    "degenerate": adv.degenerate,
                }
                handle.write(json.dumps(row, sort_keys=True) + "\n")


# --- toy policy -----------------------------------------------------------------

class ToyPolicy:
    """Tabular softmax policy over (prompt, output template) with a frozen
    reference snapshot for KL regularization."""

    def __init__(self, templates_by_prompt: dict[str, Sequence[str]]):
        self.logits: dict[str, dict[str, float]] = {
            prompt: {template: 0.0 for template in templates}
            for prompt, templates in templates_by_prompt.items()
        }
        self.reference_logits = self._copy_logits()

    def _copy_logits(self) -> dict[str, dict[str, float]]:
        return {prompt: dict(table) for prompt, table in self.logits.items()}

    @staticmethod
    def _softmax(table: dict[str, float]) -> dict[str, float]:
        top = max(table.values())
        exps = {k: math.exp(v - top) for k, v in table.items()}
        norm = sum(exps.values())
        return {k: v / norm for k, v in exps.items()}

    def probabilities(self, prompt: str) -> dict[str, float]:
        return self._softmax(self.logits[prompt])

    def reference_probabilities(self, prompt: str) -> dict[str, float]:
        return self._softmax(self.reference_logits[prompt])

    def sample(self, prompt: str, rng: random.Random, probs: dict[str, float] | None = None) -> str:
        probs = probs or self.probabilities(prompt)
        u = rng.random()
        cumulative = 0.0
        for template, p in probs.items():
            cumulative += p
            if u <= cumulative:
                return template
        return template  # guard against rounding at 1.0

    def kl_to_reference(self) -> float:
        """Mean over prompts of KL(pi || pi_ref), in nats."""
        total = 0.0
        for prompt in self.logits:
            probs = self.probabilities(prompt)
            ref = self.reference_probabilities(prompt)
            total += sum(p * math.log(p / ref[t]) for t, p in probs.items() if p > 0)
        return total / len(self.logits)

    def refresh_reference(self) -> None:
        self.reference_logits = self._copy_logits()

    def snapshot_probabilities(self) -> dict[str, dict[str, float]]:
        return {prompt: self.probabilities(prompt) for prompt in self.logits}


@dataclass
class SampledGroup:
    """One prompt's sampled outputs with rewards and normalized advantages."""

    prompt_id: str
    outputs: tuple[str, ...]
    old_probabilities: dict[str, float]
    rewards: tuple[float, ...]
    advantages: AdvantageSet


def grpo_step(
    policy: ToyPolicy,
    groups: Sequence[SampledGroup],
    cfg: GrpoConfig,
) -> ToyPolicy:
    """Apply one gradient-ascent update to the policy logits.

    Each sampled output contributes its gradient coefficient times the
    log-probability gradient (one-hot minus current distribution). With
    clipping enabled, an output whose probability ratio against the old
    policy leaves the clip window stops contributing its advantage term.
    """
    for group in groups:
        probs = policy.probabilities(group.prompt_id)
        if set(group.old_probabilities) != set(probs):
            raise ValueError(f"template mismatch for prompt {group.prompt_id}")
        ref = policy.reference_probabilities(group.prompt_id)
        grad = {template: 0.0 for template in probs}
        for output, advantage in zip(group.outputs, group.advantages.advantages):
            p_cur = probs[output]
            if p_cur <= 0:
                raise ValueError("probability underflow in policy update")
            advantage_term = advantage
            if cfg.clip_enabled:
                ratio = p_cur / group.old_probabilities[output]
                low, high = 1.0 - cfg.clip_range, 1.0 + cfg.clip_range
                clipped = ratio * advantage if low <= ratio <= high else 0.0
                unclipped = ratio * advantage
                advantage_term = min(unclipped, clipped) if advantage >= 0 else max(unclipped, clipped)
            coefficient = advantage_term + cfg.kl_coefficient * (ref[output] / p_cur - 1.0)
            for template in grad:
                indicator = 1.0 if template == output else 0.0
                grad[template] += coefficient * (indicator - probs[template])
        table = policy.logits[group.prompt_id]
        for template in table:
            table[template] += cfg.learning_rate * grad[template] / len(group.outputs)
    return policy


# --- toy task --------------------------------------------------------------------

@dataclass(frozen=True)
class OutputTemplate:
    template_id: str
    label: str
    well_formed: bool
    text: str
    reasoning: str


@dataclass(frozen=True)
class ToyPrompt:
    prompt_id: str
    gold_label: str
    reference_reasoning: str
    templates: tuple[OutputTemplate, ...]


@dataclass(frozen=True)
class ToyVqaTask:
    prompts: tuple[ToyPrompt, ...]

    def gold_template_id(self, prompt: ToyPrompt) -> str:
        for template in prompt.templates:
            if template.label == prompt.gold_label and template.well_formed:
                return template.template_id
        raise ValueError("task has no well-formed gold template")


def default_toy_task(option_count: int = 4, gold_label: str = "B") -> ToyVqaTask:
    """One prompt, ``option_count`` labels x {well-formed, malformed} templates.

    Malformed outputs keep their tags behind chatter so the lenient accuracy
    salvage still sees the label while the strict format check fails.
    """
    labels = [chr(ord("A") + i) for i in range(option_count)]
    if gold_label not in labels:
        raise ValueError("gold label outside the option range")
    reference = f"the answer is {gold_label} because the caption matches the drawing"
    templates = []
    for label in labels:
        reasoning = f"the answer is {label} because the caption matches the drawing"
        tagged = f"<REASONING>{reasoning}</REASONING><ANSWER>{label}</ANSWER>"
        templates.append(OutputTemplate(f"{label}+", label, True, tagged, reasoning))
        templates.append(
            OutputTemplate(f"{label}-", label, False, f"Sure thing! {tagged}", reasoning)
        )
    prompt = ToyPrompt("toy-q1", gold_label, reference, tuple(templates))
    return ToyVqaTask((prompt,))


def vera_reward_fn(
    weights: VeraWeights = DEFAULT_WEIGHTS,
) -> Callable[[ToyPrompt, OutputTemplate], float]:
    """Reward a template with the structured total.

    Format and accuracy come from the real scorers; the logic term is
    simulated as "the reasoning names its own label", which every template
    here satisfies, so it acts as a constant bonus shared by all outputs.
    """

    def score(prompt: ToyPrompt, template: OutputTemplate) -> float:
        reference = ReferenceRecord(prompt.gold_label, prompt.reference_reasoning)
        r_f = reward_format(template.text, "mcq-tagged")
        try:
            tagged = parse_tagged_output(template.text, mode="lenient")
            label = extract_option_letter(tagged.answer)
            r_a = 1.0 if label == reference.gold_answer else 0.0
            r_l = 1.0 if f"the answer is {label}" in tagged.reasoning else 0.0
        except ParseError:
            r_a, r_l = 0.0, 0.0
        r_r = rouge_l(template.reasoning, reference.reference_reasoning)
        return vera_total(r_f, r_a, r_r, r_l, weights).total

    return score


# --- training loop ------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    reward_mean: float
    reward_std: float
    gold_probability: float
    kl: float
    advantage_mean: float
    advantage_std: float


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        """Golden-file curve: step, mean-reward, gold-probability, kl."""
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "mean_reward", "gold_probability", "kl"])
            for rec in self.records:
                writer.writerow(
                    [
                        rec.step,
                        f"{rec.reward_mean:.10g}",
                        f"{rec.gold_probability:.10g}",
                        f"{rec.kl:.10g}",
                    ]
                )

    def csv_text(self) -> str:
        lines = ["step,mean_reward,gold_probability,kl"]
        for rec in self.records:
            lines.append(
                f"{rec.step},{rec.reward_mean:.10g},{rec.gold_probability:.10g},{rec.kl:.10g}"
            )
        return "\n".join(lines) + "\n"


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)


def train_toy(
    task: ToyVqaTask,
    cfg: GrpoConfig,
    reward_fn: Callable[[ToyPrompt, OutputTemplate], float] | None = None,
) -> TrainingLog:
    """Run the full outer/inner optimization loop on the toy task.

    The reference policy refreshes at the top of every outer iteration and
    the sampling snapshot at every minibatch. Aborts if any probability
    underflows.
    """
    reward_fn = reward_fn or vera_reward_fn()
    templates = {
        prompt.prompt_id: [t.template_id for t in prompt.templates] for prompt in task.prompts
    }
    by_id = {
        prompt.prompt_id: {t.template_id: t for t in prompt.templates} for prompt in task.prompts
    }
    policy = ToyPolicy(templates)
    rng = random.Random(cfg.seed)
    log = TrainingLog()
    step = 0
    for _ in range(cfg.outer_iterations):
        policy.refresh_reference()
        for _ in range(cfg.steps_per_iteration):
            old_probs = policy.snapshot_probabilities()
            groups = []
            rewards_this_batch: list[float] = []
            advantages_this_batch: list[float] = []
            for prompt in task.prompts:
                probs = old_probs[prompt.prompt_id]
                outputs = tuple(
                    policy.sample(prompt.prompt_id, rng, probs) for _ in range(cfg.group_size)
                )
                rewards = tuple(reward_fn(prompt, by_id[prompt.prompt_id][o]) for o in outputs)
                advantages = normalize_group(RewardGroup(prompt.prompt_id, rewards))
                groups.append(
                    SampledGroup(prompt.prompt_id, outputs, probs, rewards, advantages)
                )
                rewards_this_batch.extend(rewards)
                advantages_this_batch.extend(advantages.advantages)
            for _ in range(cfg.inner_updates):
                grpo_step(policy, groups, cfg)
                step += 1
                gold = 0.0
                for prompt in task.prompts:
                    probs = policy.probabilities(prompt.prompt_id)
                    if min(probs.values()) < 1e-300:
                        raise ArithmeticError("probability underflow; training diverged")
                    gold += probs[task.gold_template_id(prompt)]
                reward_mean, reward_std = _mean_std(rewards_this_batch)
                adv_mean, adv_std = _mean_std(advantages_this_batch)
                log.records.append(
                    StepRecord(
                        step=step,
                        reward_mean=reward_mean,
                        reward_std=reward_std,
                        gold_probability=gold / len(task.prompts),
                        kl=policy.kl_to_reference(),
                        advantage_mean=adv_mean,
                        advantage_std=adv_std,
                    )
                )
    return log
