"""Verifiable-reward GRPO math and a desk-scale training simulator.

The simulator swaps the grounding model for an isotropic Gaussian pointer
per task family. A predicted point is two "tokens" (its x and y draws), so
the clipped per-token surrogate, the 1 / sum|o_c| normalization and the
group-normalized advantages run exactly as they would on model outputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from errors import GroupSizeError, ShapeError, ValidationError
from layout_entropy import DifficultyBucket
from schema import NormBox, NormPoint
from utils import ordered_map

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class Rollout:
    prediction: NormPoint
    token_count: int
    logprob_new: tuple
    logprob_old: tuple
    logprob_ref: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, 'logprob_new', tuple(self.logprob_new))
        object.__setattr__(self, 'logprob_old', tuple(self.logprob_old))
        if self.logprob_ref is not None:
            object.__setattr__(self, 'logprob_ref', tuple(self.logprob_ref))
        if self.token_count < 1:
            raise ShapeError(f"token_count={self.token_count} must be positive")
        lengths = {len(self.logprob_new), len(self.logprob_old)}
        if self.logprob_ref is not None:
            lengths.add(len(self.logprob_ref))
        if lengths != {self.token_count}:
            raise ShapeError(f"log-prob lengths {sorted(lengths)} do not match token_count={self.token_count}")


@dataclass(frozen=True)
class GroupRollout:
    task_id: str
    target: NormBox
    rollouts: tuple
    rewards: tuple
    advantages: tuple

    def __post_init__(self):
        for name in ('rollouts', 'rewards', 'advantages'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not len(self.rollouts) == len(self.rewards) == len(self.advantages):
            raise ShapeError(
                f"{self.task_id}: {len(self.rollouts)} rollouts, {len(self.rewards)} rewards, "
                f"{len(self.advantages)} advantages"
            )
        if any(r not in (0, 1) for r in self.rewards):
            raise ValidationError(f"{self.task_id}: rewards must be 0 or 1")

    @property
    def size(self):
        return len(self.rollouts)


@dataclass(frozen=True)
class CurriculumStage:
    buckets: frozenset
    steps: int

    def __post_init__(self):
        object.__setattr__(self, 'buckets', frozenset(DifficultyBucket(b) for b in self.buckets))
        if not self.buckets:
            raise ValidationError("curriculum stage allows no buckets")
        if self.steps < 1:
            raise ValidationError(f"curriculum stage step budget {self.steps} must be positive")


@dataclass(frozen=True)
class CurriculumConfig:
    stages: tuple = (CurriculumStage(frozenset(DifficultyBucket), 200),)
    pass_rate_low: float = 0.0
    pass_rate_high: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, 'stages', tuple(self.stages))
        if not self.stages:
            raise ValidationError("curriculum needs at least one stage")
        if not 0.0 <= self.pass_rate_low < self.pass_rate_high <= 1.0:
            raise ValidationError(
                f"pass-rate window ({self.pass_rate_low}, {self.pass_rate_high}] must satisfy 0 <= low < high <= 1"
            )

    @property
    def total_steps(self):
        return sum(s.steps for s in self.stages)

    def stage_at(self, step):
        """Stage active at a 0-based step; the last stage continues past the budget"""
        for stage in self.stages:
            if step < stage.steps:
                return stage
            step -= stage.steps
        return self.stages[-1]


def parse_curriculum(text, pass_rate_low=0.0, pass_rate_high=0.75):
    """Parse `easy:50,medium:50,hard:100` or `easy+medium:50,hard:100` into a CurriculumConfig"""
    stages = []
    for part in (p.strip() for p in text.split(',') if p.strip()):
        names, sep, steps = part.partition(':')
        if not sep:
            raise ValidationError(f"curriculum stage {part!r} is not bucket:steps")
        try:
            stages.append(CurriculumStage(frozenset(n.strip() for n in names.split('+')), int(steps)))
        except ValueError as e:
            raise ValidationError(f"bad curriculum stage {part!r}: {e}") from e
    return CurriculumConfig(tuple(stages), pass_rate_low, pass_rate_high)


# --- reward, advantages, objective ------------------------------------------

def binary_reward(p, box):
    """1 iff the point lies in the closed box"""
    return int(box.x0 <= p.x <= box.x1 and box.y0 <= p.y <= box.y1)


def group_advantages(rewards):
    """(R_i - mean) / population std; a zero-variance group gets all-zero advantages"""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise GroupSizeError(f"group size {r.size} must be at least 2")
    std = r.std()
    if std == 0.0:
        return [0.0] * r.size
    return list((r - r.mean()) / std)


def _group_terms(group, epsilon):
    new = np.concatenate([np.asarray(o.logprob_new, dtype=float) for o in group.rollouts])
    old = np.concatenate([np.asarray(o.logprob_old, dtype=float) for o in group.rollouts])
    adv = np.repeat(np.asarray(group.advantages, dtype=float), [o.token_count for o in group.rollouts])
    ratio = np.exp(new - old)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - epsilon, 1 + epsilon) * adv), new


def grpo_objective(groups, epsilon=0.2, kl_coef=0.0):
    """Clipped surrogate summed over tokens, / sum_c |o_c| per group, averaged over groups

    With kl_coef > 0 every rollout must carry reference log-probs and the k3
    estimator exp(ref - new) - (ref - new) - 1 is subtracted per token.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon={epsilon} must be positive")
    groups = list(groups)
    if not groups:
        return 0.0
    values = []
    for group in groups:
        terms, new = _group_terms(group, epsilon)
        if kl_coef:
            if any(o.logprob_ref is None for o in group.rollouts):
                raise ShapeError(f"{group.task_id}: KL term needs reference log-probs")
            ref = np.concatenate([np.asarray(o.logprob_ref, dtype=float) for o in group.rollouts])
            terms = terms - kl_coef * (np.exp(ref - new) - (ref - new) - 1)
        values.append(terms.sum() / sum(o.token_count for o in group.rollouts))
    return float(np.mean(values))


def pass_rate_filter(passes, k, cfg):
    """Keep a task iff low < passes / k <= high"""
    if k < 1:
        raise ValidationError(f"k={k} rollouts must be at least 1")
    rate = passes / k
    return cfg.pass_rate_low < rate <= cfg.pass_rate_high


# --- simulator ---------------------------------------------------------------

@dataclass(frozen=True)
class SimTask:
    task_id: str
    target: NormBox
    bucket: DifficultyBucket = DifficultyBucket.MEDIUM
    family: Optional[str] = None

    @property
    def family_key(self):
        return self.family or self.task_id


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 8
    epsilon: float = 0.2
    steps: Optional[int] = None
    learning_rate: float = 0.02
    inner_epochs: int = 2
    fd_step: float = 1e-4
    init_sigma: float = 0.2
    min_sigma: float = 0.005
    max_sigma: float = 0.5
    kl_coef: float = 0.0
    pass_rate_prefilter: bool = False
    prefilter_rollouts: int = 8

    def __post_init__(self):
        if self.group_size < 2:
            raise GroupSizeError(f"group size {self.group_size} must be at least 2")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon={self.epsilon} must be positive")
        if self.steps is not None and self.steps < 1:
            raise ValidationError(f"steps={self.steps} must be positive")
        if not 0 < self.min_sigma < self.init_sigma <= self.max_sigma:
            raise ValidationError("sigma bounds must satisfy 0 < min_sigma < init_sigma <= max_sigma")
        if self.learning_rate <= 0 or self.inner_epochs < 1 or self.fd_step <= 0:
            raise ValidationError("learning_rate, inner_epochs and fd_step must be positive")
        if self.prefilter_rollouts < 1:
            raise ValidationError("prefilter_rollouts must be positive")


@dataclass
class PointerPolicy:
    """Isotropic Gaussian over the unit square: params (mu_x, mu_y, log_sigma) per family"""

    params: dict = field(default_factory=dict)
    init_sigma: float = 0.2
    min_sigma: float = 0.005
    max_sigma: float = 0.5

    def get(self, family):
        if family not in self.params:
            self.params[family] = np.array([0.5, 0.5, math.log(self.init_sigma)])
        return self.params[family]

    def set(self, family, theta):
        theta = np.array(theta, dtype=float)
        theta[:2] = np.clip(theta[:2], 0.0, 1.0)
        theta[2] = np.clip(theta[2], math.log(self.min_sigma), math.log(self.max_sigma))
        self.params[family] = theta

    @staticmethod
    def token_logprobs(theta, xy):
        """Per-coordinate Gaussian log densities, shape (n, 2)"""
        sigma = math.exp(theta[2])
        z = (np.asarray(xy) - theta[:2]) / sigma
        return -0.5 * z ** 2 - theta[2] - 0.5 * LOG_2PI

    @staticmethod
    def sample(theta, n, rng):
        xy = theta[:2] + math.exp(theta[2]) * rng.standard_normal((n, 2))
        return np.clip(xy, 0.0, 1.0)

    @staticmethod
    def entropy(theta):
        """Differential entropy of the 2D isotropic Gaussian"""
        return 1.0 + LOG_2PI + 2.0 * theta[2]

    def mean_entropy(self, families):
        return float(np.mean([self.entropy(self.get(f)) for f in families]))


def _make_group(task, xy, theta_old, theta_new=None, theta_ref=None):
    old = PointerPolicy.token_logprobs(theta_old, xy)
    new = old if theta_new is None else PointerPolicy.token_logprobs(theta_new, xy)
    ref = None if theta_ref is None else PointerPolicy.token_logprobs(theta_ref, xy)
    points = [NormPoint(float(x), float(y)) for x, y in xy]
    rewards = [binary_reward(p, task.target) for p in points]
    rollouts = [
        Rollout(p, 2, tuple(new[i]), tuple(old[i]), None if ref is None else tuple(ref[i]))
        for i, p in enumerate(points)
    ]
    return GroupRollout(task.task_id, task.target, tuple(rollouts), tuple(rewards),
                        tuple(group_advantages(rewards)))


def _with_new_policy(group, xy, theta_new, theta_ref):
    new = PointerPolicy.token_logprobs(theta_new, xy)
    ref = None if theta_ref is None else PointerPolicy.token_logprobs(theta_ref, xy)
    rollouts = tuple(
        Rollout(o.prediction, o.token_count, tuple(new[i]), o.logprob_old, None if ref is None else tuple(ref[i]))
        for i, o in enumerate(group.rollouts)
    )
    return GroupRollout(group.task_id, group.target, rollouts, group.rewards, group.advantages)


def _numeric_gradient(fn, theta, h):
    """Central finite differences"""
    grad = np.zeros_like(theta)
    for k in range(len(theta)):
        step = np.zeros_like(theta)
        step[k] = h
        grad[k] = (fn(theta + step) - fn(theta - step)) / (2 * h)
    return grad


def count_passes(policy, task, k, rng):
    xy = PointerPolicy.sample(policy.get(task.family_key), k, rng)
    return sum(binary_reward(NormPoint(float(x), float(y)), task.target) for x, y in xy)


def select_tasks_by_pass_rate(tasks, policy, curriculum, k, rng):
    """Keep tasks whose pass rate over k rollouts of the current policy falls in the window"""
    kept = [t for t in tasks if pass_rate_filter(count_passes(policy, t, k, rng), k, curriculum)]
    logger.info(f"Pass-rate filter kept {len(kept)} of {len(tasks)} tasks",
                extra={'stage': 'rl-sim', 'kept': len(kept), 'total': len(tasks)})
    return kept


def simulate_training(tasks, curriculum, cfg=None, seed=0):
    """Run GRPO on the mock pointer policy and return the per-step training log

    Each step samples one group of G points per task allowed by the active
    curriculum stage, computes rewards and advantages against the frozen
    old policy, then takes `inner_epochs` gradient-ascent steps on the clipped
    objective per task family with numerically estimated gradients.
    """
    cfg = cfg or RLConfig()
    tasks = list(tasks)
    if not tasks:
        raise ValidationError("simulation needs at least one task")
    rng = np.random.default_rng(seed)
    policy = PointerPolicy(init_sigma=cfg.init_sigma, min_sigma=cfg.min_sigma, max_sigma=cfg.max_sigma)
    families = sorted({t.family_key for t in tasks})
    reference = {f: policy.get(f).copy() for f in families}

    if cfg.pass_rate_prefilter:
        selected = select_tasks_by_pass_rate(tasks, policy, curriculum, cfg.prefilter_rollouts, rng)
        if selected:
            tasks = selected
        else:
            logger.warning("Pass-rate filter removed every task; training on the full set")

    steps = cfg.steps or curriculum.total_steps
    rows = []
    for step in range(steps):
        stage = curriculum.stage_at(step)
        active = [t for t in tasks if t.bucket in stage.buckets] or tasks

        by_family = {}
        for task in active:
            theta_old = policy.get(task.family_key).copy()
            xy = PointerPolicy.sample(theta_old, cfg.group_size, rng)
            by_family.setdefault(task.family_key, []).append((_make_group(task, xy, theta_old), xy))

        objective_values = []
        for family, batch in by_family.items():
            theta_ref = reference[family] if cfg.kl_coef else None

            def objective(theta, batch=batch, theta_ref=theta_ref):
                return grpo_objective([_with_new_policy(g, xy, theta, theta_ref) for g, xy in batch],
                                      cfg.epsilon, cfg.kl_coef)

            for _ in range(cfg.inner_epochs):
                theta = policy.get(family)
                grad = _numeric_gradient(objective, theta, cfg.fd_step)
                norm = float(np.linalg.norm(grad))
                # bounded step: near-collapsed sigmas blow up the raw gradient
                policy.set(family, theta + cfg.learning_rate * grad / max(1.0, norm))
            objective_values.append(objective(policy.get(family)))

        rewards = [r for batch in by_family.values() for g, _ in batch for r in g.rewards]
        rows.append({
            'step': step,
            'mean_reward': float(np.mean(rewards)),
            'policy_entropy': policy.mean_entropy(families),
            'objective': float(np.mean(objective_values)),
        })

    log = pd.DataFrame(rows, columns=['step', 'mean_reward', 'policy_entropy', 'objective'])
    if len(log):
        logger.info(f"Simulated {steps} steps: reward {log['mean_reward'].iloc[0]:.3f} -> "
                    f"{log['mean_reward'].iloc[-1]:.3f}",
                    extra={'stage': 'rl-sim', 'steps': steps, 'seed': seed})
    return log


def simulate_many(tasks, curriculum, cfg=None, seeds=(0,), workers=1):
    """Independent seeded runs, returned in seed order"""
    return ordered_map(lambda s: simulate_training(tasks, curriculum, cfg, seed=s), list(seeds),
                       workers=workers, desc="rl-sim")


def make_synthetic_tasks(n, seed=0):
    """n box targets in families of three nested boxes around one shared centre

    Task i belongs to family i // 3 and bucket i % 3 (easy, medium, hard), so
    a family's easy box contains its medium box, which contains its hard box.
    Training on easier members moves the same pointer the harder ones use.
    """
    rng = np.random.default_rng(seed)
    sides = {DifficultyBucket.EASY: (0.25, 0.35), DifficultyBucket.MEDIUM: (0.15, 0.25),
             DifficultyBucket.HARD: (0.1, 0.15)}
    buckets = list(DifficultyBucket)
    centres = rng.uniform(0.3, 0.7, size=(-(-n // 3), 2))
    tasks = []
    for i in range(n):
        bucket = buckets[i % 3]
        side = rng.uniform(*sides[bucket])
        cx, cy = centres[i // 3]
        box = NormBox(round(cx - side / 2, 3), round(cy - side / 2, 3),
                      round(cx + side / 2, 3), round(cy + side / 2, 3))
        tasks.append(SimTask(f"task-{i:03d}", box, bucket, family=f"family-{i // 3:02d}"))
    return tasks


def tasks_from_manifest(manifest):
    """Box-annotated samples as simulator tasks; bucket from the `bucket:` tag"""
    tasks = []
    for sample in manifest:
        if not isinstance(sample.annotation, NormBox) or sample.annotation.area <= 0:
            continue
        tag = sample.tag_value('bucket')
        bucket = DifficultyBucket(tag) if tag in {b.value for b in DifficultyBucket} else DifficultyBucket.MEDIUM
        tasks.append(SimTask(sample.id, sample.annotation, bucket))
    return tasks


def trend_slope(values):
    """Least-squares slope of a series against its index"""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(np.polyfit(np.arange(values.size), values, 1)[0])
