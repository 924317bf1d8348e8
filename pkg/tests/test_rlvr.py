import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from errors import GroupSizeError, ShapeError, ValidationError
from layout_entropy import DifficultyBucket
from rlvr import (CurriculumConfig, GroupRollout, PointerPolicy, RLConfig, Rollout, SimTask, binary_reward,
                  count_passes, group_advantages, grpo_objective, make_synthetic_tasks, parse_curriculum,
                  pass_rate_filter, select_tasks_by_pass_rate, simulate_many, simulate_training,
                  tasks_from_manifest, trend_slope)
from schema import DatasetManifest, NormBox, NormPoint

ORIGIN = NormPoint(0.0, 0.0)


def test_binary_reward_matches_closed_box_on_grid():
    box = NormBox(0.2, 0.3, 0.5, 0.6)
    hits = 0
    for i in range(101):
        for j in range(101):
            p = NormPoint(i / 100, j / 100)
            expected = int(20 <= i <= 50 and 30 <= j <= 60)
            assert binary_reward(p, box) == expected
            hits += expected
    assert hits == 31 * 31


def test_group_advantages_examples():
    success, *failures = group_advantages([1, 0, 0, 0, 0, 0, 0, 0])
    assert success == pytest.approx(math.sqrt(7), abs=1e-12)
    assert failures == [pytest.approx(-1 / math.sqrt(7), abs=1e-12)] * 7
    assert group_advantages([1, 1, 0, 0]) == [1.0, 1.0, -1.0, -1.0]
    assert group_advantages([1] * 8) == [0.0] * 8
    assert group_advantages([0, 0]) == [0.0, 0.0]
    with pytest.raises(GroupSizeError):
        group_advantages([1])


@pytest.mark.parametrize("g", [2, 4, 8])
def test_group_advantages_are_standardized(g):
    rng = np.random.default_rng(g)
    for _ in range(200):
        rewards = rng.integers(0, 2, size=g)
        advantages = np.array(group_advantages(rewards))
        if rewards.min() == rewards.max():
            assert not advantages.any()
            continue
        assert advantages.mean() == pytest.approx(0.0, abs=1e-12)
        assert advantages.std() == pytest.approx(1.0, abs=1e-12)
        order = rng.permutation(g)
        assert group_advantages(rewards[order]) == pytest.approx(advantages[order].tolist(), abs=1e-15)


def _rollout(new, old, ref=None):
    return Rollout(ORIGIN, len(new), new, old, ref)


def _group(rollouts, advantages, rewards=None):
    rewards = rewards if rewards is not None else [1 if a > 0 else 0 for a in advantages]
    return GroupRollout('t', NormBox(0.0, 0.0, 1.0, 1.0), rollouts, rewards, advantages)


def _naive_objective(groups, epsilon):
    per_group = []
    for group in groups:
        total, tokens = 0.0, 0
        for rollout, advantage in zip(group.rollouts, group.advantages):
            for new, old in zip(rollout.logprob_new, rollout.logprob_old):
                ratio = math.exp(new - old)
                clipped = min(max(ratio, 1 - epsilon), 1 + epsilon)
                total += min(ratio * advantage, clipped * advantage)
            tokens += rollout.token_count
        per_group.append(total / tokens)
    return sum(per_group) / len(per_group)


def test_grpo_matches_naive_loops():
    rng = np.random.default_rng(7)
    for _ in range(200):
        groups = []
        for _ in range(int(rng.integers(1, 4))):
            rewards = rng.integers(0, 2, size=3).tolist()
            rollouts = []
            for _ in range(3):
                n = int(rng.integers(1, 5))
                old = rng.normal(-1.0, 0.5, size=n)
                rollouts.append(_rollout(old + rng.normal(0.0, 0.3, size=n), old))
            groups.append(_group(rollouts, group_advantages(rewards), rewards))
        epsilon = float(rng.uniform(0.05, 0.4))
        assert grpo_objective(groups, epsilon) == pytest.approx(_naive_objective(groups, epsilon), abs=1e-12)


def test_grpo_objective_examples():
    eps = 0.2
    clipped = _group([_rollout([math.log(1 + 2 * eps)], [0.0])], [1.0])
    assert grpo_objective([clipped], eps) == pytest.approx(1 + eps)

    unit = _group([_rollout([0.5, 0.5], [0.5, 0.5]), _rollout([0.1], [0.1])], [2.0, -1.0])
    assert grpo_objective([unit], eps) == pytest.approx((2.0 * 2 - 1.0 * 1) / 3)
    assert grpo_objective([], eps) == 0.0


def test_grpo_unit_ratios_ignore_epsilon():
    rollouts = [_rollout([-0.3, -0.7], [-0.3, -0.7]) for _ in range(4)]
    group = _group(rollouts, group_advantages([1, 1, 1, 1]), [1, 1, 1, 1])
    values = {grpo_objective([group], eps) for eps in (0.05, 0.2, 0.9)}
    assert values == {0.0}

    mixed = _group(rollouts, group_advantages([1, 0, 0, 1]), [1, 0, 0, 1])
    assert grpo_objective([mixed], 0.05) == pytest.approx(grpo_objective([mixed], 0.9), abs=1e-15)


def test_grpo_terms_are_bounded():
    rng = np.random.default_rng(13)
    eps = 0.2
    for _ in range(100):
        new, old = rng.normal(0.0, 2.0, size=1), rng.normal(0.0, 2.0, size=1)
        advantage = float(rng.normal())
        value = grpo_objective([_group([_rollout(new, old)], [advantage], [0])], eps)
        ratio = math.exp(new[0] - old[0])
        assert math.isfinite(value)
        assert value <= max(ratio, 1 + eps) * abs(advantage) + 1e-12


def test_kl_term_needs_reference_and_vanishes_at_reference():
    group = _group([_rollout([-0.2, -0.4], [-0.3, -0.4], ref=[-0.2, -0.4])], [1.0])
    assert grpo_objective([group], 0.2, kl_coef=0.5) == pytest.approx(grpo_objective([group], 0.2))
    drifted = _group([_rollout([-0.2, -0.4], [-0.3, -0.4], ref=[-1.0, -1.0])], [1.0])
    assert grpo_objective([drifted], 0.2, kl_coef=0.5) < grpo_objective([drifted], 0.2)
    with pytest.raises(ShapeError):
        grpo_objective([_group([_rollout([-0.2], [-0.3])], [1.0])], 0.2, kl_coef=0.1)


def test_shape_errors():
    with pytest.raises(ShapeError):
        Rollout(ORIGIN, 2, [0.0], [0.0, 0.0])
    with pytest.raises(ShapeError):
        _group([_rollout([0.0], [0.0])], [1.0, -1.0], [1, 0])
    with pytest.raises(ValidationError):
        _group([_rollout([0.0], [0.0])], [0.0], [2])
    with pytest.raises(ValidationError):
        grpo_objective([], epsilon=0.0)


def test_pass_rate_filter_window():
    cfg = CurriculumConfig()
    kept = [passes for passes in range(9) if pass_rate_filter(passes, 8, cfg)]
    assert kept == [1, 2, 3, 4, 5, 6]
    for passes in kept:
        assert any(group_advantages([1] * passes + [0] * (8 - passes)))
    with pytest.raises(ValidationError):
        pass_rate_filter(0, 0, cfg)


def test_parse_curriculum():
    cfg = parse_curriculum("easy:50, medium:50, hard:100")
    assert cfg.total_steps == 200
    assert cfg.stage_at(0).buckets == {DifficultyBucket.EASY}
    assert cfg.stage_at(50).buckets == {DifficultyBucket.MEDIUM}
    assert cfg.stage_at(199).buckets == {DifficultyBucket.HARD}
    assert cfg.stage_at(500).buckets == {DifficultyBucket.HARD}

    merged = parse_curriculum("easy+medium:10,hard:5", pass_rate_high=0.5)
    assert merged.stages[0].buckets == {DifficultyBucket.EASY, DifficultyBucket.MEDIUM}
    assert merged.pass_rate_high == 0.5


@pytest.mark.parametrize("text", ["easy", "nightmare:10", "easy:0", "easy:ten", ""])
def test_parse_curriculum_rejects(text):
    with pytest.raises(ValidationError):
        parse_curriculum(text)


def test_curriculum_window_validation():
    with pytest.raises(ValidationError):
        CurriculumConfig(pass_rate_low=0.5, pass_rate_high=0.5)
    with pytest.raises(GroupSizeError):
        RLConfig(group_size=1)


def test_pointer_policy_limits():
    rng = np.random.default_rng(0)
    box = NormBox(0.4, 0.4, 0.6, 0.6)
    policy = PointerPolicy(params={'sharp': np.array([0.5, 0.5, math.log(1e-6)])})
    assert count_passes(policy, SimTask('sharp', box), 64, rng) == 64

    area = NormBox(0.1, 0.2, 0.5, 0.7)
    xy = rng.uniform(0.0, 1.0, size=(100_000, 2))
    rate = np.mean([binary_reward(NormPoint(float(x), float(y)), area) for x, y in xy])
    assert rate == pytest.approx(area.area, abs=0.01)

    theta = np.array([0.5, 0.5, math.log(0.1)])
    assert PointerPolicy.entropy(theta) == pytest.approx(1 + math.log(2 * math.pi) + 2 * math.log(0.1))


def test_select_tasks_by_pass_rate():
    rng = np.random.default_rng(1)
    tasks = [SimTask('everywhere', NormBox(0.0, 0.0, 1.0, 1.0)), SimTask('nowhere', NormBox(0.9, 0.0, 0.901, 0.001))]
    policy = PointerPolicy()
    assert select_tasks_by_pass_rate(tasks, policy, CurriculumConfig(), 8, rng) == []
    wide = CurriculumConfig(pass_rate_high=1.0)
    assert [t.task_id for t in select_tasks_by_pass_rate(tasks, policy, wide, 8, rng)] == ['everywhere']


def test_simulation_learns_and_settles():
    tasks = make_synthetic_tasks(10, seed=0)
    assert {t.bucket for t in tasks} == set(DifficultyBucket)
    log = simulate_training(tasks, CurriculumConfig(), RLConfig(group_size=8), seed=1)

    assert list(log.columns) == ['step', 'mean_reward', 'policy_entropy', 'objective']
    assert len(log) == 200
    assert log['mean_reward'].tail(20).mean() > log['mean_reward'].head(20).mean()
    assert trend_slope(log['policy_entropy'].tail(50)) <= 1e-6
    assert log['policy_entropy'].iloc[-1] < log['policy_entropy'].iloc[0]


def test_synthetic_families_nest_across_buckets():
    tasks = make_synthetic_tasks(12, seed=0)
    families = {}
    for task in tasks:
        families.setdefault(task.family_key, []).append(task)
    assert len(families) == 4
    for easy, medium, hard in families.values():
        assert [easy.bucket, medium.bucket, hard.bucket] == list(DifficultyBucket)
        for outer, inner in ((easy, medium), (medium, hard)):
            assert outer.target.x0 <= inner.target.x0 and inner.target.x1 <= outer.target.x1
            assert outer.target.y0 <= inner.target.y0 and inner.target.y1 <= outer.target.y1
            assert outer.target.area > inner.target.area


def test_curriculum_run_carries_easy_training_into_hard_tasks():
    tasks = make_synthetic_tasks(12, seed=0)
    curriculum = parse_curriculum("easy:50,medium:50,hard:100")
    log = simulate_training(tasks, curriculum, RLConfig(group_size=8), seed=1)

    assert len(log) == 200
    assert log['mean_reward'].tail(20).mean() > log['mean_reward'].head(20).mean()
    assert trend_slope(log['policy_entropy']) < 0
    assert log['policy_entropy'].iloc[-1] < log['policy_entropy'].iloc[0]

    isolated = [replace(t, family=None) for t in tasks]
    alone = simulate_training(isolated, curriculum, RLConfig(group_size=8), seed=1)
    assert log['mean_reward'].tail(20).mean() > alone['mean_reward'].tail(20).mean()


def test_simulation_is_deterministic_per_seed():
    tasks = make_synthetic_tasks(4, seed=3)
    cfg = RLConfig(steps=5)
    first = simulate_training(tasks, CurriculumConfig(), cfg, seed=2)
    pd.testing.assert_frame_equal(first, simulate_training(tasks, CurriculumConfig(), cfg, seed=2))
    runs = simulate_many(tasks, CurriculumConfig(), cfg, seeds=(2, 9), workers=2)
    assert len(runs) == 2
    pd.testing.assert_frame_equal(runs[0], first)


def test_curriculum_limits_active_tasks():
    tasks = [SimTask('e', NormBox(0.3, 0.3, 0.7, 0.7), DifficultyBucket.EASY),
             SimTask('h', NormBox(0.0, 0.0, 0.05, 0.05), DifficultyBucket.HARD)]
    easy_only = parse_curriculum("easy:5")
    log = simulate_training(tasks, easy_only, RLConfig(steps=5), seed=0)
    assert len(log) == 5
    with pytest.raises(ValidationError):
        simulate_training([], easy_only)


def test_tasks_from_manifest(make_sample):
    manifest = DatasetManifest((
        make_sample('a', NormBox(0.1, 0.1, 0.3, 0.3), stage_tags={'bucket:hard'}),
        make_sample('b', NormPoint(0.5, 0.5)),
        make_sample('c', NormBox(0.2, 0.2, 0.4, 0.4)),
        make_sample('d', NormBox(0.2, 0.2, 0.2, 0.4)),
    ))
    tasks = tasks_from_manifest(manifest)
    assert [(t.task_id, t.bucket) for t in tasks] == [('a', DifficultyBucket.HARD), ('c', DifficultyBucket.MEDIUM)]


def test_trend_slope():
    assert trend_slope([1.0, 2.0, 3.0]) == pytest.approx(1.0)
    assert trend_slope([5.0]) == 0.0
