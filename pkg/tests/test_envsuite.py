# -*- coding: utf-8 -*-

import json

import numpy as np
import pytest

from cfdglib.envsuite import (FOURROOM, POINTMASS, BehaviorTier, ExpertPolicy, MediumPolicy, RandomPolicy,
                              TransitionBatch, build_offline_dataset, env_step, format_mix, make_env, normalized_score,
                              parse_mix, read_dataset, reference_returns, rollout, tier_counts, write_dataset)
from cfdglib.lab_def import ConfigError, InvalidInputError, LabIOError, SourceTag


def test_make_env_unknown_name():
    with pytest.raises(ConfigError) as excinfo:
        make_env('HalfCheetah')
    assert excinfo.value.field == 'env'


def test_step_at_goal_is_terminal(pointmass):
    nxt, reward, terminal = env_step(pointmass, pointmass.goal_array, np.zeros(2), 1)
    np.testing.assert_array_equal(nxt, pointmass.goal_array)
    assert reward == 0.0
    assert terminal


def test_step_arithmetic(pointmass):
    nxt, reward, terminal = env_step(pointmass, np.zeros(2), np.array([1.0, 0.0]), 1)
    np.testing.assert_allclose(nxt, [0.1, 0.0])
    assert reward == pytest.approx(-0.9)
    assert not terminal


def test_step_clips_at_boundary(pointmass):
    nxt, _, _ = env_step(pointmass, np.array([1.5, -1.45]), np.array([1.0, -1.0]), 1)
    np.testing.assert_allclose(nxt, [1.5, -1.5])


def test_step_rejects_out_of_range_action(pointmass):
    with pytest.raises(InvalidInputError):
        env_step(pointmass, np.zeros(2), np.array([1.5, 0.0]), 1)


def test_horizon_terminates(pointmass):
    _, _, terminal = env_step(pointmass, np.zeros(2), np.zeros(2), pointmass.horizon)
    assert terminal


def test_fourroom_wall_blocks_outside_doorway():
    spec = make_env(FOURROOM)
    blocked, _, _ = env_step(spec, np.array([0.48, 0.1]), np.array([1.0, 0.0]), 1)
    assert blocked[0] == pytest.approx(0.48)
    passed, _, _ = env_step(spec, np.array([0.48, 0.25]), np.array([1.0, 0.0]), 1)
    assert passed[0] == pytest.approx(0.53)


def test_fourroom_sparse_reward():
    spec = make_env(FOURROOM)
    _, reward, terminal = env_step(spec, np.array([0.85, 0.8]), np.array([0.0, 1.0]), 1)
    assert reward == 1.0
    assert terminal
    _, reward, _ = env_step(spec, np.array([0.1, 0.1]), np.array([0.0, 1.0]), 1)
    assert reward == 0.0


def test_zero_policy_from_goal(pointmass):
    trajs, mean_return = rollout(pointmass, lambda s, rng: np.zeros(2), 0, 1, initial_state=pointmass.goal_array)
    assert len(trajs[0]) == 1
    assert mean_return == 0.0


def test_straight_line_return(pointmass):
    policy = lambda s, rng: np.array([1.0, 0.0])
    trajs, mean_return = rollout(pointmass, policy, 0, 1, initial_state=np.zeros(2))

    expected, x = 0.0, 0.0
    for _ in range(pointmass.horizon):
        x += 0.1
        dist = abs(1.0 - x)
        expected -= dist
        if dist < 0.1 - 1e-9:
            break
    assert mean_return == pytest.approx(expected, abs=1e-9)
    assert trajs[0].transitions[-1].terminal


def test_rollout_is_deterministic(pointmass):
    policy = ExpertPolicy(pointmass)
    noisy = lambda s, rng: np.clip(policy(s, rng) + rng.normal(0.0, 0.3, size=2), -1.0, 1.0)
    a, ret_a = rollout(pointmass, noisy, [3, 1], 3)
    b, ret_b = rollout(pointmass, noisy, [3, 1], 3)
    assert ret_a == ret_b
    for ta, tb in zip(a, b):
        for x, y in zip(ta.transitions, tb.transitions):
            np.testing.assert_array_equal(x.state, y.state)
            np.testing.assert_array_equal(x.action, y.action)


def test_expert_reaches_fourroom_goal():
    spec = make_env(FOURROOM)
    trajs, mean_return = rollout(spec, ExpertPolicy(spec), 0, 5)
    assert mean_return == 1.0
    assert all(len(t) < spec.horizon for t in trajs)


def test_single_tier_dataset(pointmass):
    dataset = build_offline_dataset(pointmass, [BehaviorTier('random', 1.0)], 1000, 0)
    assert len(dataset) == 1000
    assert dataset.metadata.tier_counts == {'random': 1000}
    assert np.all(dataset.transitions.tags == int(SourceTag.OFFLINE))


def test_two_tier_split(pointmass):
    dataset = build_offline_dataset(pointmass, parse_mix('random:0.5,expert:0.5'), 1000, 0)
    assert len(dataset) == 1000
    assert dataset.metadata.tier_counts == {'random': 500, 'expert': 500}


def test_tier_counts_distribute_remainder():
    counts = tier_counts(parse_mix('random:0.3,medium:0.4,expert:0.3'), 11)
    assert sum(counts) == 11
    assert counts == [3, 5, 3]


def test_dataset_validation(pointmass):
    with pytest.raises(InvalidInputError):
        build_offline_dataset(pointmass, [], 10, 0)
    with pytest.raises(InvalidInputError):
        build_offline_dataset(pointmass, parse_mix('random:0.5,expert:0.6'), 10, 0)
    with pytest.raises(ConfigError):
        build_offline_dataset(pointmass, parse_mix('oracle:1.0'), 10, 0)
    with pytest.raises(ConfigError):
        parse_mix('random=1.0')


def test_mix_noise_scale(pointmass):
    mix = parse_mix('random:0.5, medium:0.5:0.1')
    assert mix == [BehaviorTier('random', 0.5), BehaviorTier('medium', 0.5, 0.1)]
    assert format_mix(mix) == 'random:0.5,medium:0.5:0.1'
    dataset = build_offline_dataset(pointmass, parse_mix('medium:1.0:0.0'), 100, 0)
    assert dataset.metadata.mix == 'medium:1.0:0.0'
    expert = ExpertPolicy(pointmass)
    batch = dataset.transitions
    np.testing.assert_array_equal(batch.actions, [expert(s, None) for s in batch.states])
    for bad in ('medium:1.0:-0.1', 'medium:1.0:0.1:2', 'medium:1.0:x'):
        with pytest.raises(ConfigError):
            parse_mix(bad)


def test_expert_data_earns_more_reward_than_random_data(pointmass):
    expert = build_offline_dataset(pointmass, parse_mix('expert:1.0'), 1000, 0).transitions
    random = build_offline_dataset(pointmass, parse_mix('random:1.0'), 1000, 0).transitions
    assert np.mean(expert.rewards) > np.mean(random.rewards)


def test_dataset_file_round_trip(tmp_path, pointmass):
    dataset = build_offline_dataset(pointmass, parse_mix('medium:1.0'), 200, 4)
    path = str(tmp_path / 'data' / 'dataset.csv')
    write_dataset(path, dataset)

    with open(path, encoding='utf-8') as f:
        lines = f.read().splitlines()
    assert lines[0] == 's0,s1,a0,a1,r,ns0,ns1,terminal'
    assert len(lines) == 201
    with open(path + '.meta.json', encoding='utf-8') as f:
        assert json.load(f)['size'] == 200

    loaded = read_dataset(path)
    for field in ('states', 'actions', 'rewards', 'next_states', 'terminals'):
        np.testing.assert_array_equal(getattr(loaded.transitions, field), getattr(dataset.transitions, field))
    assert loaded.metadata == dataset.metadata


def test_dataset_is_reproducible(tmp_path, pointmass):
    mix = parse_mix('medium:1.0')
    paths = []
    for name in ('a.csv', 'b.csv'):
        paths.append(str(tmp_path / name))
        write_dataset(paths[-1], build_offline_dataset(pointmass, mix, 300, 9))
    with open(paths[0], 'rb') as fa, open(paths[1], 'rb') as fb:
        assert fa.read() == fb.read()


def test_read_missing_dataset(tmp_path):
    with pytest.raises(LabIOError):
        read_dataset(str(tmp_path / 'nope.csv'))


def test_normalized_score_endpoints():
    assert normalized_score(-20.0, -20.0, -5.0) == pytest.approx(0.0)
    assert normalized_score(-5.0, -20.0, -5.0) == pytest.approx(100.0)
    assert normalized_score(-12.5, -20.0, -5.0) == pytest.approx(50.0)
    with pytest.raises(InvalidInputError):
        normalized_score(0.0, 1.0, 1.0)


@pytest.mark.parametrize('name', [POINTMASS, FOURROOM])
def test_reference_returns_are_ordered(name):
    random_ref, expert_ref = reference_returns(name)
    assert expert_ref > random_ref


def test_tier_returns_are_strictly_ordered_over_seeds(pointmass):
    means = {}
    for name, policy in (('expert', ExpertPolicy(pointmass)), ('medium', MediumPolicy(pointmass)),
                         ('random', RandomPolicy(pointmass))):
        means[name] = np.mean([rollout(pointmass, policy, seed, 1)[1] for seed in range(20)])
    assert means['expert'] > means['medium'] > means['random']


def test_batch_helpers():
    batch = TransitionBatch(np.zeros((3, 2)), np.ones((3, 2)), [1.0, 2.0, 3.0], np.zeros((3, 2)), [0, 0, 1])
    assert len(batch) == 3
    assert np.all(batch.tags == int(SourceTag.OFFLINE))
    both = TransitionBatch.concatenate([batch, batch.with_tag(SourceTag.ONLINE)])
    assert len(both) == 6
    np.testing.assert_array_equal(both.take([2, 3]).tags, [int(SourceTag.OFFLINE), int(SourceTag.ONLINE)])
    assert batch.to_transitions()[2].terminal
    with pytest.raises(InvalidInputError):
        TransitionBatch(np.zeros((3, 2)), np.ones((2, 2)), [1.0, 2.0, 3.0], np.zeros((3, 2)), [0, 0, 1])
