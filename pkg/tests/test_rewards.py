import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from diffrl.rewards import (
    RewardBinding,
    RunningStats,
    composition_reward,
    composition_rewards,
    diversity_reward,
    normalize_advantages,
    preference_reward,
    preference_rewards,
    statistical_parity,
)
from diffrl.tasks import AttributeSpec, Context


def brute_parity(labels, k):
    total = 0.0
    for a in range(k):
        p = sum(1 for x in labels if x == a) / len(labels)
        total += (p - 1.0 / k) ** 2
    return math.sqrt(total)


def test_preference_examples(world):
    c = Context("preference", (3,))
    target = world.pref_target(3)
    assert preference_reward(target, c, world) == 1.0
    d = np.array([0.3, -0.4, 0.0, 0.0]) / 0.5 * world.pref_tau
    assert preference_reward(target + d, c, world) == pytest.approx(math.exp(-0.5), abs=1e-12)
    rot = np.array([0.0, 0.0, world.pref_tau, 0.0])
    assert preference_reward(target + rot, c, world) == pytest.approx(preference_reward(target + d, c, world), abs=1e-15)
    with pytest.raises(ValueError):
        preference_reward(target, Context("portrait", (0,)), world)


def test_composition_examples(world):
    objs = world.objects()
    c = Context("composition", (2, 5, 1))
    both = np.concatenate([objs[2].center, objs[5].center])
    assert composition_reward(both, c, world) == 1.0
    near = np.concatenate([objs[2].center, np.array(objs[5].center) + [world.object_width, 0.0]])
    assert composition_reward(near, c, world) == pytest.approx((1 + math.exp(-0.5)) / 2, abs=1e-12)
    assert abs(composition_reward(near, c, world) - 0.803265) < 1e-6
    with pytest.raises(ValueError):
        composition_reward(both, Context("preference", (0,)), world)


def test_vectorised_rewards_match_scalar(world):
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (20, 4))
    comp = [Context("composition", (int(i % 10), int((i + 3) % 10), 0)) for i in range(20)]
    pref = [Context("preference", (int(i % 8),)) for i in range(20)]
    np.testing.assert_allclose(composition_rewards(x, comp, world), [composition_reward(a, c, world) for a, c in zip(x, comp)], rtol=1e-14)
    np.testing.assert_allclose(preference_rewards(x, pref, world), [preference_reward(a, c, world) for a, c in zip(x, pref)], rtol=1e-14)


def test_parity_examples():
    assert statistical_parity([0, 1, 2, 3] * 4, 4) == 0.0
    assert abs(statistical_parity([2] * 9, 4) - math.sqrt(0.75)) < 1e-12
    assert abs(statistical_parity([0, 0, 0, 1], 4) - math.sqrt(0.375)) < 1e-12
    with pytest.raises(ValueError):
        statistical_parity([], 4)
    with pytest.raises(ValueError):
        statistical_parity([4], 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(lambda k: st.tuples(st.just(k), st.lists(st.integers(0, k - 1), min_size=1, max_size=40))),
       st.integers(1, 4))
def test_parity_properties(case, dup):
    k, labels = case
    p = statistical_parity(labels, k)
    assert abs(p - brute_parity(labels, k)) < 1e-12
    assert p <= math.sqrt((k - 1) / k) + 1e-12
    assert abs(statistical_parity(labels * dup, k) - p) < 1e-12
    perm = np.random.default_rng(len(labels)).permutation(k)
    assert abs(statistical_parity([int(perm[x]) for x in labels], k) - p) < 1e-12
    if len(set(labels)) == 1:
        assert abs(p - math.sqrt((k - 1) / k)) < 1e-12


def test_diversity_reward():
    attr = AttributeSpec()
    uniform = np.array([[c, 0, 0, 0] for c in attr.centers] * 4, dtype=float)
    assert np.all(diversity_reward(uniform, attr) == 0.0)
    same = np.tile([1.5, 0, 0, 0], (16, 1)).astype(float)
    np.testing.assert_allclose(diversity_reward(same, attr), -math.sqrt(0.75), atol=1e-12)
    mixed = np.array([[c, 0, 0, 0] for c in (-1.5, -1.5, 0.5, 1.5, 0.5)], dtype=float)
    r = diversity_reward(mixed, attr)
    assert len(set(r)) == 1
    for perm in list(permutations(range(5)))[:20]:
        assert np.array_equal(diversity_reward(mixed[list(perm)], attr), r)
    with pytest.raises(ValueError):
        diversity_reward(mixed[:1], attr)


def test_binding_validation(world):
    with pytest.raises(ValueError):
        RewardBinding("diversity", 3).validate(world)
    with pytest.raises(ValueError):
        RewardBinding("aesthetic").validate(world)
    RewardBinding("diversity", 16).validate(world)


def test_advantage_examples():
    a = normalize_advantages([1.0, 2.0, 3.0])
    np.testing.assert_allclose(a.advantages, [-1.224745, 0.0, 1.224745], atol=1e-6)
    r = np.array([1.0, 2.0, 3.0])
    direct = (r - r.mean()) / np.sqrt(r.var() + 1e-8)
    assert np.max(np.abs(a.advantages - direct)) < 1e-9
    assert np.array_equal(normalize_advantages([5.0, 5.0, 5.0]).advantages, np.zeros(3))
    with pytest.raises(ValueError):
        normalize_advantages([1.0])


def test_per_prompt_stream():
    stats = RunningStats()
    first = normalize_advantages([0.0], "prompt", stats, ["p"])
    assert first.advantages[0] == 0.0  # cold start
    second = normalize_advantages([2.0], "prompt", stats, ["p"])
    assert second.advantages[0] == pytest.approx(1.0, abs=1e-7)
    count, mean, var = stats.stats("p")
    assert (count, mean, var) == (2, 1.0, 1.0)


def test_group_statistics_use_one_value_per_group():
    r = np.repeat([0.1, 0.5, 0.9], [2, 4, 2])
    a = normalize_advantages(r, groups=np.repeat([0, 1, 2], [2, 4, 2]))
    vals = np.array([0.1, 0.5, 0.9])
    assert a.mean == pytest.approx(vals.mean())
    np.testing.assert_allclose(a.advantages, (r - vals.mean()) / np.sqrt(vals.var() + 1e-8), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50), st.floats(-50, 50), st.floats(0.1, 10))
def test_advantage_properties(rewards, shift, scale):
    r = np.array(rewards)
    assume(r.std() > 0.5)
    a = normalize_advantages(r).advantages
    assert abs(a.mean()) < 1e-9
    assert abs(a.std() - r.std() / np.sqrt(r.var() + 1e-8)) < 1e-12
    np.testing.assert_allclose(normalize_advantages(r + shift).advantages, a, atol=1e-8)
    np.testing.assert_allclose(normalize_advantages(r * scale).advantages, a, atol=1e-4)
