import itertools
import json

import numpy as np
import pytest

from emaq.errors import StructuralError, ValidationError
from emaq.tabular import (
    DiscretePolicy,
    QTable,
    TabularMDP,
    bellman_residual,
    evaluate_policy,
    finite_horizon_return,
    greedy_policy,
    q_learning_fixed_point,
    random_mdp,
    random_policy,
)


def single_state(rewards, gamma):
    rewards = np.asarray(rewards, dtype=float)[None, :]
    return TabularMDP(np.ones((1, rewards.shape[1], 1)), rewards, gamma)


def sa_linear_oracle(mdp, policy):
    """Solve (I - gamma P_mu) Q = r on the full state-action system."""
    S, A = mdp.num_states, mdp.num_actions
    p_mu = np.einsum("sat,tb->satb", mdp.transition, policy.probs).reshape(S * A, S * A)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * p_mu, mdp.reward.reshape(-1))
    return q.reshape(S, A)


class TestValidation:
    def test_rejects_unnormalised_rows(self):
        t = np.full((2, 1, 2), 0.5)
        t[0, 0, 0] = 0.6
        with pytest.raises(ValidationError):
            TabularMDP(t, np.zeros((2, 1)), 0.9)

    def test_rejects_gamma_one(self):
        with pytest.raises(ValidationError):
            single_state([1.0], 1.0)

    def test_rejects_negative_probability(self):
        t = np.array([[[1.5, -0.5]], [[0.0, 1.0]]])
        with pytest.raises(ValidationError):
            TabularMDP(t, np.zeros((2, 1)), 0.5)

    def test_rejects_shape_mismatch(self):
        mdp = single_state([1.0, 2.0], 0.5)
        with pytest.raises(StructuralError):
            evaluate_policy(mdp, DiscretePolicy.uniform(2, 2))

    def test_arrays_are_read_only(self):
        mdp = single_state([1.0], 0.5)
        with pytest.raises(ValueError):
            mdp.reward[0, 0] = 3.0


class TestEvaluatePolicy:
    def test_geometric_series(self):
        mdp = single_state([1.0, 1.0, 1.0], 0.9)
        q = evaluate_policy(mdp, DiscretePolicy.uniform(1, 3))
        np.testing.assert_allclose(q.values, 10.0, atol=1e-10)

    def test_gamma_zero_is_reward(self):
        rng = np.random.default_rng(1)
        mdp = random_mdp(4, 3, 0.0, rng)
        q = evaluate_policy(mdp, random_policy(4, 3, rng))
        np.testing.assert_array_equal(q.values, mdp.reward)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_state_action_linear_system(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(5, 3, 0.9, rng)
        policy = random_policy(5, 3, rng)
        q = evaluate_policy(mdp, policy, tol=1e-10)
        np.testing.assert_allclose(q.values, sa_linear_oracle(mdp, policy), atol=1e-9)
        assert bellman_residual(mdp, policy, q) <= 1e-10


class TestQLearning:
    def test_two_action_closed_form(self):
        # Q(a2) = 2 + 0.5 Q(a2) -> 4 ; Q(a1) = 1 + 0.5 * 4 = 3
        q = q_learning_fixed_point(single_state([1.0, 2.0], 0.5))
        np.testing.assert_allclose(q.values, [[3.0, 4.0]], atol=1e-9)

    def test_gamma_zero(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(3, 2, 0.0, rng)
        np.testing.assert_array_equal(q_learning_fixed_point(mdp).values, mdp.reward)

    @pytest.mark.parametrize("seed", range(4))
    def test_policy_enumeration_oracle(self, seed):
        rng = np.random.default_rng(10 + seed)
        mdp = random_mdp(4, 2, 0.9, rng)
        best = np.full((4, 2), -np.inf)
        for actions in itertools.product(range(2), repeat=4):
            q = sa_linear_oracle(mdp, DiscretePolicy.deterministic(actions, 2))
            best = np.maximum(best, q)
        q_star = q_learning_fixed_point(mdp, tol=1e-10)
        np.testing.assert_allclose(q_star.values, best, atol=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_dominates_every_policy(self, seed):
        rng = np.random.default_rng(20 + seed)
        mdp = random_mdp(6, 3, 0.95, rng)
        q_star = q_learning_fixed_point(mdp).values
        for _ in range(5):
            q = evaluate_policy(mdp, random_policy(6, 3, rng)).values
            assert np.all(q_star >= q - 2e-10)

    def test_greedy_policy_reproduces_q_star(self):
        rng = np.random.default_rng(7)
        mdp = random_mdp(8, 4, 0.9, rng)
        q_star = q_learning_fixed_point(mdp)
        q_greedy = evaluate_policy(mdp, greedy_policy(q_star))
        np.testing.assert_allclose(q_greedy.values, q_star.values, atol=2e-10)


class TestGreedy:
    @pytest.mark.parametrize(
        "row, expected", [([1, 3, 3], 1), ([5, 2], 0), ([4, 4, 4], 0)]
    )
    def test_lowest_index_tie_break(self, row, expected):
        policy = greedy_policy(QTable(np.array([row], dtype=float)))
        assert policy.probs[0].argmax() == expected
        assert policy.probs[0].sum() == 1.0


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mdp = random_mdp(3, 2, 0.7, rng)
    path = tmp_path / "mdp.json"
    mdp.save(path)
    back = TabularMDP.load(path)
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma


def test_json_load_validates_probabilities():
    doc = {"num_states": 1, "num_actions": 1, "gamma": 0.5, "reward": [[0.0]],
           "transition": [[[0.9]]]}
    with pytest.raises(ValidationError):
        TabularMDP.from_json(json.loads(json.dumps(doc)))


def test_finite_horizon_return_counts_steps():
    # chain 0 -> 1 -> 2 (terminal), reward -1 per step outside the terminal
    t = np.zeros((3, 1, 3))
    t[0, 0, 1] = t[1, 0, 2] = t[2, 0, 2] = 1.0
    r = np.array([[-1.0], [-1.0], [0.0]])
    mdp = TabularMDP(t, r, 0.9)
    ret = finite_horizon_return(mdp, DiscretePolicy.uniform(3, 1), np.array([1.0, 0, 0]), 10, [2])
    assert ret == -2.0
    assert finite_horizon_return(mdp, DiscretePolicy.uniform(3, 1), np.array([1.0, 0, 0]), 1) == -1.0
