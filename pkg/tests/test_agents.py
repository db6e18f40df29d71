import numpy as np
import pytest

from multisafe.agents import (
    AgentConfig,
    BayesianQAgent,
    EpsGreedyQAgent,
    MultiSafeQAgent,
    NaiveQAgent,
    ReplayBuffer,
    SafeQAgent,
    SingleSafeMDPAgent,
    make_agent,
    select_action,
)
from multisafe.environment import rover_env
from multisafe.gp import KernelSpec
from multisafe.safety import ActionAssessment, SafetyConfig, lc_from_weights

SAFETY = SafetyConfig(M=16, J=20)
CONFIG = AgentConfig(kernel=KernelSpec(2.0, 1.0, 0.1))
JOINT = np.array([[5.0, 5.0], [8.0, 5.0], [12.0, 12.0]])


def assessment(lr, ret, lc, sigma=None):
    n = len(lr)
    return ActionAssessment(np.asarray(lr, float), np.asarray(ret, float), np.asarray(lc, float),
                            -0.5, 1.0, 0.7, np.zeros(n) if sigma is None else np.asarray(sigma, float))


def warm(agent, env, rng, steps=5):
    joint = JOINT.copy()
    agent.begin_episode(joint, env.reward(joint), 0)
    for t in range(1, steps + 1):
        acts = [agent.act(joint, t, rng) if k == agent.id else int(rng.integers(4)) for k in range(len(joint))]
        nxt, obs = env.step(joint, acts, rng)
        agent.learn(joint, acts, nxt, obs, t)
        joint = nxt
    return joint


def test_single_safe_action_chosen():
    a = assessment([0.0, 0.0, -2.0], [1.0, 0.0, 1.0], [0.9, 0.9, 0.9])
    assert select_action(a, [0.0, 5.0, 9.0]) == (0, False)


def test_fallback_picks_highest_lc():
    a = assessment([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.1, 0.6, 0.4])
    assert select_action(a, [3.0, 0.0, 1.0]) == (1, True)


def test_explore_picks_largest_sigma_among_safe():
    a = assessment([0.0, 0.0, 0.0, -1.0], np.ones(4), np.ones(4), sigma=[0.2, 0.9, 0.5, 3.0])
    assert select_action(a, a.sigma) == (1, False)


def test_tie_goes_to_lowest_index():
    a = assessment([0.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    assert select_action(a, [2.0, 2.0]) == (0, False)


def test_epsgreedy_full_eps_is_uniform():
    env = rover_env()
    agent = EpsGreedyQAgent(1, 3, env, SAFETY, CONFIG, np.random.default_rng(0), eps=1.0)
    rng = np.random.default_rng(1)
    counts = np.bincount([agent.act(JOINT, 1, rng) for _ in range(4000)], minlength=4)
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.03)


def test_epsgreedy_zero_eps_is_greedy():
    env = rover_env()
    agent = EpsGreedyQAgent(1, 3, env, SAFETY, CONFIG, np.random.default_rng(0), eps=0.0)
    q = agent.q.net(agent.features(JOINT)[None])[0]
    assert agent.act(JOINT, 1, np.random.default_rng(2)) == int(np.argmax(q))


def test_naive_lc_uses_uniform_weights():
    env = rover_env()
    agent = NaiveQAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(0))
    w = agent.opponent_weights(JOINT)
    assert np.allclose(w, 0.25)
    got = lc_from_weights(JOINT[0], JOINT[1:], w, env, 16, np.random.default_rng(3))
    ref = lc_from_weights(JOINT[0], JOINT[1:], np.full((2, 4), 0.25), env, 16, np.random.default_rng(3))
    assert np.array_equal(got, ref)


def test_bayesian_belief_is_distribution():
    env = rover_env()
    agent = BayesianQAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    warm(agent, env, rng, 10)
    b = agent.belief(JOINT)
    assert b.shape == (2, 4) and np.allclose(b.sum(axis=1), 1, atol=1e-12) and np.all(b > 0)


def test_safeq_sees_joint_state():
    env = rover_env()
    agent = SafeQAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(0))
    assert agent.input_dim == 3 * env.dim
    assert agent.q.net.params[0].shape[0] == 6


def test_penalty_only_in_learning_reward():
    env = rover_env()
    agent = SafeQAgent(0, 2, env, SAFETY, CONFIG, np.random.default_rng(0))
    assert agent.learning_reward(1.5, (True, False)) == pytest.approx(-8.5)
    assert agent.learning_reward(1.5, (False, False)) == 1.5


def test_multisafe_gp_grows_by_one_per_step():
    env = rover_env()
    rng = np.random.default_rng(0)
    agent = MultiSafeQAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(1))
    agent.begin_episode(JOINT, env.reward(JOINT), 0)
    n0 = agent.gp.n
    acts = [agent.act(JOINT, 1, rng), 0, 1]
    nxt, obs = env.step(JOINT, acts, rng)
    agent.learn(JOINT, acts, nxt, obs, 1)
    assert agent.gp.n == n0 + 1


def test_opponent_params_fixed_between_refreshes():
    env = rover_env()
    cfg = AgentConfig(kernel=KernelSpec(2.0, 1.0, 0.1), infer_every=4)
    agent = MultiSafeQAgent(0, 3, env, SAFETY, cfg, np.random.default_rng(1))
    rng = np.random.default_rng(0)
    joint = JOINT.copy()
    agent.begin_episode(joint, env.reward(joint), 0)
    seen = []
    for t in range(1, 9):
        acts = [agent.act(joint, t, rng), 0, 1]
        nxt, obs = env.step(joint, acts, rng)
        agent.learn(joint, acts, nxt, obs, t)
        seen.append(agent.opponents[1].params)
        joint = nxt
    assert seen[0] is seen[1] is seen[2]
    assert seen[4] is seen[5] is seen[6]


def test_multisafe_choice_respects_safe_set():
    env = rover_env()
    rng = np.random.default_rng(0)
    agent = MultiSafeQAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(1))
    joint = JOINT.copy()
    agent.begin_episode(joint, env.reward(joint), 0)
    for t in range(1, 15):
        a = agent.act(joint, t, rng)
        asm = agent.last_assessment
        assert asm.consistent()
        if asm.safe.any():
            assert asm.safe[a]
        else:
            assert asm.lc[a] >= asm.lc.max() - 1e-12
        acts = [a, int(rng.integers(4)), int(rng.integers(4))]
        nxt, obs = env.step(joint, acts, rng)
        agent.learn(joint, acts, nxt, obs, t)
        joint = nxt


def test_same_seed_same_actions():
    env = rover_env()

    def run():
        agent = MultiSafeQAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(4), objective="explore")
        rng = np.random.default_rng(5)
        joint = JOINT.copy()
        agent.begin_episode(joint, env.reward(joint), 0)
        out = []
        for t in range(1, 8):
            acts = [agent.act(joint, t, rng), int(rng.integers(4)), int(rng.integers(4))]
            joint2, obs = env.step(joint, acts, rng)
            agent.learn(joint, acts, joint2, obs, t)
            out.append(acts[0])
            joint = joint2
        return out

    assert run() == run()


def test_single_safe_mdp_ignores_joint_safety():
    env = rover_env()
    agent = SingleSafeMDPAgent(0, 3, env, SAFETY, CONFIG, np.random.default_rng(0))
    warm(agent, env, np.random.default_rng(1), 3)
    assert np.isnan(agent.last_certificates[2])


def test_replay_buffer_ring():
    buf = ReplayBuffer(3, 2)
    for k in range(5):
        buf.add([k, k], k % 2, float(k), [k + 1, k + 1])
    assert len(buf) == 3
    s, a, r, s2, d = buf.sample(np.random.default_rng(0), 50)
    assert set(r.tolist()) <= {2.0, 3.0, 4.0}
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2)


def test_make_agent_tokens():
    env = rover_env()
    rng = np.random.default_rng(0)
    assert make_agent("epsgreedy:0.1", 1, 2, env, SAFETY, CONFIG, rng).eps == 0.1
    eps = make_agent("epsgreedy", 1, 2, env, SAFETY, CONFIG, rng, np.random.default_rng(9)).eps
    assert 0.05 <= eps <= 0.5
    assert make_agent("multisafe:explore", 0, 2, env, SAFETY, CONFIG, rng).objective == "explore"
    for bad in ("nope", "naive:3", "epsgreedy:x", "multisafe:greedy"):
        with pytest.raises(ValueError):
            make_agent(bad, 0, 2, env, SAFETY, CONFIG, rng)
