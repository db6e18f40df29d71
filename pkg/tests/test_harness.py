import csv
import glob
import json
import os

import numpy as np
import pytest

from multisafe.agents import Agent
from multisafe.environment import quadcopter_env
from multisafe.harness import (
    EpisodeLog,
    ExperimentConfig,
    MetricsSummary,
    build_agents,
    build_env,
    new_states_visited,
    quadcopter_config,
    rover_config,
    run_episode,
    run_experiment,
    run_seed,
    safe_steps,
)
from multisafe.rng import stream

CHEAP = dict(agents="epsgreedy:0.2,epsgreedy:0.5", episodes=2, steps=6, seeds=[0])


class Scripted(Agent):
    """Always plays one fixed action."""

    def __init__(self, agent_id, n_agents, env, action):
        super().__init__(agent_id, n_agents, env, None, None, None)
        self.action = action

    def act(self, joint, t, rng):
        return self.action


def parse_text(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if line.strip())


def test_horizon_episode_shape():
    cfg = rover_config(**CHEAP)
    env = build_env(cfg)
    log = run_episode(cfg, build_agents(cfg, env, 0), env, 0, stream(0, 0))
    assert log.cause == "horizon" and log.termination_step == 6
    assert log.positions.shape == (7, 2, 2) and log.actions.shape == (6, 2)


def test_scripted_joint_violation_terminates_at_step_seven():
    env = quadcopter_env(step=0.14, noise_var=0.0, obs_noise_std=0.0)
    cfg = quadcopter_config(agents="epsgreedy,epsgreedy", steps=50, h=-100.0)
    agents = [Scripted(0, 2, env, 2), Scripted(1, 2, env, 3)]  # forward / backward: drift apart
    log = run_episode(cfg, agents, env, 0, np.random.default_rng(0))
    assert log.cause == "joint_unsafe"
    assert log.termination_step == 7
    assert log.n_steps == 8
    d = np.linalg.norm(log.positions[:, 0] - log.positions[:, 1], axis=1)
    assert d[-2] <= 3.0 < d[-1]
    assert log.joint_unsafe[-1].all() and not log.joint_unsafe[:-1].any()
    assert safe_steps(log, 0) == 7


def test_individual_violation_cause():
    env = quadcopter_env(step=0.3, noise_var=0.0, obs_noise_std=0.0)
    cfg = quadcopter_config(agents="epsgreedy,epsgreedy", steps=50, h=-4.0, starts=[0.0, 0.0, 0.0, 0.5, 0.5, 0.0])
    agents = [Scripted(0, 2, env, 1), Scripted(1, 2, env, 1)]  # both descend away from the destination
    log = run_episode(cfg, agents, env, 0, np.random.default_rng(0))
    assert log.cause == "individual_unsafe"
    assert log.indiv_unsafe[-1].any() and not log.joint_unsafe.any()


def test_csv_byte_identical_and_round_trip(tmp_path):
    cfg = rover_config(**dict(CHEAP, agents="multisafe,epsgreedy", steps=4))
    cfg.mc_samples = 8
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(cfg.replace(out=str(a)))
    run_experiment(cfg.replace(out=str(b)))
    files = sorted(os.listdir(a))
    assert files == sorted(os.listdir(b))
    for f in files:
        if f.endswith(".csv"):
            assert (a / f).read_bytes() == (b / f).read_bytes()
    logs, _, _ = run_seed(cfg, 0)
    back = EpisodeLog.read_csv(a / "seed0_ep000.csv")
    assert back.equals(logs[0])
    assert np.all(np.isfinite(back.certificates[:, 0]))


def test_new_states_visited_examples():
    def log_of(points):
        pos = np.asarray(points, float)[:, None, :]
        T = len(pos) - 1
        z = np.zeros((T + 1, 1), bool)
        return EpisodeLog(0, 0, pos, np.zeros((T, 1), int), np.zeros((T + 1, 1)), np.full((T, 3), np.nan),
                          z, z, T, "horizon")

    seen = set()
    assert new_states_visited(log_of([[0.2, 0.2], [1.5, 0.2], [1.7, 0.1]]), 1.0, seen) == 2
    assert new_states_visited(log_of([[0.2, 0.2], [1.5, 0.2]]), 1.0, seen) == 0
    assert new_states_visited(log_of([[0.2, 0.2], [5.5, 5.5]]), 1.0, seen, bounds=[[0, 20], [0, 20]]) == 2


def test_safe_steps_counts_to_first_violation():
    T = 5
    ind = np.zeros((T + 1, 1), bool)
    jnt = np.zeros((T + 1, 1), bool)
    jnt[4, 0] = True
    log = EpisodeLog(0, 0, np.zeros((T + 1, 1, 2)), np.zeros((T, 1), int), np.zeros((T + 1, 1)),
                     np.full((T, 3), np.nan), ind, jnt, T, "horizon")
    assert safe_steps(log, 0) == 3
    jnt[4, 0] = False
    assert safe_steps(log, 0) == 5


def test_minimal_run(tmp_path):
    cfg = rover_config(agents="epsgreedy:0.3", episodes=1, steps=1, seeds=[0], out=str(tmp_path))
    summary = run_experiment(cfg)
    assert summary.per_seed["reward"].shape == (1, 1, 1)
    assert len(glob.glob(str(tmp_path / "*.csv"))) == 1
    assert (tmp_path / "summary.json").exists()


def test_full_grid_file_count(tmp_path):
    cfg = rover_config(agents="epsgreedy:0.3,epsgreedy:0.1", episodes=20, steps=3, seeds=list(range(10)),
                       out=str(tmp_path))
    run_experiment(cfg)
    assert len(glob.glob(str(tmp_path / "*.csv"))) == 200
    d = json.loads((tmp_path / "summary.json").read_text())
    assert np.array(d["metrics"]["reward"]["per_seed"]).shape == (10, 20, 2)


def test_summary_matches_independent_csv_recount(tmp_path):
    cfg = rover_config(agents="safeq,epsgreedy:0.5,epsgreedy:0.5", episodes=3, steps=20, seeds=[0, 1],
                       collision=1.5, mc_samples=8, out=str(tmp_path))
    summary = run_experiment(cfg)
    for si, seed in enumerate(cfg.seeds):
        for e in range(cfg.episodes):
            with open(tmp_path / f"seed{seed}_ep{e:03d}.csv") as fh:
                fh.readline()
                rows = list(csv.DictReader(fh))
            for i in range(3):
                mine = [r for r in rows if int(r["agent_id"]) == i and int(r["t"]) > 0]
                rew = sum(float(r["reward_obs"]) for r in mine)
                events = sum(r["indiv_unsafe"] == "1" or r["joint_unsafe"] == "1" for r in mine)
                assert abs(summary.per_seed["reward"][si, e, i] - rew) <= 1e-9
                assert summary.per_seed["unsafe_events"][si, e, i] == events
    assert summary.per_seed["unsafe_events"].sum() > 0
    back = MetricsSummary.read(tmp_path / "summary.json")
    assert np.array_equal(back.per_seed["reward"], summary.per_seed["reward"])
    assert back.se("reward").shape == (3, 3)


def test_penalty_excluded_from_reported_reward():
    cfg = rover_config(agents="safeq,epsgreedy:1.0", episodes=2, steps=30, seeds=[0], collision=6.0,
                       mc_samples=8)
    logs, metrics, _ = run_seed(cfg, 0)
    assert sum(log.joint_unsafe.sum() for log in logs) > 0
    for log, m in zip(logs, metrics):
        assert m[0, 0] == pytest.approx(log.rewards[1:, 0].sum(), abs=1e-12)


def test_seed_isolation(tmp_path):
    base = rover_config(**dict(CHEAP, agents="epsgreedy,epsgreedy"))
    run_experiment(base.replace(seeds=[1, 3], out=str(tmp_path / "both")))
    run_experiment(base.replace(seeds=[3], out=str(tmp_path / "one")))
    for e in range(2):
        name = f"seed3_ep{e:03d}.csv"
        assert (tmp_path / "both" / name).read_bytes() == (tmp_path / "one" / name).read_bytes()


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        run_experiment(rover_config(**CHEAP, out=str(blocker / "sub")))


def test_config_text_round_trip():
    cfg = quadcopter_config(seeds=[2, 5], beta=3.0, out="x")
    back = ExperimentConfig.from_mapping(parse_text(cfg.to_text()))
    assert back == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ValueError):
        rover_config(episodes=0)
