import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from cedqn.agent import HyperParams
from cedqn.errors import ConfigError
from cedqn.gridworld import EnvConfig
from cedqn.training import (COMPARISON_COLUMNS, METRICS_COLUMNS, ComparisonMatrix, RunConfig,
                            Team, TeamSpec, discounted_return, env_for_team,
                            evaluate_completion_time, fmt, moving_average, run_comparison,
                            run_episode, train_run, train_team)

FAST = HyperParams(batch_size=8, buffer_capacity=500, epsilon_decay_steps=200,
                   target_sync_interval=20, q_hidden=(16,), comm_hidden=(8,))


def small_run(algo="cedqn", team=4, episodes=3, seed=0, **hyper):
    env = EnvConfig(task_size=3, grid_width=5, grid_height=5, max_active_boxes=2,
                    max_steps_per_episode=40)
    return RunConfig(algo=algo, team=TeamSpec.from_id(team), env=env,
                     hyper=replace(FAST, **hyper), episodes=episodes, seed=seed)


def snapshot(team):
    return [net.params.copy() for a in team for net in a.networks().values()]


class TestDiscountedReturn:
    @pytest.mark.parametrize("rewards,gamma,expected",
                             [((1, 1, 1), 0.0, 1.0), ((0, 0, 1), 0.9, 0.81), ((), 0.5, 0.0)])
    def test_examples(self, rewards, gamma, expected):
        assert discounted_return(rewards, gamma) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("gamma", [1.0, -0.1])
    def test_range(self, gamma):
        with pytest.raises(ConfigError):
            discounted_return([1.0], gamma)


class TestTeams:
    @pytest.mark.parametrize("tid,std,dist", [(1, 6, 0), (2, 5, 1), (3, 4, 2), (4, 3, 3)])
    def test_table(self, tid, std, dist):
        spec = TeamSpec.from_id(tid)
        assert (spec.standard_count, spec.disturbance_count) == (std, dist)
        assert TeamSpec.from_counts(std, dist) == spec
        assert spec.capacities() == (3.0,) * std + (0.0,) * dist

    def test_unknown_composition(self):
        with pytest.raises(ConfigError):
            TeamSpec.from_counts(2, 4)

    def test_team4_instantiates_3_plus_3(self):
        team = Team(small_run(team=4))
        world_caps = [c for c in small_run(team=4).env.capacities]
        assert len(team) == 6 and world_caps.count(3.0) == 3 and world_caps.count(0.0) == 3

    def test_env_for_team_recomputes_step_limit(self):
        env = env_for_team(EnvConfig(), TeamSpec.from_id(1), 100)
        assert env.task_size == 100 and env.max_steps_per_episode == 666
        fixed = env_for_team(EnvConfig(max_steps_per_episode=50), TeamSpec.from_id(1), 100)
        assert fixed.max_steps_per_episode == 50


class TestHelpers:
    def test_fmt(self):
        assert fmt(3) == "3" and fmt(np.int64(7)) == "7"
        assert fmt(0.1234567891) == "0.123457" and fmt(-1234567.0) == "-1.23457e+06"

    def test_moving_average(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])


class TestEpisode:
    def test_eval_is_pure(self):
        config = small_run()
        team = Team(config)
        run_episode(team, config.env, "train", seed=1)
        before = snapshot(team)
        steps, baselines = team.env_steps, [a.comm_baseline for a in team]
        run_episode(team, config.env, "eval", seed=2, eval_epsilon=0.3)
        assert all(np.array_equal(a, b) for a, b in zip(before, snapshot(team)))
        assert team.env_steps == steps and [a.comm_baseline for a in team] == baselines

    def test_baseline_sends_nothing(self):
        config = small_run(algo="dqn")
        stats = run_episode(Team(config), config.env, "train", seed=0)
        assert stats.messages_sent == 0 and stats.gate_decisions == 0
        assert stats.mean_comm_loss == 0.0

    def test_steps_bounded(self):
        config = small_run()
        team = Team(config)
        for k in range(4):
            s = run_episode(team, config.env, "train", seed=k)
            assert s.steps <= config.env.max_steps_per_episode
            assert s.boxes_lifted <= config.env.task_size

    def test_reward_bookkeeping(self):
        config = small_run()
        s = run_episode(Team(config), config.env, "train", seed=3)
        assert s.team_reward == pytest.approx(sum(s.robot_rewards))
        assert s.gate_decisions == 6 * s.steps

    def test_gate_always_open_sends_every_step(self):
        config = small_run(comm_threshold=-1.0)
        s = run_episode(Team(config), config.env, "train", seed=0)
        assert s.messages_sent == s.gate_decisions and s.gate_rate == 1.0

    def test_bad_mode(self):
        config = small_run()
        with pytest.raises(ValueError):
            run_episode(Team(config), config.env, "test")


class TestTrainRun:
    def test_cardinality_and_columns(self):
        mlog = train_run(small_run(episodes=4))
        rows = list(csv.reader(io.StringIO(mlog.to_csv())))
        assert tuple(rows[0]) == METRICS_COLUMNS
        assert [int(r[5]) for r in rows[1:]] == [0, 1, 2, 3]
        assert all(len(r) == len(METRICS_COLUMNS) for r in rows)

    def test_same_seed_same_bytes(self):
        assert train_run(small_run(seed=5)).to_csv() == train_run(small_run(seed=5)).to_csv()

    def test_different_seed_differs(self):
        assert train_run(small_run(seed=5)).to_csv() != train_run(small_run(seed=6)).to_csv()

    def test_comm_columns_zero_for_dqn(self):
        mlog = train_run(small_run(algo="dqn"))
        for row in list(csv.DictReader(io.StringIO(mlog.to_csv()))):
            assert row["mean_comm_loss"] == row["messages_sent"] == row["gate_rate"] == "0"

    def test_threshold_one_matches_baseline(self):
        ce = train_run(small_run(algo="cedqn", comm_threshold=1.0, episodes=4)).to_csv()
        dqn = train_run(small_run(algo="dqn", comm_threshold=1.0, episodes=4)).to_csv()
        strip = lambda text: [r[2:] for r in csv.reader(io.StringIO(text))]  # noqa: E731
        assert strip(ce) == strip(dqn)


class TestCompletion:
    def test_trials_and_timeouts(self):
        config = small_run()
        team = Team(config)
        env = replace(config.env, max_steps_per_episode=2, task_size=3)
        res = evaluate_completion_time(team, env, trials=10, seed=0)
        assert len(res.steps) == 10 and res.timeout_fraction == 1.0 and res.mean_steps == 2.0

    def test_zero_trials(self):
        config = small_run()
        with pytest.raises(ConfigError):
            evaluate_completion_time(Team(config), config.env, 0, 0)

    def test_deterministic(self):
        config = small_run()
        team, _ = train_team(config)
        a = evaluate_completion_time(team, config.env, 3, seed=9)
        b = evaluate_completion_time(team, config.env, 3, seed=9)
        assert a.steps == b.steps


class TestComparison:
    def matrix(self, **kw):
        base = small_run(episodes=1)
        defaults = dict(algos=("dqn", "cedqn"), teams=(1, 4), task_sizes=(2, 4), seeds=(0, 1),
                        trials=2)
        defaults.update(kw)
        return ComparisonMatrix(base=base, **defaults)

    def test_cardinality_and_order(self):
        table = run_comparison(self.matrix())
        assert len(table.rows) == 2 * 2 * 2 * 2
        rows = list(csv.reader(io.StringIO(table.to_csv())))
        assert tuple(rows[0]) == COMPARISON_COLUMNS
        assert len(rows) == 17

    def test_full_matrix_size(self):
        assert len(ComparisonMatrix(base=small_run()).groups()) * 5 == 200

    def test_deterministic_and_order_invariant(self):
        a = run_comparison(self.matrix()).to_csv()
        b = run_comparison(self.matrix(algos=("cedqn", "dqn"), seeds=(1, 0))).to_csv()
        assert a == b

    def test_team1_rows_use_six_standard(self):
        config = self.matrix().run_config("dqn", 1, 0)
        assert config.env.capacities == (3.0,) * 6

    def test_failed_cell_marked(self, monkeypatch):
        from cedqn import training
        from cedqn.errors import DivergenceError

        real = training.train_team

        def flaky(config, progress=None):
            if config.seed == 1:
                raise DivergenceError("boom")
            return real(config, progress)

        monkeypatch.setattr(training, "train_team", flaky)
        table = run_comparison(self.matrix(algos=("dqn",), teams=(1,)))
        text = table.to_csv()
        assert text.count("error") == 2 * 3
        assert len(table.rows) == 4

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            self.matrix(seeds=())


@pytest.mark.slow
def test_team1_baseline_learns():
    """Last 10% of episodes beat the first 10% (5-seed median), default settings.

    Uses the experiment cache shared with the acceptance suite; trains on demand.
    """
    import os
    from pathlib import Path

    from cedqn import experiments

    cache = Path(os.environ.get("CEDQN_ACCEPTANCE_CACHE",
                                Path(__file__).resolve().parent.parent / "acceptance_cache"))
    gains = []
    for seed in experiments.TREND_SEEDS:
        cell = experiments.run_cell(experiments.trend_config("dqn", seed, team=1), cache)
        rewards = np.array(cell["team_rewards"])
        tenth = len(rewards) // 10
        gains.append(rewards[-tenth:].mean() - rewards[:tenth].mean())
    assert np.median(gains) > 0
