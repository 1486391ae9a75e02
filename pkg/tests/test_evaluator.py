import numpy as np
import pytest

from playdiff.diffusion import ContractError
from playdiff.evaluator import (EvalReport, IdlePolicy, InstructionChain, OraclePolicy, RandomPolicy,
                                evaluate_chains, generate_chains, image_goal_for, make_goal, rollout,
                                single_task_success)
from playdiff.model import ImageGoal, LanguageGoal
from playdiff.playgen import TaskSpec, build_vocab, random_state, render, run_task, success_detector


@pytest.fixture(scope="module")
def chains():
    return generate_chains(30, seed=7)


def test_chains_are_feasible_and_deterministic(chains):
    again = generate_chains(30, seed=7)
    for a, b in zip(chains, again):
        assert a.tasks == b.tasks and a.templates == b.templates
        np.testing.assert_array_equal(a.start.to_vector(), b.start.to_vector())
    for c in chains:
        s = c.start
        for task in c.tasks:
            states, _, ok = run_task(s, task)
            assert ok
            s = states[-1]


def test_oracle_completes_every_chain(chains):
    for mode in ("image", "language"):
        rep = evaluate_chains(OraclePolicy(), chains, mode, seed=0)
        assert rep.avg_len == 5.0
        assert rep.position_success == [1.0] * 5


def test_idle_policy_scores_zero(chains):
    rep = evaluate_chains(IdlePolicy(), chains, "language", seed=0)
    assert rep.avg_len == 0.0
    assert sum(a for _, a in rep.per_task.values()) == len(chains)


def test_random_policy_rarely_reaches():
    rate = single_task_success(RandomPolicy(), 200, "language", seed=3)
    assert rate < 0.05


class _ReachOnly:
    """Oracle on reach tasks, idle otherwise."""

    def act(self, obs, rng):
        out = OraclePolicy().act(obs, rng)
        for n, o in enumerate(obs):
            if o.task.kind != "reach":
                out[n] = 0.0
        return out


def test_counting_stops_at_first_failure(chains):
    rep = evaluate_chains(_ReachOnly(), chains, "language", seed=0)
    expected = []
    for c in chains:
        run = 0
        for t in c.tasks:
            if t.kind != "reach":
                break
            run += 1
        expected.append(run)
    expected = np.array(expected)
    assert rep.avg_len == pytest.approx(expected.mean())
    assert rep.position_success == pytest.approx([float(np.mean(expected >= p)) for p in range(1, 6)])
    attempts = sum(a for _, a in rep.per_task.values())
    assert attempts == sum(min(e + 1, 5) for e in expected)


def test_avg_len_equals_sum_of_position_rates(chains):
    rep = evaluate_chains(_ReachOnly(), chains, "image", seed=0)
    assert rep.avg_len == pytest.approx(sum(rep.position_success))


def test_evaluation_is_seed_deterministic(chains):
    a = evaluate_chains(RandomPolicy(), chains, "language", seed=5)
    b = evaluate_chains(RandomPolicy(), chains, "language", seed=5)
    assert a.position_success == b.position_success and a.per_task == b.per_task


def test_report_rejects_increasing_positions():
    with pytest.raises(AssertionError):
        EvalReport([0.5, 0.6], 1.1, {}, 10, 0, "image")


def test_report_serialisation(chains):
    rep = evaluate_chains(OraclePolicy(), chains[:4], "image", seed=0)
    recs = rep.to_records()
    assert recs[0]["kind"] == "summary" and recs[0]["avg_len"] == 5.0
    assert sum(r["kind"] == "position" for r in recs) == 5
    assert "avg length" in rep.format_table()
    assert rep.to_jsonl().count("\n") == len(recs)


def test_rollout_stops_on_success():
    rng = np.random.default_rng(0)
    s = random_state(rng)
    task = TaskSpec("reach", 1)
    res = rollout(OraclePolicy(), s, task, LanguageGoal([0]), rng)
    assert res.success
    assert success_detector(res.trajectory[-1], task)
    assert not any(success_detector(x, task) for x in res.trajectory[:-1])
    assert res.steps == len(res.trajectory) - 1


def test_rollout_respects_step_limit():
    rng = np.random.default_rng(0)
    res = rollout(IdlePolicy(), random_state(rng), TaskSpec("reach", 0), LanguageGoal([0]), rng, max_steps=25)
    assert not res.success and res.steps == 25


def test_image_goal_is_end_state_render():
    rng = np.random.default_rng(4)
    s = random_state(rng)
    task = TaskSpec("move", 2, 1)
    goal = image_goal_for(s, task)
    states, _, _ = run_task(s, task)
    np.testing.assert_array_equal(goal.image, render(states[-1])[0])


def test_goal_mode_contract():
    s = random_state(np.random.default_rng(0))
    vocab = build_vocab(3)
    assert isinstance(make_goal("image", s, TaskSpec("reach", 0), 0, vocab), ImageGoal)
    assert isinstance(make_goal("language", s, TaskSpec("reach", 0), 0, vocab), LanguageGoal)
    with pytest.raises(ContractError):
        make_goal("audio", s, TaskSpec("reach", 0), 0, vocab)


def test_chain_contract():
    s = random_state(np.random.default_rng(0))
    with pytest.raises(ContractError):
        InstructionChain(s, [], [])
