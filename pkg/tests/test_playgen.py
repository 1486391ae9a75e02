import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from playdiff.diffusion import ContractError
from playdiff.playgen import (ZONES, ActionScaler, EnvState, TaskSpec, all_tasks, annotation_coverage,
                              build_vocab, feasible_tasks, generate_dataset, generate_play_episode,
                              goal_offset_pmf, make_train_sample, normalize_actions, random_state,
                              render, run_task, sample_goal_offset, step, success_detector)


def _state(agent=(0.5, 0.5), blocks=((0.3, 0.3), (0.7, 0.3), (0.5, 0.7)), carried=None):
    blocks = np.array(blocks, dtype=float)
    carried = np.zeros(len(blocks), dtype=bool) if carried is None else np.array(carried)
    return EnvState(np.array(agent, dtype=float), blocks, carried)


# ------------------------------------------------------------- dynamics
def test_zero_action_leaves_state_unchanged():
    s = _state()
    n = step(s, [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(n.to_vector(), s.to_vector())


def test_move_is_clipped_to_bounds():
    n = step(_state(agent=(0.99, 0.5)), [1.0, 0.0, 0.0])
    assert n.agent[0] == 1.0


def test_grip_picks_nearby_block_and_carries_it():
    s = _state(agent=(0.32, 0.3))
    s = step(s, [0.0, 0.0, 1.0])
    assert s.carried[0]
    s = step(s, [1.0, 0.0, 1.0])
    np.testing.assert_allclose(s.blocks[0], s.agent)
    s = step(s, [0.0, 0.0, -1.0])
    assert not s.carried.any()


def test_grip_far_from_blocks_does_nothing():
    s = step(_state(agent=(0.05, 0.95)), [0.0, 0.0, 1.0])
    assert not s.carried.any()


def test_scripted_pick_move_drop_relocates_block():
    s = _state()
    for zone in range(4):
        task = TaskSpec("move", 0, zone)
        states, actions, ok = run_task(s, task)
        assert ok
        assert np.linalg.norm(states[-1].blocks[0] - ZONES[zone]) <= 0.05
        assert not states[-1].carried.any()


def test_operator_pauses_after_grasp_before_release_and_after_success():
    task = TaskSpec("move", 0, 2)
    states, actions, ok = run_task(_state(), task, pause=4)
    assert ok
    carried = [s.carried[0] for s in states]
    grasp = carried.index(True)  # first state holding the block
    still = np.array([0.0, 0.0, 1.0])
    for a in actions[grasp:grasp + 4]:
        np.testing.assert_array_equal(a, still)
    release = len(carried) - 1 - carried[::-1].index(True)  # last state holding the block
    for a in actions[release - 4:release]:
        np.testing.assert_array_equal(a, still)
    assert actions[release][2] < 0
    for a in actions[-4:]:
        np.testing.assert_array_equal(a, [0.0, 0.0, -1.0])
    assert all(success_detector(s, task) for s in states[-5:])


def test_zero_pause_ends_at_first_success():
    task = TaskSpec("reach", 1, 0)
    states, actions, ok = run_task(_state(), task, pause=0)
    assert ok and success_detector(states[-1], task)
    assert not any(success_detector(s, task) for s in states[:-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_states_stay_in_bounds_with_at_most_one_carried(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    for _ in range(50):
        s = step(s, rng.uniform(-1, 1, size=3))
        assert np.all((0 <= s.to_vector()[:8]) & (s.to_vector()[:8] <= 1))
        assert s.carried.sum() <= 1


# -------------------------------------------------------------- success
def test_success_detector_move_thresholds():
    task = TaskSpec("move", 0, 0)
    at_zone = _state(blocks=(ZONES[0], (0.7, 0.3), (0.5, 0.7)))
    assert success_detector(at_zone, task)
    near = _state(blocks=(ZONES[0] + [0.051, 0.0], (0.7, 0.3), (0.5, 0.7)))
    assert not success_detector(near, task)
    carried = _state(agent=ZONES[0], blocks=(ZONES[0], (0.7, 0.3), (0.5, 0.7)), carried=[True, False, False])
    assert not success_detector(carried, task)


def test_success_detector_reach():
    assert success_detector(_state(agent=(0.3, 0.35)), TaskSpec("reach", 0))
    assert not success_detector(_state(agent=(0.3, 0.37)), TaskSpec("reach", 0))


def test_success_detector_rejects_invalid_task():
    with pytest.raises(ContractError):
        success_detector(_state(), TaskSpec("reach", 5))
    with pytest.raises(ContractError):
        success_detector(_state(), TaskSpec("move", 0, 4))


def test_task_ids_roundtrip():
    for t in all_tasks(3):
        assert TaskSpec.from_id(t.task_id(3), 3) == t
    assert len(all_tasks(3)) == 15


def test_noise_free_controller_solves_every_feasible_task():
    rng = np.random.default_rng(0)
    for _ in range(60):
        s = random_state(rng)
        for task in feasible_tasks(s):
            assert run_task(s, task)[2], task


# ------------------------------------------------------------- episodes
def test_episode_invariants():
    ep = generate_play_episode(np.random.default_rng(0), n_tasks=5, p_label=0.5)
    assert len(ep.states) == len(ep.actions) + 1
    assert ep.renders.shape == (len(ep.states), 2, 32, 32, 1)
    assert np.all(np.abs(ep.actions) <= 1)
    last = -1
    for ann in sorted(ep.annotations, key=lambda a: a.start):
        assert 0 <= ann.start < ann.end <= len(ep)
        assert ann.start >= last
        last = ann.end


def test_noise_free_episode_tasks_all_succeed():
    ep = generate_play_episode(np.random.default_rng(3), n_tasks=6, noise=0.0)
    assert len(ep.intervals) == 6
    for start, end, tid in ep.intervals:
        assert success_detector(ep.state(end), TaskSpec.from_id(tid, 3))


@pytest.mark.parametrize("p,expect", [(0.0, "none"), (1.0, "all")])
def test_annotation_probability_extremes(p, expect):
    ep = generate_play_episode(np.random.default_rng(1), n_tasks=4, p_label=p)
    if expect == "none":
        assert ep.annotations == []
    else:
        assert len(ep.annotations) == len(ep.intervals)


def test_n_tasks_contract():
    with pytest.raises(ContractError):
        generate_play_episode(np.random.default_rng(0), n_tasks=0)


def test_language_tokens_come_from_vocab():
    vocab = build_vocab(3)
    ep = generate_play_episode(np.random.default_rng(2), n_tasks=6, p_label=1.0)
    for ann in ep.annotations:
        assert all(0 <= t < len(vocab) for t in ann.tokens)


def test_render_views_differ_and_are_bounded():
    img = render(_state())
    assert img.shape == (2, 32, 32, 1)
    assert img.min() >= 0 and img.max() <= 1
    assert not np.array_equal(img[0], img[1])


def test_generation_is_reproducible():
    a = generate_dataset(5, 2)
    b = generate_dataset(5, 2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.renders, y.renders)
        np.testing.assert_array_equal(x.actions, y.actions)


def test_annotation_coverage_tracks_label_probability():
    eps = generate_dataset(11, 150, p_label=0.1)
    cov = annotation_coverage(eps)
    assert 0.06 < cov < 0.14


# ---------------------------------------------------------- goal offsets
def test_goal_offset_pmf_first_value():
    pmf = goal_offset_pmf()
    assert pmf[0] == pytest.approx(0.1 / (1 - 0.9**31), rel=1e-12)
    assert pmf[0] == pytest.approx(0.10396653568249845, rel=1e-12)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)


def test_goal_offsets_support_and_frequencies():
    j = sample_goal_offset(np.random.default_rng(0), size=1_000_000)
    assert j.min() >= 20 and j.max() <= 50
    emp = np.bincount(j - 20, minlength=31) / j.size
    assert np.max(np.abs(emp - goal_offset_pmf())) < 0.002


# ------------------------------------------------------------- samples
def test_train_sample_slices_chunk_exactly():
    ep = generate_play_episode(np.random.default_rng(0))
    s = make_train_sample(ep, 5, k=10, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(s.actions, ep.actions[5:15])
    np.testing.assert_array_equal(s.images, ep.renders[5])
    assert 25 <= s.goal_index <= 55


def test_goal_index_clipped_at_episode_end():
    ep = generate_play_episode(np.random.default_rng(0))
    i = len(ep) - 10
    s = make_train_sample(ep, i, k=10, rng=np.random.default_rng(0))
    assert s.goal_index == len(ep.states) - 1
    np.testing.assert_array_equal(s.future, ep.renders[min(i + 3, len(ep))][0])


def test_train_sample_window_contract():
    ep = generate_play_episode(np.random.default_rng(0))
    with pytest.raises(ContractError):
        make_train_sample(ep, len(ep) - 5, k=10, rng=np.random.default_rng(0))


def test_language_goal_attached_inside_annotation():
    ep = generate_play_episode(np.random.default_rng(0), p_label=1.0)
    ann = ep.annotations[0]
    s = make_train_sample(ep, ann.start, k=1, rng=np.random.default_rng(0))
    assert s.lang_tokens == ann.tokens and s.task_id == ann.task_id


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_image_goal_postdates_state(seed):
    ep = generate_play_episode(np.random.default_rng(seed % 7))
    rng = np.random.default_rng(seed)
    i = int(rng.integers(0, len(ep) - 10 + 1))
    s = make_train_sample(ep, i, k=10, rng=rng)
    assert s.goal_index > i


def test_language_fraction_converges_to_coverage():
    eps = generate_dataset(2, 60, p_label=0.2)
    cov = annotation_coverage(eps)
    rng = np.random.default_rng(0)
    hits = 0
    draws = 10_000
    valid = [(e, i) for e, ep in enumerate(eps) for i in range(len(ep) - 10 + 1)]
    for n in rng.integers(len(valid), size=draws):
        e, i = valid[n]
        hits += make_train_sample(eps[e], i, rng=rng).lang_tokens is not None
    assert abs(hits / draws - cov) < 0.2 * cov


# -------------------------------------------------------- normalisation
def test_scaler_endpoints():
    sc = ActionScaler(np.array([-0.05]), np.array([0.05]))
    np.testing.assert_allclose(sc.normalize(np.array([[-0.05], [0.05]])), [[-1.0], [1.0]], rtol=1e-12)


def test_constant_dimension_maps_to_zero(caplog):
    acts = [np.array([[0.1, 2.0], [0.3, 2.0]])]
    with caplog.at_level("WARNING"):
        sc, (norm,) = normalize_actions(acts)
    assert np.all(norm[:, 1] == 0.0)
    assert "constant" in caplog.text
    np.testing.assert_allclose(sc.denormalize(norm)[:, 1], 2.0)


def test_empty_dataset_rejected():
    with pytest.raises(ContractError):
        normalize_actions([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scaler_roundtrip(seed):
    rng = np.random.default_rng(seed)
    acts = [rng.uniform(-1, 1, size=(20, 3)) * rng.uniform(0.01, 2, size=3)]
    sc, (norm,) = normalize_actions(acts)
    assert norm.min() >= -1 - 1e-12 and norm.max() <= 1 + 1e-12
    np.testing.assert_allclose(sc.denormalize(norm), acts[0], atol=1e-12)
