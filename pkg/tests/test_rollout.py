import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_rollout
from tdcal.rollout import (
    Dataset,
    Rollout,
    RolloutError,
    SplitSpec,
    StaticMethod,
    StepRecord,
    label_from_rewards,
    load_rollouts,
    save_rollouts,
    split_by_task,
    static_score,
    time_quantile_index,
)


def _dataset(n_tasks=10, per_task=10, seed=0):
    rng = np.random.default_rng(seed)
    rollouts = []
    for k in range(n_tasks):
        for i in range(per_task):
            T = int(rng.integers(1, 6))
            rollouts.append(
                make_rollout(list(rng.uniform(0.05, 1.0, size=T)), label=int(i % 3 != 0), task_id=f"task{k}",
                             features=[tuple(rng.normal(size=3)) for _ in range(T)])
            )
    return Dataset(tuple(rollouts))


def test_round_trip_bit_exact(tmp_path):
    ds = _dataset(3, 4)
    path = tmp_path / "d.jsonl"
    save_rollouts(ds, path)
    back = load_rollouts(path)
    assert back.rollouts == ds.rollouts
    assert back.task_ids == ds.task_ids


def test_optional_top_k_omitted(tmp_path):
    r = make_rollout([0.5, 0.9])
    path = tmp_path / "d.jsonl"
    save_rollouts(Dataset((r,)), path)
    assert "top_k_probs" not in path.read_text()
    withk = Rollout("t", (StepRecord((1.0,), 0.0, (0.6,), (0.2,), ((0.6, 0.3),)),), 1)
    save_rollouts(Dataset((withk,)), path)
    assert load_rollouts(path).rollouts[0].steps[0].top_k_probs == ((0.6, 0.3),)


def test_load_rejects_zero_prob_with_location(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = '{"task_id":"a","label":1,"steps":[{"features":[1.0],"reward":0.0,"chosen_probs":[0.5]}]}'
    bad = '{"task_id":"a","label":1,"steps":[{"features":[1.0],"reward":0.0,"chosen_probs":[0.0]}]}'
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(RolloutError, match=r"rollout 1 \(line 2\).*chosen_probs"):
        load_rollouts(path)


def test_load_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"task_id":"a","label":1,"steps":[{"features":[1],"reward":0}]}\n{oops\n')
    with pytest.raises(RolloutError, match="line 2"):
        load_rollouts(path)


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(RolloutError, match="empty"):
        load_rollouts(path)


def test_unwritable_path():
    with pytest.raises(OSError):
        save_rollouts(_dataset(1, 1), "/nonexistent-dir/x.jsonl")


def test_step_invariants():
    with pytest.raises(RolloutError):
        StepRecord((1.0,), 0.0, (1.5,))
    with pytest.raises(RolloutError):
        StepRecord((1.0,), 0.0, (0.5,), (-0.1,))
    with pytest.raises(RolloutError):
        StepRecord((1.0,), 0.0, (0.5,), (0.1,), ((0.2, 0.5),))
    with pytest.raises(RolloutError):
        StepRecord((1.0,), 0.0, (0.5,), (0.1,), ((0.7, 0.5),))
    # within tolerance of 1
    StepRecord((1.0,), 0.0, (0.5,), (0.1,), ((0.6, 0.4 + 5e-7),))


def test_label_must_match_rewards_under_declared_threshold():
    make_rollout([1.0, 1.0], label=1, rewards=[1.0, 0.0], meta={"threshold": "1"})
    with pytest.raises(RolloutError):
        make_rollout([1.0, 1.0], label=0, rewards=[1.0, 0.0], meta={"threshold": "1"})


@pytest.mark.parametrize("rewards,expected", [([1, 0], 1), ([0, 0], 0), ([0.5, 0.5], 1)])
def test_label_from_rewards(rewards, expected):
    r = make_rollout([1.0, 1.0], label=expected, rewards=rewards)
    assert label_from_rewards(r, 1.0) == expected


def test_split_partition_and_sizes():
    ds = _dataset(10, 10)
    train, vs, vu = split_by_task(ds, SplitSpec(seed=4, unseen_task_count=3, train_fraction=0.6))
    assert len(vu.task_ids) == 3
    assert len(train.task_ids) == 7 and vs.task_ids <= train.task_ids
    assert not (train.task_ids & vu.task_ids)
    ids = [id(r) for part in (train, vs, vu) for r in part.rollouts]
    assert len(ids) == len(set(ids)) == len(ds)
    # 60/40 within each seen task, stratified by label (6 successes, 4 failures per task)
    for task, rs in train.by_task().items():
        assert len(rs) == round(0.6 * 6) + round(0.6 * 4)


def test_split_deterministic_and_seed_dependent():
    ds = _dataset(10, 6)
    a = split_by_task(ds, SplitSpec(1, 3))
    b = split_by_task(ds, SplitSpec(1, 3))
    assert [p.rollouts for p in a] == [p.rollouts for p in b]
    unseen = {frozenset(split_by_task(ds, SplitSpec(s, 3))[2].task_ids) for s in range(8)}
    assert len(unseen) > 1


def test_split_too_few_tasks():
    with pytest.raises(RolloutError):
        split_by_task(_dataset(3, 4), SplitSpec(0, 3))


def test_split_stratified_keeps_both_labels_in_train():
    ds = _dataset(4, 10)
    train, _, _ = split_by_task(ds, SplitSpec(0, 1))
    for rs in train.by_task().values():
        assert {r.label for r in rs} == {0, 1}


@given(st.integers(1, 50), st.floats(0, 1))
def test_time_quantile_index_range(T, q):
    t = time_quantile_index(T, q)
    assert 1 <= t <= T
    assert t == min(max(math.ceil(q * T), 1), T)


def test_time_quantile_examples():
    assert time_quantile_index(10, 0.5) == 5
    assert time_quantile_index(10, 0.0) == 1
    assert time_quantile_index(10, 1.0) == 10
    assert time_quantile_index(1, 0.7) == 1


def test_static_score_examples():
    r = make_rollout([0.5, 0.25])
    assert static_score(r, StaticMethod.MAX_PROB, 1) == pytest.approx(-math.log(0.5), abs=1e-12)
    assert static_score(r, StaticMethod.MAX_PROB, 1) == pytest.approx(0.693147, abs=1e-6)
    expected = (-math.log(0.5) - math.log(0.25)) / 2
    assert static_score(r, StaticMethod.RUNNING_AVG_PROB, 2) == pytest.approx(expected, abs=1e-12)
    assert static_score(r, StaticMethod.RUNNING_AVG_PROB, 2) == pytest.approx(1.039721, abs=1e-6)
    ones = make_rollout([1.0, 1.0, 1.0])
    for m in (StaticMethod.MAX_PROB, StaticMethod.AVG_PROB, StaticMethod.RUNNING_AVG_PROB):
        assert static_score(ones, m, 3) == 0.0


def test_static_multi_dof():
    step = StepRecord((0.0,), 0.0, (0.5, 0.25), (0.1, 0.3))
    r = Rollout("t", (step,), 1)
    assert static_score(r, "MaxProb", 1) == pytest.approx(-math.log(0.25))
    assert static_score(r, "AvgProb", 1) == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2)
    assert static_score(r, "AvgEntropy", 1) == pytest.approx(0.2)


def test_static_missing_field():
    r = Rollout("t", (StepRecord((0.0,), 0.0),), 1)
    with pytest.raises(RolloutError):
        static_score(r, "AvgProb", 1)


probs_st = st.lists(st.floats(0.01, 1.0), min_size=1, max_size=12)


@given(probs_st)
def test_running_avg_is_mean_of_avg(probs):
    r = make_rollout(probs)
    for t in range(1, len(probs) + 1):
        mean = np.mean([static_score(r, "AvgProb", s) for s in range(1, t + 1)])
        assert abs(static_score(r, "RunningAvgProb", t) - mean) < 1e-12


@given(probs_st, st.floats(0.05, 0.95))
def test_prob_scores_increase_when_probs_shrink(probs, factor):
    r = make_rollout(probs)
    shrunk = make_rollout([p * factor for p in probs])
    for m in ("MaxProb", "AvgProb", "RunningAvgProb"):
        for t in range(1, len(probs) + 1):
            assert static_score(shrunk, m, t) > static_score(r, m, t)
