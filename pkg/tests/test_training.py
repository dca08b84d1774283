import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from memsifter.errors import InvalidArgument, ParseError, ShapeError
from memsifter.ranker import RankingResult
from memsifter.rewards import RewardBreakdown
from memsifter.training import (
    CurriculumConfig,
    ParamMap,
    RolloutGroup,
    TrajectoryRecord,
    attach_advantages,
    export_trajectories,
    filter_groups,
    grpo_advantages,
    load_param_map,
    load_trajectories,
    merge_checkpoints,
    save_param_map,
    select_curriculum,
)


def breakdown(r_total):
    return RewardBreakdown(r_ans=r_total, r_ret=None, alpha=1.0, beta=0.0, r_total=r_total)


def record(task_id, r_total, with_ranking=True, advantage=None):
    ranking = None
    reason = None
    if with_ranking:
        ranking = RankingResult(rationale="why", ranked_ids=(2, 0, 1), raw_output="<ranking>2,0,1</ranking>")
    else:
        reason = "no ranking block in output"
    return TrajectoryRecord(
        task_id=task_id,
        prompt="p",
        raw_output="o",
        ranking=ranking,
        reward=breakdown(r_total),
        advantage=advantage,
        failure_reason=reason,
    )


def group(task_id, rewards):
    return RolloutGroup(task_id=task_id, rollouts=tuple(record(task_id, r) for r in rewards))


class TestCurriculum:
    def test_nearest_to_anchor(self):
        perf = {"a": 0.1, "b": 0.25, "c": 0.9}
        assert select_curriculum(perf, CurriculumConfig(tau=0.2, budget=2)) == ["b", "a"]

    def test_saturation_returns_all(self):
        perf = {"a": 0.1, "b": 0.9}
        assert select_curriculum(perf, CurriculumConfig(tau=0.2, budget=10)) == ["a", "b"]

    def test_tie_breaks_lexicographically(self):
        perf = {"zed": 0.75, "amy": 0.25}
        assert select_curriculum(perf, CurriculumConfig(tau=0.5, budget=1)) == ["amy"]

    def test_budget_positive(self):
        with pytest.raises(InvalidArgument):
            select_curriculum({"a": 0.2}, CurriculumConfig(tau=0.2, budget=0))

    def test_tau_range(self):
        with pytest.raises(InvalidArgument):
            CurriculumConfig(tau=1.5, budget=1)

    @given(
        st.dictionaries(st.text(min_size=1, max_size=4), st.floats(0, 1), min_size=1, max_size=30),
        st.floats(0, 1),
        st.integers(1, 10),
    )
    def test_prefix_of_brute_force_sort(self, perf, tau, budget):
        selected = select_curriculum(perf, CurriculumConfig(tau=tau, budget=budget))
        brute = sorted(perf, key=lambda t: (abs(perf[t] - tau), t))
        assert selected == brute[:budget]


class TestGrpoAdvantages:
    def test_two_point_group(self):
        assert grpo_advantages([1.0, 0.0]) == pytest.approx([1.0, -1.0])

    def test_variance_guard(self):
        assert grpo_advantages([0.5, 0.5, 0.5]) == [0.0, 0.0, 0.0]

    def test_needs_two_rewards(self):
        with pytest.raises(InvalidArgument):
            grpo_advantages([1.0])

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=12))
    def test_centered_and_standardized(self, rewards):
        out = grpo_advantages(rewards)
        arr = np.asarray(rewards)
        if arr.std() > 1e-8:
            assert abs(float(np.mean(out))) < 1e-9
            assert float(np.std(out)) == pytest.approx(1.0, abs=1e-9)
        else:
            assert out == [0.0] * len(rewards)

    def test_invariant_under_reward_shift(self):
        rewards = [0.1, 0.7, 0.4, 0.9]
        shifted = [r + 5.0 for r in rewards]
        assert grpo_advantages(rewards) == pytest.approx(grpo_advantages(shifted), abs=1e-9)


class TestGroupFiltering:
    def test_zero_variance_dropped(self):
        assert filter_groups([group("t", [1, 1, 1, 1, 1, 1])]) == []

    def test_mixed_outcomes_kept(self):
        g = group("t", [1, 0, 0, 1, 0, 0])
        assert filter_groups([g]) == [g]

    def test_empty_input(self):
        assert filter_groups([]) == []

    def test_survivors_unaltered(self):
        g = group("t", [0.3, 0.9])
        (survivor,) = filter_groups([g])
        assert survivor is g

    def test_mixed_task_ids_rejected(self):
        with pytest.raises(InvalidArgument):
            RolloutGroup(task_id="a", rollouts=(record("a", 1.0), record("b", 0.0)))

    def test_attach_advantages(self):
        g = attach_advantages(group("t", [1.0, 0.0]))
        assert [r.advantage for r in g.rollouts] == pytest.approx([1.0, -1.0])


class TestTrajectoryExport:
    def test_line_count(self, tmp_path):
        groups = [group(f"t{i}", [0.1 * j for j in range(6)]) for i in range(2)]
        path = tmp_path / "rollouts.jsonl"
        assert export_trajectories(groups, path) == 12
        assert len(path.read_text().splitlines()) == 12

    def test_round_trip(self, tmp_path):
        groups = [attach_advantages(group("t0", [1.0, 0.0, 0.5]))]
        path = tmp_path / "rollouts.jsonl"
        export_trajectories(groups, path)
        loaded = load_trajectories(path)
        assert loaded == list(groups[0].rollouts)

    def test_round_trip_of_pipeline_produced_ranking(self, tmp_path):
        from memsifter.ranker import parse_ranking

        ranking = parse_ranking("<ranking>2,0</ranking>", {0, 1, 2}, top_k=2)
        rollout = TrajectoryRecord(
            task_id="t1", prompt="p", raw_output=ranking.raw_output,
            ranking=ranking, reward=breakdown(0.5), advantage=None,
        )
        path = tmp_path / "rollouts.jsonl"
        export_trajectories([RolloutGroup(task_id="t1", rollouts=(rollout, rollout))], path)
        assert load_trajectories(path)[0] == rollout

    def test_failure_marker_serializes_null_ranking(self, tmp_path):
        failed = record("t0", -1.0, with_ranking=False)
        path = tmp_path / "rollouts.jsonl"
        export_trajectories([RolloutGroup(task_id="t0", rollouts=(failed, failed))], path)
        import json

        first = json.loads(path.read_text().splitlines()[0])
        assert first["ranking"] is None
        assert isinstance(first["failure_reason"], str)
        loaded = load_trajectories(path)
        assert loaded[0].ranking is None


def param_map(seed, names=("w", "b"), shapes=((2, 3), (4,))):
    rng = np.random.default_rng(seed)
    return ParamMap(
        entries={
            name: rng.uniform(-1, 1, size=shape).astype(np.float32)
            for name, shape in zip(names, shapes)
        }
    )


class TestMergeCheckpoints:
    def test_singleton_identity(self):
        pm = param_map(0)
        merged = merge_checkpoints([pm])
        for name in pm.entries:
            assert np.array_equal(merged.entries[name], pm.entries[name])

    def test_idempotent_on_identical_maps(self):
        pm = param_map(1)
        merged = merge_checkpoints([pm, pm, pm])
        for name in pm.entries:
            assert np.array_equal(merged.entries[name], pm.entries[name])

    def test_elementwise_mean(self):
        a = ParamMap(entries={"w": np.array([0.0, 2.0], dtype=np.float32)})
        b = ParamMap(entries={"w": np.array([2.0, 4.0], dtype=np.float32)})
        merged = merge_checkpoints([a, b])
        assert merged.entries["w"].tolist() == [1.0, 3.0]

    def test_permutation_invariance(self):
        maps = [param_map(s) for s in range(4)]
        rng = random.Random(9)
        shuffled = maps[:]
        rng.shuffle(shuffled)
        first = merge_checkpoints(maps)
        second = merge_checkpoints(shuffled)
        for name in first.entries:
            assert np.allclose(first.entries[name], second.entries[name], rtol=0, atol=1e-7)

    def test_commutes_with_scalar_multiplication(self):
        maps = [param_map(s) for s in range(3)]
        scaled = [ParamMap(entries={n: 2.0 * a for n, a in pm.entries.items()}) for pm in maps]
        direct = merge_checkpoints(scaled)
        indirect = merge_checkpoints(maps)
        for name in direct.entries:
            assert np.allclose(direct.entries[name], 2.0 * indirect.entries[name], rtol=1e-6)

    def test_shape_mismatch_names_entry(self):
        a = ParamMap(entries={"w": np.zeros((2, 2), dtype=np.float32)})
        b = ParamMap(entries={"w": np.zeros((2, 3), dtype=np.float32)})
        with pytest.raises(ShapeError) as err:
            merge_checkpoints([a, b])
        assert err.value.entry == "w"

    def test_missing_entry_names_entry(self):
        a = ParamMap(entries={"w": np.zeros(2, dtype=np.float32)})
        b = ParamMap(entries={"v": np.zeros(2, dtype=np.float32)})
        with pytest.raises(ShapeError):
            merge_checkpoints([a, b])

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidArgument):
            merge_checkpoints([])


class TestParamMapIo:
    def test_round_trip(self, tmp_path):
        pm = param_map(5)
        path = tmp_path / "ckpt.pm"
        save_param_map(pm, path)
        loaded = load_param_map(path)
        assert loaded.signature() == pm.signature()
        for name in pm.entries:
            assert np.array_equal(loaded.entries[name], pm.entries[name])

    def test_shape_value_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.pm"
        path.write_text('{"entries": {"w": {"shape": [3], "values": [1.0, 2.0]}}}')
        with pytest.raises(ParseError):
            load_param_map(path)
