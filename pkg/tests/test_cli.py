import json

import numpy as np
import pytest

from memsifter.bench import SyntheticConfig, generate_synthetic, save_dataset, task_to_json
from memsifter.cli import main
from memsifter.training import ParamMap, load_param_map, save_param_map


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture
def turns_file(tmp_path):
    path = tmp_path / "turns.jsonl"
    rows = [
        {"role": "user", "content": "planning a trip", "session": "s1"},
        {"role": "assistant", "content": "where to?", "session": "s1"},
        {"role": "user", "content": "need a tax form", "session": "s2"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def test_ingest_boundary_policy(tmp_path, capsys, turns_file):
    bank_path = tmp_path / "bank.jsonl"
    code, payload = run_cli(capsys, "ingest", str(turns_file), "-o", str(bank_path))
    assert code == 0
    assert payload == {"sessions": 2, "turns": 3, "path": str(bank_path)}
    assert len(bank_path.read_text().splitlines()) == 2


def test_ingest_fixed_size(tmp_path, capsys, turns_file):
    bank_path = tmp_path / "bank.jsonl"
    code, payload = run_cli(
        capsys, "ingest", str(turns_file), "-o", str(bank_path), "--policy", "size", "--size", "2"
    )
    assert code == 0
    assert payload["sessions"] == 2


def test_rank_mock(tmp_path, capsys, turns_file):
    bank_path = tmp_path / "bank.jsonl"
    run_cli(capsys, "ingest", str(turns_file), "-o", str(bank_path))
    code, payload = run_cli(
        capsys, "rank", "-q", "trip planning help", "-b", str(bank_path), "--mock"
    )
    assert code == 0
    assert payload["ranked_ids"][0] == 0
    assert "rationale" in payload and "repairs" in payload

    # stdout payload round-trips into the module type
    from memsifter.ranker import RankingResult

    result = RankingResult(
        rationale=payload["rationale"],
        ranked_ids=tuple(payload["ranked_ids"]),
        raw_output=payload["raw_output"],
        repairs=tuple(payload["repairs"]),
    )
    assert result.to_json() == payload


def test_reward_with_mock_oracle_gold_first(tmp_path, capsys):
    (task,) = generate_synthetic(SyntheticConfig(n_tasks=1, n_sessions=5, seed=4))
    task_path = tmp_path / "task.json"
    task_path.write_text(json.dumps(task_to_json(task)))
    gold = next(iter(task.gold_session_ids))
    others = [i for i in task.bank.ids if i != gold]
    ranking_path = tmp_path / "ranking.json"
    ranking_path.write_text(json.dumps({"ranked_ids": [gold] + others}))

    code, payload = run_cli(
        capsys,
        "reward",
        "-t", str(task_path),
        "-r", str(ranking_path),
        "--schedule", "1,2,3",
        "--mock-oracle",
    )
    assert code == 0
    assert payload["r_ans"] == 1.0
    assert payload["r_total"] == 1.0
    assert payload["scores"]["s0"] == 0.0

    from memsifter.rewards import RewardBreakdown

    assert RewardBreakdown.from_json(payload).to_json() == payload


def test_reward_fibonacci_schedule(tmp_path, capsys):
    (task,) = generate_synthetic(SyntheticConfig(n_tasks=1, n_sessions=6, seed=8))
    task_path = tmp_path / "task.json"
    task_path.write_text(json.dumps(task_to_json(task)))
    gold = next(iter(task.gold_session_ids))
    others = [i for i in task.bank.ids if i != gold]
    ranking_path = tmp_path / "ranking.json"
    ranking_path.write_text(json.dumps({"ranked_ids": others + [gold]}))  # gold last (rank 6)

    code, payload = run_cli(
        capsys, "reward", "-t", str(task_path), "-r", str(ranking_path), "--mock-oracle"
    )
    assert code == 0
    assert payload["r_ans"] == pytest.approx(1 / np.log2(7))


def test_curriculum(tmp_path, capsys):
    perf_path = tmp_path / "perf.json"
    perf_path.write_text(json.dumps({"a": 0.1, "b": 0.25, "c": 0.9}))
    code, payload = run_cli(
        capsys, "curriculum", "--perf", str(perf_path), "--tau", "0.2", "--budget", "2"
    )
    assert code == 0
    assert payload == ["b", "a"]


def test_advantages(tmp_path, capsys):
    rewards_path = tmp_path / "rewards.json"
    rewards_path.write_text("[1.0, 0.0]")
    code, payload = run_cli(capsys, "advantages", "--rewards", str(rewards_path))
    assert code == 0
    assert payload == pytest.approx([1.0, -1.0])


def test_advantages_domain_error_exits_1(tmp_path, capsys):
    rewards_path = tmp_path / "rewards.json"
    rewards_path.write_text("[1.0]")
    code = main(["advantages", "--rewards", str(rewards_path)])
    assert code == 1


def test_merge_identical_maps_is_identity(tmp_path, capsys):
    pm = ParamMap(entries={"w": np.array([[0.5, -1.5]], dtype=np.float32)})
    a = tmp_path / "a.pm"
    save_param_map(pm, a)
    out = tmp_path / "mean.pm"
    code, payload = run_cli(capsys, "merge", str(a), str(a), "-o", str(out))
    assert code == 0
    assert payload["entries"] == 1
    merged = load_param_map(out)
    assert np.array_equal(merged.entries["w"], pm.entries["w"])


def test_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    code, payload = run_cli(capsys, "gen-data", "--seed", "3", "--n-tasks", "4", "-o", str(a))
    assert code == 0 and payload["tasks"] == 4
    run_cli(capsys, "gen-data", "--seed", "3", "--n-tasks", "4", "-o", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_eval_mock_end_to_end(tmp_path, capsys):
    dataset = tmp_path / "tasks.jsonl"
    save_dataset(generate_synthetic(SyntheticConfig(n_tasks=4, n_sessions=6, seed=21)), dataset)
    report_path = tmp_path / "report.json"
    code, payload = run_cli(
        capsys, "eval", "--dataset", str(dataset), "--report", str(report_path), "--mock"
    )
    assert code == 0
    assert payload["aggregates"]["mean_f1"] == 1.0
    assert payload["aggregates"]["mean_ndcg_at_1"] == 1.0
    full = json.loads(report_path.read_text())
    assert len(full["rows"]) == 4


def test_eval_adversarial_mock(tmp_path, capsys):
    dataset = tmp_path / "tasks.jsonl"
    save_dataset(generate_synthetic(SyntheticConfig(n_tasks=3, n_sessions=6, seed=22)), dataset)
    code, payload = run_cli(
        capsys, "eval", "--dataset", str(dataset), "--mock", "--adversarial"
    )
    assert code == 0
    assert payload["aggregates"]["mean_ndcg_at_1"] == 0.0


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["rank", "-q", "hello"])
    assert exc.value.code == 2


def test_domain_error_reported_on_stderr(tmp_path, capsys):
    code = main(["rank", "-q", "x", "-b", str(tmp_path / "missing.jsonl"), "--mock"])
    captured = capsys.readouterr()
    assert code == 1
    assert captured.out == ""
    assert "error" in captured.err.lower()
