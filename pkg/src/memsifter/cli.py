"""Command-line entry point. One subcommand per pipeline stage.

stdout carries machine-readable JSON payloads only; human-facing logs go
to stderr. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, training
from .backends import (
    HttpChatBackend,
    HttpEmbeddingBackend,
    KeywordEmbeddingBackend,
    KeywordProxyBackend,
)
from .config import load_config
from .errors import MemSifterError, ParseError
from .ranker import RankingResult, rank
from .rewards import (
    CutoffSchedule,
    fibonacci_cutoffs,
    full_reward,
    score_answer_exact,
    score_answer_f1,
)
from .store import (
    BoundaryPolicy,
    FixedSizePolicy,
    GapPolicy,
    Turn,
    save_bank,
    segment_history,
    load_bank,
)
from .training import CurriculumConfig, load_param_map, save_param_map

logger = logging.getLogger("memsifter.cli")


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, ensure_ascii=False)
    sys.stdout.write("\n")


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise MemSifterError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}") from None


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _load_turns_file(path) -> tuple[list[Turn], list[int]]:
    """Read a JSONL turn stream; returns turns plus explicit session starts
    derived from changes in the optional per-turn "session" label."""
    turns: list[Turn] = []
    starts: list[int] = []
    prev_label = object()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MemSifterError(f"cannot read {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {line_no}: invalid JSON: {exc.msg}", line_no) from None
        if "role" not in obj or "content" not in obj:
            raise ParseError(f"line {line_no}: turn needs 'role' and 'content'", line_no)
        label = obj.get("session")
        if label != prev_label:
            starts.append(len(turns))
            prev_label = label
        turns.append(Turn(obj["role"], obj["content"], obj.get("timestamp")))
    return turns, starts


def _cmd_ingest(args) -> dict:
    turns, starts = _load_turns_file(args.turns_file)
    if args.policy == "boundary":
        policy = BoundaryPolicy(starts=tuple(starts))
    elif args.policy == "gap":
        policy = GapPolicy(max_gap_seconds=args.gap_seconds)
    else:
        policy = FixedSizePolicy(size=args.size)
    bank = segment_history(turns, policy)
    save_bank(bank, args.output)
    return {"sessions": len(bank), "turns": len(turns), "path": str(args.output)}


def _mock_backends(args):
    proxy = KeywordProxyBackend("worst" if getattr(args, "adversarial", False) else "best")
    embedder = KeywordEmbeddingBackend()
    return proxy, embedder


def _cmd_rank(args) -> dict:
    cfg = load_config(args.config)
    bank = load_bank(args.bank)
    if args.mock:
        proxy, embedder = _mock_backends(args)
    else:
        proxy = HttpChatBackend(cfg.proxy_model, policy=cfg.backend)
        embedder = HttpEmbeddingBackend(cfg.embed_model, policy=cfg.backend)
    result = rank(
        args.query,
        bank,
        proxy,
        embedder=embedder if cfg.prefilter_enabled else None,
        budget_tokens=cfg.proxy_context_budget_tokens,
        top_k=args.top_k or cfg.top_k,
        temperature=cfg.proxy_temperature,
    )
    return result.to_json()


def _parse_schedule(spec: str, list_len: int) -> CutoffSchedule:
    if spec == "fib":
        return fibonacci_cutoffs(list_len)
    return CutoffSchedule(tuple(int(tok) for tok in spec.split(",") if tok.strip()))


def _cmd_reward(args) -> dict:
    cfg = load_config(args.config)
    task_obj = _read_json(args.task)
    task = bench._task_from_json(task_obj, 0, Path(args.task).parent)
    ranking_obj = _read_json(args.ranking)
    ranking = RankingResult(
        rationale=ranking_obj.get("rationale", ""),
        ranked_ids=tuple(ranking_obj["ranked_ids"]),
        raw_output=ranking_obj.get("raw_output", ""),
        repairs=tuple(ranking_obj.get("repairs", ())),
    )
    schedule = _parse_schedule(args.schedule, len(ranking.ranked_ids))
    if args.mock_oracle:
        working = bench.oracle_for_tasks([task])
    else:
        working = HttpChatBackend(cfg.working_model, policy=cfg.backend)
    scorer = score_answer_exact if args.scorer == "exact" else score_answer_f1
    breakdown = full_reward(
        task, ranking, task.bank, working, scorer,
        schedule=schedule, alpha=args.alpha, beta=args.beta,
    )
    return breakdown.to_json()


def _cmd_curriculum(args) -> list:
    perf = _read_json(args.perf)
    if not isinstance(perf, dict):
        raise ParseError(f"{args.perf}: expected an object of task_id -> score")
    cfg = CurriculumConfig(tau=args.tau, budget=args.budget)
    return training.select_curriculum(perf, cfg)


def _cmd_advantages(args) -> list:
    rewards = _read_json(args.rewards)
    if not isinstance(rewards, list):
        raise ParseError(f"{args.rewards}: expected a JSON array of rewards")
    return training.grpo_advantages(rewards, eps=args.eps)


def _cmd_merge(args) -> dict:
    maps = [load_param_map(p) for p in args.maps]
    merged = training.merge_checkpoints(maps)
    save_param_map(merged, args.output)
    return {"entries": len(merged.entries), "inputs": len(maps), "path": str(args.output)}


def _cmd_gen_data(args) -> dict:
    cfg = bench.SyntheticConfig(
        n_tasks=args.n_tasks,
        n_sessions=args.n_sessions,
        n_gold=args.n_gold,
        distractor_ratio=args.distractor_ratio,
        seed=args.seed,
    )
    tasks = bench.generate_synthetic(cfg)
    bench.save_dataset(tasks, args.output)
    return {"tasks": len(tasks), "seed": args.seed, "path": str(args.output)}


def _cmd_eval(args) -> dict:
    cfg = load_config(args.config)
    tasks = bench.load_dataset(args.dataset)
    if args.mock:
        proxy, embedder = _mock_backends(args)
        working = bench.oracle_for_tasks(tasks)
    else:
        proxy = HttpChatBackend(cfg.proxy_model, policy=cfg.backend)
        working = HttpChatBackend(cfg.working_model, policy=cfg.backend)
        embedder = HttpEmbeddingBackend(cfg.embed_model, policy=cfg.backend)
    report = bench.run_eval(
        tasks, cfg, proxy, working, embedder, with_rewards=args.with_reward
    )
    if args.report:
        report.save(args.report)
    if args.csv:
        report.write_csv(args.csv)
    return {"config_fingerprint": report.config_fingerprint, "aggregates": report.aggregates}


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memsifter",
        description="Session memory retrieval pipeline and reward tooling",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logs on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="segment a turn stream into a session bank")
    p.add_argument("turns_file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--policy", choices=["boundary", "gap", "size"], default="boundary")
    p.add_argument("--gap-seconds", type=int, default=3600)
    p.add_argument("--size", type=int, default=10)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("rank", help="rank a bank's sessions against a query")
    p.add_argument("-q", "--query", required=True)
    p.add_argument("-b", "--bank", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--mock", action="store_true", help="use deterministic offline backends")
    p.add_argument("--adversarial", action="store_true", help="mock proxy ranks worst-first")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("reward", help="score a ranking with the outcome reward")
    p.add_argument("-t", "--task", required=True)
    p.add_argument("-r", "--ranking", required=True)
    p.add_argument("--schedule", default="fib", help="'fib' or comma-separated cutoffs")
    p.add_argument("--mock-oracle", action="store_true")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--scorer", choices=["f1", "exact"], default="f1")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_reward)

    p = sub.add_parser("curriculum", help="select tasks nearest the difficulty anchor")
    p.add_argument("--perf", required=True)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--budget", type=int, required=True)
    p.set_defaults(func=_cmd_curriculum)

    p = sub.add_parser("advantages", help="group-relative advantages for one rollout group")
    p.add_argument("--rewards", required=True)
    p.add_argument("--eps", type=float, default=training.DEFAULT_EPS_STD)
    p.set_defaults(func=_cmd_advantages)

    p = sub.add_parser("merge", help="average parameter maps elementwise")
    p.add_argument("maps", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("gen-data", help="generate a deterministic synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-tasks", type=int, default=50)
    p.add_argument("--n-sessions", type=int, default=12)
    p.add_argument("--n-gold", type=int, default=1)
    p.add_argument("--distractor-ratio", type=float, default=0.25)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("eval", help="run the end-to-end evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--mock", action="store_true")
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--with-reward", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        payload = args.func(args)
    except MemSifterError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
