"""Dataset ingestion, synthetic benchmark generation, end-to-end evaluation.

The dataset format is JSON-lines, one task per line:

    {"task_id": str, "question": str, "gold_answers": [str],
     "gold_session_ids": [int]|null,
     "bank": [<session>...] | {"path": "relative/bank.jsonl"}}

Inline banks use the same session objects as bank files; referenced bank
files resolve relative to the dataset file.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backends import ChatBackend, EmbeddingBackend, OracleWorkingLLM, user_request
from .config import PipelineConfig
from .errors import InvalidArgument, IoError, MemSifterError, ParseError
from .ranker import rank
from .rewards import (
    AnswerScorer,
    RewardBreakdown,
    answer_messages,
    full_reward,
    retrieval_reward_ndcg,
    score_answer_f1,
)
from .store import (
    MemoryBank,
    Session,
    Turn,
    load_bank,
    session_from_json,
    session_to_json,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Task:
    """One benchmark item: a question over a bank, with gold answers and,
    when the benchmark provides them, gold session annotations."""

    task_id: str
    question: str
    gold_answers: tuple[str, ...]
    bank: MemoryBank
    gold_session_ids: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if not self.gold_answers:
            raise InvalidArgument(f"task {self.task_id}: gold_answers is empty")
        if self.gold_session_ids is not None:
            unknown = self.gold_session_ids - set(self.bank.ids)
            if unknown:
                raise InvalidArgument(
                    f"task {self.task_id}: gold session ids {sorted(unknown)} not in bank"
                )


def _task_from_json(obj: dict, index: int, base_dir: Path) -> Task:
    if not isinstance(obj, dict):
        raise ParseError(f"task {index}: record must be an object", index)
    for key in ("task_id", "question", "gold_answers", "bank"):
        if key not in obj:
            raise ParseError(f"task {index}: missing field {key!r}", index)
    golds = obj["gold_answers"]
    if not isinstance(golds, list) or not golds or not all(isinstance(g, str) for g in golds):
        raise ParseError(f"task {index}: gold_answers must be a non-empty list of strings", index)

    bank_spec = obj["bank"]
    if isinstance(bank_spec, dict) and "path" in bank_spec:
        bank = load_bank(base_dir / bank_spec["path"])
    elif isinstance(bank_spec, list) and bank_spec:
        try:
            sessions = tuple(session_from_json(s, index) for s in bank_spec)
            bank = MemoryBank(sessions=sessions, source=f"task:{obj['task_id']}")
        except MemSifterError as exc:
            raise ParseError(f"task {index}: bad inline bank: {exc}", index) from None
    else:
        raise ParseError(f"task {index}: bank must be a session list or {{'path': ...}}", index)

    gold_ids = obj.get("gold_session_ids")
    try:
        return Task(
            task_id=str(obj["task_id"]),
            question=str(obj["question"]),
            gold_answers=tuple(golds),
            bank=bank,
            gold_session_ids=None if gold_ids is None else frozenset(int(i) for i in gold_ids),
        )
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ParseError(f"task {index}: {exc}", index) from None


def load_dataset(path) -> list[Task]:
    """Parse a dataset file; bank paths resolve relative to it."""
    base_dir = Path(path).parent
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read dataset from {path}: {exc}") from exc
    tasks = []
    for index, line in enumerate(ln for ln in lines if ln.strip()):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"task {index}: invalid JSON: {exc.msg}", index) from None
        tasks.append(_task_from_json(obj, index, base_dir))
    return tasks


def task_to_json(task: Task) -> dict:
    return {
        "task_id": task.task_id,
        "question": task.question,
        "gold_answers": list(task.gold_answers),
        "gold_session_ids": sorted(task.gold_session_ids) if task.gold_session_ids else None,
        "bank": [session_to_json(s) for s in task.bank.sessions],
    }


def save_dataset(tasks: Sequence[Task], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for task in tasks:
                fh.write(json.dumps(task_to_json(task), ensure_ascii=False))
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset to {path}: {exc}") from exc


def oracle_for_tasks(tasks: Sequence[Task], **kwargs) -> OracleWorkingLLM:
    """Working-LLM oracle covering every task in the dataset."""
    key = {
        t.question: (t.gold_session_ids or frozenset(), t.gold_answers[0]) for t in tasks
    }
    return OracleWorkingLLM(key, **kwargs)


# --------------------------------------------------------------------------
# Synthetic benchmark generator
# --------------------------------------------------------------------------

_NAMES = [
    "alice", "bruno", "carla", "derek", "elena", "felix", "greta", "henry",
    "irene", "jonas", "karin", "leo", "mira", "nadia", "oscar", "priya",
]
_PLACES = [
    "lisbon", "kyoto", "oslo", "quito", "cairo", "dublin", "hanoi", "lima",
    "malta", "tbilisi", "bergen", "sevilla",
]
_TOPICS = [
    "hotel", "museum", "restaurant", "market", "festival", "garden",
    "gallery", "harbor", "castle", "library",
]
_ANSWER_WORDS = [
    "aurora", "basilisk", "cobalt", "dynamo", "ember", "falcon", "glacier",
    "horizon", "indigo", "juniper", "kestrel", "lumen", "meridian", "nebula",
    "obsidian", "pinnacle",
]
_FILLER_LINES = [
    ("remind me to water my plants on saturday", "reminder saved, watering scheduled"),
    ("can you queue up my workout playlist", "playlist queued, enjoy your session"),
    ("please summarize yesterday's grocery receipt", "receipt totals nine items, mostly produce"),
    ("set my thermostat warmer tonight", "thermostat raised two degrees from nine pm"),
    ("draft a thank you note to my dentist", "drafted a short friendly thank you note"),
]
_PAD_LINE = "note: archived transcript segment {j} retained verbatim as supplementary reference material"


@dataclass(frozen=True)
class SyntheticConfig:
    n_tasks: int = 50
    n_sessions: int = 12
    n_gold: int = 1
    distractor_ratio: float = 0.25
    seed: int = 0
    pad_turns: int = 2

    def __post_init__(self) -> None:
        if self.n_tasks < 1:
            raise InvalidArgument(f"n_tasks must be >= 1, got {self.n_tasks}")
        if self.n_sessions < 1:
            raise InvalidArgument(f"n_sessions must be >= 1, got {self.n_sessions}")
        if not 1 <= self.n_gold <= self.n_sessions:
            raise InvalidArgument(
                f"n_gold must be in [1, n_sessions], got {self.n_gold} of {self.n_sessions}"
            )
        if not 0.0 <= self.distractor_ratio <= 1.0:
            raise InvalidArgument(f"distractor_ratio must be in [0, 1], got {self.distractor_ratio}")
        if self.pad_turns < 0:
            raise InvalidArgument(f"pad_turns must be >= 0, got {self.pad_turns}")


def generate_synthetic(cfg: SyntheticConfig) -> list[Task]:
    """Deterministic noisy benchmark.

    Each task plants gold sessions that restate the question's entities and
    carry the answer token, semantic distractors that reuse the topic and
    place vocabulary around a different entity and answer, and unrelated
    filler. By construction the gold sessions have strictly the highest
    keyword overlap with the question of any session in the bank. Padding
    turns bulk every session so banks can exceed tight prefilter budgets.
    """
    rng = random.Random(cfg.seed)
    tasks = []
    for t in range(cfg.n_tasks):
        name = rng.choice(_NAMES)
        place = rng.choice(_PLACES)
        topic = rng.choice(_TOPICS)
        answer = f"{rng.choice(_ANSWER_WORDS)}{t}"
        question = f"Which {topic} did {name} choose in {place}?"

        n_rest = cfg.n_sessions - cfg.n_gold
        n_distractors = int(cfg.distractor_ratio * n_rest)
        roles = ["gold"] * cfg.n_gold + ["distractor"] * n_distractors
        roles += ["filler"] * (cfg.n_sessions - len(roles))
        rng.shuffle(roles)

        sessions = []
        ts = 1_000_000 * t
        for sid, role in enumerate(roles):
            if role == "gold":
                turns = [
                    Turn("user", f"help me decide which {topic} {name} should choose in {place}", ts),
                    Turn("assistant", f"after comparing options {name} chose the {answer} {topic} in {place}", ts + 60),
                ]
            elif role == "distractor":
                other_name = rng.choice([n for n in _NAMES if n != name])
                other_answer = f"{rng.choice([w for w in _ANSWER_WORDS if not answer.startswith(w)])}x{t}"
                turns = [
                    Turn("user", f"any thoughts about a decent {topic} around {place}", ts),
                    Turn("assistant", f"{other_name} once mentioned the {other_answer} {topic} near {place}", ts + 60),
                ]
            else:
                ask, reply = rng.choice(_FILLER_LINES)
                turns = [Turn("user", ask, ts), Turn("assistant", reply, ts + 60)]
            for j in range(cfg.pad_turns):
                turns.append(Turn("tool", _PAD_LINE.format(j=j), ts + 120 + j))
            sessions.append(Session(id=sid, turns=tuple(turns)))
            ts += 3600

        gold_ids = frozenset(sid for sid, role in enumerate(roles) if role == "gold")
        tasks.append(
            Task(
                task_id=f"syn-{cfg.seed}-{t:04d}",
                question=question,
                gold_answers=(answer,),
                bank=MemoryBank(sessions=tuple(sessions), source="synthetic"),
                gold_session_ids=gold_ids,
            )
        )
    return tasks


# --------------------------------------------------------------------------
# End-to-end evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskRow:
    task_id: str
    error: str | None = None
    ranked_ids: tuple[int, ...] = ()
    answer: str | None = None
    f1: float | None = None
    ndcg_at_1: float | None = None
    ndcg_at_5: float | None = None
    recall_at_k: float | None = None
    reward: RewardBreakdown | None = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "error": self.error,
            "ranked_ids": list(self.ranked_ids),
            "answer": self.answer,
            "f1": self.f1,
            "ndcg_at_1": self.ndcg_at_1,
            "ndcg_at_5": self.ndcg_at_5,
            "recall_at_k": self.recall_at_k,
            "reward": self.reward.to_json() if self.reward else None,
        }


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[TaskRow, ...]
    aggregates: dict
    config_fingerprint: str

    def to_json(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "aggregates": self.aggregates,
            "rows": [row.to_json() for row in self.rows],
        }

    def save(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(self.to_json(), fh, indent=2, ensure_ascii=False)
                fh.write("\n")
        except OSError as exc:
            raise IoError(f"cannot write report to {path}: {exc}") from exc

    def write_csv(self, path) -> None:
        fields = ["task_id", "error", "f1", "ndcg_at_1", "ndcg_at_5", "recall_at_k", "r_ans", "r_total", "ranked_ids"]
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=fields)
                writer.writeheader()
                for row in self.rows:
                    writer.writerow(
                        {
                            "task_id": row.task_id,
                            "error": row.error or "",
                            "f1": row.f1,
                            "ndcg_at_1": row.ndcg_at_1,
                            "ndcg_at_5": row.ndcg_at_5,
                            "recall_at_k": row.recall_at_k,
                            "r_ans": row.reward.r_ans if row.reward else None,
                            "r_total": row.reward.r_total if row.reward else None,
                            "ranked_ids": ";".join(str(i) for i in row.ranked_ids),
                        }
                    )
        except OSError as exc:
            raise IoError(f"cannot write CSV to {path}: {exc}") from exc


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def run_eval(
    tasks: Sequence[Task],
    cfg: PipelineConfig,
    proxy: ChatBackend,
    working: ChatBackend,
    embedder: EmbeddingBackend | None = None,
    scorer: AnswerScorer = score_answer_f1,
    with_rewards: bool = False,
) -> EvalReport:
    """Evaluate every task through the full pipeline and aggregate.

    Per-task domain errors land in that task's row and the run continues;
    aggregates are means over the successful rows, with the success count
    reported alongside.
    """
    if not tasks:
        raise InvalidArgument("dataset is empty")
    rows = []
    for task in tasks:
        try:
            rows.append(_eval_one(task, cfg, proxy, working, embedder, scorer, with_rewards))
        except MemSifterError as exc:
            logger.warning("task %s failed: %s", task.task_id, exc)
            rows.append(TaskRow(task_id=task.task_id, error=str(exc)))
    rows.sort(key=lambda r: r.task_id)

    ok = [r for r in rows if r.error is None]
    aggregates = {
        "n_tasks": len(rows),
        "n_success": len(ok),
        "n_errors": len(rows) - len(ok),
        "mean_f1": _mean([r.f1 for r in ok if r.f1 is not None]),
        "mean_ndcg_at_1": _mean([r.ndcg_at_1 for r in ok if r.ndcg_at_1 is not None]),
        "mean_ndcg_at_5": _mean([r.ndcg_at_5 for r in ok if r.ndcg_at_5 is not None]),
        "mean_recall_at_k": _mean([r.recall_at_k for r in ok if r.recall_at_k is not None]),
        "mean_r_ans": _mean([r.reward.r_ans for r in ok if r.reward is not None]),
        "top_k": cfg.top_k,
    }
    return EvalReport(rows=tuple(rows), aggregates=aggregates, config_fingerprint=cfg.fingerprint())


def _eval_one(
    task: Task,
    cfg: PipelineConfig,
    proxy: ChatBackend,
    working: ChatBackend,
    embedder: EmbeddingBackend | None,
    scorer: AnswerScorer,
    with_rewards: bool,
) -> TaskRow:
    ranking = rank(
        task.question,
        task.bank,
        proxy,
        embedder=embedder if cfg.prefilter_enabled else None,
        budget_tokens=cfg.proxy_context_budget_tokens,
        top_k=cfg.top_k,
        temperature=cfg.proxy_temperature,
    )

    ndcg1 = ndcg5 = recall = None
    if task.gold_session_ids:
        ndcg1 = retrieval_reward_ndcg(ranking.ranked_ids, task.gold_session_ids, 1)
        ndcg5 = retrieval_reward_ndcg(ranking.ranked_ids, task.gold_session_ids, 5)
        top = set(ranking.ranked_ids[: cfg.top_k])
        recall = len(top & task.gold_session_ids) / len(task.gold_session_ids)

    memory = "\n".join(
        task.bank.session(sid).render() for sid in ranking.ranked_ids[: cfg.top_k]
    )
    req = user_request(
        answer_messages(task.question, memory or None),
        temperature=cfg.working_temperature,
    )
    answer = working.chat_complete(req)
    f1 = scorer(answer, task.gold_answers)

    reward = None
    if with_rewards:
        reward = full_reward(task, ranking, task.bank, working, scorer, alpha=cfg.alpha, beta=0.0)

    return TaskRow(
        task_id=task.task_id,
        ranked_ids=ranking.ranked_ids,
        answer=answer,
        f1=f1,
        ndcg_at_1=ndcg1,
        ndcg_at_5=ndcg5,
        recall_at_k=recall,
        reward=reward,
    )
