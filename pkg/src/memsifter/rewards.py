"""Outcome-driven reward stack.

The answer reward measures what retrieved memory actually contributes:
the working LLM is scored with no memory (s0) and with the top-k ranked
sessions at a sparse, Fibonacci-spaced sequence of cutoffs. Marginal gains
between consecutive tiers are discounted by 1/log2(k+1), so lift achieved
near the top of the list earns more credit than the same lift further
down, and a task the model already solves from parametric knowledge earns
exactly zero.

Two algebraically identical forms are implemented on purpose:

    outcome_reward           -s0 + sum_n w_n * s_{k_n}      (production)
    outcome_reward_marginal  sum_n D_n * (s_{k_n} - s_{k_{n-1}})  (cross-check)

with w_n = D_n - D_{n+1} for n < N and w_N = D_N. Keep both; the test
suite asserts their equivalence over random inputs.
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

from .backends import ChatBackend, user_request
from .errors import BackendError, InvalidArgument
from .ranker import RankingResult
from .store import MemoryBank

if TYPE_CHECKING:  # pragma: no cover
    from .bench import Task

AnswerScorer = Callable[[str, Sequence[str]], float]


# --------------------------------------------------------------------------
# Cutoff schedule and weights
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CutoffSchedule:
    """Strictly increasing evaluation cutoffs k_1..k_N with k_1 = 1.

    The implied boundary below the first tier is k_0 = 0, i.e. the
    no-memory baseline.
    """

    cutoffs: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.cutoffs:
            raise InvalidArgument("schedule needs at least one cutoff")
        if self.cutoffs[0] != 1:
            raise InvalidArgument(f"first cutoff must be 1, got {self.cutoffs[0]}")
        if any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise InvalidArgument(f"cutoffs must be strictly increasing: {self.cutoffs}")

    def __len__(self) -> int:
        return len(self.cutoffs)


def fibonacci_cutoffs(list_len: int, include_full: bool = True) -> CutoffSchedule:
    """Fibonacci cutoffs {1, 2, 3, 5, 8, ...} capped at ``list_len``.

    ``include_full`` appends ``list_len`` itself when it is not already a
    cutoff, so the final tier always covers the complete ranking.
    """
    if list_len < 1:
        raise InvalidArgument(f"list_len must be >= 1, got {list_len}")
    cutoffs: list[int] = []
    a, b = 1, 2
    while a <= list_len:
        cutoffs.append(a)
        a, b = b, a + b
    if include_full and cutoffs[-1] != list_len:
        cutoffs.append(list_len)
    return CutoffSchedule(tuple(cutoffs))


def discount(k: int) -> float:
    """Rank discount 1/log2(k+1); equals 1.0 at k=1 and 0.5 at k=3."""
    if k < 1:
        raise InvalidArgument(f"rank must be >= 1, got {k}")
    return 1.0 / math.log2(k + 1)


@dataclass(frozen=True)
class WeightVector:
    """Per-tier discounts D_n and differential weights w_n.

    Weights telescope: their sum equals D_1, which is exactly 1 because
    every schedule starts at cutoff 1.
    """

    discounts: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.discounts) != len(self.weights):
            raise InvalidArgument("discounts and weights must align")
        if any(b >= a for a, b in zip(self.discounts, self.discounts[1:])):
            raise InvalidArgument("discounts must be strictly decreasing")
        if any(w <= 0 for w in self.weights):
            raise InvalidArgument("all weights must be positive")

    def to_json(self) -> dict:
        return {"discounts": list(self.discounts), "weights": list(self.weights)}


def weights(schedule: CutoffSchedule) -> WeightVector:
    """Differential discounts: w_n = D_n - D_{n+1}, last tier keeps D_N."""
    d = [discount(k) for k in schedule.cutoffs]
    w = [d[n] - d[n + 1] for n in range(len(d) - 1)] + [d[-1]]
    return WeightVector(discounts=tuple(d), weights=tuple(w))


# --------------------------------------------------------------------------
# Ablation scores and answer reward
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationScores:
    """Baseline score s0 plus one score per schedule cutoff, all in [0, 1]."""

    s0: float
    s_at: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        for label, value in [("s0", self.s0)] + [(f"s@{k}", s) for k, s in self.s_at]:
            if not 0.0 <= value <= 1.0:
                raise InvalidArgument(f"{label} = {value} outside [0, 1]")

    def to_json(self) -> dict:
        return {"s0": self.s0, "s_at": [[k, s] for k, s in self.s_at]}

    @classmethod
    def from_json(cls, obj: dict) -> "AblationScores":
        return cls(s0=obj["s0"], s_at=tuple((int(k), float(s)) for k, s in obj["s_at"]))


def _check_alignment(scores: AblationScores, schedule: CutoffSchedule) -> None:
    if tuple(k for k, _ in scores.s_at) != schedule.cutoffs:
        raise InvalidArgument(
            f"scores at {tuple(k for k, _ in scores.s_at)} do not align with schedule {schedule.cutoffs}"
        )


def outcome_reward(scores: AblationScores, schedule: CutoffSchedule) -> float:
    """Answer reward in regrouped form: -s0 + sum_n w_n * s_{k_n}."""
    _check_alignment(scores, schedule)
    w = weights(schedule).weights
    return math.fsum([-scores.s0] + [wn * s for wn, (_, s) in zip(w, scores.s_at)])


def outcome_reward_marginal(scores: AblationScores, schedule: CutoffSchedule) -> float:
    """Answer reward as discounted marginal gains; cross-check form.

    Computed straight from the per-tier discounts so it shares no code
    path with :func:`outcome_reward`.
    """
    _check_alignment(scores, schedule)
    terms = []
    prev = scores.s0
    for k, s in scores.s_at:
        terms.append((s - prev) / math.log2(k + 1))
        prev = s
    return math.fsum(terms)


# --------------------------------------------------------------------------
# Working-LLM ablation
# --------------------------------------------------------------------------


def answer_messages(question: str, memory_text: str | None = None) -> str:
    """Prompt for a working-LLM answer attempt, with or without memory."""
    if memory_text:
        return f"Relevant memory sessions:\n{memory_text}\n\nQuestion: {question}\nAnswer concisely."
    return f"Question: {question}\nAnswer concisely."


def evaluate_ablation(
    task: "Task",
    ranking: RankingResult,
    schedule: CutoffSchedule,
    bank: MemoryBank,
    working: ChatBackend,
    scorer: AnswerScorer,
    temperature: float = 0.0,
    max_output_tokens: int = 1024,
) -> AblationScores:
    """Score the working LLM with no memory and at every schedule cutoff.

    Context at cutoff k is the top-k ranked sessions rendered in rank
    order. Calls run at temperature 0 by default since reward noise feeds
    straight into advantages.
    """
    if not ranking.ranked_ids:
        raise InvalidArgument("ranking is empty")
    if schedule.cutoffs[-1] > len(ranking.ranked_ids):
        raise InvalidArgument(
            f"cutoff {schedule.cutoffs[-1]} exceeds ranked list length {len(ranking.ranked_ids)}"
        )

    def attempt(memory_text: str | None, index: int, k: int | None) -> float:
        req = user_request(
            answer_messages(task.question, memory_text),
            temperature=temperature,
            max_output_tokens=max_output_tokens,
        )
        try:
            answer = working.chat_complete(req)
        except BackendError as exc:
            where = "baseline" if k is None else f"cutoff index {index} (k={k})"
            err = BackendError(f"ablation call failed at {where}: {exc}", kind=exc.kind, status=exc.status)
            err.cutoff_index = None if k is None else index
            raise err from exc
        return scorer(answer, task.gold_answers)

    s0 = attempt(None, -1, None)
    s_at: list[tuple[int, float]] = []
    for index, k in enumerate(schedule.cutoffs):
        memory = "\n".join(bank.session(sid).render() for sid in ranking.ranked_ids[:k])
        s_at.append((k, attempt(memory, index, k)))
    return AblationScores(s0=s0, s_at=tuple(s_at))


# --------------------------------------------------------------------------
# Answer scoring
# --------------------------------------------------------------------------

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_WS_RE = re.compile(r"\s+")


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip punctuation, collapse whitespace, drop articles."""
    lowered = text.lower().translate(_PUNCT_TABLE)
    return [t for t in _WS_RE.split(lowered) if t and t not in _ARTICLES]


def score_answer_f1(pred: str, golds: Sequence[str]) -> float:
    """Token-level F1 over normalized tokens, max over the gold answers."""
    if not golds:
        raise InvalidArgument("golds must be non-empty")
    pred_tokens = normalize_answer(pred)
    best = 0.0
    for gold in golds:
        gold_tokens = normalize_answer(gold)
        if not pred_tokens or not gold_tokens:
            best = max(best, 1.0 if pred_tokens == gold_tokens else 0.0)
            continue
        overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
        if overlap == 0:
            continue
        precision = overlap / len(pred_tokens)
        recall = overlap / len(gold_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


def score_answer_exact(pred: str, golds: Sequence[str]) -> float:
    """Binary score: 1.0 iff the normalized prediction equals some gold."""
    if not golds:
        raise InvalidArgument("golds must be non-empty")
    pred_tokens = normalize_answer(pred)
    return 1.0 if any(pred_tokens == normalize_answer(g) for g in golds) else 0.0


# --------------------------------------------------------------------------
# Retrieval reward and hybrid combination
# --------------------------------------------------------------------------


def retrieval_reward_ndcg(
    ranked_ids: Sequence[int], gold_ids: set[int] | frozenset[int], k: int
) -> float:
    """NDCG@k with binary gains; 0.0 when there are no gold ids."""
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    if not gold_ids:
        return 0.0
    dcg = math.fsum(
        1.0 / math.log2(i + 2) for i, sid in enumerate(ranked_ids[:k]) if sid in gold_ids
    )
    idcg = math.fsum(1.0 / math.log2(i + 2) for i in range(min(k, len(gold_ids))))
    return dcg / idcg


def anneal_beta(step: int, beta0: float, anneal_steps: int) -> float:
    """Linear decay of the retrieval-reward weight: beta0 at step 0, zero
    from ``anneal_steps`` onward."""
    if step < 0:
        raise InvalidArgument(f"step must be >= 0, got {step}")
    if anneal_steps < 1:
        raise InvalidArgument(f"anneal_steps must be >= 1, got {anneal_steps}")
    return beta0 * max(0.0, 1.0 - step / anneal_steps)


@dataclass(frozen=True)
class RewardBreakdown:
    """Full reward record: components, coefficients, and provenance."""

    r_ans: float
    r_ret: float | None
    alpha: float
    beta: float
    r_total: float
    scores: AblationScores | None = None
    weights: WeightVector | None = None

    def to_json(self) -> dict:
        return {
            "r_ans": self.r_ans,
            "r_ret": self.r_ret,
            "alpha": self.alpha,
            "beta": self.beta,
            "r_total": self.r_total,
            "scores": self.scores.to_json() if self.scores else None,
            "weights": self.weights.to_json() if self.weights else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RewardBreakdown":
        return cls(
            r_ans=obj["r_ans"],
            r_ret=obj["r_ret"],
            alpha=obj["alpha"],
            beta=obj["beta"],
            r_total=obj["r_total"],
            scores=AblationScores.from_json(obj["scores"]) if obj.get("scores") else None,
            weights=WeightVector(
                discounts=tuple(obj["weights"]["discounts"]),
                weights=tuple(obj["weights"]["weights"]),
            )
            if obj.get("weights")
            else None,
        )


def hybrid_reward(
    r_ans: float,
    r_ret: float | None,
    alpha: float,
    beta: float,
    scores: AblationScores | None = None,
    weight_vector: WeightVector | None = None,
) -> RewardBreakdown:
    """Combine answer and retrieval rewards: r_total = alpha*r_ans + beta*r_ret.

    ``r_ret`` may be absent only while beta is 0 (fully annealed or
    outcome-only configurations).
    """
    if alpha < 0 or beta < 0:
        raise InvalidArgument("alpha and beta must be >= 0")
    if r_ret is None and beta > 0:
        raise InvalidArgument("r_ret is required when beta > 0")
    if r_ret is not None and not 0.0 <= r_ret <= 1.0:
        raise InvalidArgument(f"r_ret = {r_ret} outside [0, 1]")
    r_total = alpha * r_ans + beta * (r_ret if r_ret is not None else 0.0)
    return RewardBreakdown(
        r_ans=r_ans, r_ret=r_ret, alpha=alpha, beta=beta, r_total=r_total,
        scores=scores, weights=weight_vector,
    )


def full_reward(
    task: "Task",
    ranking: RankingResult,
    bank: MemoryBank,
    working: ChatBackend,
    scorer: AnswerScorer = score_answer_f1,
    *,
    schedule: CutoffSchedule | None = None,
    alpha: float = 1.0,
    beta: float = 0.0,
    ndcg_k: int | None = None,
) -> RewardBreakdown:
    """One-call composition: ablation scores, answer reward, optional
    retrieval reward, hybrid total."""
    schedule = schedule or fibonacci_cutoffs(len(ranking.ranked_ids))
    scores = evaluate_ablation(task, ranking, schedule, bank, working, scorer)
    r_ans = outcome_reward(scores, schedule)
    r_ret = None
    if beta > 0:
        if not task.gold_session_ids:
            raise InvalidArgument("beta > 0 requires gold session ids for the retrieval reward")
        r_ret = retrieval_reward_ndcg(
            ranking.ranked_ids, task.gold_session_ids, ndcg_k or schedule.cutoffs[-1]
        )
    return hybrid_reward(r_ans, r_ret, alpha, beta, scores=scores, weight_vector=weights(schedule))
