"""Proxy think-and-rank: prompt assembly, backend invocation, output parsing.

The proxy is expected to emit a rationale in <think>...</think> followed by
a comma-separated id list in <ranking>...</ranking>. Reasoning models emit
partial or nested blocks, so the LAST occurrence of each tag pair wins.

Parsing runs in two modes. Lenient mode (inference) repairs what it can
and records every repair applied; strict mode (training-format checks)
raises FormatError as soon as any repair would be needed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .backends import ChatBackend, EmbeddingBackend, user_request
from .errors import FormatError, InvalidArgument, MissingRankingError, TemplateError
from .prefilter import FilteredBank, prefilter
from .store import MemoryBank

# Repair tags, in canonical reporting order.
REPAIR_WHITESPACE = "whitespace_normalized"
REPAIR_PADDING = "padded_none"
REPAIR_DEDUPED = "deduped"
REPAIR_TRUNCATED = "truncated"
_REPAIR_ORDER = (REPAIR_WHITESPACE, REPAIR_PADDING, REPAIR_DEDUPED, REPAIR_TRUNCATED)

_PLACEHOLDERS = ("{HISTORY}", "{CONTEXT}", "{TOP_K}")
_PLACEHOLDER_RE = re.compile(r"\{(HISTORY|CONTEXT|TOP_K)\}")
_RANKING_RE = re.compile(r"<ranking>(.*?)</ranking>", re.DOTALL | re.IGNORECASE)
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL | re.IGNORECASE)
_ID_TOKEN_RE = re.compile(r"\d+")


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt body with {HISTORY}, {CONTEXT} and {TOP_K} slots, each exactly once."""

    body: str
    name: str = "custom"

    def __post_init__(self) -> None:
        for ph in _PLACEHOLDERS:
            n = self.body.count(ph)
            if n != 1:
                raise TemplateError(
                    f"template {self.name!r} must contain {ph} exactly once, found {n}"
                )


@lru_cache(maxsize=1)
def default_template() -> PromptTemplate:
    """The packaged think-and-rank prompt."""
    body = (
        resources.files("memsifter")
        .joinpath("assets/think_rank_prompt.txt")
        .read_text(encoding="utf-8")
    )
    return PromptTemplate(body=body, name="think_rank_default")


@dataclass(frozen=True)
class RankingResult:
    """Validated proxy ranking: rationale, ordered ids, raw text, repairs.

    ``valid_ids`` and ``top_k`` carry the parse context for invariant
    checks; they are not part of the serialized payload or of equality.
    """

    rationale: str
    ranked_ids: tuple[int, ...]
    raw_output: str
    repairs: tuple[str, ...] = ()
    valid_ids: frozenset[int] = field(default=frozenset(), compare=False)
    top_k: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise InvalidArgument("ranked_ids contains duplicates")
        if self.valid_ids and not set(self.ranked_ids) <= self.valid_ids:
            raise InvalidArgument("ranked_ids contains ids outside the valid set")
        if self.top_k and self.valid_ids and len(self.ranked_ids) > min(self.top_k, len(self.valid_ids)):
            raise InvalidArgument("ranked_ids longer than min(top_k, |valid ids|)")

    def to_json(self) -> dict:
        return {
            "rationale": self.rationale,
            "ranked_ids": list(self.ranked_ids),
            "raw_output": self.raw_output,
            "repairs": list(self.repairs),
        }


def build_prompt(
    query: str,
    filtered: FilteredBank,
    template: PromptTemplate | None = None,
    top_k: int = 10,
) -> str:
    """Substitute the template slots; {HISTORY} renders kept sessions in
    original bank order. Single-pass substitution, so session or query text
    containing a placeholder spelling cannot be re-expanded.
    """
    if top_k < 1:
        raise InvalidArgument(f"top_k must be >= 1, got {top_k}")
    template = template or default_template()
    history = "\n".join(s.render() for s in filtered.kept_sessions_in_bank_order())
    values = {"HISTORY": history, "CONTEXT": query, "TOP_K": str(top_k)}
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.body)


def parse_ranking(
    raw: str,
    valid_ids: set[int] | frozenset[int],
    top_k: int = 10,
    strict: bool = False,
) -> RankingResult:
    """Extract and validate the last ranking block of ``raw``.

    Lenient mode drops tokens that are not ids in ``valid_ids`` (recorded
    as ``padded_none``), de-duplicates keeping the first occurrence, trims
    token whitespace and truncates to ``top_k``, recording every repair.
    Strict mode raises FormatError if any of those repairs would be needed.
    """
    if not valid_ids:
        raise InvalidArgument("valid_ids must be non-empty")
    if top_k < 1:
        raise InvalidArgument(f"top_k must be >= 1, got {top_k}")

    blocks = _RANKING_RE.findall(raw)
    if not blocks:
        raise MissingRankingError("no <ranking>...</ranking> block in output")
    block = blocks[-1]
    think_blocks = _THINK_RE.findall(raw)
    rationale = think_blocks[-1].strip() if think_blocks else ""

    repairs: set[str] = set()
    ranked: list[int] = []
    seen: set[int] = set()
    for token in block.split(","):
        stripped = token.strip()
        if stripped != token:
            repairs.add(REPAIR_WHITESPACE)
        if not _ID_TOKEN_RE.fullmatch(stripped):
            repairs.add(REPAIR_PADDING)
            continue
        sid = int(stripped)
        if sid not in valid_ids:
            repairs.add(REPAIR_PADDING)
            continue
        if sid in seen:
            repairs.add(REPAIR_DEDUPED)
            continue
        seen.add(sid)
        ranked.append(sid)
    if len(ranked) > top_k:
        ranked = ranked[:top_k]
        repairs.add(REPAIR_TRUNCATED)

    ordered_repairs = tuple(r for r in _REPAIR_ORDER if r in repairs)
    if strict and ordered_repairs:
        raise FormatError(f"output needed repairs: {ordered_repairs}", list(ordered_repairs))
    return RankingResult(
        rationale=rationale,
        ranked_ids=tuple(ranked),
        raw_output=raw,
        repairs=ordered_repairs,
        valid_ids=frozenset(valid_ids),
        top_k=top_k,
    )


def rank(
    query: str,
    bank: MemoryBank,
    proxy: ChatBackend,
    *,
    embedder: EmbeddingBackend | None = None,
    budget_tokens: int = 131_072,
    template: PromptTemplate | None = None,
    top_k: int = 10,
    temperature: float = 1.0,
    max_output_tokens: int = 16_384,
    strict: bool = False,
) -> RankingResult:
    """Full retrieval pass: prefilter, prompt, proxy call, parse.

    A response with no ranking block is retried once with the same prompt
    before MissingRankingError surfaces. Ids dropped by the prefilter can
    never appear in the result because they are outside the valid id set
    handed to the parser (exposed as ``RankingResult.valid_ids``).
    """
    if len(bank) == 0:
        raise InvalidArgument("cannot rank over an empty bank")
    filtered = prefilter(query, bank, budget_tokens, embedder)
    prompt = build_prompt(query, filtered, template, top_k)
    req = user_request(prompt, temperature=temperature, max_output_tokens=max_output_tokens)
    valid = frozenset(filtered.kept_ids)

    raw = proxy.chat_complete(req)
    try:
        return parse_ranking(raw, valid, top_k, strict)
    except MissingRankingError:
        raw = proxy.chat_complete(req)
        return parse_ranking(raw, valid, top_k, strict)
