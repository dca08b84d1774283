"""Coarse embedding pre-filter: shrink an over-budget bank down to the
proxy's context window while keeping full session content.

Under budget the bank passes through untouched. Over budget, sessions are
kept greedily in descending cosine similarity to the query until the next
one would overflow, so the kept set is always a prefix of the similarity
ordering and never empty.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .backends import EmbeddingBackend, cosine_similarity
from .errors import InvalidArgument
from .store import MemoryBank, Session

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilteredBank:
    """Pre-filter result: kept sessions with similarities, sorted descending.

    ``original_order`` preserves the source bank's session id order so that
    downstream prompt assembly can restore it.
    """

    kept: tuple[tuple[Session, float], ...]
    dropped_ids: tuple[int, ...]
    budget_tokens: int
    original_order: tuple[int, ...]
    warnings: tuple[str, ...] = field(default=())

    @property
    def kept_ids(self) -> tuple[int, ...]:
        return tuple(s.id for s, _ in self.kept)

    def kept_sessions_in_bank_order(self) -> list[Session]:
        kept_by_id = {s.id: s for s, _ in self.kept}
        return [kept_by_id[i] for i in self.original_order if i in kept_by_id]


def prefilter(
    query: str,
    bank: MemoryBank,
    budget_tokens: int,
    embedder: EmbeddingBackend | None,
) -> FilteredBank:
    """Keep the sessions most similar to ``query`` within ``budget_tokens``.

    The query embedded here is the full current chat context text. With
    ``embedder=None`` the budget check is skipped entirely and the bank
    passes through (prefiltering disabled).
    """
    if budget_tokens <= 0:
        raise InvalidArgument(f"budget_tokens must be positive, got {budget_tokens}")
    if len(bank) == 0:
        raise InvalidArgument("cannot prefilter an empty bank")

    order = bank.ids
    if embedder is None or bank.total_tokens() <= budget_tokens:
        kept = tuple((s, 1.0) for s in bank.sessions)
        return FilteredBank(kept=kept, dropped_ids=(), budget_tokens=budget_tokens, original_order=order)

    texts = [query] + [s.render() for s in bank.sessions]
    vectors = embedder.embed(texts)
    query_vec, session_vecs = vectors[0], vectors[1:]

    warnings: list[str] = []
    if float((query_vec ** 2).sum()) == 0.0:
        warnings.append("query embedding has zero norm; all similarities forced to 0")
        logger.warning(warnings[-1])

    scored: list[tuple[float, int, Session]] = []
    for session, vec in zip(bank.sessions, session_vecs):
        sim = cosine_similarity(query_vec, vec)
        if float((vec ** 2).sum()) == 0.0:
            warnings.append(f"session {session.id} embedding has zero norm; similarity set to 0")
            logger.warning(warnings[-1])
        scored.append((sim, session.id, session))

    # descending similarity, ties to the lower session id
    scored.sort(key=lambda t: (-t[0], t[1]))

    kept: list[tuple[Session, float]] = []
    used = 0
    for sim, _, session in scored:
        if kept and used + session.token_count > budget_tokens:
            break
        kept.append((session, sim))
        used += session.token_count

    kept_ids = {s.id for s, _ in kept}
    dropped = tuple(i for i in order if i not in kept_ids)
    return FilteredBank(
        kept=tuple(kept),
        dropped_ids=dropped,
        budget_tokens=budget_tokens,
        original_order=order,
        warnings=tuple(warnings),
    )
