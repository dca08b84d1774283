"""Session store: raw interaction history, segmentation, rendering, persistence.

History is append-only. A bank is built once from a flat turn list by a
segmentation policy and is immutable afterwards, so instances are safe to
share across threads. The on-disk format is JSON-lines, one session per
line, UTF-8 with LF line endings:

    {"id": int, "turns": [{"role": "user"|"assistant"|"tool",
                           "content": str, "timestamp": int|null}]}
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import EmptyHistory, IntegrityError, InvalidArgument, IoError, ParseError

ROLES = ("user", "assistant", "tool")

# Pluggable exact tokenizer; None selects the ceil(chars/4) heuristic.
TokenCounter = Callable[[str], int]


def estimate_tokens(text: str, counter: TokenCounter | None = None) -> int:
    """Estimate the token count of ``text``.

    The default heuristic is ceil(len/4), which is deterministic and
    monotone non-decreasing in text length. Pass ``counter`` to plug in an
    exact tokenizer for a specific backend.
    """
    if counter is not None:
        return counter(text)
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class Turn:
    """One interaction turn. ``content`` must be non-empty after trimming."""

    role: str
    content: str
    timestamp: int | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise InvalidArgument(f"unknown role {self.role!r}, expected one of {ROLES}")
        if not self.content.strip():
            raise InvalidArgument("turn content is empty after trimming")


def render_turns(turns: Iterable[Turn]) -> str:
    """Render turns as one ``role: content`` line each."""
    return "\n".join(f"{t.role}: {t.content}" for t in turns)


@dataclass(frozen=True)
class Session:
    """A contiguous slice of history, tagged with a bank-unique id.

    ``token_count`` is cached at construction as the estimate over the
    rendered turns.
    """

    id: int
    turns: tuple[Turn, ...]
    token_count: int = field(default=-1, compare=False)

    def __post_init__(self) -> None:
        if self.id < 0:
            raise InvalidArgument(f"session id must be non-negative, got {self.id}")
        if not self.turns:
            raise InvalidArgument(f"session {self.id} has no turns")
        if self.token_count < 0:
            object.__setattr__(self, "token_count", estimate_tokens(render_turns(self.turns)))

    def render(self) -> str:
        """Serialize as ``<session I>...</session>`` with one turn per line."""
        return f"<session {self.id}>\n{render_turns(self.turns)}\n</session>"


@dataclass(frozen=True)
class MemoryBank:
    """Ordered, immutable collection of sessions with unique ids."""

    sessions: tuple[Session, ...]
    source: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        ids = [s.id for s in self.sessions]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise IntegrityError(f"duplicate session ids: {dupes}")

    def __len__(self) -> int:
        return len(self.sessions)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.sessions)

    def session(self, session_id: int) -> Session:
        for s in self.sessions:
            if s.id == session_id:
                return s
        raise KeyError(session_id)

    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.sessions)


# --------------------------------------------------------------------------
# Segmentation policies
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryPolicy:
    """Pass-through: new sessions start at the given turn indices.

    Index 0 is implied. Use this when the ingested data already carries
    session boundaries, which all supported datasets do.
    """

    starts: tuple[int, ...] = ()


@dataclass(frozen=True)
class GapPolicy:
    """Start a new session when consecutive timestamps differ by more than
    ``max_gap_seconds``. Turns without timestamps never open a session."""

    max_gap_seconds: int = 3600


@dataclass(frozen=True)
class FixedSizePolicy:
    """Chunk into sessions of ``size`` turns; the last may be shorter."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise InvalidArgument(f"fixed session size must be >= 1, got {self.size}")


SegmentationPolicy = BoundaryPolicy | GapPolicy | FixedSizePolicy


def _boundaries(turns: Sequence[Turn], policy: SegmentationPolicy) -> list[int]:
    if isinstance(policy, BoundaryPolicy):
        bad = [i for i in policy.starts if not 0 <= i < len(turns)]
        if bad:
            raise InvalidArgument(f"boundary indices out of range: {bad}")
        return sorted({0, *policy.starts})
    if isinstance(policy, GapPolicy):
        starts = [0]
        prev_ts = turns[0].timestamp
        for i in range(1, len(turns)):
            ts = turns[i].timestamp
            if ts is not None and prev_ts is not None and ts - prev_ts > policy.max_gap_seconds:
                starts.append(i)
            if ts is not None:
                prev_ts = ts
        return starts
    if isinstance(policy, FixedSizePolicy):
        return list(range(0, len(turns), policy.size))
    raise InvalidArgument(f"unknown segmentation policy: {policy!r}")


def segment_history(turns: Sequence[Turn], policy: SegmentationPolicy) -> MemoryBank:
    """Partition ``turns`` into a bank of sessions with ids 0..N-1.

    Every input turn lands in exactly one session and order is preserved
    both across and within sessions.
    """
    if not turns:
        raise EmptyHistory("cannot segment an empty turn list")
    starts = _boundaries(turns, policy)
    ends = starts[1:] + [len(turns)]
    sessions = tuple(
        Session(id=i, turns=tuple(turns[lo:hi]))
        for i, (lo, hi) in enumerate(zip(starts, ends))
    )
    return MemoryBank(sessions=sessions)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

# Canonical opener is `<session I>`; the spaceless spelling also occurs in
# proxy outputs and is accepted everywhere tags are read back.
_SESSION_TAG_RE = re.compile(r"<session ?(\d+)>")


def render_sessions(bank: MemoryBank) -> str:
    """Concatenate every session's tagged rendering, in bank order.

    Byte-for-byte deterministic for a given bank.
    """
    if not bank.sessions:
        raise InvalidArgument("cannot render an empty bank")
    return "\n".join(s.render() for s in bank.sessions)


def rendered_session_ids(text: str) -> list[int]:
    """Recover session ids from rendered text, in order of appearance."""
    return [int(m) for m in _SESSION_TAG_RE.findall(text)]


def session_tag_present(text: str, session_id: int) -> bool:
    """True if ``text`` contains an opener tag for ``session_id``."""
    return (
        re.search(rf"<session ?{session_id}>", text) is not None
    )


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def _turn_to_json(turn: Turn) -> dict:
    return {"role": turn.role, "content": turn.content, "timestamp": turn.timestamp}


def _turn_from_json(obj: dict, line_no: int) -> Turn:
    if not isinstance(obj, dict):
        raise ParseError(f"line {line_no}: turn must be an object", line_no)
    try:
        role = obj["role"]
        content = obj["content"]
    except KeyError as exc:
        raise ParseError(f"line {line_no}: turn missing field {exc}", line_no) from None
    timestamp = obj.get("timestamp")
    if timestamp is not None and not isinstance(timestamp, int):
        raise ParseError(f"line {line_no}: timestamp must be an integer or null", line_no)
    try:
        return Turn(role=role, content=content, timestamp=timestamp)
    except InvalidArgument as exc:
        raise ParseError(f"line {line_no}: {exc}", line_no) from None


def session_to_json(session: Session) -> dict:
    return {"id": session.id, "turns": [_turn_to_json(t) for t in session.turns]}


def session_from_json(obj: dict, line_no: int = 0) -> Session:
    if not isinstance(obj, dict) or "id" not in obj or "turns" not in obj:
        raise ParseError(f"line {line_no}: session must have 'id' and 'turns'", line_no)
    if not isinstance(obj["id"], int):
        raise ParseError(f"line {line_no}: session id must be an integer", line_no)
    turns = obj["turns"]
    if not isinstance(turns, list) or not turns:
        raise ParseError(f"line {line_no}: 'turns' must be a non-empty list", line_no)
    try:
        return Session(id=obj["id"], turns=tuple(_turn_from_json(t, line_no) for t in turns))
    except InvalidArgument as exc:
        raise ParseError(f"line {line_no}: {exc}", line_no) from None


def save_bank(bank: MemoryBank, path) -> None:
    """Write the bank as JSON-lines. Single-writer semantics per file."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for session in bank.sessions:
                fh.write(json.dumps(session_to_json(session), ensure_ascii=False))
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write bank to {path}: {exc}") from exc


def load_bank(path, source: str | None = None) -> MemoryBank:
    """Load a bank from JSON-lines; inverse of :func:`save_bank`.

    Raises ParseError with the offending line number on malformed input and
    IntegrityError on duplicate session ids.
    """
    sessions: list[Session] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read bank from {path}: {exc}") from exc
    for line_no, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {line_no}: invalid JSON: {exc.msg}", line_no) from None
        sessions.append(session_from_json(obj, line_no))
    if not sessions:
        raise ParseError("bank file contains no sessions", None)
    return MemoryBank(sessions=tuple(sessions), source=source or str(path))
