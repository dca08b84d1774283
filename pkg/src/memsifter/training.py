"""RL data preparation: curriculum selection, rollout-group filtering,
group-relative advantages, trajectory export, checkpoint averaging.

Nothing here touches gradients. Rollout generation is driven externally
(the ranker plus the reward engine); this module shapes the results into
what a policy-gradient trainer expects and keeps iteration-level model
averaging reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, IoError, ParseError, ShapeError
from .ranker import RankingResult
from .rewards import RewardBreakdown

DEFAULT_EPS_STD = 1e-8


@dataclass(frozen=True)
class CurriculumConfig:
    """Difficulty anchor and selection budget for curriculum construction."""

    tau: float = 0.2
    budget: int = 32

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidArgument(f"tau must be in [0, 1], got {self.tau}")


def select_curriculum(perf: dict[str, float], cfg: CurriculumConfig) -> list[str]:
    """Pick the ``budget`` tasks whose performance sits closest to the anchor.

    Tasks in the anchor's neighbourhood are hard-but-learnable; mastered
    and hopeless tasks sort to the back. Ties break on the lexicographically
    smaller task id, and the output is ordered by (distance, id).
    """
    if not perf:
        raise InvalidArgument("perf map is empty")
    if cfg.budget < 1:
        raise InvalidArgument(f"budget must be >= 1, got {cfg.budget}")
    ordered = sorted(perf, key=lambda tid: (abs(perf[tid] - cfg.tau), tid))
    return ordered[: cfg.budget]


@dataclass(frozen=True)
class TrajectoryRecord:
    """One rollout, ready for export to an external trainer.

    A rollout whose output failed format parsing carries ``ranking=None``
    plus a ``failure_reason``; its reward is whatever the reward policy
    assigned to the failure.
    """

    task_id: str
    prompt: str
    raw_output: str
    ranking: RankingResult | None
    reward: RewardBreakdown
    advantage: float | None = None
    failure_reason: str | None = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "prompt": self.prompt,
            "raw_output": self.raw_output,
            "ranking": self.ranking.to_json() if self.ranking else None,
            "failure_reason": self.failure_reason,
            "reward": self.reward.to_json(),
            "advantage": self.advantage,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrajectoryRecord":
        ranking = None
        if obj.get("ranking") is not None:
            r = obj["ranking"]
            ranking = RankingResult(
                rationale=r["rationale"],
                ranked_ids=tuple(r["ranked_ids"]),
                raw_output=r["raw_output"],
                repairs=tuple(r["repairs"]),
            )
        return cls(
            task_id=obj["task_id"],
            prompt=obj["prompt"],
            raw_output=obj["raw_output"],
            ranking=ranking,
            reward=RewardBreakdown.from_json(obj["reward"]),
            advantage=obj.get("advantage"),
            failure_reason=obj.get("failure_reason"),
        )


@dataclass(frozen=True)
class RolloutGroup:
    """All rollouts sampled for one task in one step."""

    task_id: str
    rollouts: tuple[TrajectoryRecord, ...]

    def __post_init__(self) -> None:
        if any(r.task_id != self.task_id for r in self.rollouts):
            raise InvalidArgument(f"group {self.task_id}: rollouts carry mixed task ids")

    def rewards(self) -> list[float]:
        return [r.reward.r_total for r in self.rollouts]


def grpo_advantages(rewards: Sequence[float], eps: float = DEFAULT_EPS_STD) -> list[float]:
    """Group-relative advantages: (r - mean) / population std.

    Degenerate groups (std <= eps) get all-zero advantages instead of a
    division blow-up.
    """
    if len(rewards) < 2:
        raise InvalidArgument(f"need >= 2 rewards, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=np.float64)
    std = float(arr.std())
    if std <= eps:
        return [0.0] * len(rewards)
    mean = float(arr.mean())
    return [(r - mean) / std for r in arr.tolist()]


def filter_groups(groups: Sequence[RolloutGroup], eps: float = DEFAULT_EPS_STD) -> list[RolloutGroup]:
    """Drop groups with no learning signal (reward std <= eps).

    All-solved and all-failed groups produce zero advantages everywhere,
    so keeping them only wastes trainer batch slots. Surviving groups pass
    through unmodified.
    """
    if eps < 0:
        raise InvalidArgument(f"eps must be >= 0, got {eps}")
    kept = []
    for group in groups:
        rewards = np.asarray(group.rewards(), dtype=np.float64)
        if len(rewards) >= 2 and float(rewards.std()) > eps:
            kept.append(group)
    return kept


def attach_advantages(group: RolloutGroup, eps: float = DEFAULT_EPS_STD) -> RolloutGroup:
    """Return a copy of ``group`` with per-rollout advantages filled in."""
    advantages = grpo_advantages(group.rewards(), eps)
    rollouts = tuple(
        replace(r, advantage=a) for r, a in zip(group.rollouts, advantages)
    )
    return RolloutGroup(task_id=group.task_id, rollouts=rollouts)


def export_trajectories(groups: Sequence[RolloutGroup], path) -> int:
    """Write one JSON line per rollout; returns the number of lines."""
    count = 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for group in groups:
                for record in group.rollouts:
                    fh.write(json.dumps(record.to_json(), ensure_ascii=False))
                    fh.write("\n")
                    count += 1
    except OSError as exc:
        raise IoError(f"cannot write trajectories to {path}: {exc}") from exc
    return count


def load_trajectories(path) -> list[TrajectoryRecord]:
    """Inverse of :func:`export_trajectories` (flat record list)."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read trajectories from {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(TrajectoryRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"line {line_no}: bad trajectory record: {exc}", line_no) from None
    return records


# --------------------------------------------------------------------------
# Checkpoint averaging
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamMap:
    """Named float32 parameter tensors, the unit of checkpoint averaging."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, arr in self.entries.items():
            if arr.dtype != np.float32:
                object.__setattr__(
                    self, "entries", {n: a.astype(np.float32) for n, a in self.entries.items()}
                )
                break

    def signature(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self.entries.items()}

    def to_json(self) -> dict:
        return {
            "entries": {
                name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                for name, arr in self.entries.items()
            }
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ParamMap":
        entries = {}
        for name, spec in obj["entries"].items():
            shape = tuple(spec["shape"])
            values = np.asarray(spec["values"], dtype=np.float32)
            if math.prod(shape) != values.size:
                raise ParseError(
                    f"entry {name!r}: shape {shape} does not match {values.size} values"
                )
            entries[name] = values.reshape(shape)
        return cls(entries=entries)


def save_param_map(pm: ParamMap, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(pm.to_json(), fh)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write parameter map to {path}: {exc}") from exc


def load_param_map(path) -> ParamMap:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read parameter map from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid parameter map JSON: {exc.msg}") from None
    return ParamMap.from_json(obj)


def merge_checkpoints(maps: Sequence[ParamMap]) -> ParamMap:
    """Elementwise arithmetic mean of checkpoints with identical signatures.

    Accumulates in float64 and casts back to float32, so merging one map
    is the identity and input order does not matter.
    """
    if not maps:
        raise InvalidArgument("need at least one parameter map")
    reference = maps[0].signature()
    for i, pm in enumerate(maps[1:], start=1):
        sig = pm.signature()
        for name in reference.keys() | sig.keys():
            if name not in sig:
                raise ShapeError(f"map {i} is missing entry {name!r}", entry=name)
            if name not in reference:
                raise ShapeError(f"map {i} has unexpected entry {name!r}", entry=name)
            if sig[name] != reference[name]:
                raise ShapeError(
                    f"entry {name!r}: shape {sig[name]} != {reference[name]}", entry=name
                )
    merged = {}
    for name in maps[0].entries:
        stacked = np.stack([pm.entries[name].astype(np.float64) for pm in maps])
        merged[name] = stacked.mean(axis=0).astype(np.float32)
    return ParamMap(entries=merged)
