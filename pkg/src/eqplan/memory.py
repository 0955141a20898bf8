"""Append-only buffer of equilibrium plans and their feedback.

Each record snapshots one settled plan: the plan text, the context it was
refined under, the feedback it earned, and the training iteration that
produced it. Sampling favors recent iterations with weight 0.5^(T - k).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .homeworld.feedback import Feedback

DECAY_RATIO = 0.5

SOURCES = ("ENV", "WORLD_MODEL")


@dataclass(frozen=True)
class EquilibriumRecord:
    """One cached equilibrium. `context` is the canonical JSON form of the
    refinement context the plan was produced under (a list of
    {plan_text, feedback, source} entries, newest first)."""

    task_id: str
    plan_text: str
    feedback: Feedback
    iteration: int
    source: str = "ENV"
    context: List[Dict[str, Any]] = field(default_factory=list)
    record_id: int = -1

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown feedback source {self.source!r}")
        if self.iteration < 0:
            raise ValueError("iteration index must be >= 0")

    def to_json(self) -> Dict[str, Any]:
        return {
            "record_id": self.record_id,
            "task_id": self.task_id,
            "plan_text": self.plan_text,
            "feedback": self.feedback.to_json(),
            "iteration": self.iteration,
            "source": self.source,
            "context": self.context,
        }

    @staticmethod
    def from_json(data: Dict[str, Any]) -> "EquilibriumRecord":
        return EquilibriumRecord(
            task_id=data["task_id"],
            plan_text=data["plan_text"],
            feedback=Feedback.from_json(data["feedback"]),
            iteration=int(data["iteration"]),
            source=data.get("source", "ENV"),
            context=data.get("context", []),
            record_id=int(data.get("record_id", -1)),
        )


class MemoryBuffer:
    """Append-only store; records are immutable and ids are their positions."""

    def __init__(self) -> None:
        self._records: List[EquilibriumRecord] = []

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def append(self, record: EquilibriumRecord) -> int:
        if self._records and record.iteration < self._records[-1].iteration:
            raise ValueError(
                f"iteration index must be nondecreasing: got "
                f"{record.iteration} after {self._records[-1].iteration}")
        rid = len(self._records)
        self._records.append(dataclasses.replace(record, record_id=rid))
        return rid

    def get(self, record_id: int) -> EquilibriumRecord:
        return self._records[record_id]

    def records(self) -> Sequence[EquilibriumRecord]:
        return tuple(self._records)

    def weights(self, current_iteration: int) -> np.ndarray:
        ks = np.array([r.iteration for r in self._records], dtype=np.float64)
        return DECAY_RATIO ** (current_iteration - ks)

    def sample_batch(self, batch_size: int, current_iteration: int,
                     seed: int) -> List[EquilibriumRecord]:
        """Sample with replacement, weighting records by 0.5^(T - k)."""
        if not self._records:
            raise ValueError("cannot sample from an empty buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        w = self.weights(current_iteration)
        p = w / w.sum()
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(self._records), size=batch_size, p=p)
        return [self._records[int(i)] for i in picks]

    # -- persistence (one JSON object per line) -----------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self._records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    @staticmethod
    def load(path: str) -> "MemoryBuffer":
        buf = MemoryBuffer()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = EquilibriumRecord.from_json(json.loads(line))
                rid = buf.append(rec)
                if rec.record_id not in (-1, rid):
                    raise ValueError(
                        f"record id {rec.record_id} does not match "
                        f"its position {rid}")
        return buf
