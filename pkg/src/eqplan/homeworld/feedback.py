"""Environment feedback: parse, execute, score goals, and render one of the
four canonical feedback sentences (or the success sentence).

Categories:
  format  - the text is not a well-formed plan
  invalid - a line parses but names an unknown action or malformed arguments
  exec    - a step's preconditions fail in the scene
  goal    - the plan runs but leaves goal conditions unmet
  success - every goal condition holds after execution
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .executor import ExecutionResult, execute_plan
from .plan import parse_plan
from .scene import SceneGraph

CATEGORIES = ("format", "invalid", "exec", "goal", "success")


@dataclass
class GoalSpec:
    """Goal conditions: required object states and required relation edges.

    State entries are (object id, state name); relation entries are
    (subject id, relation, object id). State entries on the character id
    refer to the character's own states.
    """

    states: List[Tuple[int, str]] = field(default_factory=list)
    relations: List[Tuple[int, str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.states) + len(self.relations)

    def validate(self, scene: SceneGraph) -> None:
        if self.total == 0:
            raise ValueError("goal spec must contain at least one condition")
        known = set(scene.objects) | set(scene.room_ids()) | {scene.character_id}
        for oid, _state in self.states:
            if oid not in known:
                raise ValueError(f"goal state references unknown id {oid}")
        for s, _rel, o in self.relations:
            if s not in known or o not in known:
                raise ValueError(f"goal relation references unknown id ({s}, {o})")

    def to_json(self) -> Dict[str, Any]:
        return {"states": [list(t) for t in sorted(self.states)],
                "relations": [list(t) for t in sorted(self.relations)]}

    @staticmethod
    def from_json(data: Dict[str, Any]) -> "GoalSpec":
        return GoalSpec(
            states=[(int(o), str(s)) for o, s in data.get("states", [])],
            relations=[(int(s), str(r), int(o))
                       for s, r, o in data.get("relations", [])],
        )


@dataclass
class GoalReport:
    total: int
    satisfied: int
    unmet_states: List[Tuple[int, str, str]] = field(default_factory=list)
    unmet_relations: List[Tuple[int, str, int, str]] = field(default_factory=list)

    @property
    def gcr(self) -> float:
        return self.satisfied / self.total if self.total else 1.0

    @property
    def success(self) -> bool:
        return self.total > 0 and self.satisfied == self.total


@dataclass
class Feedback:
    category: str
    offending_line: Optional[str] = None
    failed_step: Optional[str] = None
    failure_reason: Optional[str] = None
    unmet_states: List[Tuple[int, str, str]] = field(default_factory=list)
    unmet_relations: List[Tuple[int, str, int, str]] = field(default_factory=list)
    gcr: Optional[float] = None
    executed: bool = False

    def to_json(self) -> Dict[str, Any]:
        return {
            "category": self.category,
            "offending_line": self.offending_line,
            "failed_step": self.failed_step,
            "failure_reason": self.failure_reason,
            "unmet_states": [list(t) for t in self.unmet_states],
            "unmet_relations": [list(t) for t in self.unmet_relations],
            "gcr": self.gcr,
            "executed": self.executed,
        }

    @staticmethod
    def from_json(data: Dict[str, Any]) -> "Feedback":
        return Feedback(
            category=data["category"],
            offending_line=data.get("offending_line"),
            failed_step=data.get("failed_step"),
            failure_reason=data.get("failure_reason"),
            unmet_states=[tuple(t) for t in data.get("unmet_states", [])],
            unmet_relations=[tuple(t) for t in data.get("unmet_relations", [])],
            gcr=data.get("gcr"),
            executed=bool(data.get("executed", False)),
        )


def evaluate_goals(scene: SceneGraph, goals: GoalSpec) -> GoalReport:
    """Check each goal condition against the scene; unmet entries carry the
    node names used in rendered feedback. Dangling ids raise (a generation
    bug, never a planning outcome)."""
    goals.validate(scene)
    report = GoalReport(total=goals.total, satisfied=0)
    for oid, state in goals.states:
        if oid == scene.character_id:
            ok = state in scene.character_states
        else:
            node = scene.objects.get(oid)
            ok = node is not None and state in node.states
        if ok:
            report.satisfied += 1
        else:
            report.unmet_states.append((oid, scene.node_name(oid), state))
    for s, rel, o in goals.relations:
        if (s, rel, o) in scene.relations:
            report.satisfied += 1
        else:
            report.unmet_relations.append(
                (s, scene.node_name(s), o, scene.node_name(o)))
    return report


def render_feedback(fb: Feedback) -> str:
    if fb.category == "format":
        return "Your output does not conform to the required format."
    if fb.category == "invalid":
        return f"Your output has an invalid command: {fb.offending_line}"
    if fb.category == "exec":
        return ("Your output is executed incorrectly in the environment. "
                f"The step {fb.failed_step} fails: {fb.failure_reason}.")
    if fb.category == "goal":
        parts = ["You have not completed this task."]
        if fb.unmet_states:
            items = "; ".join(f"({oid}, {name}) should be {state}"
                              for oid, name, state in fb.unmet_states)
            parts.append("The following objects and corresponding states "
                         f"do not meet the goals: {items}.")
        if fb.unmet_relations:
            items = "; ".join(f"({s}, {sn}) and ({o}, {on})"
                              for s, sn, o, on in fb.unmet_relations)
            parts.append(f"The following objects have wrong relative position: {items}.")
        return " ".join(parts)
    if fb.category == "success":
        return "Task success."
    raise ValueError(f"unknown feedback category: {fb.category!r}")


def env_feedback(scene: SceneGraph, goals: GoalSpec,
                 text: str) -> Tuple[Feedback, Optional[ExecutionResult]]:
    """Run the full environment loop on raw plan text."""
    parsed = parse_plan(text)
    if not parsed.ok:
        if parsed.error == "format":
            return Feedback(category="format"), None
        return Feedback(category="invalid",
                        offending_line=parsed.offending_line), None
    result = execute_plan(scene, parsed.plan)
    if not result.ok:
        trace = result.traces[result.failed_step]
        return Feedback(category="exec",
                        failed_step=trace.step.render(),
                        failure_reason=trace.reason,
                        executed=False), result
    report = evaluate_goals(result.scene, goals)
    if report.success:
        return Feedback(category="success", gcr=1.0, executed=True), result
    return Feedback(category="goal",
                    unmet_states=report.unmet_states,
                    unmet_relations=report.unmet_relations,
                    gcr=report.gcr,
                    executed=True), result
