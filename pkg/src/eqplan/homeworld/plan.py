"""Plan text format and parsing.

A plan is one action per line, `[ACTION] <name> (id)` with zero, one or two
object arguments, terminated by a final `[END]` line:

    [WALK] <kitchen> (2)
    [GRAB] <cup> (17)
    [PUTBACK] <cup> (17) <table> (9)
    [END]

Parsing distinguishes two failure categories: structurally broken output
(no recognizable action lines, missing END) and invalid commands (a known
line shape whose action is unknown or whose argument count is wrong).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

ACTION_ARITY = {
    "WALK": 1,
    "FIND": 1,
    "GRAB": 1,
    "OPEN": 1,
    "CLOSE": 1,
    "SWITCHON": 1,
    "SWITCHOFF": 1,
    "PUTBACK": 2,
    "PUTIN": 2,
    "PUTOBJBACK": 1,
    "SIT": 1,
    "STANDUP": 0,
    "PLUGIN": 1,
    "PLUGOUT": 1,
}
ACTIONS = tuple(sorted(ACTION_ARITY))

END_MARK = "[END]"

_LINE_RE = re.compile(r"^\[([A-Za-z_]+)\]\s*(.*)$")
_ARG_RE = re.compile(r"<([A-Za-z_][A-Za-z_0-9]*)>\s*\((\d+)\)")


@dataclass(frozen=True)
class ObjectRef:
    name: str
    oid: int

    def render(self) -> str:
        return f"<{self.name}> ({self.oid})"


@dataclass(frozen=True)
class PlanStep:
    action: str
    args: Tuple[ObjectRef, ...] = ()

    def render(self) -> str:
        parts = [f"[{self.action}]"] + [a.render() for a in self.args]
        return " ".join(parts)


@dataclass
class Plan:
    steps: List[PlanStep] = field(default_factory=list)
    terminated: bool = True


@dataclass
class ParseResult:
    ok: bool
    plan: Optional[Plan] = None
    error: Optional[str] = None          # "format" | "invalid"
    offending_line: Optional[str] = None


def plan_to_text(plan: Plan) -> str:
    lines = [s.render() for s in plan.steps]
    if plan.terminated:
        lines.append(END_MARK)
    return "\n".join(lines)


def parse_plan(text: str) -> ParseResult:
    """Parse canonical plan text. Unknown action or wrong argument count is
    an invalid command carrying the offending line; anything structurally
    broken (unparseable line, missing END) is a format failure."""
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    steps: List[PlanStep] = []
    saw_end = False
    for raw in lines:
        if raw == END_MARK:
            saw_end = True
            break
        m = _LINE_RE.match(raw)
        if not m:
            return ParseResult(False, error="format", offending_line=raw)
        action = m.group(1).upper()
        rest = m.group(2).strip()
        args = [ObjectRef(a.lower(), int(i)) for a, i in _ARG_RE.findall(rest)]
        leftover = _ARG_RE.sub("", rest).strip()
        if action not in ACTION_ARITY:
            return ParseResult(False, error="invalid", offending_line=raw)
        if leftover or len(args) != ACTION_ARITY[action]:
            return ParseResult(False, error="invalid", offending_line=raw)
        steps.append(PlanStep(action, tuple(args)))
    if not saw_end:
        return ParseResult(False, error="format",
                           offending_line=lines[-1] if lines else "")
    if not steps:
        return ParseResult(False, error="format", offending_line=END_MARK)
    return ParseResult(True, plan=Plan(steps=steps, terminated=True))
