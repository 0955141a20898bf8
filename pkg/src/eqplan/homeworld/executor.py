"""Pure plan execution over scene graphs.

`execute_plan` deep-copies the scene, applies steps in order, and stops at
the first failing step. Object references resolve by archetype name plus id;
ids also match modulo 64 so token-bucket references resolve to the lowest
matching node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .plan import Plan, PlanStep
from .scene import (
    CAN_OPEN, CLEAN, CLEANER, CLOSE, CLOSED, CONTAINER, DIRTY, GRABBABLE,
    HAS_PLUG, HAS_SWITCH, HOLDS, INSIDE, MAX_HELD, MAX_SCENE_IDS, OFF, ON,
    ON_TOP, OPEN, PLUGGED_IN, PLUGGED_OUT, SITTABLE, SITTING, SURFACE,
    SceneGraph,
)


@dataclass
class StepTrace:
    index: int
    step: PlanStep
    ok: bool
    reason: Optional[str] = None


@dataclass
class ExecutionResult:
    scene: SceneGraph
    traces: List[StepTrace] = field(default_factory=list)
    executed_steps: int = 0
    ok: bool = True
    failed_step: Optional[int] = None
    failure_reason: Optional[str] = None


def resolve_ref(scene: SceneGraph, name: str, oid: int) -> Optional[int]:
    """Find the node with this archetype whose id matches exactly, or matches
    modulo the 64-token bucket; lowest id wins."""
    candidates = []
    for r in scene.rooms:
        if r.archetype == name:
            candidates.append(r.oid)
    for i, obj in scene.objects.items():
        if obj.archetype == name:
            candidates.append(i)
    if not candidates:
        return None
    exact = [i for i in candidates if i == oid]
    if exact:
        return exact[0]
    bucket = [i for i in candidates if i % MAX_SCENE_IDS == oid % MAX_SCENE_IDS]
    return min(bucket) if bucket else None


def _clear_close(scene: SceneGraph) -> None:
    scene.relations = {(s, rel, o) for (s, rel, o) in scene.relations
                       if not (rel == CLOSE and s == scene.character_id)}


def _add_close_around(scene: SceneGraph, target: int) -> None:
    char = scene.character_id
    scene.relations.add((char, CLOSE, target))
    for anc in scene.ancestors_of(target):
        if anc not in scene.room_ids():
            scene.relations.add((char, CLOSE, anc))
    for child in scene.children_of(target):
        scene.relations.add((char, CLOSE, child))


def _move_character_to_room(scene: SceneGraph, room_oid: int) -> None:
    char = scene.character_id
    scene.relations = {(s, rel, o) for (s, rel, o) in scene.relations
                       if not (s == char and rel == INSIDE)}
    scene.relations.add((char, INSIDE, room_oid))


def _inside_closed_container(scene: SceneGraph, oid: int) -> Optional[int]:
    for anc in scene.ancestors_of(oid):
        obj = scene.objects.get(anc)
        if obj is not None and CAN_OPEN in obj.caps and CLOSED in obj.states:
            return anc
    return None


def _apply(scene: SceneGraph, step: PlanStep) -> Tuple[bool, Optional[str]]:
    char = scene.character_id
    action = step.action

    # resolve arguments
    resolved: List[int] = []
    for ref in step.args:
        rid = resolve_ref(scene, ref.name, ref.oid)
        if rid is None:
            return False, f"<{ref.name}> ({ref.oid}) is not in the scene"
        resolved.append(rid)

    def obj(i: int):
        return scene.objects.get(resolved[i])

    def close_to(i: int) -> bool:
        return resolved[i] in scene.close_ids()

    if action == "WALK":
        if SITTING in scene.character_states:
            return False, "cannot walk while sitting"
        target = resolved[0]
        _clear_close(scene)
        if target in scene.room_ids():
            _move_character_to_room(scene, target)
        else:
            room = scene.room_of(target)
            if room is None:
                return False, f"<{step.args[0].name}> ({target}) is nowhere reachable"
            _move_character_to_room(scene, room)
            _add_close_around(scene, target)
        return True, None

    if action == "FIND":
        target = resolved[0]
        if target in scene.room_ids():
            return False, "cannot find a room"
        if scene.room_of(target) != scene.room_of(char):
            return False, f"<{step.args[0].name}> ({target}) is not in this room"
        _add_close_around(scene, target)
        return True, None

    if action == "GRAB":
        target = resolved[0]
        node = obj(0)
        if node is None or GRABBABLE not in node.caps:
            return False, "it is not grabbable"
        if target in scene.held_ids():
            return False, "it is already being held"
        if not close_to(0):
            return False, "the character is not close to it"
        blocker = _inside_closed_container(scene, target)
        if blocker is not None:
            return False, f"it is inside the closed <{scene.node_name(blocker)}> ({blocker})"
        if len(scene.held_ids()) >= MAX_HELD:
            return False, "both hands full"
        scene.relations = {(s, rel, o) for (s, rel, o) in scene.relations
                           if not (s == target and rel in (INSIDE, ON_TOP))}
        scene.relations.add((char, HOLDS, target))
        return True, None

    if action in ("OPEN", "CLOSE"):
        node = obj(0)
        if node is None or CAN_OPEN not in node.caps:
            return False, "it cannot be opened or closed"
        if not close_to(0):
            return False, "the character is not close to it"
        want, have = (OPEN, CLOSED) if action == "OPEN" else (CLOSED, OPEN)
        if want in node.states:
            return False, f"it is already {want.lower()}"
        node.states.discard(have)
        node.states.add(want)
        return True, None

    if action in ("SWITCHON", "SWITCHOFF"):
        node = obj(0)
        if node is None or HAS_SWITCH not in node.caps:
            return False, "it has no switch"
        if not close_to(0):
            return False, "the character is not close to it"
        if action == "SWITCHON":
            if ON in node.states:
                return False, "it is already on"
            if HAS_PLUG in node.caps and PLUGGED_IN not in node.states:
                return False, "it is not plugged in"
            node.states.discard(OFF)
            node.states.add(ON)
        else:
            if OFF in node.states:
                return False, "it is already off"
            node.states.discard(ON)
            node.states.add(OFF)
        return True, None

    if action in ("PLUGIN", "PLUGOUT"):
        node = obj(0)
        if node is None or HAS_PLUG not in node.caps:
            return False, "it has no plug"
        if not close_to(0):
            return False, "the character is not close to it"
        want, have = (PLUGGED_IN, PLUGGED_OUT) if action == "PLUGIN" else (PLUGGED_OUT, PLUGGED_IN)
        if want in node.states:
            return False, f"it is already {'plugged in' if want == PLUGGED_IN else 'unplugged'}"
        node.states.discard(have)
        node.states.add(want)
        return True, None

    if action in ("PUTBACK", "PUTIN"):
        item, target = resolved[0], resolved[1]
        tnode = obj(1)
        if item not in scene.held_ids():
            return False, "the character is not holding it"
        if tnode is None:
            return False, "the destination is not a placeable object"
        if not close_to(1):
            return False, "the character is not close to the destination"
        if action == "PUTBACK":
            if SURFACE not in tnode.caps:
                return False, "the destination is not a surface"
            new_rel = ON_TOP
        else:
            if CONTAINER not in tnode.caps:
                return False, "the destination is not a container"
            if CAN_OPEN in tnode.caps and CLOSED in tnode.states:
                return False, "the container is closed"
            new_rel = INSIDE
        scene.relations = {(s, rel, o) for (s, rel, o) in scene.relations
                           if not (o == item and rel == HOLDS)}
        scene.relations.add((item, new_rel, target))
        inode = scene.objects[item]
        if new_rel == INSIDE and CLEANER in tnode.caps and DIRTY in inode.states:
            inode.states.discard(DIRTY)
            inode.states.add(CLEAN)
        return True, None

    if action == "PUTOBJBACK":
        item = resolved[0]
        inode = obj(0)
        if item not in scene.held_ids():
            return False, "the character is not holding it"
        if inode is None or inode.home is None:
            return False, "it has no recorded place"
        rel, target = inode.home
        if target not in scene.close_ids() and target not in scene.room_ids():
            return False, "the character is not close to its place"
        tnode = scene.objects.get(target)
        if tnode is not None and CAN_OPEN in tnode.caps and CLOSED in tnode.states:
            return False, "its place is closed"
        scene.relations = {(s, r, o) for (s, r, o) in scene.relations
                           if not (o == item and r == HOLDS)}
        scene.relations.add((item, rel, target))
        return True, None

    if action == "SIT":
        node = obj(0)
        if node is None or SITTABLE not in node.caps:
            return False, "it cannot be sat on"
        if not close_to(0):
            return False, "the character is not close to it"
        if SITTING in scene.character_states:
            return False, "the character is already sitting"
        scene.character_states.add(SITTING)
        scene.relations.add((char, ON_TOP, resolved[0]))
        return True, None

    if action == "STANDUP":
        if SITTING not in scene.character_states:
            return False, "the character is not sitting"
        scene.character_states.discard(SITTING)
        scene.relations = {(s, rel, o) for (s, rel, o) in scene.relations
                           if not (s == char and rel == ON_TOP)}
        return True, None

    return False, f"unknown action {action}"


def execute_plan(scene: SceneGraph, plan: Plan) -> ExecutionResult:
    """Apply plan steps to a copy of the scene, stopping at the first failure."""
    work = scene.clone()
    result = ExecutionResult(scene=work)
    for idx, step in enumerate(plan.steps):
        ok, reason = _apply(work, step)
        result.traces.append(StepTrace(idx, step, ok, reason))
        if not ok:
            result.ok = False
            result.failed_step = idx
            result.failure_reason = reason
            return result
        result.executed_steps += 1
    return result
