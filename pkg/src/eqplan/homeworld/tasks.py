"""Procedural task generation with verified ground-truth plans.

Each task instantiates one of nine goal-template families, derives a
ground-truth plan by chaining backward over action preconditions (opening
blocking containers, plugging in devices, approaching before interacting),
and is kept only if replaying that plan from the initial scene yields
Success with a length in [4, 24] steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .executor import _apply, _inside_closed_container
from .feedback import GoalSpec, env_feedback, evaluate_goals
from .plan import END_MARK, ObjectRef, PlanStep
from .scene import (
    CAN_OPEN, CLEANER, CLOSED, CONTAINER, DIRTY, GRABBABLE, HAS_PLUG,
    HAS_SWITCH, OFF, ON, ON_TOP, INSIDE, PLUGGED_IN, PLUGGED_OUT, SITTABLE,
    SITTING, SURFACE, SceneGraph, generate_scene, scene_from_json,
    scene_to_json,
)

GOAL_TEMPLATES = (
    "place_on", "place_in", "device_on", "device_off", "clean",
    "gather_on", "stow_in", "open_container", "sit_on",
)

_TEMPLATE_WEIGHTS = {
    "place_on": 0.16, "place_in": 0.16, "device_on": 0.08,
    "device_off": 0.06, "clean": 0.14, "gather_on": 0.14,
    "stow_in": 0.12, "open_container": 0.06, "sit_on": 0.08,
}

MIN_GT_STEPS = 4
MAX_GT_STEPS = 24
MAX_TEMPLATE_DRAWS = 50


@dataclass
class TaskRecord:
    task_id: str
    scene_id: str
    template: str
    instruction: str
    scene: SceneGraph
    goals: GoalSpec
    gt_plan: List[str]
    split: str = ""

    def gt_text(self) -> str:
        return "\n".join(self.gt_plan + [END_MARK])

    def to_json(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "scene_id": self.scene_id,
            "split": self.split,
            "template": self.template,
            "instruction": self.instruction,
            "scene": scene_to_json(self.scene),
            "goals": self.goals.to_json(),
            "gt_plan": list(self.gt_plan),
        }

    @staticmethod
    def from_json(data: Dict[str, Any]) -> "TaskRecord":
        return TaskRecord(
            task_id=data["task_id"],
            scene_id=data["scene_id"],
            template=data["template"],
            instruction=data["instruction"],
            scene=scene_from_json(data["scene"]),
            goals=GoalSpec.from_json(data["goals"]),
            gt_plan=list(data["gt_plan"]),
            split=data.get("split", ""),
        )


class _PlanBuilder:
    """Accumulates steps while tracking their effect on a working copy, so
    later steps see the world exactly as the executor will."""

    def __init__(self, scene: SceneGraph):
        self.work = scene.clone()
        self.steps: List[PlanStep] = []
        self.ok = True

    def _ref(self, oid: int) -> ObjectRef:
        return ObjectRef(self.work.node_name(oid), oid)

    def emit(self, action: str, *oids: int) -> bool:
        if not self.ok:
            return False
        step = PlanStep(action, tuple(self._ref(o) for o in oids))
        good, _reason = _apply(self.work, step)
        if good:
            self.steps.append(step)
        else:
            self.ok = False
        return good

    def approach(self, oid: int) -> bool:
        room = self.work.room_of(oid)
        if room is None:
            self.ok = False
            return False
        return (self.emit("WALK", room) and self.emit("WALK", oid)
                and self.emit("FIND", oid))

    def grab(self, oid: int) -> bool:
        blocker = _inside_closed_container(self.work, oid)
        if blocker is not None:
            if not (self.approach(blocker) and self.emit("OPEN", blocker)):
                return False
        return self.approach(oid) and self.emit("GRAB", oid)

    def put_on(self, item: int, surface: int) -> bool:
        return self.approach(surface) and self.emit("PUTBACK", item, surface)

    def put_in(self, item: int, container: int) -> bool:
        if not self.approach(container):
            return False
        node = self.work.objects[container]
        if CAN_OPEN in node.caps and CLOSED in node.states:
            if not self.emit("OPEN", container):
                return False
        return self.emit("PUTIN", item, container)

    def rendered(self) -> List[str]:
        return [s.render() for s in self.steps]


def _with_cap(scene: SceneGraph, cap: str) -> List[int]:
    return sorted(i for i, node in scene.objects.items() if cap in node.caps)


def _pick(rng: np.random.Generator, items: Sequence[int]) -> int:
    return int(items[int(rng.integers(len(items)))])


def _name(scene: SceneGraph, oid: int) -> str:
    return scene.node_name(oid)


def _instantiate(scene: SceneGraph, template: str,
                 rng: np.random.Generator
                 ) -> Optional[Tuple[str, GoalSpec, List[str]]]:
    """Sample concrete objects for the template and derive the plan.
    Returns None when the scene offers no valid instantiation."""
    b = _PlanBuilder(scene)
    grabbables = _with_cap(scene, GRABBABLE)
    surfaces = _with_cap(scene, SURFACE)
    bins = [i for i in _with_cap(scene, CONTAINER)
            if CLEANER not in scene.objects[i].caps]

    if template == "place_on":
        pairs = [(x, y) for x in grabbables for y in surfaces
                 if x != y and (x, ON_TOP, y) not in scene.relations]
        if not pairs:
            return None
        x, y = pairs[int(rng.integers(len(pairs)))]
        if not (b.grab(x) and b.put_on(x, y)):
            return None
        goals = GoalSpec(relations=[(x, ON_TOP, y)])
        text = f"Put the {_name(scene, x)} ({x}) on the {_name(scene, y)} ({y})."
        return text, goals, b.rendered()

    if template == "place_in":
        pairs = [(x, y) for x in grabbables for y in bins
                 if x != y and (x, INSIDE, y) not in scene.relations]
        if not pairs:
            return None
        x, y = pairs[int(rng.integers(len(pairs)))]
        if not (b.grab(x) and b.put_in(x, y)):
            return None
        goals = GoalSpec(relations=[(x, INSIDE, y)])
        text = f"Put the {_name(scene, x)} ({x}) in the {_name(scene, y)} ({y})."
        return text, goals, b.rendered()

    if template in ("device_on", "device_off"):
        want_off = template == "device_off"
        state_needed = ON if want_off else OFF
        devices = [i for i in _with_cap(scene, HAS_SWITCH)
                   if state_needed in scene.objects[i].states]
        if not devices:
            return None
        x = _pick(rng, devices)
        node = scene.objects[x]
        if not b.approach(x):
            return None
        states = []
        if want_off:
            if not b.emit("SWITCHOFF", x):
                return None
            states.append((x, OFF))
        else:
            if HAS_PLUG in node.caps and PLUGGED_OUT in node.states:
                if not b.emit("PLUGIN", x):
                    return None
            if not b.emit("SWITCHON", x):
                return None
            states.append((x, ON))
            if HAS_PLUG in node.caps:
                states.append((x, PLUGGED_IN))
        verb = "off" if want_off else "on"
        text = f"Turn {verb} the {_name(scene, x)} ({x})."
        return text, GoalSpec(states=states), b.rendered()

    if template == "clean":
        sinks = [i for i in _with_cap(scene, CLEANER)
                 if CONTAINER in scene.objects[i].caps]
        dirty = [i for i in grabbables if DIRTY in scene.objects[i].states]
        if not sinks or not dirty:
            return None
        x = _pick(rng, dirty)
        s = _pick(rng, sinks)
        if not (b.grab(x) and b.put_in(x, s)):
            return None
        goals = GoalSpec(states=[(x, "CLEAN")], relations=[(x, INSIDE, s)])
        text = f"Clean the {_name(scene, x)} ({x}) in the {_name(scene, s)} ({s})."
        return text, goals, b.rendered()

    if template == "gather_on":
        if not surfaces:
            return None
        y = _pick(rng, surfaces)
        pool = [x for x in grabbables
                if x != y and (x, ON_TOP, y) not in scene.relations]
        count = 2 if rng.random() < 0.6 else 3
        if len(pool) < count:
            return None
        xs = sorted(int(v) for v in rng.choice(pool, size=count, replace=False))
        if count == 2:
            if not (b.grab(xs[0]) and b.grab(xs[1]) and b.put_on(xs[0], y)
                    and b.emit("PUTBACK", xs[1], y)):
                return None
        else:
            if not (b.grab(xs[0]) and b.grab(xs[1]) and b.put_on(xs[0], y)
                    and b.emit("PUTBACK", xs[1], y) and b.grab(xs[2])
                    and b.put_on(xs[2], y)):
                return None
        goals = GoalSpec(relations=[(x, ON_TOP, y) for x in xs])
        names = ", ".join(f"{_name(scene, x)} ({x})" for x in xs)
        text = f"Gather the {names} onto the {_name(scene, y)} ({y})."
        return text, goals, b.rendered()

    if template == "stow_in":
        if not bins:
            return None
        y = _pick(rng, bins)
        pool = [x for x in grabbables
                if x != y and (x, INSIDE, y) not in scene.relations]
        if len(pool) < 2:
            return None
        xs = sorted(int(v) for v in rng.choice(pool, size=2, replace=False))
        if not (b.grab(xs[0]) and b.grab(xs[1]) and b.put_in(xs[0], y)
                and b.emit("PUTIN", xs[1], y)):
            return None
        goals = GoalSpec(relations=[(x, INSIDE, y) for x in xs])
        text = (f"Put the {_name(scene, xs[0])} ({xs[0]}) and the "
                f"{_name(scene, xs[1])} ({xs[1]}) away in the "
                f"{_name(scene, y)} ({y}).")
        return text, goals, b.rendered()

    if template == "open_container":
        closed = [i for i in _with_cap(scene, CAN_OPEN)
                  if CLOSED in scene.objects[i].states]
        if not closed:
            return None
        x = _pick(rng, closed)
        if not (b.approach(x) and b.emit("OPEN", x)):
            return None
        goals = GoalSpec(states=[(x, "OPEN")])
        text = f"Open the {_name(scene, x)} ({x})."
        return text, goals, b.rendered()

    if template == "sit_on":
        seats = _with_cap(scene, SITTABLE)
        if not seats:
            return None
        x = _pick(rng, seats)
        if not (b.approach(x) and b.emit("SIT", x)):
            return None
        goals = GoalSpec(states=[(scene.character_id, SITTING)],
                         relations=[(scene.character_id, ON_TOP, x)])
        text = f"Sit on the {_name(scene, x)} ({x})."
        return text, goals, b.rendered()

    raise ValueError(f"unknown goal template: {template!r}")


def generate_task(scene: SceneGraph, seed: int,
                  template: Optional[str] = None) -> TaskRecord:
    """Draw templates until one instantiates with a verified plan of 4-24
    steps whose replay yields Success. Raises after 50 failed draws."""
    rng = np.random.default_rng(seed)
    weights = np.array([_TEMPLATE_WEIGHTS[t] for t in GOAL_TEMPLATES])
    weights = weights / weights.sum()
    for _ in range(MAX_TEMPLATE_DRAWS):
        tpl = template or str(rng.choice(list(GOAL_TEMPLATES), p=weights))
        made = _instantiate(scene, tpl, rng)
        if made is None:
            continue
        instruction, goals, steps = made
        if not (MIN_GT_STEPS <= len(steps) <= MAX_GT_STEPS):
            continue
        if evaluate_goals(scene, goals).success:
            continue
        text = "\n".join(steps + [END_MARK])
        fb, _result = env_feedback(scene, goals, text)
        if fb.category != "success":
            continue
        return TaskRecord(
            task_id=f"{scene.scene_id}-{seed}",
            scene_id=scene.scene_id,
            template=tpl,
            instruction=instruction,
            scene=scene,
            goals=goals,
            gt_plan=steps,
        )
    raise ValueError(
        f"no achievable task after {MAX_TEMPLATE_DRAWS} template draws "
        f"in scene {scene.scene_id}")


def generate_dataset(n_tasks: int, seed: int, n_scenes: int = 6,
                     size: str = "small") -> List[TaskRecord]:
    """Generate scenes, then tasks round-robin across them."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        scene_seed = int(rng.integers(2**31))
        scenes.append(generate_scene(scene_seed, size=size, scene_id=f"S{i}"))
    tasks: List[TaskRecord] = []
    for idx in range(n_tasks):
        scene = scenes[idx % n_scenes]
        task = generate_task(scene, seed=int(rng.integers(2**31)))
        task.task_id = f"t{idx:05d}"
        tasks.append(task)
    return tasks


def split_dataset(tasks: List[TaskRecord], seed: int
                  ) -> Dict[str, List[TaskRecord]]:
    """Hold out whole scenes and whole template families.

    train        = seen scene,     seen template
    novel_scene  = held-out scene, seen template
    novel_task   = seen scene,     held-out template
    novel_both   = held-out scene, held-out template
    Held-out counts are chosen so the train share lands nearest 50%.
    """
    scenes = sorted({t.scene_id for t in tasks})
    templates = sorted({t.template for t in tasks})
    if len(scenes) < 4:
        raise ValueError(f"need tasks from >= 4 scenes, got {len(scenes)}")
    if len(templates) < 8:
        raise ValueError(
            f"need >= 8 goal-template families, got {len(templates)}")
    rng = np.random.default_rng(seed)
    scenes = list(rng.permutation(scenes))
    templates = list(rng.permutation(templates))

    half = len(tasks) / 2.0
    best = None
    for ns in range(1, len(scenes)):
        for nt in range(1, len(templates)):
            held_s = set(scenes[:ns])
            held_t = set(templates[:nt])
            counts = {"train": 0, "novel_scene": 0,
                      "novel_task": 0, "novel_both": 0}
            for t in tasks:
                s_out = t.scene_id in held_s
                t_out = t.template in held_t
                key = ("novel_both" if s_out and t_out else
                       "novel_scene" if s_out else
                       "novel_task" if t_out else "train")
                counts[key] += 1
            empty = sum(1 for v in counts.values() if v == 0)
            score = (empty, abs(counts["train"] - half))
            if best is None or score < best[0]:
                best = (score, held_s, held_t)
    _, held_s, held_t = best

    out: Dict[str, List[TaskRecord]] = {
        "train": [], "novel_scene": [], "novel_task": [], "novel_both": []}
    for t in tasks:
        s_out = t.scene_id in held_s
        t_out = t.template in held_t
        key = ("novel_both" if s_out and t_out else
               "novel_scene" if s_out else
               "novel_task" if t_out else "train")
        t.split = key
        out[key].append(t)
    return out


def save_dataset(tasks: List[TaskRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def load_dataset(path: str) -> List[TaskRecord]:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                tasks.append(TaskRecord.from_json(json.loads(line)))
    return tasks
