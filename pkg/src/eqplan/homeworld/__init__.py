"""A deterministic, fully observed household world: scene graphs, a
precondition/effect action executor, goal checking, feedback rendering, and
procedural task generation with ground-truth plans."""

from .scene import (
    CAPABILITIES,
    OBJECT_CATALOG,
    RELATIONS,
    ROOM_ARCHETYPES,
    STATES,
    ObjectNode,
    Room,
    SceneGraph,
    generate_scene,
    scene_from_json,
    scene_to_json,
)
from .plan import (
    ACTIONS,
    ACTION_ARITY,
    ObjectRef,
    Plan,
    PlanStep,
    ParseResult,
    parse_plan,
    plan_to_text,
)
from .executor import ExecutionResult, StepTrace, execute_plan, resolve_ref
from .feedback import (
    CATEGORIES,
    Feedback,
    GoalReport,
    GoalSpec,
    env_feedback,
    evaluate_goals,
    render_feedback,
)
from .tasks import (
    GOAL_TEMPLATES,
    TaskRecord,
    generate_dataset,
    generate_task,
    load_dataset,
    save_dataset,
    split_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
