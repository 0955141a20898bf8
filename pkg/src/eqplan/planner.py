"""Closed-loop planning: repeated self-refinement to a fixed point (inner
loop), then feedback acquisition from the environment or the learned feedback
predictor (outer loop), reusing each settled plan as the next start point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fixedpoint import detect_sequence_fixed_point
from .homeworld.feedback import Feedback, GoalSpec, evaluate_goals, env_feedback
from .homeworld.scene import MAX_SCENE_IDS, STATES, SceneGraph
from .homeworld.tasks import TaskRecord
from .refiner import (GREEDY, DecodePolicy, PromptOverflowError, RefinerModel,
                      decode_plan, encode_prompt)

ENV = "ENV"
WORLD_MODEL = "WORLD_MODEL"

SCHEDULES = ("none", "env", "wm", "both")


@dataclass(frozen=True)
class ContextEntry:
    plan_text: str
    feedback: Feedback
    source: str

    def to_json(self) -> Dict[str, Any]:
        return {"plan_text": self.plan_text,
                "feedback": self.feedback.to_json(),
                "source": self.source}

    @staticmethod
    def from_json(data: Dict[str, Any]) -> "ContextEntry":
        return ContextEntry(plan_text=data["plan_text"],
                            feedback=Feedback.from_json(data["feedback"]),
                            source=data["source"])


class ContextHistory:
    """Ordered (plan, feedback) entries, most recent first; prepend returns a
    new history, entries are never mutated."""

    def __init__(self, entries: Sequence[ContextEntry] = ()):
        self._entries: Tuple[ContextEntry, ...] = tuple(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i: int) -> ContextEntry:
        return self._entries[i]

    def prepend(self, entry: ContextEntry) -> "ContextHistory":
        return ContextHistory((entry,) + self._entries)

    def feedbacks(self) -> List[Feedback]:
        return [e.feedback for e in self._entries]

    def sources(self) -> List[str]:
        return [e.source for e in self._entries]

    def to_json(self) -> List[Dict[str, Any]]:
        return [e.to_json() for e in self._entries]

    @staticmethod
    def from_json(data: Sequence[Dict[str, Any]]) -> "ContextHistory":
        return ContextHistory([ContextEntry.from_json(d) for d in data])


@dataclass(frozen=True)
class PlannerConfig:
    outer_bound: int = 10          # feedback acquisitions per episode
    inner_bound: int = 8           # refinements per settling attempt
    cycle_cap: int = 4
    schedule: str = "env"          # none | env | wm | both
    alternate_env_first: bool = True
    first_step_topk: int = 10      # sampled width for the very first call
    noise_ratio: float = 0.0
    max_new_tokens: int = 96
    truncate_illegal: bool = False

    def __post_init__(self):
        if self.outer_bound < 1 or self.inner_bound < 1 or self.cycle_cap < 1:
            raise ValueError("planner bounds must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown feedback schedule {self.schedule!r}")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ValueError("noise ratio must lie in [0, 1]")

    def sources(self) -> List[str]:
        if self.schedule == "none":
            return []
        if self.schedule == "env":
            return [ENV] * self.outer_bound
        if self.schedule == "wm":
            return [WORLD_MODEL] * self.outer_bound
        first, second = ((ENV, WORLD_MODEL) if self.alternate_env_first
                         else (WORLD_MODEL, ENV))
        return [first if t % 2 == 0 else second
                for t in range(self.outer_bound)]


@dataclass
class OuterStep:
    outer_idx: int
    inner_iters: int
    source: str
    feedback: Feedback
    plan_text: str
    context_before: List[Dict[str, Any]]

    def trace_json(self, task_id: str) -> Dict[str, Any]:
        return {"task_id": task_id, "outer_idx": self.outer_idx,
                "inner_iters": self.inner_iters, "source": self.source,
                "feedback_category": self.feedback.category,
                "plan_text": self.plan_text}


@dataclass
class EpisodeResult:
    task_id: str
    final_plan_text: str
    context: ContextHistory
    inner_counts: List[int]
    env_interactions: int
    refiner_calls: int
    outcome: Feedback
    executed: bool
    success: bool
    gcr: float
    steps: List[OuterStep] = field(default_factory=list)


# ---------------------------------------------------------------------------
# scoring


def score_plan(scene: SceneGraph, goals: GoalSpec, plan_text: str,
               truncate_illegal: bool = False):
    """Execute and grade a plan. Returns (feedback, executed, gcr, success).

    With truncate_illegal, a plan that fails mid-execution is graded as its
    executed prefix: the prefix counts as fully executed and goals are
    checked on the resulting state."""
    fb, exec_res = env_feedback(scene, goals, plan_text)
    if exec_res is None:  # format/invalid: nothing ran
        report = evaluate_goals(scene, goals)
        return fb, False, report.gcr, False
    report = evaluate_goals(exec_res.scene, goals)
    executed = exec_res.ok
    if truncate_illegal and not executed and exec_res.executed_steps > 0:
        executed = True
    success = executed and report.success
    return fb, executed, report.gcr, success


# ---------------------------------------------------------------------------
# feedback corruption (robustness protocol)


def inject_feedback_noise(fb: Feedback, ratio: float,
                          rng: np.random.Generator) -> Feedback:
    """With probability `ratio`, replace the feedback with a corrupted one:
    either a different category or the same goal report over substituted
    objects. Draws exactly one uniform variate per call."""
    if rng.random() >= ratio:
        return fb
    if fb.category == "goal" and (fb.unmet_states or fb.unmet_relations) \
            and rng.random() < 0.5:
        states = [((int(o) + 1 + int(rng.integers(0, MAX_SCENE_IDS - 1)))
                   % MAX_SCENE_IDS, n,
                   str(rng.choice([s for s in STATES if s != st])))
                  for o, n, st in fb.unmet_states]
        relations = [((int(s) + 1 + int(rng.integers(0, MAX_SCENE_IDS - 1)))
                      % MAX_SCENE_IDS, sn,
                      (int(o) + 1 + int(rng.integers(0, MAX_SCENE_IDS - 1)))
                      % MAX_SCENE_IDS, on)
                     for s, sn, o, on in fb.unmet_relations]
        return Feedback(category="goal", unmet_states=states,
                        unmet_relations=relations, gcr=fb.gcr, executed=True)
    other = [c for c in ("format", "invalid", "exec", "goal", "success")
             if c != fb.category]
    cat = str(rng.choice(other))
    if cat == "exec":
        return Feedback(category="exec", failed_step="[WALK]",
                        failure_reason="corrupted")
    if cat == "goal":
        oid = int(rng.integers(0, MAX_SCENE_IDS))
        st = str(rng.choice(STATES))
        return Feedback(category="goal", gcr=0.0, executed=True,
                        unmet_states=[(oid, "object", st)])
    if cat == "success":
        return Feedback(category="success", gcr=1.0, executed=True)
    return Feedback(category=cat)


# ---------------------------------------------------------------------------
# the nested loops


def inner_loop(model: RefinerModel, task: TaskRecord,
               context: ContextHistory, start_tokens: Sequence[int],
               cfg: PlannerConfig,
               first_policy: Optional[DecodePolicy] = None
               ) -> Tuple[List[int], int]:
    """Refine the model's own output with the context frozen, until the plan
    sequence settles (exact repeat or short cycle) or the bound is reached.
    Returns (last plan tokens, refiner calls)."""
    vocab = model.vocab
    fb_list = context.feedbacks()
    draft = [int(t) for t in start_tokens]
    history: List[Tuple[int, ...]] = [tuple(draft)]
    iters = 0
    greedy = DecodePolicy(mode="greedy", max_new_tokens=cfg.max_new_tokens)
    for i in range(cfg.inner_bound):
        policy = first_policy if (i == 0 and first_policy) else greedy
        prompt = encode_prompt(vocab, task, task.scene, fb_list, draft,
                               window=model.cfg.window)
        draft = model.generate(prompt, policy).tokens
        iters += 1
        history.append(tuple(draft))
        if detect_sequence_fixed_point(history, cfg.cycle_cap).settled:
            break
    return draft, iters


def plan_task(model: RefinerModel, task: TaskRecord, cfg: PlannerConfig,
              world_model=None, seed: int = 0) -> EpisodeResult:
    """Run one episode: settle, acquire feedback, repeat; finally grade the
    settled plan against the real environment."""
    if cfg.schedule in ("wm", "both") and world_model is None:
        raise ValueError(f"schedule {cfg.schedule!r} needs a world model")
    vocab = model.vocab
    scene, goals = task.scene, task.goals
    noise_rng = np.random.default_rng([seed, 1])
    first_policy = None
    if cfg.first_step_topk > 1:
        first_policy = DecodePolicy(mode="topk", k=cfg.first_step_topk,
                                    seed=int(np.random.default_rng(
                                        [seed, 2]).integers(2 ** 31)),
                                    max_new_tokens=cfg.max_new_tokens)

    context = ContextHistory()
    x_tokens: List[int] = []
    inner_counts: List[int] = []
    steps: List[OuterStep] = []
    env_count = 0
    refiner_calls = 0
    scored: Optional[Tuple[int, ...]] = None  # last env-executed plan
    seen: set = set()

    for outer_idx, source in enumerate(cfg.sources(), start=1):
        x_tokens, iters = inner_loop(
            model, task, context, x_tokens, cfg,
            first_policy if outer_idx == 1 else None)
        inner_counts.append(iters)
        refiner_calls += iters
        plan_text = decode_plan(vocab, x_tokens, scene)
        if source == ENV:
            fb, _res = env_feedback(scene, goals, plan_text)
            env_count += 1
            scored = tuple(x_tokens)
        else:
            fb = world_model.predict_feedback(task, scene, plan_text)
        steps.append(OuterStep(outer_idx, iters, source, fb, plan_text,
                               context.to_json()))
        if fb.category == "success":
            if source != ENV:
                # verify the predicted success against the real environment
                fb, _res = env_feedback(scene, goals, plan_text)
                env_count += 1
                scored = tuple(x_tokens)
                source = ENV
            context = context.prepend(ContextEntry(plan_text, fb, source))
            break
        key = (tuple(x_tokens), fb.category)
        if key in seen:  # repeated (plan, verdict): the outer loop has settled
            context = context.prepend(ContextEntry(plan_text, fb, source))
            break
        seen.add(key)
        entered = (inject_feedback_noise(fb, cfg.noise_ratio, noise_rng)
                   if cfg.noise_ratio > 0 else fb)
        context = context.prepend(ContextEntry(plan_text, entered, source))

    if not steps:  # schedule "none": one settling pass, no feedback acquired
        x_tokens, iters = inner_loop(model, task, context, x_tokens, cfg,
                                     first_policy)
        inner_counts.append(iters)
        refiner_calls += iters

    # Final grading. Execution is deterministic, so re-running an already
    # scored plan is pure recomputation, not a new interaction.
    final_text = decode_plan(vocab, x_tokens, scene)
    score_fb, executed, gcr, success = score_plan(
        scene, goals, final_text, truncate_illegal=cfg.truncate_illegal)
    if scored != tuple(x_tokens):
        env_count += 1
        context = context.prepend(ContextEntry(final_text, score_fb, ENV))

    return EpisodeResult(
        task_id=task.task_id,
        final_plan_text=final_text,
        context=context,
        inner_counts=inner_counts,
        env_interactions=env_count,
        refiner_calls=refiner_calls,
        outcome=score_fb,
        executed=executed,
        success=success,
        gcr=gcr,
        steps=steps,
    )


def write_trace(episodes: Sequence[EpisodeResult], path: str) -> None:
    """One JSON line per outer iteration across all episodes."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            for step in ep.steps:
                fh.write(json.dumps(step.trace_json(ep.task_id),
                                    sort_keys=True) + "\n")
