"""Training pipelines.

Equilibrium mode alternates two phases per iteration: (a) run the planner
over the training tasks with the current weights, caching every settled plan
together with the context it was produced under; (b) supervised updates that
map each cached equilibrium (as the draft) to its task's ground-truth plan.
Phase (a) never differentiates — plans come from the plain decode path.

Supervised mode spends the identical optimizer-step budget on plain
(empty draft, empty context) -> ground-truth pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .eqgrad import Adam
from .numerics import NumericsError
from .homeworld.feedback import Feedback
from .homeworld.tasks import TaskRecord
from .memory import EquilibriumRecord, MemoryBuffer
from .planner import PlannerConfig, plan_task
from .refiner import (PromptOverflowError, RefinerModel, Vocabulary,
                      encode_prompt, make_batch, plan_tokens_from_text,
                      task_tokens, scene_tokens)
from .worldmodel import WorldModel, build_wm_dataset, loose_plan_tokens


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 6
    learning_rate: float = 2e-4
    batch_size: int = 32
    train_outer_bound: int = 3
    seed: int = 0
    mode: str = "equilibrium"      # equilibrium | supervised
    warmup_epochs: int = 1
    warmup_lr: float = 1e-3
    task_cap: Optional[int] = None  # phase (a) tasks per iteration
    steps_per_iteration: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 0 or self.warmup_epochs < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.learning_rate <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.train_outer_bound < 1:
            raise ValueError("batch size and outer bound must be >= 1")
        if self.mode not in ("equilibrium", "supervised"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class TrainLogEntry:
    iteration: int
    phase: str
    mean_loss: float
    memory_size: int
    env_interactions: int

    def to_json(self) -> Dict:
        return {"iteration": self.iteration, "phase": self.phase,
                "mean_loss": self.mean_loss, "memory_size": self.memory_size,
                "env_interactions": self.env_interactions}


def save_metrics(entries: Sequence[TrainLogEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pair construction


def gt_target_tokens(vocab: Vocabulary, task: TaskRecord) -> List[int]:
    toks = plan_tokens_from_text(vocab, task.gt_text())
    if toks is None:
        raise ValueError(f"task {task.task_id} has an unparseable plan")
    return toks


def fit_training_pair(vocab: Vocabulary, window: int, task: TaskRecord,
                      feedbacks: Sequence[Feedback],
                      draft: Sequence[int],
                      target: Sequence[int]) -> Tuple[List[int], List[int]]:
    """Encode a prompt so that prompt+target fits the training window.
    Feedback entries are dropped first (oldest first, as at inference); if
    the draft still does not fit, its tail is clipped."""
    budget = window + 1 - len(target)
    try:
        prompt = encode_prompt(vocab, task, task.scene, feedbacks, draft,
                               window=budget)
    except PromptOverflowError:
        fixed = 5 + len(task_tokens(vocab, task)) \
            + len(scene_tokens(vocab, task.scene))
        room = budget - fixed
        if room < 0:
            raise
        prompt = encode_prompt(vocab, task, task.scene, [],
                               list(draft)[:room], window=budget)
    return prompt, list(target)


def build_supervised_pairs(vocab: Vocabulary, tasks: Sequence[TaskRecord],
                           window: int) -> List[Tuple[List[int], List[int]]]:
    pairs = []
    for task in tasks:
        target = gt_target_tokens(vocab, task)
        pairs.append(fit_training_pair(vocab, window, task, [], [], target))
    return pairs


def build_equilibrium_pairs(vocab: Vocabulary,
                            records: Sequence[EquilibriumRecord],
                            tasks_by_id: Dict[str, TaskRecord],
                            window: int) -> List[Tuple[List[int], List[int]]]:
    """Each cached equilibrium becomes the draft the refiner must map to the
    ground truth, under the same context it originally saw."""
    pairs = []
    for rec in records:
        task = tasks_by_id[rec.task_id]
        target = gt_target_tokens(vocab, task)
        draft = loose_plan_tokens(vocab, rec.plan_text)
        feedbacks = [Feedback.from_json(e["feedback"]) for e in rec.context]
        pairs.append(fit_training_pair(vocab, window, task, feedbacks,
                                       draft, target))
    return pairs


# ---------------------------------------------------------------------------
# optimization helpers


def _epoch_steps(n_pairs: int, batch_size: int) -> int:
    return max(1, math.ceil(n_pairs / batch_size))


def _update_on_pairs(model: RefinerModel, optimizer: Adam,
                     pairs: Sequence[Tuple[List[int], List[int]]],
                     batch_size: int, n_steps: int,
                     rng: np.random.Generator) -> Tuple[float, int]:
    """n_steps updates over uniformly drawn batches; returns (mean loss over
    finite batches, skipped batch count)."""
    losses: List[float] = []
    skipped = 0
    for _ in range(n_steps):
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)),
                         replace=len(pairs) < batch_size)
        batch = [pairs[int(i)] for i in idx]
        ids, tgt = make_batch(model.vocab, batch, window=model.cfg.window)
        try:
            loss, grads = model.loss_and_grads(ids, tgt)
        except NumericsError:
            skipped += 1
            continue
        if not np.isfinite(loss):
            skipped += 1
            continue
        optimizer.step(model.params, grads)
        losses.append(loss)
    mean = float(np.mean(losses)) if losses else float("nan")
    return mean, skipped


def _warmup(model: RefinerModel, tasks: Sequence[TaskRecord],
            cfg: TrainConfig, log: List[TrainLogEntry],
            memory_size: int = 0) -> None:
    """Plain supervised epochs logged as iteration 0. An untrained decoder
    emits noise, so both modes start from the same grounding."""
    if cfg.warmup_epochs == 0:
        return
    pairs = build_supervised_pairs(model.vocab, tasks, model.cfg.window)
    optimizer = Adam(cfg.warmup_lr)
    rng = np.random.default_rng([cfg.seed, 100])
    steps = _epoch_steps(len(pairs), cfg.batch_size) * cfg.warmup_epochs
    mean, _sk = _update_on_pairs(model, optimizer, pairs, cfg.batch_size,
                                 steps, rng)
    log.append(TrainLogEntry(0, "warmup", mean, memory_size, 0))


# ---------------------------------------------------------------------------
# pipelines


def train_supervised(model: RefinerModel, tasks: Sequence[TaskRecord],
                     cfg: TrainConfig) -> List[TrainLogEntry]:
    """Ground-truth finetuning on (empty draft, empty context) pairs with the
    same optimizer-step budget as equilibrium mode."""
    log: List[TrainLogEntry] = []
    _warmup(model, tasks, cfg, log)
    pairs = build_supervised_pairs(model.vocab, tasks, model.cfg.window)
    optimizer = Adam(cfg.learning_rate)
    steps = cfg.steps_per_iteration or _epoch_steps(len(pairs), cfg.batch_size)
    for it in range(1, cfg.iterations + 1):
        rng = np.random.default_rng([cfg.seed, 200, it])
        mean, _sk = _update_on_pairs(model, optimizer, pairs, cfg.batch_size,
                                     steps, rng)
        log.append(TrainLogEntry(it, "supervised", mean, 0, 0))
    return log


def train_equilibrium(model: RefinerModel, tasks: Sequence[TaskRecord],
                      memory: MemoryBuffer,
                      cfg: TrainConfig) -> List[TrainLogEntry]:
    """Alternating solve/supervise: collect equilibria with the current
    weights, then map decay-sampled equilibria to their ground truths."""
    log: List[TrainLogEntry] = []
    _warmup(model, tasks, cfg, log)
    tasks_by_id = {t.task_id: t for t in tasks}
    optimizer = Adam(cfg.learning_rate)
    steps = cfg.steps_per_iteration or _epoch_steps(len(tasks), cfg.batch_size)
    plan_cfg = PlannerConfig(outer_bound=cfg.train_outer_bound,
                             schedule="env")
    total_env = 0
    for it in range(1, cfg.iterations + 1):
        # phase (a): plan with frozen weights, cache every settled plan
        rng = np.random.default_rng([cfg.seed, 300, it])
        order = rng.permutation(len(tasks))
        if cfg.task_cap is not None:
            order = order[:cfg.task_cap]
        env_inter = 0
        for j in order:
            task = tasks[int(j)]
            ep = plan_task(model, task, plan_cfg,
                           seed=int(np.random.default_rng(
                               [cfg.seed, it, int(j)]).integers(2 ** 31)))
            env_inter += ep.env_interactions
            for step in ep.steps:
                memory.append(EquilibriumRecord(
                    task_id=task.task_id, plan_text=step.plan_text,
                    feedback=step.feedback, iteration=it,
                    source=step.source, context=step.context_before))
        total_env += env_inter
        log.append(TrainLogEntry(it, "collect", float("nan"), len(memory),
                                 env_inter))
        # phase (b): decay-weighted supervision toward the ground truth
        losses: List[float] = []
        skipped = 0
        for s in range(steps):
            records = memory.sample_batch(cfg.batch_size, it,
                                          seed=int(np.random.default_rng(
                                              [cfg.seed, 400, it, s]
                                          ).integers(2 ** 31)))
            pairs = build_equilibrium_pairs(model.vocab, records, tasks_by_id,
                                            model.cfg.window)
            ids, tgt = make_batch(model.vocab, pairs,
                                  window=model.cfg.window)
            try:
                loss, grads = model.loss_and_grads(ids, tgt)
            except NumericsError:
                skipped += 1
                continue
            if not np.isfinite(loss):
                skipped += 1
                continue
            optimizer.step(model.params, grads)
            losses.append(loss)
        mean = float(np.mean(losses)) if losses else float("nan")
        log.append(TrainLogEntry(it, "update", mean, len(memory), env_inter))
    return log


def train_world_model(wm: WorldModel, memory: MemoryBuffer,
                      tasks: Sequence[TaskRecord], cfg: TrainConfig,
                      epochs: int = 5) -> List[TrainLogEntry]:
    """Cross-entropy over recorded (scene+plan -> feedback) pairs."""
    net = wm.net
    pairs = build_wm_dataset(net.vocab, memory, tasks,
                             window=net.cfg.window)
    optimizer = Adam(cfg.learning_rate)
    log: List[TrainLogEntry] = []
    for ep in range(1, epochs + 1):
        rng = np.random.default_rng([cfg.seed, 500, ep])
        order = rng.permutation(len(pairs))
        losses: List[float] = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [pairs[int(i)] for i in order[lo:lo + cfg.batch_size]]
            ids, tgt = make_batch(net.vocab, batch, window=net.cfg.window)
            try:
                loss, grads = net.loss_and_grads(ids, tgt)
            except NumericsError:
                continue
            if not np.isfinite(loss):
                continue
            optimizer.step(net.params, grads)
            losses.append(loss)
        log.append(TrainLogEntry(ep, "worldmodel",
                                 float(np.mean(losses)) if losses else
                                 float("nan"), len(memory), 0))
    return log


# ---------------------------------------------------------------------------
# world-model evaluation helper


def wm_category_accuracy(wm: WorldModel, memory: MemoryBuffer,
                         tasks: Sequence[TaskRecord],
                         holdout: Sequence[EquilibriumRecord]
                         ) -> Tuple[float, float]:
    """(model accuracy, majority-class baseline) over held-out records."""
    by_id = {t.task_id: t for t in tasks}
    if not holdout:
        raise ValueError("empty holdout")
    cats = [r.feedback.category for r in holdout]
    majority = max(set(cats), key=cats.count)
    baseline = cats.count(majority) / len(cats)
    hits = 0
    for rec in holdout:
        task = by_id[rec.task_id]
        pred = wm.predict_feedback(task, task.scene, rec.plan_text)
        hits += int(pred.category == rec.feedback.category)
    return hits / len(holdout), baseline


def split_env_records(memory: MemoryBuffer, holdout_fraction: float = 0.2,
                      seed: int = 0) -> Tuple[List[EquilibriumRecord],
                                              List[EquilibriumRecord]]:
    """Deterministic train/holdout split of the ENV-sourced records."""
    env = [r for r in memory if r.source == "ENV"]
    if not env:
        raise ValueError("no ENV-sourced records")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(env))
    n_hold = max(1, int(round(holdout_fraction * len(env))))
    hold = {int(i) for i in order[:n_hold]}
    train = [env[i] for i in range(len(env)) if i not in hold]
    holdout = [env[i] for i in range(len(env)) if i in hold]
    return train, holdout
