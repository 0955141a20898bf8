"""Learned feedback predictor.

Same sequence architecture as the plan refiner, but the prompt carries the
scene's relation edges and object states (the plan under evaluation replaces
the feedback-history slot), and decoding is constrained to a feedback grammar
so every prediction parses into a valid Feedback.

Grammar (one sentence per prediction):
    S       -> FB_FORMAT | FB_INVALID | FB_OK | FB_EXEC step? | FB_GOAL item+
    step    -> ACTION (ID | PAD) (ID | PAD)
    item    -> STATE ID ST_x | REL ID ID
Every production is terminated by END.
"""

from __future__ import annotations

import re
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .homeworld.feedback import Feedback
from .homeworld.plan import ACTION_ARITY, END_MARK
from .homeworld.scene import CLOSE, INSIDE, SceneGraph, STATES
from .homeworld.tasks import TaskRecord
from .memory import MemoryBuffer
from .refiner import (
    GREEDY, ModelConfig, PromptOverflowError, RefinerModel, Vocabulary,
    _DecodeSession, load_model, plan_tokens_from_text, save_model,
    task_tokens,
)

WM_CHECKPOINT_NAME = "worldmodel"
WM_MAX_FEEDBACK_TOKENS = 96

_LOOSE_STEP_RE = re.compile(r"^\[([A-Za-z_]+)\]")
_LOOSE_ID_RE = re.compile(r"\((\d+)\)")


def wm_scene_tokens(vocab: Vocabulary, scene: SceneGraph) -> List[int]:
    """Rooms and contents as in the refiner prompt, then object states as
    (STATE, id, ST_x) triples, then relation edges as (R_rel, s, o) triples.
    Room-membership and proximity edges are omitted: the former is already
    carried by the room grouping, the latter churns with every walk."""
    from .refiner import scene_tokens  # same room/content layout
    out = scene_tokens(vocab, scene)
    for oid in sorted(scene.objects):
        for st in sorted(scene.objects[oid].states):
            out += [vocab.STATE, vocab.id_token(oid), vocab.state_token(st)]
    for st in sorted(scene.character_states):
        out += [vocab.STATE, vocab.id_token(scene.character_id),
                vocab.state_token(st)]
    room_ids = scene.room_ids()
    for s, rel, o in sorted(scene.relations):
        if rel == CLOSE or (rel == INSIDE and o in room_ids):
            continue
        out += [vocab.relation_token(rel), vocab.id_token(s),
                vocab.id_token(o)]
    return out


def loose_plan_tokens(vocab: Vocabulary, text: str) -> List[int]:
    """Tokenize plan text tolerantly: canonical lines encode exactly; lines
    that do not look like steps are skipped. Used to re-encode recorded plan
    texts, which may be arbitrary model output."""
    exact = plan_tokens_from_text(vocab, text)
    if exact is not None:
        return exact
    out: List[int] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line == END_MARK:
            break
        m = _LOOSE_STEP_RE.match(line)
        if not m or m.group(1) not in ACTION_ARITY:
            continue
        out.append(vocab.action_token(m.group(1)))
        ids = [int(x) for x in _LOOSE_ID_RE.findall(line)][:2]
        out.extend(vocab.id_token(i) for i in ids)
        out.extend([vocab.PAD] * (2 - len(ids)))
    out.append(vocab.END)
    return out


def wm_prompt(vocab: Vocabulary, task: TaskRecord, scene: SceneGraph,
              plan_toks: Sequence[int], window: int = 256) -> List[int]:
    """[BOS, task, SEP, scene+states+edges, SEP, plan, SEP]. The plan's tail
    is clipped if the window demands it; task and scene segments must fit."""
    t_toks = task_tokens(vocab, task)
    s_toks = wm_scene_tokens(vocab, scene)
    overhead = 4  # BOS and three SEPs
    fixed = overhead + len(t_toks) + len(s_toks)
    if fixed > window:
        raise PromptOverflowError(
            f"task+scene segments of {fixed - overhead} tokens exceed the "
            f"{window}-token context window")
    room = window - fixed
    plan_part = [int(t) for t in plan_toks][:room]
    return ([vocab.BOS] + t_toks + [vocab.SEP] + s_toks + [vocab.SEP]
            + plan_part + [vocab.SEP])


# ---------------------------------------------------------------------------
# feedback grammar as an explicit token-level state machine


class _FeedbackGrammar:
    """Allowed-token sets per state, plus a shortest path to END so decoding
    always terminates inside any budget >= 6."""

    def __init__(self, vocab: Vocabulary):
        v = vocab
        self.vocab = v
        acts = [v.action_token(a) for a in sorted(ACTION_ARITY)]
        ids = [v.id_token(i) for i in range(64)]
        sts = [v.state_token(s) for s in STATES]
        self.allowed: Dict[str, List[int]] = {
            "CAT": [v.FB_FORMAT, v.FB_INVALID, v.FB_OK, v.FB_EXEC, v.FB_GOAL],
            "DONE": [v.END],
            "EXEC_ACT": acts + [v.END],
            "EXEC_A1": ids + [v.PAD],
            "EXEC_A2": ids + [v.PAD],
            "ITEM_FIRST": [v.STATE, v.REL],
            "ITEM_MORE": [v.STATE, v.REL, v.END],
            "ST_ID": ids,
            "ST_NAME": sts,
            "REL_S": ids,
            "REL_O": ids,
        }
        # one legal token that moves each state closer to END
        self.closing: Dict[str, int] = {
            "CAT": v.FB_OK, "DONE": v.END, "EXEC_ACT": v.END,
            "EXEC_A1": v.PAD, "EXEC_A2": v.PAD, "ITEM_FIRST": v.STATE,
            "ITEM_MORE": v.END, "ST_ID": ids[0], "ST_NAME": sts[0],
            "REL_S": ids[0], "REL_O": ids[0],
        }
        self.to_end: Dict[str, int] = {
            "CAT": 2, "DONE": 1, "EXEC_ACT": 1, "EXEC_A1": 3, "EXEC_A2": 2,
            "ITEM_FIRST": 4, "ITEM_MORE": 1, "ST_ID": 3, "ST_NAME": 2,
            "REL_S": 3, "REL_O": 2,
        }

    def advance(self, state: str, token: int) -> str:
        v = self.vocab
        if state == "CAT":
            if token in (v.FB_FORMAT, v.FB_INVALID, v.FB_OK):
                return "DONE"
            return "EXEC_ACT" if token == v.FB_EXEC else "ITEM_FIRST"
        if state == "EXEC_ACT":
            return "FINISHED" if token == v.END else "EXEC_A1"
        if state == "EXEC_A1":
            return "EXEC_A2"
        if state == "EXEC_A2":
            return "DONE"
        if state in ("ITEM_FIRST", "ITEM_MORE"):
            if token == v.END:
                return "FINISHED"
            return "ST_ID" if token == v.STATE else "REL_S"
        if state == "ST_ID":
            return "ST_NAME"
        if state == "ST_NAME":
            return "ITEM_MORE"
        if state == "REL_S":
            return "REL_O"
        if state == "REL_O":
            return "ITEM_MORE"
        if state == "DONE":
            return "FINISHED"
        raise ValueError(f"no transition from state {state!r}")


def feedback_from_tokens(vocab: Vocabulary, tokens: Sequence[int],
                         scene: SceneGraph) -> Feedback:
    """Parse a grammar-conforming token sequence into a Feedback."""
    toks = [int(t) for t in tokens]
    if toks and toks[-1] == vocab.END:
        toks = toks[:-1]
    if not toks:
        raise ValueError("empty feedback token sequence")
    head, rest = toks[0], toks[1:]
    if head == vocab.FB_FORMAT:
        return Feedback(category="format")
    if head == vocab.FB_INVALID:
        return Feedback(category="invalid")
    if head == vocab.FB_OK:
        return Feedback(category="success", gcr=1.0, executed=True)
    if head == vocab.FB_EXEC:
        failed_step = None
        if rest and vocab.is_action(rest[0]):
            parts = [f"[{vocab.action_of(rest[0])}]"]
            for t in rest[1:3]:
                if vocab.is_id(t):
                    oid = vocab.id_of(t)
                    parts.append(f"<{scene.node_name(oid)}> ({oid})")
            failed_step = " ".join(parts)
        return Feedback(category="exec", failed_step=failed_step,
                        failure_reason="predicted failure")
    if head == vocab.FB_GOAL:
        unmet_states: List[Tuple[int, str, str]] = []
        unmet_relations: List[Tuple[int, str, int, str]] = []
        i = 0
        while i < len(rest):
            if rest[i] == vocab.STATE and i + 3 <= len(rest):
                oid = vocab.id_of(rest[i + 1])
                state = vocab.text(rest[i + 2])[3:]  # strip "ST_"
                unmet_states.append((oid, scene.node_name(oid), state))
                i += 3
            elif rest[i] == vocab.REL and i + 3 <= len(rest):
                s = vocab.id_of(rest[i + 1])
                o = vocab.id_of(rest[i + 2])
                unmet_relations.append((s, scene.node_name(s),
                                        o, scene.node_name(o)))
                i += 3
            else:
                raise ValueError("malformed goal feedback item")
        if not unmet_states and not unmet_relations:
            raise ValueError("goal feedback without items")
        return Feedback(category="goal", unmet_states=unmet_states,
                        unmet_relations=unmet_relations, executed=True)
    raise ValueError("feedback tokens do not start with a category")


class WorldModel:
    """Feedback-predicting sequence model with constrained greedy decoding."""

    def __init__(self, net: RefinerModel):
        self.net = net
        self.vocab = net.vocab
        self._grammar = _FeedbackGrammar(net.vocab)

    @staticmethod
    def create(vocab: Vocabulary, seed: int = 0,
               cfg: Optional[ModelConfig] = None) -> "WorldModel":
        return WorldModel(RefinerModel.create(vocab, seed=seed, cfg=cfg))

    def predict_tokens(self, prompt: Sequence[int],
                       budget: int = WM_MAX_FEEDBACK_TOKENS) -> List[int]:
        """Greedy decoding masked to the feedback grammar; always terminates
        with END and always parses."""
        if budget < 6:
            raise ValueError("budget too small to close the grammar")
        gram = self._grammar
        session = _DecodeSession(self.net)
        logits = session.prefill([int(t) for t in prompt])
        out: List[int] = []
        state = "CAT"
        left = min(budget, self.net.cfg.window - len(prompt))
        forced = False  # once the budget forces closing moves, it stays forced
        while state != "FINISHED":
            if forced or left <= gram.to_end[state]:
                forced = True
                tok = gram.closing[state]
            else:
                cand = gram.allowed[state]
                tok = int(cand[int(np.argmax(logits[cand]))])
            out.append(tok)
            state = gram.advance(state, tok)
            left -= 1
            needs_logits = (state != "FINISHED" and not forced
                            and left > gram.to_end[state])
            if needs_logits:
                logits = session.step(tok)
        return out

    def predict_feedback(self, task: TaskRecord, scene: SceneGraph,
                         plan_text: str) -> Feedback:
        plan_toks = loose_plan_tokens(self.vocab, plan_text)
        prompt = wm_prompt(self.vocab, task, scene, plan_toks,
                           window=self.net.cfg.window)
        toks = self.predict_tokens(prompt)
        return feedback_from_tokens(self.vocab, toks, scene)


# ---------------------------------------------------------------------------
# dataset assembly from recorded planner interactions


def feedback_target_tokens(vocab: Vocabulary, fb: Feedback) -> List[int]:
    from .refiner import feedback_tokens
    return feedback_tokens(vocab, fb) + [vocab.END]


def build_wm_dataset(vocab: Vocabulary, buffer: MemoryBuffer,
                     tasks: Sequence[TaskRecord],
                     window: int = 256) -> List[Tuple[List[int], List[int]]]:
    """(prompt, target) pairs from ENV-sourced records only; predictions by
    the world model itself never become its own training data."""
    by_id = {t.task_id: t for t in tasks}
    pairs: List[Tuple[List[int], List[int]]] = []
    for rec in buffer:
        if rec.source != "ENV":
            continue
        task = by_id.get(rec.task_id)
        if task is None:
            raise ValueError(f"record references unknown task {rec.task_id!r}")
        plan_toks = loose_plan_tokens(vocab, rec.plan_text)
        target = feedback_target_tokens(vocab, rec.feedback)
        max_prompt = window + 1 - len(target)
        prompt = wm_prompt(vocab, task, task.scene, plan_toks,
                           window=max_prompt)
        pairs.append((prompt, target))
    if not pairs:
        raise ValueError("no ENV-sourced records to build a dataset from")
    return pairs


def save_world_model(path: str, wm: WorldModel) -> None:
    save_model(path, wm.net, name=WM_CHECKPOINT_NAME)


def load_world_model(path: str) -> WorldModel:
    return WorldModel(load_model(path, expect_name=WM_CHECKPOINT_NAME))
