"""A small causal-attention sequence model that refines draft plans.

Token space: plan steps are fixed triples (action, object-id-or-PAD,
object-id-or-PAD); scenes are listed room by room as (archetype, id) pairs;
feedback entries compress to a category token plus structured payload.

Two forward paths share the same kernel functions: a differentiation graph
(training, built once per batch shape and cached) and a plain numpy
incremental decoder with per-block key/value caches (generation). Tests pin
their equality token-for-token.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import (
    Graph, ParameterSet, evaluate, vjp, k_layernorm, k_softmax, k_tanh,
    load_checkpoint, save_checkpoint, LAYERNORM_EPS,
)
from .homeworld.plan import ACTION_ARITY, END_MARK, parse_plan
from .homeworld.scene import (RELATIONS, ROOM_ARCHETYPES, OBJECT_CATALOG,
                              STATES, SceneGraph)
from .homeworld.feedback import Feedback
from .homeworld.tasks import GOAL_TEMPLATES, TaskRecord

ID_BUCKETS = 64
ATTN_MASK_VALUE = -1e9

_STRUCTURAL = ("PAD", "BOS", "SEP", "END", "FB_FORMAT", "FB_INVALID",
               "FB_EXEC", "FB_GOAL", "FB_OK", "STATE", "REL")


class PromptOverflowError(ValueError):
    """A single prompt segment cannot fit the context window."""


class Vocabulary:
    """Dense token ids: structural, action, archetype, state, template, and
    64 bucketed object-id tokens."""

    def __init__(self) -> None:
        names: List[str] = list(_STRUCTURAL)
        self._action_base = len(names)
        self._actions = tuple(sorted(ACTION_ARITY))
        names += [f"ACT_{a}" for a in self._actions]
        self._arch_base = len(names)
        self._archetypes = tuple(list(ROOM_ARCHETYPES)
                                 + sorted(OBJECT_CATALOG) + ["character"])
        names += list(self._archetypes)
        self._state_base = len(names)
        names += [f"ST_{s}" for s in STATES]
        self._rel_base = len(names)
        names += [f"R_{r}" for r in RELATIONS]
        self._template_base = len(names)
        names += [f"TPL_{t}" for t in GOAL_TEMPLATES]
        self._id_base = len(names)
        names += [f"ID_{i}" for i in range(ID_BUCKETS)]
        self._names = names
        self._ids = {n: i for i, n in enumerate(names)}
        if len(self._ids) != len(names):
            raise ValueError("vocabulary has duplicate token names")

    # -- structural ---------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._names)

    def __getattr__(self, name: str) -> int:
        if name in _STRUCTURAL:
            return self._ids[name]
        raise AttributeError(name)

    def text(self, token: int) -> str:
        return self._names[token]

    def token(self, name: str) -> int:
        return self._ids[name]

    # -- typed views --------------------------------------------------------

    def action_token(self, action: str) -> int:
        return self._ids[f"ACT_{action}"]

    def is_action(self, token: int) -> bool:
        return self._action_base <= token < self._arch_base

    def action_of(self, token: int) -> str:
        return self._actions[token - self._action_base]

    def arch_token(self, archetype: str) -> int:
        return self._ids[archetype]

    def id_token(self, oid: int) -> int:
        return self._id_base + (oid % ID_BUCKETS)

    def is_id(self, token: int) -> bool:
        return self._id_base <= token < self._id_base + ID_BUCKETS

    def id_of(self, token: int) -> int:
        return token - self._id_base

    def state_token(self, state: str) -> int:
        return self._ids[f"ST_{state}"]

    def relation_token(self, relation: str) -> int:
        return self._ids[f"R_{relation}"]

    def template_token(self, template: str) -> int:
        return self._ids[f"TPL_{template}"]

    # -- serialization ------------------------------------------------------

    def to_json(self) -> Dict[str, int]:
        return dict(self._ids)

    @staticmethod
    def from_json(data: Dict[str, int]) -> "Vocabulary":
        vocab = Vocabulary()
        if dict(vocab._ids) != {str(k): int(v) for k, v in data.items()}:
            raise ValueError("serialized vocabulary does not match this build")
        return vocab


# ---------------------------------------------------------------------------
# token encodings


def plan_tokens(vocab: Vocabulary, plan) -> List[int]:
    """Encode parsed plan steps as triples, terminated by END."""
    out: List[int] = []
    for st in plan.steps:
        out.append(vocab.action_token(st.action))
        args = [vocab.id_token(ref.oid) for ref in st.args]
        out.extend(args + [vocab.PAD] * (2 - len(args)))
    out.append(vocab.END)
    return out


def plan_tokens_from_text(vocab: Vocabulary, text: str) -> Optional[List[int]]:
    parsed = parse_plan(text)
    if not parsed.ok:
        return None
    return plan_tokens(vocab, parsed.plan)


def decode_plan(vocab: Vocabulary, tokens: Sequence[int],
                scene: SceneGraph) -> str:
    """Best-effort rendering of model tokens into plan text. Whatever the
    model emitted decodes to some text; malformed emissions surface later as
    format/invalid feedback rather than as decoding failures."""
    body: List[int] = []
    ended = False
    for t in tokens:
        if t == vocab.END:
            ended = True
            break
        body.append(int(t))
    lines: List[str] = []
    for i in range(0, len(body), 3):
        chunk = body[i:i + 3]
        parts: List[str] = []
        first = chunk[0]
        if vocab.is_action(first):
            parts.append(f"[{vocab.action_of(first)}]")
        else:
            parts.append(vocab.text(first))
        for t in chunk[1:]:
            if t == vocab.PAD:
                continue
            if vocab.is_id(t):
                oid = vocab.id_of(t)
                parts.append(f"<{scene.node_name(oid)}> ({oid})")
            else:
                parts.append(vocab.text(t))
        lines.append(" ".join(parts))
    if ended:
        lines.append(END_MARK)
    return "\n".join(lines)


# instruction verb -> the action token that names it; the tokenizer has no
# free-text tokens, so the verb reuses the action vocabulary
_INSTRUCTION_VERBS = {
    "place_on": "PUTBACK", "gather_on": "PUTBACK",
    "place_in": "PUTIN", "stow_in": "PUTIN", "clean": "PUTIN",
    "device_on": "SWITCHON", "device_off": "SWITCHOFF",
    "open_container": "OPEN", "sit_on": "SIT",
}


def task_tokens(vocab: Vocabulary, task: TaskRecord) -> List[int]:
    """Verb-sketch reading of the instruction: the action its verb names,
    then each mentioned object as an (archetype, id) pair, destination last.
    Goal internals stay hidden, and every token is shared across goal
    families, so an unseen family still tokenizes into familiar pieces."""
    goals, scene = task.goals, task.scene
    tpl = task.template
    if tpl in ("place_on", "place_in"):
        x, _rel, y = goals.relations[0]
        mentions = [x, y]
    elif tpl in ("device_on", "device_off", "open_container"):
        mentions = [goals.states[0][0]]
    elif tpl == "clean":
        mentions = [goals.states[0][0], goals.relations[0][2]]
    elif tpl in ("gather_on", "stow_in"):
        mentions = sorted(r[0] for r in goals.relations)
        mentions.append(goals.relations[0][2])
    elif tpl == "sit_on":
        mentions = [goals.relations[0][2]]
    else:
        raise ValueError(f"unknown template {tpl!r}")
    out = [vocab.action_token(_INSTRUCTION_VERBS[tpl])]
    for oid in mentions:
        out.append(vocab.arch_token(scene.node_name(oid)))
        out.append(vocab.id_token(oid))
    return out


def scene_tokens(vocab: Vocabulary, scene: SceneGraph) -> List[int]:
    """Rooms in id order, each followed by its (archetype, id) contents."""
    out: List[int] = []
    for room in sorted(scene.rooms, key=lambda r: r.oid):
        out.append(vocab.arch_token(room.archetype))
        out.append(vocab.id_token(room.oid))
        members = [i for i in sorted(scene.objects)
                   if scene.room_of(i) == room.oid]
        if scene.room_of(scene.character_id) == room.oid:
            out.append(vocab.arch_token("character"))
            out.append(vocab.id_token(scene.character_id))
        for oid in members:
            out.append(vocab.arch_token(scene.objects[oid].archetype))
            out.append(vocab.id_token(oid))
    return out


def feedback_tokens(vocab: Vocabulary, fb: Feedback) -> List[int]:
    if fb.category == "format":
        return [vocab.FB_FORMAT]
    if fb.category == "invalid":
        return [vocab.FB_INVALID]
    if fb.category == "success":
        return [vocab.FB_OK]
    if fb.category == "exec":
        out = [vocab.FB_EXEC]
        if fb.failed_step:
            parsed = parse_plan(fb.failed_step + "\n" + END_MARK)
            if parsed.ok and parsed.plan.steps:
                st = parsed.plan.steps[0]
                out.append(vocab.action_token(st.action))
                args = [vocab.id_token(ref.oid) for ref in st.args]
                out.extend(args + [vocab.PAD] * (2 - len(args)))
        return out
    if fb.category == "goal":
        out = [vocab.FB_GOAL]
        for oid, _name, state in fb.unmet_states:
            out += [vocab.STATE, vocab.id_token(oid), vocab.state_token(state)]
        for s, _sn, o, _on in fb.unmet_relations:
            out += [vocab.REL, vocab.id_token(s), vocab.id_token(o)]
        return out
    raise ValueError(f"unknown feedback category {fb.category!r}")


def encode_prompt(vocab: Vocabulary, task: TaskRecord, scene: SceneGraph,
                  feedbacks: Sequence[Feedback],
                  draft_tokens: Sequence[int],
                  window: int = 256) -> List[int]:
    """[BOS, task, SEP, scene, SEP, feedback (newest first), SEP, draft, SEP].

    Oldest feedback entries are dropped first on overflow. A single
    non-droppable segment that cannot fit raises PromptOverflowError.
    """
    t_toks = task_tokens(vocab, task)
    s_toks = scene_tokens(vocab, scene)
    d_toks = list(int(t) for t in draft_tokens)
    fb_entries = [feedback_tokens(vocab, fb) for fb in feedbacks]
    overhead = 5  # BOS and four SEPs
    for name, seg in (("task", t_toks), ("scene", s_toks), ("draft", d_toks)):
        if overhead + len(seg) > window:
            raise PromptOverflowError(
                f"{name} segment of {len(seg)} tokens exceeds the "
                f"{window}-token context window")
    fixed = overhead + len(t_toks) + len(s_toks) + len(d_toks)
    if fixed > window:
        raise PromptOverflowError(
            f"task+scene+draft segments of {fixed - overhead} tokens exceed "
            f"the {window}-token context window")
    while fb_entries and fixed + sum(len(e) for e in fb_entries) > window:
        fb_entries.pop()  # newest-first ordering: pop drops the oldest
    fb_flat = [t for entry in fb_entries for t in entry]
    prompt = ([vocab.BOS] + t_toks + [vocab.SEP] + s_toks + [vocab.SEP]
              + fb_flat + [vocab.SEP] + d_toks + [vocab.SEP])
    if len(prompt) > window:
        raise PromptOverflowError("prompt exceeds context window")
    return prompt


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    window: int = 256
    d_mlp: int = 128

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class DecodePolicy:
    mode: str = "greedy"  # "greedy" | "topk"
    k: int = 10
    seed: int = 0
    max_new_tokens: int = 96

    def __post_init__(self):
        if self.mode not in ("greedy", "topk"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("top-k requires k >= 1")


GREEDY = DecodePolicy()


@dataclass
class GenerationResult:
    tokens: List[int]
    ended: bool


def init_params(cfg: ModelConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    scale = 0.02
    D, H, DH, M = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp
    arrays: Dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, scale, (cfg.vocab_size, D)),
        "pos_emb": rng.normal(0.0, scale, (cfg.window, D)),
        "f_ln_g": np.ones(D),
        "f_ln_b": np.zeros(D),
    }
    for b in range(cfg.n_blocks):
        arrays[f"b{b}_ln1_g"] = np.ones(D)
        arrays[f"b{b}_ln1_b"] = np.zeros(D)
        arrays[f"b{b}_ln2_g"] = np.ones(D)
        arrays[f"b{b}_ln2_b"] = np.zeros(D)
        for h in range(H):
            arrays[f"b{b}_h{h}_wq"] = rng.normal(0.0, scale, (D, DH))
            arrays[f"b{b}_h{h}_wk"] = rng.normal(0.0, scale, (D, DH))
            arrays[f"b{b}_h{h}_wv"] = rng.normal(0.0, scale, (D, DH))
            arrays[f"b{b}_h{h}_wo"] = rng.normal(0.0, scale, (DH, D))
        arrays[f"b{b}_mlp_w1"] = rng.normal(0.0, scale, (D, M))
        arrays[f"b{b}_mlp_b1"] = np.zeros(M)
        arrays[f"b{b}_mlp_w2"] = rng.normal(0.0, scale, (M, D))
        arrays[f"b{b}_mlp_b2"] = np.zeros(D)
    return ParameterSet(arrays)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), ATTN_MASK_VALUE), k=1)


class RefinerModel:
    """Parameters plus cached differentiation graphs and a decode path."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary,
                 params: ParameterSet):
        if cfg.vocab_size != vocab.size:
            raise ValueError("config vocab size does not match vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.params = params
        self._graphs: Dict[Tuple[int, int, bool], Graph] = {}

    @staticmethod
    def create(vocab: Vocabulary, seed: int = 0,
               cfg: Optional[ModelConfig] = None) -> "RefinerModel":
        cfg = cfg or ModelConfig(vocab_size=vocab.size)
        return RefinerModel(cfg, vocab, init_params(cfg, seed))

    def clone(self) -> "RefinerModel":
        return RefinerModel(self.cfg, self.vocab, self.params.copy())

    # -- graph path ---------------------------------------------------------

    def _graph(self, batch: int, t: int, with_loss: bool) -> Graph:
        key = (batch, t, with_loss)
        if key in self._graphs:
            return self._graphs[key]
        cfg = self.cfg
        g = Graph()
        ids = g.leaf("ids", (batch, t), kind="int")
        pos = g.leaf("pos", (t,), kind="int")
        mask = g.leaf("mask", (t, t))
        scale = g.leaf("attn_scale", ())
        tok_emb = g.leaf("tok_emb", (cfg.vocab_size, cfg.d_model))
        pos_emb = g.leaf("pos_emb", (cfg.window, cfg.d_model))
        leaf1 = {n: g.leaf(n, self.params[n].shape)
                 for n in self.params.names()
                 if n not in ("tok_emb", "pos_emb")}

        def ln(x, gname, bname):
            return g.add(g.mul(g.layernorm(x), leaf1[gname]), leaf1[bname])

        h = g.add(g.embed(tok_emb, ids), g.embed(pos_emb, pos))
        for b in range(cfg.n_blocks):
            a = ln(h, f"b{b}_ln1_g", f"b{b}_ln1_b")
            for hd in range(cfg.n_heads):
                q = g.matmul(a, leaf1[f"b{b}_h{hd}_wq"])
                k = g.matmul(a, leaf1[f"b{b}_h{hd}_wk"])
                v = g.matmul(a, leaf1[f"b{b}_h{hd}_wv"])
                scores = g.add(g.mul(g.matmul(q, k, transpose_b=True), scale),
                               mask)
                ctx = g.matmul(g.softmax(scores), v)
                h = g.add(h, g.matmul(ctx, leaf1[f"b{b}_h{hd}_wo"]))
            m = ln(h, f"b{b}_ln2_g", f"b{b}_ln2_b")
            inner = g.tanh(g.add(g.matmul(m, leaf1[f"b{b}_mlp_w1"]),
                                 leaf1[f"b{b}_mlp_b1"]))
            out = g.add(g.matmul(inner, leaf1[f"b{b}_mlp_w2"]),
                        leaf1[f"b{b}_mlp_b2"])
            h = g.add(h, out)
        f = ln(h, "f_ln_g", "f_ln_b")
        logits = g.matmul(f, tok_emb, transpose_b=True)
        g.output("logits", logits)
        if with_loss:
            targets = g.leaf("targets", (batch, t), kind="int")
            g.output("loss", g.cross_entropy(logits, targets, ignore_index=-1))
        self._graphs[key] = g
        return g

    def _bindings(self, ids: np.ndarray) -> Dict[str, np.ndarray]:
        t = ids.shape[1]
        b = dict(self.params.items())
        b["ids"] = ids
        b["pos"] = np.arange(t)
        b["mask"] = _causal_mask(t)
        b["attn_scale"] = np.asarray(1.0 / np.sqrt(self.cfg.d_head))
        return b

    def logits(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        g = self._graph(ids.shape[0], ids.shape[1], False)
        return evaluate(g, self._bindings(ids), ["logits"])["logits"]

    def loss(self, ids: np.ndarray, targets: np.ndarray) -> float:
        ids = np.asarray(ids)
        g = self._graph(ids.shape[0], ids.shape[1], True)
        b = self._bindings(ids)
        b["targets"] = np.asarray(targets)
        return float(evaluate(g, b, ["loss"])["loss"])

    def loss_and_grads(self, ids: np.ndarray, targets: np.ndarray
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
        ids = np.asarray(ids)
        g = self._graph(ids.shape[0], ids.shape[1], True)
        b = self._bindings(ids)
        b["targets"] = np.asarray(targets)
        loss = float(evaluate(g, b, ["loss"])["loss"])
        grads = vjp(g, b, "loss", np.asarray(1.0), wrt=self.params.names())
        return loss, grads

    # -- decode path (no graphs, key/value caches) --------------------------

    def generate(self, prompt: Sequence[int],
                 policy: DecodePolicy = GREEDY) -> GenerationResult:
        cfg = self.cfg
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if len(prompt) > cfg.window:
            raise PromptOverflowError("prompt exceeds context window")
        budget = min(policy.max_new_tokens, cfg.window - len(prompt))
        rng = (np.random.default_rng(policy.seed)
               if policy.mode == "topk" else None)
        session = _DecodeSession(self)
        logits = session.prefill(prompt)
        out: List[int] = []
        ended = False
        for _ in range(budget):
            nxt = self._select(logits, policy, rng)
            out.append(nxt)
            if nxt == self.vocab.END:
                ended = True
                break
            logits = session.step(nxt)
        return GenerationResult(tokens=out, ended=ended)

    def _select(self, logits: np.ndarray, policy: DecodePolicy,
                rng: Optional[np.random.Generator]) -> int:
        if policy.mode == "greedy" or policy.k == 1:
            return int(np.argmax(logits))
        top = np.argsort(-logits, kind="stable")[:policy.k]
        probs = k_softmax(logits[top][None, :])[0]
        return int(rng.choice(top, p=probs))


class _DecodeSession:
    """Incremental forward pass with per-block/head key and value caches."""

    def __init__(self, model: RefinerModel):
        self.m = model
        cfg = model.cfg
        self.K = np.zeros((cfg.n_blocks, cfg.n_heads, cfg.window, cfg.d_head))
        self.V = np.zeros_like(self.K)
        self.t = 0

    def _p(self, name: str) -> np.ndarray:
        return self.m.params[name]

    def _ln(self, x: np.ndarray, gname: str, bname: str) -> np.ndarray:
        return k_layernorm(x) * self._p(gname) + self._p(bname)

    def _block_tail(self, h: np.ndarray, b: int) -> np.ndarray:
        m = self._ln(h, f"b{b}_ln2_g", f"b{b}_ln2_b")
        inner = k_tanh(m @ self._p(f"b{b}_mlp_w1") + self._p(f"b{b}_mlp_b1"))
        return h + inner @ self._p(f"b{b}_mlp_w2") + self._p(f"b{b}_mlp_b2")

    def _logits_last(self, h_last: np.ndarray) -> np.ndarray:
        f = self._ln(h_last, "f_ln_g", "f_ln_b")
        return f @ self._p("tok_emb").T

    def prefill(self, tokens: List[int]) -> np.ndarray:
        cfg = self.m.cfg
        t = len(tokens)
        scale = 1.0 / np.sqrt(cfg.d_head)
        h = self._p("tok_emb")[tokens] + self._p("pos_emb")[:t]
        mask = _causal_mask(t)
        for b in range(cfg.n_blocks):
            a = self._ln(h, f"b{b}_ln1_g", f"b{b}_ln1_b")
            for hd in range(cfg.n_heads):
                q = a @ self._p(f"b{b}_h{hd}_wq")
                k = a @ self._p(f"b{b}_h{hd}_wk")
                v = a @ self._p(f"b{b}_h{hd}_wv")
                self.K[b, hd, :t] = k
                self.V[b, hd, :t] = v
                att = k_softmax(q @ k.T * scale + mask)
                h = h + (att @ v) @ self._p(f"b{b}_h{hd}_wo")
            h = self._block_tail(h, b)
        self.t = t
        return self._logits_last(h[-1])

    def step(self, token: int) -> np.ndarray:
        cfg = self.m.cfg
        pos = self.t
        scale = 1.0 / np.sqrt(cfg.d_head)
        h = (self._p("tok_emb")[token] + self._p("pos_emb")[pos])[None, :]
        for b in range(cfg.n_blocks):
            a = self._ln(h, f"b{b}_ln1_g", f"b{b}_ln1_b")
            for hd in range(cfg.n_heads):
                q = a @ self._p(f"b{b}_h{hd}_wq")
                k = a @ self._p(f"b{b}_h{hd}_wk")
                v = a @ self._p(f"b{b}_h{hd}_wv")
                self.K[b, hd, pos] = k[0]
                self.V[b, hd, pos] = v[0]
                att = k_softmax(q @ self.K[b, hd, :pos + 1].T * scale)
                h = h + (att @ self.V[b, hd, :pos + 1]) @ self._p(f"b{b}_h{hd}_wo")
            h = self._block_tail(h, b)
        self.t = pos + 1
        return self._logits_last(h[0])


def generate_refinement(model: RefinerModel, prompt: Sequence[int],
                        policy: DecodePolicy = GREEDY) -> GenerationResult:
    return model.generate(prompt, policy)


# ---------------------------------------------------------------------------
# teacher-forced loss over (prompt, target) pairs


def make_batch(vocab: Vocabulary,
               pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
               window: int = 256,
               pad_multiple: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Pack (prompt, target) pairs into (ids, shifted targets); positions
    outside each pair's target span carry -1 and are ignored by the loss."""
    if not pairs:
        raise ValueError("empty batch")
    seqs = []
    for prompt, target in pairs:
        prompt = [int(x) for x in prompt]
        target = [int(x) for x in target]
        if not target or target[-1] != vocab.END:
            raise ValueError("target must end with the END token")
        if len(prompt) + len(target) > window + 1:
            raise ValueError(
                f"prompt+target of {len(prompt) + len(target)} tokens "
                f"exceeds the {window}-token context window")
        seqs.append((prompt, target))
    t_needed = max(len(p) + len(t) for p, t in seqs) - 1
    t = min(window, ((t_needed + pad_multiple - 1) // pad_multiple) * pad_multiple)
    ids = np.full((len(seqs), t), vocab.PAD, dtype=np.int64)
    tgt = np.full((len(seqs), t), -1, dtype=np.int64)
    for i, (prompt, target) in enumerate(seqs):
        seq = prompt + target
        ids[i, :len(seq) - 1] = seq[:-1]
        tgt[i, len(prompt) - 1:len(seq) - 1] = seq[len(prompt):]
    return ids, tgt


def sequence_loss(model: RefinerModel, prompt: Sequence[int],
                  target: Sequence[int], with_grads: bool = False):
    """Mean cross-entropy of the target continuation under teacher forcing."""
    ids, tgt = make_batch(model.vocab, [(list(prompt), list(target))],
                          window=model.cfg.window)
    if with_grads:
        return model.loss_and_grads(ids, tgt)
    return model.loss(ids, tgt)


# ---------------------------------------------------------------------------
# checkpointing (parameters + vocabulary/config sidecar)


def save_model(path: str, model: RefinerModel, name: str = "refiner",
               extra: Optional[Dict] = None) -> None:
    save_checkpoint(model.params, path)
    sidecar = {"name": name, "config": asdict(model.cfg),
               "vocab": model.vocab.to_json()}
    if extra:
        sidecar.update(extra)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_model(path: str, expect_name: str = "refiner") -> RefinerModel:
    params = load_checkpoint(path)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    name = sidecar.get("name", "refiner")
    if name != expect_name:
        raise ValueError(
            f"checkpoint holds a {name!r} model, expected {expect_name!r}")
    vocab = Vocabulary.from_json(sidecar["vocab"])
    cfg = ModelConfig(**sidecar["config"])
    return RefinerModel(cfg, vocab, params)


# ---------------------------------------------------------------------------
# a hand-set model that copies the trailing draft segment of the prompt


def make_copy_model(vocab: Vocabulary, offset: int,
                    seed: int = 0) -> RefinerModel:
    """Build parameters whose greedy generation reproduces the token found
    `offset` positions back — with the draft as the prompt's final segment,
    generation replays the draft verbatim, making any draft a fixed point.

    Mechanics: positions carry four (cos, sin) pairs in embedding dims 0-7;
    block-0 query weights rotate them by the offset so attention locks onto
    position p-offset; the four heads jointly copy the token-embedding dims
    (8-63), and the tied logit head reads the copied token back out. Block 1
    and all MLPs are zeroed (pure residual pass-through).
    """
    cfg = ModelConfig(vocab_size=vocab.size)
    D, DH, W = cfg.d_model, cfg.d_head, cfg.window
    periods = np.array([5.0, 17.0, 59.0, 257.0])
    omegas = 2.0 * np.pi / periods

    # every in-window displacement must score strictly below the target one
    deltas = np.arange(1, W)
    off_target = np.cos(np.outer(deltas, omegas)).sum(axis=1)
    margin = len(omegas) - float(off_target.max())
    if margin < 0.4:
        raise ValueError(f"positional code margin too small: {margin}")

    beta, gamma = 160.0, 30.0
    rng = np.random.default_rng(seed)

    pos_emb = np.zeros((W, D))
    t = np.arange(W)
    for i, w in enumerate(omegas):
        pos_emb[:, 2 * i] = np.cos(w * t)
        pos_emb[:, 2 * i + 1] = np.sin(w * t)

    tok_emb = np.zeros((vocab.size, D))
    part = rng.normal(0.0, 1.0, (vocab.size, D - 8))
    part -= part.mean(axis=1, keepdims=True)
    part /= np.linalg.norm(part, axis=1, keepdims=True)
    tok_emb[:, 8:] = part

    params = {"tok_emb": tok_emb, "pos_emb": pos_emb,
              "f_ln_g": np.ones(D), "f_ln_b": np.zeros(D)}
    for b in range(cfg.n_blocks):
        params[f"b{b}_ln1_g"] = np.ones(D)
        params[f"b{b}_ln1_b"] = np.zeros(D)
        params[f"b{b}_ln2_g"] = np.ones(D)
        params[f"b{b}_ln2_b"] = np.zeros(D)
        params[f"b{b}_mlp_w1"] = np.zeros((D, cfg.d_mlp))
        params[f"b{b}_mlp_b1"] = np.zeros(cfg.d_mlp)
        params[f"b{b}_mlp_w2"] = np.zeros((cfg.d_mlp, D))
        params[f"b{b}_mlp_b2"] = np.zeros(D)
        for h in range(cfg.n_heads):
            params[f"b{b}_h{h}_wq"] = np.zeros((D, DH))
            params[f"b{b}_h{h}_wk"] = np.zeros((D, DH))
            params[f"b{b}_h{h}_wv"] = np.zeros((D, DH))
            params[f"b{b}_h{h}_wo"] = np.zeros((DH, D))

    wq = np.zeros((D, DH))
    wk = np.zeros((D, DH))
    for i, w in enumerate(omegas):
        c, s = np.cos(w * offset), np.sin(w * offset)
        wq[2 * i, 2 * i] = c * beta
        wq[2 * i + 1, 2 * i] = s * beta
        wq[2 * i, 2 * i + 1] = -s * beta
        wq[2 * i + 1, 2 * i + 1] = c * beta
        wk[2 * i, 2 * i] = 1.0
        wk[2 * i + 1, 2 * i + 1] = 1.0

    # heads 0..3 jointly copy value dims 8..63
    spans = [(8, 24), (24, 40), (40, 56), (56, 64)]
    for h, (lo, hi) in enumerate(spans):
        params[f"b0_h{h}_wq"] = wq.copy()
        params[f"b0_h{h}_wk"] = wk.copy()
        wv = np.zeros((D, DH))
        wo = np.zeros((DH, D))
        for j, d in enumerate(range(lo, hi)):
            wv[d, j] = 1.0
            wo[j, d] = gamma
        params[f"b0_h{h}_wv"] = wv
        params[f"b0_h{h}_wo"] = wo

    return RefinerModel(cfg, vocab, ParameterSet(params))
