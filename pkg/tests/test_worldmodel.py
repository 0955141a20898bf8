"""World-model tests: scene serialization with states and edges, tolerant
plan tokenization, the feedback grammar (totality, determinism, parsing),
dataset assembly from memory, and single-pair learnability."""

import numpy as np
import pytest

from eqplan.homeworld import Feedback, env_feedback, generate_dataset
from eqplan.homeworld.scene import CLOSE, INSIDE
from eqplan.memory import EquilibriumRecord, MemoryBuffer
from eqplan.eqgrad import Adam
from eqplan.refiner import (ModelConfig, Vocabulary, make_batch, plan_tokens,
                            plan_tokens_from_text)
from eqplan.worldmodel import (WM_CHECKPOINT_NAME, WorldModel,
                               _FeedbackGrammar, build_wm_dataset,
                               feedback_from_tokens, feedback_target_tokens,
                               load_world_model, loose_plan_tokens,
                               save_world_model, wm_prompt, wm_scene_tokens)

WM_BUDGET_SAMPLES = (6, 7, 12, 96)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="module")
def tasks():
    return generate_dataset(n_tasks=6, seed=20240, n_scenes=2)


@pytest.fixture(scope="module")
def small_wm(vocab):
    cfg = ModelConfig(vocab_size=vocab.size, d_model=32, n_heads=2,
                      n_blocks=1, window=256, d_mlp=64)
    return WorldModel.create(vocab, seed=3, cfg=cfg)


# ---------------------------------------------------------------------------
# scene and plan serialization


def test_wm_scene_tokens_include_states_and_edges(vocab, tasks):
    scene = tasks[0].scene
    toks = wm_scene_tokens(vocab, scene)
    n_states = (sum(len(n.states) for n in scene.objects.values())
                + len(scene.character_states))
    assert toks.count(vocab.STATE) == n_states
    room_ids = scene.room_ids()
    kept = [(s, r, o) for (s, r, o) in scene.relations
            if r != CLOSE and not (r == INSIDE and o in room_ids)]
    rel_heads = sum(1 for t in toks
                    if vocab.text(t).startswith("R_"))
    assert rel_heads == len(kept)
    assert vocab.relation_token(CLOSE) not in toks


def test_loose_plan_tokens_matches_exact_encoding(vocab, tasks):
    task = tasks[0]
    text = task.gt_text()
    assert loose_plan_tokens(vocab, text) == plan_tokens_from_text(vocab, text)


def test_loose_plan_tokens_salvages_sloppy_text(vocab):
    text = ("?? not a step\n"
            "[WALK] <kitchen> (1)\n"
            "[GRAB] mug without an id marker\n"
            "[CLOSE] <box> (9) <lid> (10) extra\n")
    toks = loose_plan_tokens(vocab, text)
    assert toks[-1] == vocab.END
    # three salvable lines, each a (action, arg, arg) triple
    assert len(toks) == 3 * 3 + 1
    assert toks[0] == vocab.action_token("WALK")
    assert toks[1] == vocab.id_token(1)
    assert toks[2] == vocab.PAD
    assert toks[3] == vocab.action_token("GRAB")
    assert toks[4] == vocab.PAD


def test_loose_plan_tokens_stops_at_end_marker(vocab):
    # junk first line defeats the exact parse, exercising the loose path
    text = "?? junk\n[WALK] <kitchen> (1)\n[END]\n[GRAB] <mug> (2)"
    toks = loose_plan_tokens(vocab, text)
    assert toks == [vocab.action_token("WALK"), vocab.id_token(1), vocab.PAD,
                    vocab.END]


def test_wm_prompt_layout_and_plan_clipping(vocab, tasks):
    task = tasks[0]
    plan = loose_plan_tokens(vocab, task.gt_text())
    prompt = wm_prompt(vocab, task, task.scene, plan, window=256)
    assert prompt[0] == vocab.BOS
    assert prompt[-1] == vocab.SEP
    assert prompt.count(vocab.SEP) == 3
    assert len(prompt) <= 256
    tight = wm_prompt(vocab, task, task.scene, plan,
                      window=len(prompt) - len(plan) + 2)
    assert len(tight) == len(prompt) - len(plan) + 2
    # clipped from the tail: surviving plan tokens are an exact prefix
    lead = len(prompt) - len(plan) - 1
    assert tight[lead:-1] == plan[:2]


# ---------------------------------------------------------------------------
# feedback grammar


def test_feedback_round_trips_through_tokens(vocab, tasks):
    task = tasks[0]
    scene = task.scene
    cases = [
        "not a plan at all",                       # format: unparseable
        "[FLY] <mug> (9)\n[END]",                  # invalid: unknown action
        f"[GRAB] <{scene.node_name(3)}> (3)\n[END]",  # exec or goal failure
        task.gt_text(),                            # success
    ]
    seen = set()
    for text in cases:
        fb, _ = env_feedback(scene, task.goals, text)
        toks = feedback_target_tokens(vocab, fb)
        parsed = feedback_from_tokens(vocab, toks, scene)
        assert parsed.category == fb.category
        seen.add(fb.category)
    assert "format" in seen and "invalid" in seen


def test_feedback_from_tokens_success_and_goal_payloads(vocab, tasks):
    scene = tasks[0].scene
    ok = feedback_from_tokens(vocab, [vocab.FB_OK, vocab.END], scene)
    assert ok.category == "success" and ok.executed and ok.gcr == 1.0

    toks = [vocab.FB_GOAL,
            vocab.STATE, vocab.id_token(6), vocab.state_token("CLEAN"),
            vocab.REL, vocab.id_token(6), vocab.id_token(10), vocab.END]
    goal = feedback_from_tokens(vocab, toks, scene)
    assert goal.category == "goal"
    assert goal.unmet_states == [(6, scene.node_name(6), "CLEAN")]
    assert goal.unmet_relations == [(6, scene.node_name(6),
                                     10, scene.node_name(10))]


def test_feedback_from_tokens_rejects_malformed(vocab, tasks):
    scene = tasks[0].scene
    with pytest.raises(ValueError):
        feedback_from_tokens(vocab, [vocab.END], scene)
    with pytest.raises(ValueError):
        feedback_from_tokens(vocab, [vocab.FB_GOAL, vocab.END], scene)
    with pytest.raises(ValueError):
        feedback_from_tokens(vocab, [vocab.FB_GOAL, vocab.STATE,
                                     vocab.id_token(1), vocab.END], scene)


def test_grammar_shortest_paths_reach_end(vocab):
    gram = _FeedbackGrammar(vocab)
    for state, dist in gram.to_end.items():
        s, steps = state, 0
        while s != "FINISHED":
            tok = gram.closing[s]
            assert tok in gram.allowed[s]
            s = gram.advance(s, tok)
            steps += 1
        assert steps == dist, state


def test_constrained_decode_is_total_and_deterministic(vocab, tasks, small_wm):
    # any prompt, untrained weights: decoding must terminate and parse
    rng = np.random.default_rng(5)
    scene = tasks[0].scene
    for trial in range(25):
        length = int(rng.integers(4, 120))
        prompt = [int(t) for t in rng.integers(0, vocab.size, size=length)]
        toks = small_wm.predict_tokens(prompt, budget=WM_BUDGET_SAMPLES[trial % len(WM_BUDGET_SAMPLES)])
        assert toks[-1] == vocab.END
        fb = feedback_from_tokens(vocab, toks, scene)
        assert fb.category in ("format", "invalid", "exec", "goal", "success")
        again = small_wm.predict_tokens(
            prompt, budget=WM_BUDGET_SAMPLES[trial % len(WM_BUDGET_SAMPLES)])
        assert toks == again


def test_decode_budget_floor_enforced(vocab, small_wm):
    with pytest.raises(ValueError):
        small_wm.predict_tokens([vocab.BOS], budget=5)


def test_predict_feedback_end_to_end(vocab, tasks, small_wm):
    task = tasks[0]
    fb = small_wm.predict_feedback(task, task.scene, task.gt_text())
    assert isinstance(fb, Feedback)
    assert fb.category in ("format", "invalid", "exec", "goal", "success")


# ---------------------------------------------------------------------------
# dataset assembly


def _record(task, plan_text, fb, iteration, source):
    return EquilibriumRecord(task_id=task.task_id, plan_text=plan_text,
                             feedback=fb, iteration=iteration, source=source)


def test_build_wm_dataset_uses_env_records_only(vocab, tasks):
    task = tasks[0]
    fb, _ = env_feedback(task.scene, task.goals, task.gt_text())
    buf = MemoryBuffer()
    for i, src in enumerate(("ENV", "WORLD_MODEL", "ENV", "WORLD_MODEL", "ENV")):
        buf.append(_record(task, task.gt_text(), fb, 1, src))
    pairs = build_wm_dataset(vocab, buf, tasks, window=256)
    assert len(pairs) == 3
    prompt, target = pairs[0]
    assert target == feedback_target_tokens(vocab, fb)
    assert len(prompt) + len(target) <= 256 + 1
    again = build_wm_dataset(vocab, buf, tasks, window=256)
    assert again == pairs


def test_build_wm_dataset_requires_env_records(vocab, tasks):
    task = tasks[0]
    fb = Feedback(category="format")
    buf = MemoryBuffer()
    buf.append(_record(task, "junk", fb, 1, "WORLD_MODEL"))
    with pytest.raises(ValueError, match="ENV"):
        build_wm_dataset(vocab, buf, tasks, window=256)
    with pytest.raises(ValueError, match="unknown task"):
        other = MemoryBuffer()
        rec = EquilibriumRecord(task_id="t99999", plan_text="junk",
                                feedback=fb, iteration=1, source="ENV")
        other.append(rec)
        build_wm_dataset(vocab, other, tasks, window=256)


def test_world_model_learns_a_single_pair(vocab, tasks, small_wm):
    task = tasks[0]
    bad_plan = "[FLY] <mug> (9)\n[END]"
    fb, _ = env_feedback(task.scene, task.goals, bad_plan)
    assert fb.category == "invalid"
    buf = MemoryBuffer()
    buf.append(_record(task, bad_plan, fb, 1, "ENV"))
    pairs = build_wm_dataset(vocab, buf, tasks, window=256)
    wm = WorldModel.create(vocab, seed=1, cfg=small_wm.net.cfg)
    ids, tgt = make_batch(vocab, pairs, window=256)
    opt = Adam(3e-3)
    losses = []
    for _ in range(120):
        loss, grads = wm.net.loss_and_grads(ids, tgt)
        opt.step(wm.net.params, grads)
        losses.append(loss)
    assert losses[-1] < 0.05, losses[-1]
    pred = wm.predict_feedback(task, task.scene, bad_plan)
    assert pred.category == "invalid"


def test_world_model_checkpoint_round_trip(tmp_path, vocab, small_wm):
    path = str(tmp_path / "wm.eqpm")
    save_world_model(path, small_wm)
    loaded = load_world_model(path)
    prompt = [vocab.BOS, vocab.SEP, vocab.SEP, vocab.SEP]
    assert loaded.predict_tokens(prompt) == small_wm.predict_tokens(prompt)
    with pytest.raises(ValueError):
        from eqplan.refiner import load_model
        load_model(path, expect_name="refiner")
