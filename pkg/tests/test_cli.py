"""CLI tests: config validation and hashing, artifact provenance, the
gen-tasks/train/eval/report pipeline, report math and idempotence,
parallel-evaluation determinism, and exit codes."""

import json
import os

import pytest

from eqplan.cli import (ConfigError, DEFAULT_CONFIG, build_report,
                        config_hash, load_config, main, merge_config)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen-tasks + a tiny trained checkpoint, shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "dataset": {"n_tasks": 40, "seed": 11},
        "model": {"d_model": 32, "n_heads": 2, "n_blocks": 1, "d_mlp": 64},
        "training": {"iterations": 1, "task_cap": 3, "batch_size": 8,
                     "train_outer_bound": 1},
        "evaluation": {"max_corrections": 2},
    }
    cfg_path = str(root / "config.json")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh)
    tasks = str(root / "tasks.jsonl")
    model = str(root / "model.eqpm")
    assert main(["gen-tasks", "--config", cfg_path, "--out", tasks]) == 0
    assert main(["train", "--config", cfg_path, "--tasks", tasks,
                 "--out", model]) == 0
    return {"root": root, "config": cfg_path, "tasks": tasks, "model": model}


# ---------------------------------------------------------------------------
# configuration


def test_defaults_pass_validation():
    cfg = merge_config({})
    assert cfg == DEFAULT_CONFIG
    assert cfg is not DEFAULT_CONFIG


def test_unknown_keys_are_rejected_with_path():
    with pytest.raises(ConfigError, match="evaluation.max_correctoins"):
        merge_config({"evaluation": {"max_correctoins": 3}})
    with pytest.raises(ConfigError, match="telemetry"):
        merge_config({"telemetry": True})


def test_config_hash_is_canonical():
    a = config_hash(merge_config({"seeds": {"train": 1, "eval": 2}}))
    b = config_hash(merge_config({"seeds": {"eval": 2, "train": 1}}))
    c = config_hash(merge_config({}))
    assert a == b
    assert a != c
    assert len(a) == 64


def test_eqpm_seed_env_override(monkeypatch):
    monkeypatch.setenv("EQPM_SEED", "99")
    cfg = load_config(None)
    assert cfg["seeds"] == {"train": 99, "eval": 99}
    monkeypatch.setenv("EQPM_SEED", "not-an-int")
    with pytest.raises(ConfigError):
        load_config(None)


def test_invalid_config_file_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"no_such_section": 1}')
    assert main(["gen-tasks", "--config", str(bad),
                 "--out", str(tmp_path / "x.jsonl")]) == 1


# ---------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_two(capsys):
    assert main(["definitely-not-a-command"]) == 2
    assert main(["eval", "--frobnicate"]) == 2
    capsys.readouterr()


def test_gradcheck_scalar_suite_passes(capsys):
    assert main(["gradcheck", "--suite", "scalar", "--seeds", "3"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_bench_fixedpoint_passes(capsys):
    assert main(["bench-fixedpoint", "--n", "5", "--dim", "8"]) == 0
    out = capsys.readouterr().out
    assert "anderson" in out and "broyden" in out and "plain" in out


# ---------------------------------------------------------------------------
# artifacts and provenance


def test_gen_tasks_writes_meta_sidecar(workdir):
    meta = json.load(open(workdir["tasks"] + ".meta.json", encoding="utf-8"))
    assert len(meta["config_hash"]) == 64
    assert meta["seed"] == 11
    assert meta["n_tasks"] == 40
    assert set(meta["split_counts"]) == {"train", "novel_scene",
                                         "novel_task", "novel_both"}


def test_train_artifacts_carry_config_hash(workdir):
    sidecar = json.load(open(workdir["model"] + ".json", encoding="utf-8"))
    assert len(sidecar["config_hash"]) == 64
    assert sidecar["mode"] == "equilibrium"
    assert sidecar["name"] == "refiner"
    assert os.path.exists(workdir["model"] + ".memory.jsonl")
    assert os.path.exists(workdir["model"] + ".metrics.jsonl")


def test_eval_smoke_writes_report(workdir, capsys):
    out_dir = str(workdir["root"] / "eval")
    rc = main(["eval", "--config", workdir["config"],
               "--tasks", workdir["tasks"], "--model", workdir["model"],
               "--out-dir", out_dir, "--split", "novel_task",
               "--feedback", "env", "--max-corrections", "10"])
    capsys.readouterr()
    assert rc == 0
    report = json.load(open(os.path.join(out_dir, "report.json"),
                            encoding="utf-8"))
    stats = report["splits"]["novel_task"]
    assert set(stats) == {"exec", "sr", "gcr", "n_tasks",
                          "mean_inner_iterations", "std_inner_iterations",
                          "mean_env_interactions", "mean_refiner_calls"}
    assert stats["n_tasks"] >= 1
    assert len(report["config_hash"]) == 64
    episodes = [json.loads(l) for l in
                open(os.path.join(out_dir, "episodes.jsonl"),
                     encoding="utf-8")]
    assert all(e["config_hash"] == report["config_hash"] for e in episodes)
    trace_lines = [json.loads(l) for l in
                   open(os.path.join(out_dir, "trace.jsonl"),
                        encoding="utf-8")]
    assert trace_lines[0]["kind"] == "meta"
    csv_head = open(os.path.join(out_dir, "scaling.csv"),
                    encoding="utf-8").readline()
    assert csv_head.startswith("# config_hash=")


def test_report_regeneration_is_byte_identical(workdir, capsys):
    out_dir = str(workdir["root"] / "eval")
    if not os.path.exists(os.path.join(out_dir, "report.json")):
        assert main(["eval", "--config", workdir["config"],
                     "--tasks", workdir["tasks"], "--model", workdir["model"],
                     "--out-dir", out_dir, "--split", "novel_task",
                     "--feedback", "env"]) == 0
    regen = str(workdir["root"] / "report2.json")
    rc = main(["report", "--episodes", os.path.join(out_dir, "episodes.jsonl"),
               "--out", regen])
    capsys.readouterr()
    assert rc == 0
    original = open(os.path.join(out_dir, "report.json"), "rb").read()
    assert open(regen, "rb").read() == original


def test_eval_is_deterministic_and_jobs_independent(workdir, capsys):
    dirs = []
    for tag, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
        out_dir = str(workdir["root"] / f"det_{tag}")
        assert main(["eval", "--config", workdir["config"],
                     "--tasks", workdir["tasks"], "--model", workdir["model"],
                     "--out-dir", out_dir, "--split", "novel_task",
                     "--feedback", "env", "--jobs", jobs,
                     "--limit", "4"]) == 0
        dirs.append(out_dir)
    capsys.readouterr()
    blobs = [open(os.path.join(d, "episodes.jsonl"), "rb").read()
             for d in dirs]
    assert blobs[0] == blobs[1] == blobs[2]


def test_eval_requires_world_model_for_wm_feedback(workdir, capsys):
    rc = main(["eval", "--config", workdir["config"],
               "--tasks", workdir["tasks"], "--model", workdir["model"],
               "--out-dir", str(workdir["root"] / "nope"),
               "--feedback", "wm"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "--wm" in err


def test_truncated_checkpoint_is_a_structured_error(workdir, capsys):
    broken = str(workdir["root"] / "broken.eqpm")
    blob = open(workdir["model"], "rb").read()
    with open(broken, "wb") as fh:
        fh.write(blob[:len(blob) // 2])
    with open(broken + ".json", "w", encoding="utf-8") as fh:
        fh.write(open(workdir["model"] + ".json", encoding="utf-8").read())
    rc = main(["eval", "--config", workdir["config"],
               "--tasks", workdir["tasks"], "--model", broken,
               "--out-dir", str(workdir["root"] / "nope2"),
               "--feedback", "env"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "error" in err.lower()


def test_world_model_pipeline_via_cli(workdir, capsys):
    wm_path = str(workdir["root"] / "wm.eqpm")
    rc = main(["train-world-model", "--config", workdir["config"],
               "--tasks", workdir["tasks"],
               "--memory", workdir["model"] + ".memory.jsonl",
               "--out", wm_path])
    capsys.readouterr()
    assert rc == 0
    out_dir = str(workdir["root"] / "eval_wm")
    rc = main(["eval", "--config", workdir["config"],
               "--tasks", workdir["tasks"], "--model", workdir["model"],
               "--wm", wm_path, "--out-dir", out_dir,
               "--feedback", "both", "--limit", "2"])
    capsys.readouterr()
    assert rc == 0
    assert os.path.exists(os.path.join(out_dir, "report.json"))


# ---------------------------------------------------------------------------
# report math


def _record(split="novel_task", success=True, executed=True, gcr=1.0,
            inner=(2,), env=1, calls=2):
    return {"task_id": "t00000", "split": split, "success": success,
            "executed": executed, "gcr": gcr, "inner_counts": list(inner),
            "env_interactions": env, "refiner_calls": calls,
            "config_hash": "h", "seed": 0}


def test_report_single_success_is_all_hundred():
    stats = build_report([_record()])["splits"]["novel_task"]
    assert stats["exec"] == 100.0
    assert stats["sr"] == 100.0
    assert stats["gcr"] == 100.0
    assert stats["n_tasks"] == 1


def test_report_means_gcr():
    records = [_record(gcr=1.0), _record(gcr=0.5, success=False)]
    stats = build_report(records)["splits"]["novel_task"]
    assert stats["gcr"] == 75.0
    assert stats["sr"] == 50.0


def test_report_flattens_inner_iteration_stats():
    records = [_record(inner=(2, 4)), _record(inner=(6,))]
    stats = build_report(records)["splits"]["novel_task"]
    assert stats["mean_inner_iterations"] == 4.0
    assert stats["std_inner_iterations"] == round(float((8 / 3) ** 0.5), 4)


def test_report_groups_by_split():
    records = [_record(split="train"), _record(split="novel_task")]
    report = build_report(records)
    assert set(report["splits"]) == {"train", "novel_task"}


def test_report_requires_episodes():
    with pytest.raises(ConfigError):
        build_report([])
