"""Command-line entry point: dataset generation, training, evaluation,
numerical self-checks, and report emission.

Configuration is a single JSON document with nested sections; unknown keys
are rejected with the full dotted path.  Every artifact this module writes
carries the producing config hash and seed: JSON objects embed them as
top-level keys, JSONL streams either embed them per line (episodes) or in a
leading meta line (traces), pure data files get a ``<path>.meta.json``
sidecar (datasets, memory), checkpoints record them in their JSON sidecar,
and CSV files carry a comment header.

Exit codes: 0 success, 1 configuration or runtime error, 2 usage error.
The environment variable ``EQPM_SEED`` overrides the config seeds; an
explicit ``--seed`` flag overrides both.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .eqgrad import (SOLVERS, SquaredErrorLoss, grad_ift, make_attention_map,
                     make_linear_map, make_scalar_affine_map, solve_forward)
from .fixedpoint import SolveConfig
from .homeworld import (TaskRecord, generate_dataset, load_dataset,
                        save_dataset, split_dataset)
from .memory import MemoryBuffer
from .planner import (PlannerConfig, SCHEDULES, plan_task)
from .refiner import (ModelConfig, RefinerModel, Vocabulary, load_model,
                      save_model)
from .trainer import (TrainConfig, save_metrics, split_env_records,
                      train_equilibrium, train_supervised, train_world_model,
                      wm_category_accuracy)
from .worldmodel import (WM_CHECKPOINT_NAME, WorldModel, load_world_model)

SPLITS = ("train", "novel_scene", "novel_task", "novel_both")

DEFAULT_CONFIG: Dict[str, Any] = {
    "dataset": {"n_tasks": 500, "n_scenes": 6, "size": "small", "seed": 7},
    "model": {"d_model": 64, "n_heads": 4, "n_blocks": 2, "window": 256,
              "d_mlp": 128},
    "solver": {"method": "anderson", "tol": 1e-8, "max_iter": 200,
               "memory": 5, "damping": 1.0},
    "planner": {"inner_bound": 8, "cycle_cap": 4, "alternate_env_first": True,
                "first_step_topk": 10, "max_new_tokens": 96},
    "training": {"mode": "equilibrium", "iterations": 6,
                 "learning_rate": 2e-4, "batch_size": 32,
                 "train_outer_bound": 3, "warmup_epochs": 1,
                 "warmup_lr": 1e-3, "task_cap": None,
                 "steps_per_iteration": None, "wm_epochs": 5,
                 "wm_holdout_fraction": 0.2},
    "evaluation": {"split": "novel_task", "feedback": "env",
                   "max_corrections": 10, "noise_ratio": 0.0,
                   "truncate_illegal": False, "jobs": 1},
    "seeds": {"train": 0, "eval": 0},
    "paths": {"workdir": "runs"},
}


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad type, missing file)."""


# ---------------------------------------------------------------------------
# configuration


def merge_config(user: Dict[str, Any],
                 defaults: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Deep-merge `user` over the defaults, rejecting unknown keys."""
    base = copy.deepcopy(defaults if defaults is not None else DEFAULT_CONFIG)

    def walk(dst: Dict[str, Any], src: Dict[str, Any], path: str) -> None:
        for key, value in src.items():
            here = f"{path}.{key}" if path else key
            if key not in dst:
                raise ConfigError(f"unknown config key: {here}")
            if isinstance(dst[key], dict) and not isinstance(value, dict):
                raise ConfigError(f"config section {here} must be an object")
            if isinstance(dst[key], dict):
                walk(dst[key], value, here)
            else:
                dst[key] = value

    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    walk(base, user, "")
    return base


def load_config(path: Optional[str]) -> Dict[str, Any]:
    """Load and validate a config file; None yields pure defaults.

    EQPM_SEED, when set, overrides both seeds.train and seeds.eval.
    """
    user: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = merge_config(user)
    env_seed = os.environ.get("EQPM_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"EQPM_SEED must be an integer, got {env_seed!r}") from exc
        cfg["seeds"]["train"] = seed
        cfg["seeds"]["eval"] = seed
    return cfg


def config_hash(cfg: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON encoding of the full config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_meta_sidecar(path: str, cfg_hash: str, seed: int,
                        **extra: Any) -> None:
    meta = {"config_hash": cfg_hash, "seed": seed}
    meta.update(extra)
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _task_seed(base_seed: int, task_id: str) -> int:
    """Stable per-task seed, independent of evaluation order and job count."""
    digest = hashlib.sha256(f"{base_seed}:{task_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# model plumbing


def _model_config(cfg: Dict[str, Any], vocab: Vocabulary) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(vocab_size=vocab.size, d_model=m["d_model"],
                       n_heads=m["n_heads"], n_blocks=m["n_blocks"],
                       window=m["window"], d_mlp=m["d_mlp"])


def _train_config(cfg: Dict[str, Any], seed: int, mode: str) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(iterations=t["iterations"],
                       learning_rate=t["learning_rate"],
                       batch_size=t["batch_size"],
                       train_outer_bound=t["train_outer_bound"],
                       seed=seed, mode=mode,
                       warmup_epochs=t["warmup_epochs"],
                       warmup_lr=t["warmup_lr"],
                       task_cap=t["task_cap"],
                       steps_per_iteration=t["steps_per_iteration"])


def _warn_hash_mismatch(path: str, cfg_hash: str) -> None:
    """Checkpoints record their producing config hash; mismatch is a warning."""
    sidecar = path + ".json"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            recorded = json.load(fh).get("config_hash")
    except (OSError, json.JSONDecodeError):
        return
    if recorded is not None and recorded != cfg_hash:
        print(f"warning: {path} was produced under a different config "
              f"(hash {recorded[:12]}... vs {cfg_hash[:12]}...)",
              file=sys.stderr)


# ---------------------------------------------------------------------------
# reporting


def build_report(records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Aggregate per-episode records into the per-split report document.

    Pure function of the episode records, so regenerating a report from the
    same episode file is byte-identical.
    """
    if not records:
        raise ConfigError("no episodes to report on")
    hashes = sorted({r.get("config_hash", "") for r in records})
    seeds = sorted({r.get("seed", 0) for r in records})
    by_split: Dict[str, List[Dict[str, Any]]] = {}
    for rec in records:
        by_split.setdefault(rec["split"], []).append(rec)
    splits: Dict[str, Any] = {}
    for split in sorted(by_split):
        rows = by_split[split]
        inner = [it for r in rows for it in r["inner_counts"]]
        splits[split] = {
            "exec": round(100.0 * float(np.mean([r["executed"] for r in rows])), 4),
            "sr": round(100.0 * float(np.mean([r["success"] for r in rows])), 4),
            "gcr": round(100.0 * float(np.mean([r["gcr"] for r in rows])), 4),
            "n_tasks": len(rows),
            "mean_inner_iterations": round(float(np.mean(inner)), 4),
            "std_inner_iterations": round(float(np.std(inner)), 4),
            "mean_env_interactions": round(
                float(np.mean([r["env_interactions"] for r in rows])), 4),
            "mean_refiner_calls": round(
                float(np.mean([r["refiner_calls"] for r in rows])), 4),
        }
    return {
        "config_hash": hashes[0] if len(hashes) == 1 else "multiple",
        "seed": seeds[0] if len(seeds) == 1 else "multiple",
        "splits": splits,
    }


def write_report(records: Sequence[Dict[str, Any]], path: str) -> Dict[str, Any]:
    report = build_report(records)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def write_scaling_csv(records: Sequence[Dict[str, Any]], path: str,
                      cfg_hash: str, seed: int) -> None:
    """(refiner calls, success) points for compute-scaling plots."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash} seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["refiner_calls", "success"])
        for rec in records:
            writer.writerow([rec["refiner_calls"], int(rec["success"])])


def read_episode_records(path: str) -> List[Dict[str, Any]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# ---------------------------------------------------------------------------
# evaluation


def _planner_config(cfg: Dict[str, Any], schedule: str, max_corrections: int,
                    noise_ratio: float, truncate_illegal: bool) -> PlannerConfig:
    p = cfg["planner"]
    return PlannerConfig(outer_bound=max_corrections,
                         inner_bound=p["inner_bound"],
                         cycle_cap=p["cycle_cap"],
                         schedule=schedule,
                         alternate_env_first=p["alternate_env_first"],
                         first_step_topk=p["first_step_topk"],
                         noise_ratio=noise_ratio,
                         max_new_tokens=p["max_new_tokens"],
                         truncate_illegal=truncate_illegal)


def evaluate_task(model: RefinerModel, task: TaskRecord, pcfg: PlannerConfig,
                  world_model: Optional[WorldModel], seed: int,
                  cfg_hash: str, base_seed: int
                  ) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """Run one episode; returns (episode record, trace rows)."""
    ep = plan_task(model, task, pcfg, world_model=world_model, seed=seed)
    record = {
        "task_id": ep.task_id,
        "split": task.split,
        "template": task.template,
        "success": bool(ep.success),
        "executed": bool(ep.executed),
        "gcr": round(float(ep.gcr), 6),
        "env_interactions": ep.env_interactions,
        "refiner_calls": ep.refiner_calls,
        "inner_counts": list(ep.inner_counts),
        "outcome_category": ep.outcome.category,
        "final_plan_text": ep.final_plan_text,
        "config_hash": cfg_hash,
        "seed": base_seed,
    }
    rows = [step.trace_json(ep.task_id) for step in ep.steps]
    return record, rows


_WORKER: Dict[str, Any] = {}


def _eval_worker_init(model_path: str, wm_path: Optional[str],
                      pcfg_json: Dict[str, Any], cfg_hash: str,
                      base_seed: int) -> None:
    _WORKER["model"] = load_model(model_path)
    _WORKER["wm"] = load_world_model(wm_path) if wm_path else None
    _WORKER["pcfg"] = PlannerConfig(**pcfg_json)
    _WORKER["cfg_hash"] = cfg_hash
    _WORKER["base_seed"] = base_seed


def _eval_worker_run(payload: Tuple[Dict[str, Any], int]
                     ) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    task_json, seed = payload
    task = TaskRecord.from_json(task_json)
    return evaluate_task(_WORKER["model"], task, _WORKER["pcfg"],
                         _WORKER["wm"], seed, _WORKER["cfg_hash"],
                         _WORKER["base_seed"])


def run_evaluation(model_path: str, wm_path: Optional[str],
                   tasks: Sequence[TaskRecord], pcfg: PlannerConfig,
                   cfg_hash: str, base_seed: int, jobs: int = 1
                   ) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
    """Evaluate every task; per-task seeds make results independent of
    `jobs`, and task order in the output matches the input order."""
    payloads = [(t.to_json(), _task_seed(base_seed, t.task_id)) for t in tasks]
    records: List[Dict[str, Any]] = []
    trace_rows: List[Dict[str, Any]] = []
    if jobs <= 1:
        model = load_model(model_path)
        wm = load_world_model(wm_path) if wm_path else None
        for task, (_, seed) in zip(tasks, payloads):
            rec, rows = evaluate_task(model, task, pcfg, wm, seed,
                                      cfg_hash, base_seed)
            records.append(rec)
            trace_rows.extend(rows)
        return records, trace_rows
    pcfg_json = {
        "outer_bound": pcfg.outer_bound, "inner_bound": pcfg.inner_bound,
        "cycle_cap": pcfg.cycle_cap, "schedule": pcfg.schedule,
        "alternate_env_first": pcfg.alternate_env_first,
        "first_step_topk": pcfg.first_step_topk,
        "noise_ratio": pcfg.noise_ratio,
        "max_new_tokens": pcfg.max_new_tokens,
        "truncate_illegal": pcfg.truncate_illegal,
    }
    with concurrent.futures.ProcessPoolExecutor(
            max_workers=jobs, initializer=_eval_worker_init,
            initargs=(model_path, wm_path, pcfg_json, cfg_hash,
                      base_seed)) as pool:
        for rec, rows in pool.map(_eval_worker_run, payloads):
            records.append(rec)
            trace_rows.extend(rows)
    return records, trace_rows


# ---------------------------------------------------------------------------
# gradcheck / bench suites


GRADCHECK_FAMILIES = ("scalar", "linear", "attention")


def _gradcheck_case(family: str, seed: int, tol: float) -> Tuple[float, bool]:
    """Implicit gradient vs. central differences of the full re-solved
    pipeline theta -> x*(theta) -> loss; returns (max rel error, pass)."""
    rng = np.random.default_rng([97, seed])
    if family == "scalar":
        map_, theta = make_scalar_affine_map(w=float(rng.uniform(0.2, 0.8)),
                                             b=float(rng.normal()))
        c = None
    elif family == "linear":
        map_, theta = make_linear_map(dim=6, seed=seed, rho=0.6)
        c = None
    elif family == "attention":
        map_, theta, c = make_attention_map(t=3, d=4, seed=seed)
    else:
        raise ConfigError(f"unknown gradcheck family {family!r}")
    x0 = np.zeros(map_.x_shape)
    y = rng.normal(size=map_.x_shape)
    loss = SquaredErrorLoss()
    scfg = SolveConfig(tol=1e-13, max_iter=500)
    x_star = solve_forward(map_, x0, c, theta, "anderson", scfg).state
    # contraction factors approaching 0.8 need ~100 series terms
    analytic = grad_ift(map_, loss, x_star, c, theta, y,
                        neumann_terms=100, early_stop=1e-14)

    def pipeline(arrays: Dict[str, np.ndarray]) -> float:
        th = nm.ParameterSet({k: v.copy() for k, v in arrays.items()})
        res = solve_forward(map_, x0, c, th, "anderson", scfg)
        return loss.value(res.state, y)

    # h balances truncation (~h^2) against re-solve noise (~tol / 2h)
    numeric = nm.finite_difference(pipeline, theta.as_dict(), h=1e-4)
    err = nm.max_relative_error(analytic, numeric, floor=1e-8)
    return err, err < tol


def run_gradcheck(suite: str, n_seeds: int = 10, tol: float = 1e-4,
                  out=None) -> bool:
    out = out if out is not None else sys.stdout
    families = GRADCHECK_FAMILIES if suite == "all" else (suite,)
    all_ok = True
    print(f"{'family':<12} {'seeds':>5} {'max rel err':>12}   result", file=out)
    for family in families:
        worst = 0.0
        ok = True
        for seed in range(n_seeds):
            err, good = _gradcheck_case(family, seed, tol)
            worst = max(worst, err)
            ok = ok and good
        all_ok = all_ok and ok
        print(f"{family:<12} {n_seeds:>5} {worst:>12.3e}   "
              f"{'PASS' if ok else 'FAIL'}", file=out)
    return all_ok


def run_bench_fixedpoint(n: int = 20, dim: int = 16, seed: int = 0,
                         tol: float = 1e-10, max_iter: int = 300,
                         out=None) -> bool:
    """Race the solvers on random linear contractions against the direct
    solve x = (I - A)^{-1} b; prints an iteration/accuracy table."""
    out = out if out is not None else sys.stdout
    scfg = SolveConfig(tol=tol, max_iter=max_iter)
    stats = {name: {"iters": [], "err": 0.0, "converged": 0}
             for name in sorted(SOLVERS)}
    anderson_le_plain = 0
    for i in range(n):
        map_, theta = make_linear_map(dim=dim, seed=seed + i, rho=0.6)
        a, b = theta["A"], theta["b"]
        direct = np.linalg.solve(np.eye(dim) - a, b.reshape(dim, 1)).reshape(1, dim)
        iters_here = {}
        for name in stats:
            res = solve_forward(map_, np.zeros((1, dim)), None, theta,
                                name, scfg)
            stats[name]["iters"].append(res.iterations)
            stats[name]["converged"] += int(res.converged)
            err = float(np.max(np.abs(res.state - direct)))
            stats[name]["err"] = max(stats[name]["err"], err)
            iters_here[name] = res.iterations
        anderson_le_plain += int(iters_here["anderson"] <= iters_here["plain"])
    print(f"{n} contractions, dim {dim}, tol {tol:g}", file=out)
    print(f"{'solver':<10} {'mean iters':>10} {'max iters':>9} "
          f"{'converged':>9} {'max err vs direct':>18}", file=out)
    ok = True
    for name in sorted(stats):
        s = stats[name]
        ok = ok and s["converged"] == n and s["err"] < 1e-6
        print(f"{name:<10} {np.mean(s['iters']):>10.1f} "
              f"{max(s['iters']):>9d} {s['converged']:>9d}/{n} "
              f"{s['err']:>18.3e}", file=out)
    ok = ok and anderson_le_plain == n
    print(f"anderson <= plain iterations on {anderson_le_plain}/{n} instances",
          file=out)
    return ok


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_tasks(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    d = cfg["dataset"]
    n_tasks = args.n_tasks if args.n_tasks is not None else d["n_tasks"]
    seed = args.seed if args.seed is not None else d["seed"]
    n_scenes = args.n_scenes if args.n_scenes is not None else d["n_scenes"]
    tasks = generate_dataset(n_tasks, seed=seed, n_scenes=n_scenes,
                             size=d["size"])
    groups = split_dataset(tasks, seed=seed)
    save_dataset(tasks, args.out)
    h = config_hash(cfg)
    counts = {k: len(v) for k, v in groups.items()}
    _write_meta_sidecar(args.out, h, seed, n_tasks=len(tasks),
                        split_counts=counts)
    print(f"wrote {len(tasks)} tasks to {args.out} "
          f"(splits: {json.dumps(counts, sort_keys=True)})")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    h = config_hash(cfg)
    mode = args.mode or cfg["training"]["mode"]
    seed = args.seed if args.seed is not None else cfg["seeds"]["train"]
    tasks = load_dataset(args.tasks)
    train_tasks = [t for t in tasks if t.split == "train"]
    if not train_tasks:
        raise ConfigError(f"no train-split tasks in {args.tasks}")
    vocab = Vocabulary()
    model = RefinerModel.create(vocab, seed=seed, cfg=_model_config(cfg, vocab))
    tcfg = _train_config(cfg, seed, mode)
    t0 = time.time()
    if mode == "equilibrium":
        memory = MemoryBuffer()
        log = train_equilibrium(model, train_tasks, memory, tcfg)
        memory.save(args.out + ".memory.jsonl")
        _write_meta_sidecar(args.out + ".memory.jsonl", h, seed,
                            n_records=len(memory))
    else:
        log = train_supervised(model, train_tasks, tcfg)
    save_model(args.out, model,
               extra={"config_hash": h, "seed": seed, "mode": mode})
    save_metrics(log, args.out + ".metrics.jsonl")
    _write_meta_sidecar(args.out + ".metrics.jsonl", h, seed)
    final = [e.mean_loss for e in log if math.isfinite(e.mean_loss)]
    print(f"trained {mode} on {len(train_tasks)} tasks in "
          f"{time.time() - t0:.1f}s; final loss "
          f"{final[-1]:.4f}" if final else "trained (no finite losses)")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_train_world_model(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    h = config_hash(cfg)
    seed = args.seed if args.seed is not None else cfg["seeds"]["train"]
    tasks = load_dataset(args.tasks)
    memory = MemoryBuffer.load(args.memory)
    vocab = Vocabulary()
    wm = WorldModel.create(vocab, seed=seed, cfg=_model_config(cfg, vocab))
    tcfg = _train_config(cfg, seed, "supervised")
    holdout_fraction = cfg["training"]["wm_holdout_fraction"]
    train_mem, holdout = memory, []
    if holdout_fraction > 0:
        kept, holdout = split_env_records(memory, holdout_fraction, seed)
        train_mem = MemoryBuffer()
        for rec in sorted(kept, key=lambda r: r.record_id):
            train_mem.append(rec)
    log = train_world_model(wm, train_mem, tasks, tcfg,
                            epochs=cfg["training"]["wm_epochs"])
    save_model(args.out, wm.net, name=WM_CHECKPOINT_NAME,
               extra={"config_hash": h, "seed": seed})
    save_metrics(log, args.out + ".metrics.jsonl")
    _write_meta_sidecar(args.out + ".metrics.jsonl", h, seed)
    msg = f"world model trained on {len(train_mem)} records"
    if holdout:
        acc, baseline = wm_category_accuracy(wm, memory, tasks, holdout)
        msg += (f"; held-out category accuracy {acc:.3f} "
                f"(majority baseline {baseline:.3f}, n={len(holdout)})")
    print(msg)
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    h = config_hash(cfg)
    e = cfg["evaluation"]
    split = args.split or e["split"]
    feedback = args.feedback or e["feedback"]
    max_corr = (args.max_corrections if args.max_corrections is not None
                else e["max_corrections"])
    noise = args.noise_ratio if args.noise_ratio is not None else e["noise_ratio"]
    truncate = args.truncate_illegal or e["truncate_illegal"]
    jobs = args.jobs if args.jobs is not None else e["jobs"]
    seed = args.seed if args.seed is not None else cfg["seeds"]["eval"]
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r} (expected one of {SPLITS})")
    if feedback not in SCHEDULES:
        raise ConfigError(f"unknown feedback setting {feedback!r} "
                          f"(expected one of {SCHEDULES})")
    if feedback in ("wm", "both") and not args.wm:
        raise ConfigError(f"--feedback {feedback} requires --wm CHECKPOINT")
    tasks = [t for t in load_dataset(args.tasks) if t.split == split]
    if args.limit is not None:
        tasks = tasks[:args.limit]
    if not tasks:
        raise ConfigError(f"no tasks in split {split!r} of {args.tasks}")
    _warn_hash_mismatch(args.model, h)
    if args.wm:
        _warn_hash_mismatch(args.wm, h)
    pcfg = _planner_config(cfg, feedback, max_corr, noise, truncate)
    os.makedirs(args.out_dir, exist_ok=True)
    t0 = time.time()
    records, trace_rows = run_evaluation(args.model, args.wm, tasks, pcfg,
                                         h, seed, jobs=jobs)
    episodes_path = os.path.join(args.out_dir, "episodes.jsonl")
    with open(episodes_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    trace_path = os.path.join(args.out_dir, "trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "meta", "config_hash": h, "seed": seed},
                            sort_keys=True) + "\n")
        for row in trace_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    report = write_report(records, os.path.join(args.out_dir, "report.json"))
    write_scaling_csv(records, os.path.join(args.out_dir, "scaling.csv"),
                      h, seed)
    stats = report["splits"][split]
    print(f"evaluated {stats['n_tasks']} {split} tasks "
          f"(feedback={feedback}, max_corrections={max_corr}, "
          f"noise={noise:g}, jobs={jobs}) in {time.time() - t0:.1f}s")
    print(f"exec {stats['exec']:.1f}  sr {stats['sr']:.1f}  "
          f"gcr {stats['gcr']:.1f}  "
          f"inner {stats['mean_inner_iterations']:.2f}"
          f"+-{stats['std_inner_iterations']:.2f}  "
          f"env {stats['mean_env_interactions']:.2f}  "
          f"refiner {stats['mean_refiner_calls']:.2f}")
    print(f"report: {os.path.join(args.out_dir, 'report.json')}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    records = read_episode_records(args.episodes)
    report = write_report(records, args.out)
    if args.csv:
        write_scaling_csv(records, args.csv,
                          report["config_hash"],
                          report["seed"] if isinstance(report["seed"], int)
                          else 0)
    for split, stats in report["splits"].items():
        print(f"{split}: exec {stats['exec']:.1f}  sr {stats['sr']:.1f}  "
              f"gcr {stats['gcr']:.1f}  n {stats['n_tasks']}")
    print(f"report: {args.out}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.suite != "all" and args.suite not in GRADCHECK_FAMILIES:
        raise ConfigError(f"unknown suite {args.suite!r}")
    ok = run_gradcheck(args.suite, n_seeds=args.seeds, tol=args.tol)
    return 0 if ok else 1


def _cmd_bench_fixedpoint(args: argparse.Namespace) -> int:
    ok = run_bench_fixedpoint(n=args.n, dim=args.dim, seed=args.seed)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqplan",
        description="Equilibrium sequence planning: generate household "
                    "tasks, train plan refiners, and evaluate closed-loop "
                    "correction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="generate a procedural task dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-tasks", type=int, default=None)
    p.add_argument("--n-scenes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_gen_tasks)

    p = sub.add_parser("train", help="train the plan refiner")
    p.add_argument("--config", default=None)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("equilibrium", "supervised"),
                   default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("train-world-model",
                       help="train the feedback predictor from a memory file")
    p.add_argument("--config", default=None)
    p.add_argument("--tasks", required=True)
    p.add_argument("--memory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_train_world_model)

    p = sub.add_parser("eval", help="closed-loop evaluation on a task split")
    p.add_argument("--config", default=None)
    p.add_argument("--tasks", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--wm", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=SPLITS, default=None)
    p.add_argument("--feedback", choices=SCHEDULES, default=None)
    p.add_argument("--max-corrections", type=int, default=None)
    p.add_argument("--noise-ratio", type=float, default=None)
    p.add_argument("--truncate-illegal", action="store_true")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate only the first N tasks of the split")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report",
                       help="regenerate the report from an episode log")
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("gradcheck",
                       help="implicit gradients vs. finite differences")
    p.add_argument("--suite", choices=GRADCHECK_FAMILIES + ("all",),
                   default="all")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("bench-fixedpoint",
                       help="race the fixed-point solvers on contractions")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_bench_fixedpoint)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, nm.NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
