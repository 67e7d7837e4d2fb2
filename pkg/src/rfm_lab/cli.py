"""``rfm-lab``: one command line wiring the library into seeded pipelines.

Subcommands cover the full experimental loop: ``collect`` rolls scripted
or checkpoint-driven episodes into a dataset file, ``train`` fits a
model to a dataset, ``eval`` scores a checkpoint, ``analyze`` turns a
checkpoint plus dataset (or an agent log) into figure CSVs, and
``agent-train`` runs actor-critic learners alongside scripted experts.

Every run writes its artifacts plus one JSON manifest recording the
effective configuration, the seed, and SHA-256 hashes of all inputs and
outputs. ``rerun --manifest M`` re-executes the recorded argv and exits
1 unless every output comes back byte-identical.

Conventions shared by all subcommands:

* exit codes: 0 success, 1 missing/corrupt artifacts or I/O failure,
  2 bad flags or configuration;
* relative paths resolve under ``$RFM_LAB_DATA_DIR`` when it is set;
* per-flag precedence: command line > ``--config`` JSON file >
  built-in defaults; the merged result lands in the manifest;
* one ``--seed`` per run, fanned out deterministically (parameter
  init, batch schedule, episode seeds, expert epsilon draws).
"""

import argparse
import csv
import json
import math
import multiprocessing
import os
import sys
import time

import numpy as np

from . import analysis
from .data import (AgentPolicy, Dataset, collect_episode, deserialize,
                   make_driver, serialize, _episode_doc, _parse_episode,
                   DATASET_FORMAT)
from .envs import D_VERTEX, game_config
from .errors import ConfigurationError, ParseError
from .manifest import (build_manifest, changed_artifacts, load_manifest,
                       write_manifest)
from .models import MODEL_KINDS, build_model, build_model_from_config, model_config
from .optim import Adam
from .params import load_checkpoint, save_checkpoint
from .policies import (ScriptedPolicy, load_agent, make_augmented_agents,
                       make_baseline_agents, save_agent, train_agents)
from .training import (copy_last_action_lengths, eval_perfect_rollout,
                        mean_baseline_mse, return_eval_mse,
                        train_action_model, train_return_model)

CLI_GAMES = {
    "coopnav": ("coopnav", {}),
    "coin": ("coin", {}),
    "staghunt2": ("staghunt", {"n_agents": 2}),
    "staghunt4": ("staghunt", {"n_agents": 4}),
}


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve(path: str) -> str:
    """Relative paths live under $RFM_LAB_DATA_DIR when it is set."""
    root = os.environ.get("RFM_LAB_DATA_DIR", "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _load_config_file(path):
    if not path:
        return {}
    with open(_resolve(path)) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path}: {e}")
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return doc


def _effective(defaults: dict, file_doc: dict, args) -> dict:
    """Merge one subcommand's settings: flags > config file > defaults."""
    unknown = set(file_doc) - set(defaults)
    if unknown:
        raise ConfigurationError(
            f"unknown config keys {sorted(unknown)}; "
            f"valid keys: {sorted(defaults)}")
    eff = dict(defaults)
    eff.update(file_doc)
    explicit = set(file_doc)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            eff[key] = val
            explicit.add(key)
    eff["_explicit"] = explicit
    return eff


def _require(eff: dict, *keys):
    for key in keys:
        if eff.get(key) is None:
            raise ConfigurationError(
                f"--{key.replace('_', '-')} is required "
                "(flag or config file)")


def _json_flag(value, flag: str) -> dict:
    if value is None:
        return {}
    if isinstance(value, dict):
        return value
    try:
        doc = json.loads(value)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{flag} must be a JSON object: {e}")
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{flag} must be a JSON object")
    return doc


def _cli_game_config(name) -> dict:
    if name not in CLI_GAMES:
        raise ConfigurationError(
            f"unknown game {name!r}; valid games: {', '.join(CLI_GAMES)}")
    base, overrides = CLI_GAMES[name]
    return game_config(base, **overrides)


def _emit_manifest(command, argv, config, seed, inputs, outputs, started,
                   path):
    """Write the run manifest next to the primary output."""
    config = {k: v for k, v in config.items() if k != "_explicit"}
    doc = build_manifest(
        command=command, argv=argv, config=config, seed=seed,
        inputs=inputs, outputs=outputs,
        duration=time.perf_counter() - started)
    write_manifest(path, doc)
    return doc


def _manifest_path_for(out_path: str, is_dir: bool = False) -> str:
    if is_dir:
        return os.path.join(out_path, "manifest.json")
    return out_path + ".manifest.json"


def _workers(eff) -> int:
    w = int(eff.get("workers") or 1)
    if w > 1 and "fork" in multiprocessing.get_all_start_methods():
        return w
    return 1


def _json_line(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


# ---------------------------------------------------------------------------
# collect


_POOL_CTX: dict = {}


def _collect_doc_worker(item):
    i, seed, split = item
    episode = collect_episode(_POOL_CTX["config"], _POOL_CTX["driver"], seed)
    return i, _episode_doc(episode, split)


def _collect_policy(spec: str, config: dict, epsilon: float, seed: int):
    """Build the episode driver named by --policy; returns (policy, inputs)."""
    if spec == "scripted":
        return ScriptedPolicy(config["game"], epsilon=epsilon, seed=seed), []
    if spec.startswith("checkpoint:"):
        pattern = spec[len("checkpoint:"):]
        paths = []
        agents = []
        for i in range(config["n_agents"]):
            path = _resolve(pattern.replace("{i}", str(i)))
            agents.append(load_agent(path))
            paths.append(path)
        return AgentPolicy(agents, config), sorted(set(paths))
    raise ConfigurationError(
        f"unknown policy {spec!r}; expected 'scripted' or 'checkpoint:PATH' "
        "(PATH may contain {i} for per-agent files)")


def cmd_collect(args, argv) -> int:
    started = time.perf_counter()
    file_doc = _load_config_file(args.config)
    defaults = {"game": None, "episodes": None, "seed": 0,
                "policy": "scripted", "eval_episodes": 0, "epsilon": 0.05,
                "workers": 1, "out": None}
    eff = _effective(defaults, file_doc, args)
    _require(eff, "game", "episodes", "out")
    if eff["eval_episodes"] > eff["episodes"]:
        raise ConfigurationError("--eval-episodes exceeds --episodes")

    config = _cli_game_config(eff["game"])
    seed = int(eff["seed"])
    n = int(eff["episodes"])
    n_eval = int(eff["eval_episodes"])
    policy, inputs = _collect_policy(eff["policy"], config,
                                     float(eff["epsilon"]), seed)
    driver = make_driver(policy, config)
    splits = ["train"] * (n - n_eval) + ["eval"] * n_eval

    workers = _workers(eff)
    if workers > 1:
        _POOL_CTX.update({"config": config, "driver": driver})
        items = [(i, seed + i, splits[i]) for i in range(n)]
        try:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(workers) as pool:
                docs = dict(pool.map(_collect_doc_worker, items))
        finally:
            _POOL_CTX.clear()
        episodes = []
        for i in range(n):
            episode, _ = _parse_episode(docs[i], line=i + 2)
            episodes.append(episode)
    else:
        episodes = [collect_episode(config, driver, seed + i)
                    for i in range(n)]

    header = {
        "format_version": DATASET_FORMAT,
        "game": config["game"],
        "n_episodes": n,
        "base_seed": seed,
        "policy": eff["policy"],
    }
    dataset = Dataset(header=header, episodes=episodes, splits=splits)
    out = _resolve(eff["out"])
    _ensure_parent(out)
    serialize(dataset, out)

    _emit_manifest("collect", argv, eff, seed, inputs, [out], started,
                   _manifest_path_for(out))
    print(f"collected {n} episodes of {eff['game']} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _dataset_dims(dataset) -> dict:
    first = dataset.episodes[0]
    graph = first.steps[0].graph
    return {"d_v_in": int(graph.v.values.shape[1]),
            "n_vertices": int(graph.v.values.shape[0]),
            "n_agents": first.n_agents}


def _write_history(path, history):
    with open(path, "w") as f:
        for row in history:
            f.write(_json_line(row))


def cmd_train(args, argv) -> int:
    started = time.perf_counter()
    file_doc = _load_config_file(args.config)
    defaults = {"model": None, "task": None, "data": None, "out": None,
                "steps": 1000, "batch_size": 128, "lr": 1e-3, "seed": 0,
                "eval_every": 0, "resume": None, "model_config": None}
    eff = _effective(defaults, file_doc, args)
    _require(eff, "task", "data", "out")
    if eff["task"] not in ("action", "return"):
        raise ConfigurationError(
            f"unknown task {eff['task']!r}; valid tasks: action, return")

    data_path = _resolve(eff["data"])
    dataset = deserialize(data_path)
    dims = _dataset_dims(dataset)
    head_size = 5 if eff["task"] == "action" else 1
    seed = int(eff["seed"])
    inputs = [data_path]

    step_offset = 0
    if eff["resume"]:
        resume_path = _resolve(eff["resume"])
        out_path = _resolve(eff["out"])
        if os.path.abspath(resume_path) == os.path.abspath(out_path):
            raise ConfigurationError(
                "--resume source must differ from --out; "
                "runs never overwrite their own inputs")
        doc = load_checkpoint(resume_path)
        if eff["model"] and doc["model_config"].get("kind") != eff["model"]:
            raise ConfigurationError(
                f"checkpoint holds a {doc['model_config'].get('kind')!r} "
                f"model, --model says {eff['model']!r}")
        model = build_model_from_config(doc["model_config"])
        model.store.load_values(doc["values"])
        optimizer = Adam(model.store, lr=float(eff["lr"]))
        if doc["optimizer"]:
            optimizer.load_state(doc["optimizer"])
            if "lr" not in eff["_explicit"]:
                # keep the stored learning rate unless one was asked for
                eff["lr"] = optimizer.lr
            optimizer.lr = float(eff["lr"])
        step_offset = int(doc["step"])
        eff["model"] = model.kind
        inputs.append(resume_path)
    else:
        _require(eff, "model")
        if eff["model"] not in MODEL_KINDS:
            raise ConfigurationError(
                f"unknown model {eff['model']!r}; "
                f"valid models: {', '.join(MODEL_KINDS)}")
        cfg = {"d_v_in": dims["d_v_in"], "head_size": head_size}
        if eff["model"] == "mlplstm":
            cfg["n_vertices"] = dims["n_vertices"]
            cfg["n_agents"] = dims["n_agents"]
        cfg.update(_json_flag(eff["model_config"], "--model-config"))
        model = build_model(eff["model"], cfg, seed=seed)
        optimizer = Adam(model.store, lr=float(eff["lr"]))

    if model.head_size != head_size:
        raise ConfigurationError(
            f"task {eff['task']!r} needs a head of size {head_size}, "
            f"checkpoint has {model.head_size}")

    train_cfg = {"steps": int(eff["steps"]),
                 "batch_size": int(eff["batch_size"]),
                 "lr": float(eff["lr"]), "seed": seed,
                 "eval_every": int(eff["eval_every"])}
    if eff["task"] == "action":
        model, history = train_action_model(
            model, dataset, train_cfg,
            optimizer=optimizer, step_offset=step_offset)
    else:
        # return models always mix in teammate-pruned graphs so the
        # marginal analysis stays within distribution
        train_cfg["mixing"] = True
        model, history = train_return_model(
            model, dataset, train_cfg,
            optimizer=optimizer, step_offset=step_offset)

    out = _resolve(eff["out"])
    _ensure_parent(out)
    save_checkpoint(out, model.store, step=step_offset + int(eff["steps"]),
                    model_config=model_config(model),
                    optimizer_state=optimizer.state())
    log_path = out + ".log"
    _write_history(log_path, history)

    eff["mixing"] = eff["task"] == "return"
    _emit_manifest("train", argv, eff, seed, inputs, [out, log_path], started,
                   _manifest_path_for(out))
    first, last = history[0]["loss"], history[-1]["loss"]
    print(f"trained {eff['model']} ({eff['task']}) "
          f"steps {step_offset}..{step_offset + int(eff['steps'])} "
          f"loss {first:.4f} -> {last:.4f}; checkpoint {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_model(path: str):
    doc = load_checkpoint(path)
    model = build_model_from_config(doc["model_config"])
    model.store.load_values(doc["values"])
    return model, doc


def _pick_split(dataset, name: str):
    if name == "auto":
        episodes = dataset.eval_episodes or dataset.episodes
        used = "eval" if dataset.eval_episodes else "all"
        return episodes, used
    if name == "all":
        return dataset.episodes, "all"
    episodes = dataset.split(name)
    if not episodes:
        raise ConfigurationError(f"dataset has no {name!r} episodes")
    return episodes, name


def _rollout_worker(item):
    i, idx = item
    episodes = [_POOL_CTX["episodes"][j] for j in idx]
    result = eval_perfect_rollout(_POOL_CTX["model"], episodes)
    return i, result["lengths"].tolist()


def _mse_worker(item):
    i, idx = item
    episodes = [_POOL_CTX["episodes"][j] for j in idx]
    return i, [return_eval_mse(_POOL_CTX["model"], [ep]) for ep in episodes]


def _chunked_indices(n: int, workers: int):
    per = math.ceil(n / workers)
    return [(k, list(range(s, min(s + per, n))))
            for k, s in enumerate(range(0, n, per))]


def _parallel_per_episode(worker, model, episodes, workers):
    """Per-episode results, order-stable no matter the worker count."""
    _POOL_CTX.update({"model": model, "episodes": episodes})
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(workers) as pool:
                parts = dict(pool.map(
                    worker, _chunked_indices(len(episodes), workers)))
            out = []
            for k in sorted(parts):
                out.extend(parts[k])
            return out
        return worker((0, list(range(len(episodes)))))[1]
    finally:
        _POOL_CTX.clear()


def cmd_eval(args, argv) -> int:
    started = time.perf_counter()
    file_doc = _load_config_file(args.config)
    defaults = {"checkpoint": None, "data": None, "out": None,
                "split": "auto", "workers": 1}
    eff = _effective(defaults, file_doc, args)
    _require(eff, "checkpoint", "data", "out")

    ckpt_path = _resolve(eff["checkpoint"])
    data_path = _resolve(eff["data"])
    model, ckpt_doc = _load_model(ckpt_path)
    dataset = deserialize(data_path)
    episodes, split_used = _pick_split(dataset, eff["split"])
    workers = _workers(eff)

    doc = {"checkpoint": os.path.abspath(ckpt_path),
           "checkpoint_step": ckpt_doc["step"],
           "model": model.kind,
           "split": split_used,
           "n_episodes": len(episodes)}
    if model.head_size == 5:
        lengths = np.asarray(_parallel_per_episode(
            _rollout_worker, model, episodes, workers), dtype=np.float64)
        baseline = copy_last_action_lengths(episodes)
        doc["task"] = "action"
        doc["perfect_rollout"] = {"mean": float(lengths.mean()),
                                  "std": float(lengths.std()),
                                  "n": int(lengths.size)}
        doc["baseline_copy_last"] = {k: baseline[k]
                                     for k in ("mean", "std", "n")}
        summary = (f"perfect rollout {doc['perfect_rollout']['mean']:.3f} "
                   f"(copy-last baseline "
                   f"{doc['baseline_copy_last']['mean']:.3f})")
    elif model.head_size == 1:
        mses = _parallel_per_episode(_mse_worker, model, episodes, workers)
        train_eps = dataset.train_episodes or dataset.episodes
        doc["task"] = "return"
        doc["mse"] = float(np.mean(mses))
        doc["baseline_mean_mse"] = mean_baseline_mse(train_eps, episodes)
        summary = (f"return mse {doc['mse']:.4f} "
                   f"(mean baseline {doc['baseline_mean_mse']:.4f})")
    else:
        raise ConfigurationError(
            f"cannot evaluate a model with head size {model.head_size}")

    out = _resolve(eff["out"])
    _ensure_parent(out)
    with open(out, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")

    _emit_manifest("eval", argv, eff, None, [ckpt_path, data_path],
                   [out], started, _manifest_path_for(out))
    print(f"eval on {len(episodes)} {split_used} episodes: {summary}")
    return 0


# ---------------------------------------------------------------------------
# analyze


def _staghunt_only(dataset, what: str):
    game = dataset.header.get("game")
    if game != "staghunt":
        raise ConfigurationError(
            f"analyze {what} reads stag hunt structure; "
            f"dataset holds {game!r} episodes")


def cmd_analyze(args, argv) -> int:
    started = time.perf_counter()
    what = args.what
    file_doc = _load_config_file(args.config)
    if what in ("edges", "return"):
        defaults = {"checkpoint": None, "data": None, "out": None,
                    "seed": 0, "horizon": 1}
        eff = _effective(defaults, file_doc, args)
        _require(eff, "checkpoint", "data", "out")
        ckpt_path = _resolve(eff["checkpoint"])
        data_path = _resolve(eff["data"])
        model, _ = _load_model(ckpt_path)
        dataset = deserialize(data_path)
        _staghunt_only(dataset, what)
        episodes = dataset.episodes
        out_dir = _resolve(eff["out"])
        os.makedirs(out_dir, exist_ok=True)
        seed = int(eff["seed"])
        inputs = [ckpt_path, data_path]

        if what == "edges":
            if model.kind == "mlplstm":
                raise ConfigurationError(
                    "edge analysis needs a graph model; the mlp+lstm "
                    "baseline has no edges")
            records = analysis.extract_edge_norms(model, episodes)
            top = analysis.displacement_by_rank(
                records, episodes, horizon=int(eff["horizon"]))
            stag_records = analysis.filter_records(records,
                                                   sender_type="stag")
            middle = analysis.align_on_events(stag_records, episodes,
                                              "stag_captured")
            bottom = analysis.teammate_edge_tests(records, episodes,
                                                  seed=seed)
            paths = [os.path.join(out_dir, "fig3_top.csv"),
                     os.path.join(out_dir, "fig3_middle.csv"),
                     os.path.join(out_dir, "fig3_bottom.csv")]
            analysis.fig3_top_csv(paths[0], top)
            analysis.fig3_middle_csv(paths[1], middle)
            analysis.fig3_bottom_csv(paths[2], bottom)
        else:
            marginal = analysis.return_marginal(model, episodes, seed=seed)
            paths = [os.path.join(out_dir, "fig4.csv")]
            analysis.fig4_csv(paths[0], marginal)
    elif what == "coins":
        defaults = {"log": None, "out": None, "window": 50}
        eff = _effective(defaults, file_doc, args)
        _require(eff, "log", "out")
        log_path = _resolve(eff["log"])
        rows = _read_coin_log(log_path)
        out_dir = _resolve(eff["out"])
        os.makedirs(out_dir, exist_ok=True)
        curves = analysis.coin_analysis(rows, window=int(eff["window"]))
        paths = [os.path.join(out_dir, "fig6.csv")]
        analysis.fig6_csv(paths[0], curves)
        inputs = [log_path]
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigurationError(f"unknown analysis {what!r}")

    _emit_manifest(f"analyze {what}", argv, eff,
                   eff.get("seed"), inputs, paths, started,
                   os.path.join(out_dir, "manifest.json"))
    print(f"analyze {what}: wrote {', '.join(paths)}")
    return 0


def _read_coin_log(path):
    """Agent-log CSV rows carrying per-role coin pickup counts."""
    with open(path) as f:
        reader = csv.DictReader(f)
        need = {"episode", "r_coins", "u_coins", "b_coins"}
        if not need.issubset(reader.fieldnames or ()):
            raise ConfigurationError(
                f"{path} is not a coin-game agent log; "
                f"needs columns {sorted(need)}")
        rows = []
        for row in reader:
            if row["r_coins"] == "":
                continue
            rows.append({"episode": int(row["episode"]),
                         "r_coins": int(row["r_coins"]),
                         "u_coins": int(row["u_coins"]),
                         "b_coins": int(row["b_coins"])})
    if not rows:
        raise ConfigurationError(f"{path} holds no coin pickup rows")
    return rows


# ---------------------------------------------------------------------------
# agent-train


_AGENT_LOG_FIELDS = ["episode", "agent", "learner", "reward", "rfm_loss",
                     "r_coins", "u_coins", "b_coins"]


def cmd_agent_train(args, argv) -> int:
    started = time.perf_counter()
    file_doc = _load_config_file(args.config)
    defaults = {"learner": None, "game": None, "episodes": None,
                "steps": None, "seed": 0, "epsilon": 0.05, "learners": 1,
                "a2c_config": None, "rfm_config": None,
                "save_agent": None, "out": None}
    eff = _effective(defaults, file_doc, args)
    _require(eff, "learner", "game", "out")
    if eff["learner"] not in ("baseline", "rfm-augmented"):
        raise ConfigurationError(
            f"unknown learner {eff['learner']!r}; "
            "valid learners: baseline, rfm-augmented")
    if (eff["episodes"] is None) == (eff["steps"] is None):
        raise ConfigurationError(
            "exactly one of --episodes or --steps is required")

    config = _cli_game_config(eff["game"])
    if eff["episodes"] is not None:
        n_episodes = int(eff["episodes"])
    else:
        n_episodes = math.ceil(int(eff["steps"]) / config["episode_length"])
    eff["episodes"] = n_episodes
    seed = int(eff["seed"])
    n_learners = int(eff["learners"])
    if not 1 <= n_learners <= config["n_agents"]:
        raise ConfigurationError(
            f"--learners must be in 1..{config['n_agents']}")

    a2c_overrides = _json_flag(eff["a2c_config"], "--a2c-config")
    rfm_overrides = _json_flag(eff["rfm_config"], "--rfm-config")
    if eff["learner"] == "baseline":
        if rfm_overrides:
            raise ConfigurationError(
                "--rfm-config only applies to --learner rfm-augmented")
        agents = make_baseline_agents(config, seed=seed,
                                      overrides=a2c_overrides or None)
    else:
        agents = make_augmented_agents(config, D_VERTEX, seed=seed,
                                       a2c_overrides=a2c_overrides or None,
                                       rfm_overrides=rfm_overrides or None)
    agents = list(agents[:n_learners])
    for slot in range(n_learners, config["n_agents"]):
        agents.append(ScriptedPolicy(config["game"],
                                     epsilon=float(eff["epsilon"]),
                                     seed=seed * 1000 + slot))

    out = _resolve(eff["out"])
    _ensure_parent(out)
    learner_name = eff["learner"]
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_AGENT_LOG_FIELDS)
        writer.writeheader()

        def log(row):
            rfm = row.get("mean_rfm_loss")
            writer.writerow({
                "episode": row["episode"], "agent": row["agent"],
                "learner": learner_name, "reward": row["reward"],
                "rfm_loss": "" if rfm is None else rfm,
                "r_coins": row.get("r_coins", ""),
                "u_coins": row.get("u_coins", ""),
                "b_coins": row.get("b_coins", ""),
            })

        rows = train_agents(config, agents, n_episodes, seed=seed, log=log)

    outputs = [out]
    if eff["save_agent"]:
        agent_path = _resolve(eff["save_agent"])
        _ensure_parent(agent_path)
        save_agent(agent_path, agents[0], game_config=config)
        outputs.append(agent_path)
        if learner_name == "rfm-augmented":
            outputs.append(agent_path + ".rfm")

    _emit_manifest("agent-train", argv, eff, seed, [], outputs, started,
                   _manifest_path_for(out))
    rewards = [r["reward"] for r in rows[-10 * n_learners:]]
    print(f"agent-train {learner_name} on {eff['game']}: "
          f"{n_episodes} episodes, last-10 mean reward "
          f"{float(np.mean(rewards)):.3f}; log {out}")
    return 0


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(args, argv) -> int:
    doc = load_manifest(_resolve(args.manifest))
    if doc["argv"] and doc["argv"][0] == "rerun":
        raise ConfigurationError("manifest records a rerun; nothing to redo")
    stale = changed_artifacts(doc["inputs"])
    if stale:
        for entry in stale:
            state = "missing" if entry["actual"] is None else "changed"
            print(f"input {state}: {entry['path']}", file=sys.stderr)
        print("cannot reproduce: inputs no longer match the manifest",
              file=sys.stderr)
        return 1
    code = main(doc["argv"])
    if code != 0:
        return code
    mismatched = changed_artifacts(doc["outputs"])
    if mismatched:
        for entry in mismatched:
            print(f"output mismatch: {entry['path']} "
                  f"expected {entry['expected']} got {entry['actual']}",
                  file=sys.stderr)
        return 1
    print(f"rerun ok: {len(doc['outputs'])} outputs byte-identical")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfm-lab",
        description="Relational forward model pipelines: collect episodes, "
                    "train and evaluate models, analyze influence structure, "
                    "train agents.",
        epilog="Relative paths resolve under $RFM_LAB_DATA_DIR when set. "
               "Exit codes: 0 success, 1 missing or corrupt artifacts, "
               "2 usage or configuration errors. Every run writes a JSON "
               "manifest beside its primary output.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="SUBCOMMAND")

    def add_config(p):
        p.add_argument("--config", default=None, metavar="FILE",
                       help="JSON file of flag defaults; command-line flags "
                            "win (default: none)")

    p = sub.add_parser(
        "collect", help="roll seeded episodes into a dataset file",
        description="Collect episodes of one game under a scripted or "
                    "checkpoint policy into a JSONL dataset.")
    p.add_argument("--game", choices=sorted(CLI_GAMES), default=None,
                   help="game to play (required)")
    p.add_argument("--episodes", type=int, default=None, metavar="N",
                   help="number of episodes (required)")
    p.add_argument("--seed", type=int, default=None, metavar="S",
                   help="base seed; episode i uses S+i (default: 0)")
    p.add_argument("--policy", default=None, metavar="SPEC",
                   help="'scripted' or 'checkpoint:PATH'; PATH may contain "
                        "{i} for per-agent files (default: scripted)")
    p.add_argument("--eval-episodes", type=int, default=None, metavar="K",
                   help="label the last K episodes eval (default: 0)")
    p.add_argument("--epsilon", type=float, default=None,
                   help="scripted-expert random-move rate (default: 0.05)")
    p.add_argument("--workers", type=int, default=None, metavar="W",
                   help="parallel collection processes (default: 1)")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="dataset file to write")
    add_config(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser(
        "train", help="fit a model to a dataset",
        description="Train a forward model on a dataset's train split and "
                    "write a checkpoint plus a JSONL loss log. "
                    "--task return always mixes in teammate-pruned graphs.")
    p.add_argument("--model", choices=MODEL_KINDS, default=None,
                   help="architecture (required unless --resume)")
    p.add_argument("--task", choices=("action", "return"), default=None,
                   help="predict next actions or returns-to-go (required)")
    p.add_argument("--data", default=None, metavar="FILE",
                   help="dataset file (required)")
    p.add_argument("--steps", type=int, default=None, metavar="N",
                   help="gradient steps (default: 1000)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="episodes per step (default: 128)")
    p.add_argument("--lr", type=float, default=None,
                   help="Adam learning rate (default: 0.001, or the "
                        "checkpoint's rate when resuming)")
    p.add_argument("--seed", type=int, default=None,
                   help="parameter init and batch schedule seed (default: 0)")
    p.add_argument("--eval-every", type=int, default=None, metavar="K",
                   help="log eval-split perfect-rollout every K steps "
                        "(default: 0 = never)")
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="continue training from this checkpoint; the step "
                        "counter keeps counting (default: fresh model)")
    p.add_argument("--model-config", default=None, metavar="JSON",
                   help="JSON object of architecture sizes, e.g. "
                        "'{\"enc_size\": 64}' (default: library defaults)")
    p.add_argument("--out", required=True, metavar="CKPT",
                   help="checkpoint file to write; the loss log goes to "
                        "CKPT.log")
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval", help="score a checkpoint on a dataset",
        description="Evaluate a checkpoint: action models get "
                    "perfect-rollout length against the copy-last-action "
                    "baseline, return models get MSE against the "
                    "dataset-mean baseline. Writes a JSON metrics document.")
    p.add_argument("--checkpoint", default=None, metavar="CKPT",
                   help="model checkpoint (required)")
    p.add_argument("--data", default=None, metavar="FILE",
                   help="dataset file (required)")
    p.add_argument("--split", choices=("auto", "train", "eval", "all"),
                   default=None,
                   help="episodes to score (default: auto = eval split if "
                        "present, else all)")
    p.add_argument("--workers", type=int, default=None, metavar="W",
                   help="parallel evaluation processes (default: 1)")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="metrics JSON to write")
    add_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "analyze", help="turn artifacts into figure CSVs",
        description="Social-influence analyses over a trained checkpoint "
                    "and stag hunt dataset, or coin-role curves over an "
                    "agent-train log.")
    what = p.add_subparsers(dest="what", required=True, metavar="WHAT")

    q = what.add_parser(
        "edges", help="edge-norm structure (fig3_*.csv)",
        description="Displacement by edge rank, stag availability "
                    "alignment, and teammate-edge hypothesis tests.")
    q.add_argument("--checkpoint", default=None, metavar="CKPT",
                   help="action-model checkpoint (required)")
    q.add_argument("--data", default=None, metavar="FILE",
                   help="stag hunt dataset (required)")
    q.add_argument("--seed", type=int, default=None,
                   help="permutation-test seed (default: 0)")
    q.add_argument("--horizon", type=int, default=None,
                   help="displacement horizon in steps (default: 1)")
    q.add_argument("--out", required=True, metavar="DIR",
                   help="directory for fig3_top.csv, fig3_middle.csv, "
                        "fig3_bottom.csv")
    add_config(q)
    q.set_defaults(func=cmd_analyze)

    q = what.add_parser(
        "return", help="pruned-return marginals (fig4.csv)",
        description="Full-minus-pruned return predictions aligned on stag "
                    "captures; needs a mixing-trained return checkpoint.")
    q.add_argument("--checkpoint", default=None, metavar="CKPT",
                   help="mixing-trained return checkpoint (required)")
    q.add_argument("--data", default=None, metavar="FILE",
                   help="stag hunt dataset (required)")
    q.add_argument("--seed", type=int, default=None,
                   help="permutation-test seed (default: 0)")
    q.add_argument("--out", required=True, metavar="DIR",
                   help="directory for fig4.csv")
    add_config(q)
    q.set_defaults(func=cmd_analyze)

    q = what.add_parser(
        "coins", help="coin-role pickup curves (fig6.csv)",
        description="Per-role coin pickup curves from a coin-game "
                    "agent-train log.")
    q.add_argument("--log", default=None, metavar="FILE",
                   help="agent-train CSV log (required)")
    q.add_argument("--window", type=int, default=None,
                   help="trailing smoothing window in episodes "
                        "(default: 50)")
    q.add_argument("--out", required=True, metavar="DIR",
                   help="directory for fig6.csv")
    add_config(q)
    q.set_defaults(func=cmd_analyze)

    p = sub.add_parser(
        "agent-train", help="train actor-critic agents among experts",
        description="Train one or more learning agents (baseline A2C or "
                    "RFM-augmented) with the remaining player slots filled "
                    "by scripted experts; writes a per-episode reward CSV.")
    p.add_argument("--learner", choices=("baseline", "rfm-augmented"),
                   default=None, help="learning agent type (required)")
    p.add_argument("--game", choices=sorted(CLI_GAMES), default=None,
                   help="game to train in (required)")
    p.add_argument("--episodes", type=int, default=None, metavar="N",
                   help="training episodes (this or --steps is required)")
    p.add_argument("--steps", type=int, default=None, metavar="N",
                   help="environment steps, rounded up to whole episodes")
    p.add_argument("--seed", type=int, default=None,
                   help="agent init and episode seed (default: 0)")
    p.add_argument("--epsilon", type=float, default=None,
                   help="scripted-expert random-move rate (default: 0.05)")
    p.add_argument("--learners", type=int, default=None, metavar="K",
                   help="learning slots; the rest are scripted experts "
                        "(default: 1)")
    p.add_argument("--a2c-config", default=None, metavar="JSON",
                   help="JSON object of actor-critic overrides "
                        "(default: library defaults)")
    p.add_argument("--rfm-config", default=None, metavar="JSON",
                   help="JSON object of onboard-model overrides, "
                        "rfm-augmented only (default: library defaults)")
    p.add_argument("--save-agent", default=None, metavar="PATH",
                   help="also checkpoint the first learner (default: off)")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="reward-curve CSV to write")
    add_config(p)
    p.set_defaults(func=cmd_agent_train)

    p = sub.add_parser(
        "rerun", help="re-execute a manifest and verify outputs",
        description="Re-execute the argv recorded in a run manifest, then "
                    "fail unless every recorded output hash matches the "
                    "fresh bytes.")
    p.add_argument("--manifest", required=True, metavar="FILE",
                   help="manifest JSON written by a previous run")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, list(argv))
    except FileNotFoundError as e:
        missing = e.filename if e.filename else str(e)
        print(f"error: missing artifact: {missing}", file=sys.stderr)
        return 1
    except ConfigurationError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ParseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
