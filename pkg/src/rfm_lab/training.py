"""Supervised trainers for action and return prediction, plus evaluation.

Training teacher-forces: the model is unrolled over each episode's
ground-truth graph sequence and never sees its own predictions. Batches
are disjoint unions of episode graphs, stepped in lockstep through
time, so one optimizer step sees ``batch_size`` whole episodes.

Return training can mix full and edge-pruned variants of each episode
(agent-to-agent edges removed) in a deterministic alternation: batch
positions 0, 2, 4, ... stay full, positions 1, 3, 5, ... are pruned.
A model trained that way prices teammate visibility, which is what the
return-marginalization analysis measures.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Dataset, make_return_targets
from .errors import ConfigurationError
from .graph import batch_graphs, drop_edges
from .models import agent_logit_rows
from .optim import Adam
from .tensor import Tape

TRAIN_DEFAULTS = {
    "batch_size": 128,
    "steps": 1000,
    "lr": 1e-3,
    "eval_every": 0,
    "loss": "action_ce",
    "mixing": False,
    "seed": 0,
}


def train_config(**overrides) -> dict:
    config = dict(TRAIN_DEFAULTS)
    for key, value in overrides.items():
        if key not in config:
            raise ConfigurationError(f"unknown training option {key!r}")
        config[key] = value
    if config["batch_size"] < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if config["loss"] not in ("action_ce", "return_mse"):
        raise ConfigurationError(f"unknown loss {config['loss']!r}")
    return config


def _episode_list(dataset, split: str):
    if isinstance(dataset, Dataset):
        episodes = dataset.split(split)
        if not episodes and split == "train":
            episodes = dataset.episodes
        return episodes
    return list(dataset)


def _check_episodes(episodes):
    if not episodes:
        raise ConfigurationError("no episodes to train on")
    length = len(episodes[0])
    if any(len(e) != length for e in episodes):
        raise ConfigurationError("episodes have differing lengths")


def prune_teammate_edges(graph, n_agents: int):
    """Remove agent-to-agent edges; entity edges and vertices stay."""
    drop = (graph.senders < n_agents) & (graph.receivers < n_agents)
    return drop_edges(graph, drop)


def _batched_steps(episodes, pruned_flags=None):
    """One batched graph per timestep over the episode list."""
    T_len = len(episodes[0])
    out = []
    for t in range(T_len):
        graphs = []
        for j, ep in enumerate(episodes):
            g = ep.steps[t].graph
            if pruned_flags is not None and pruned_flags[j]:
                g = prune_teammate_edges(g, ep.n_agents)
            graphs.append(g)
        out.append(batch_graphs(graphs))
    return out


def _agent_rows(episodes):
    """Vertex rows of agents inside the batched graph, batch-major."""
    rows = []
    offset = 0
    for ep in episodes:
        n_v = ep.steps[0].graph.n_vertices
        rows.extend(range(offset, offset + ep.n_agents))
        offset += n_v
    return rows


def unrolled_agent_outputs(model, episodes, pruned_flags=None):
    """Teacher-forced unroll; one [sum(n_agents), head] Tensor per step."""
    _check_episodes(episodes)
    steps = _batched_steps(episodes, pruned_flags)
    rows = _agent_rows(episodes)
    outs = model.unroll(steps)
    return [agent_logit_rows(out, rows) for out in outs]


def action_loss(model, episodes):
    """Mean cross-entropy per agent-step over teacher-forced unrolls."""
    outputs = unrolled_agent_outputs(model, episodes)
    labels = [np.concatenate([ep.steps[t].actions for ep in episodes])
              for t in range(len(episodes[0]))]
    total = None
    count = 0
    for logits, y in zip(outputs, labels):
        ce = T.softmax_cross_entropy(logits, y, reduction="sum")
        total = ce if total is None else T.add(total, ce)
        count += len(y)
    return T.mul(total, T.Tensor(1.0 / count))


def return_loss(model, episodes, mixing: bool = False):
    """Mean squared error per agent-step against return-to-go targets."""
    pruned_flags = [j % 2 == 1 for j in range(len(episodes))] if mixing else None
    outputs = unrolled_agent_outputs(model, episodes, pruned_flags)
    targets = [make_return_targets(ep) for ep in episodes]
    total = None
    count = 0
    for t, preds in enumerate(outputs):
        y = np.concatenate([tg[t] for tg in targets])[:, None]
        se = T.mul(T.mse(preds, y), T.Tensor(float(len(y))))
        total = se if total is None else T.add(total, se)
        count += len(y)
    return T.mul(total, T.Tensor(1.0 / count))


def _train(model, dataset, config, loss_fn, optimizer=None, step_offset=0):
    episodes = _episode_list(dataset, "train")
    _check_episodes(episodes)
    eval_episodes = (_episode_list(dataset, "eval")
                     if isinstance(dataset, Dataset) else [])
    if optimizer is None:
        optimizer = Adam(model.store, lr=config["lr"])
    history = []
    for step in range(step_offset, step_offset + config["steps"]):
        # batch draw keyed by (seed, step) so a resumed run samples the
        # same schedule an uninterrupted run would
        rng = np.random.default_rng([config["seed"], step])
        idx = rng.integers(0, len(episodes), size=config["batch_size"])
        batch = [episodes[i] for i in idx]
        with Tape() as tape:
            loss = loss_fn(model, batch)
            tape.backward(loss)
        grad_norm = optimizer.step()
        row = {"step": step, "loss": float(loss.values),
               "grad_norm": grad_norm}
        cadence = config["eval_every"]
        if cadence and eval_episodes and (step + 1) % cadence == 0:
            result = eval_perfect_rollout(model, eval_episodes)
            row["eval_perfect_rollout"] = result["mean"]
        history.append(row)
    return model, history


def train_action_model(model, dataset, config=None, *,
                       optimizer=None, step_offset=0):
    """Cross-entropy training of a 5-way action head; returns (model, history)."""
    config = train_config(**(config or {}))
    if model.head_size != 5:
        raise ConfigurationError(
            f"action training needs a 5-way head, model has {model.head_size}")
    return _train(model, dataset, config, action_loss,
                  optimizer=optimizer, step_offset=step_offset)


def train_return_model(model, dataset, config=None, *,
                       optimizer=None, step_offset=0):
    """MSE training of a scalar return head; returns (model, history)."""
    config = train_config(**(config or {}))
    if model.head_size != 1:
        raise ConfigurationError(
            f"return training needs a scalar head, model has {model.head_size}")
    if getattr(model, "kind", None) == "mlplstm":
        raise ConfigurationError(
            "return training with graph mixing is undefined for the "
            "mlp+lstm baseline; it has no edges to prune")
    mixing = bool(config["mixing"])
    if mixing:
        # marginal analysis checks this before feeding pruned graphs
        model.config["mixing_trained"] = True

    def loss_fn(m, episodes):
        return return_loss(m, episodes, mixing=mixing)

    return _train(model, dataset, config, loss_fn,
                  optimizer=optimizer, step_offset=step_offset)


# ---------------------------------------------------------------------------
# evaluation


def predicted_actions(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest action index."""
    return np.argmax(logits, axis=1)


def eval_perfect_rollout(model, episodes, batch_size: int = 128) -> dict:
    """Mean and stddev of the perfect-rollout length over episodes.

    The perfect length of an episode is the count of initial
    consecutive steps on which every agent's argmax prediction equals
    the action actually taken.
    """
    _check_episodes(episodes)
    lengths = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        outputs = unrolled_agent_outputs(model, chunk)
        T_len = len(chunk[0])
        n_agents = chunk[0].n_agents
        matches = np.zeros((T_len, len(chunk)), dtype=bool)
        for t, logits in enumerate(outputs):
            preds = predicted_actions(logits.values)
            truth = np.concatenate([ep.steps[t].actions for ep in chunk])
            ok = (preds == truth).reshape(len(chunk), n_agents)
            matches[t] = ok.all(axis=1)
        for j in range(len(chunk)):
            bad = np.flatnonzero(~matches[:, j])
            lengths.append(int(bad[0]) if bad.size else T_len)
    lengths = np.asarray(lengths, dtype=np.float64)
    return {"mean": float(lengths.mean()), "std": float(lengths.std()),
            "n": int(lengths.size), "lengths": lengths}


def copy_last_action_lengths(episodes) -> dict:
    """Perfect-rollout score of the copy-previous-action baseline.

    At the first step, where there is no previous action, the baseline
    predicts STAY.
    """
    _check_episodes(episodes)
    lengths = []
    for ep in episodes:
        actions = ep.action_matrix()
        preds = np.vstack([np.full((1, actions.shape[1]), 4, dtype=np.int64),
                           actions[:-1]])
        match = (preds == actions).all(axis=1)
        bad = np.flatnonzero(~match)
        lengths.append(int(bad[0]) if bad.size else len(ep))
    lengths = np.asarray(lengths, dtype=np.float64)
    return {"mean": float(lengths.mean()), "std": float(lengths.std()),
            "n": int(lengths.size), "lengths": lengths}


def return_eval_mse(model, episodes, pruned: bool = False) -> float:
    """Mean squared error of return predictions on held-out episodes."""
    _check_episodes(episodes)
    flags = [pruned] * len(episodes)
    outputs = unrolled_agent_outputs(model, episodes, flags)
    targets = [make_return_targets(ep) for ep in episodes]
    total, count = 0.0, 0
    for t, preds in enumerate(outputs):
        y = np.concatenate([tg[t] for tg in targets])[:, None]
        total += float(((preds.values - y) ** 2).sum())
        count += y.size
    return total / count


def mean_baseline_mse(train_episodes, eval_episodes) -> float:
    """MSE of always predicting the training-set mean return."""
    train_targets = np.concatenate(
        [make_return_targets(ep).ravel() for ep in train_episodes])
    mean = train_targets.mean()
    eval_targets = np.concatenate(
        [make_return_targets(ep).ravel() for ep in eval_episodes])
    return float(((eval_targets - mean) ** 2).mean())
