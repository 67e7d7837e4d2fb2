"""Trajectory collection and the line-delimited episode dataset format.

A dataset file is one JSON document per line. The first line is a
header {format_version, game, n_episodes, base_seed, policy}; every
other line is a self-contained episode carrying its game config, seed,
split label, connectivity (shared by all steps of the episode), vertex
types, and per-step vertex attributes, actions, rewards and events.
Graphs are stored materialized so analysis code never depends on the
environment encoder staying unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import (
    N_ACTIONS,
    game_config,
    observation_channels,
    render_observation,
    reset,
    step as env_step,
    to_graph,
    vertex_order,
)
from .errors import ConfigurationError, FormatError, ParseError
from .graph import Graph, make_graph
from .policies import A2CAgent, ScriptedPolicy, a2c_act, scripted_act

DATASET_FORMAT = 1


@dataclass
class EpisodeStep:
    graph: Graph
    actions: list
    rewards: np.ndarray
    events: list


@dataclass
class Episode:
    config: dict
    seed: int
    steps: list
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.config["n_agents"]

    def __len__(self):
        return len(self.steps)

    def graphs(self):
        return [s.graph for s in self.steps]

    def action_matrix(self) -> np.ndarray:
        """[T, n_agents] int array of actions taken."""
        return np.array([[int(a) for a in s.actions] for s in self.steps],
                        dtype=np.int64)

    def reward_matrix(self) -> np.ndarray:
        return np.array([s.rewards for s in self.steps], dtype=np.float64)


@dataclass
class Dataset:
    header: dict
    episodes: list
    splits: list

    def __post_init__(self):
        if len(self.episodes) != len(self.splits):
            raise ConfigurationError("one split label per episode required")

    def __len__(self):
        return len(self.episodes)

    def split(self, name: str) -> list:
        return [e for e, s in zip(self.episodes, self.splits) if s == name]

    @property
    def train_episodes(self):
        return self.split("train")

    @property
    def eval_episodes(self):
        return self.split("eval")


# ---------------------------------------------------------------------------
# collection


class AgentPolicy:
    """Drives collection with one trained actor-critic agent per player."""

    def __init__(self, agents, config: dict):
        if len(agents) != config["n_agents"]:
            raise ConfigurationError(
                f"{len(agents)} agents for a {config['n_agents']}-agent game")
        want_channels = observation_channels(config)
        for agent in agents:
            if not isinstance(agent, A2CAgent):
                raise ConfigurationError(
                    "collection drivers take plain actor-critic agents")
            if agent.config["in_channels"] != want_channels:
                raise ConfigurationError(
                    f"agent expects {agent.config['in_channels']} observation "
                    f"channels, game produces {want_channels}")
        self.agents = agents
        self.config = config

    def reseed(self, seed: int):
        for i, agent in enumerate(self.agents):
            agent.rng = np.random.default_rng([int(seed), 31, i])

    def begin_episode(self, state):
        self._memories = [None] * len(self.agents)
        self._last_rewards = np.zeros(len(self.agents))
        self._statics = [None] * len(self.agents)
        if self.config["game"] == "coin":
            for i in range(len(self.agents)):
                onehot = np.zeros(self.config["n_colors"])
                onehot[int(state.coin_roles["revealed"][i])] = 1.0
                self._statics[i] = onehot

    def act(self, state, last_actions):
        actions = []
        for i, agent in enumerate(self.agents):
            obs = render_observation(state, i)
            la = None if last_actions is None else last_actions[i]
            action, _, self._memories[i] = a2c_act(
                agent, obs, self._last_rewards[i], la, self._memories[i],
                static_extra=self._statics[i])
            actions.append(action)
        return actions

    def observe(self, state, result):
        self._last_rewards = result.rewards.copy()


class ScriptedDriver:
    """Adapter putting a ScriptedPolicy behind the collection interface."""

    def __init__(self, policy: ScriptedPolicy, config: dict):
        if policy.game != config["game"]:
            raise ConfigurationError(
                f"policy for {policy.game!r} applied to {config['game']!r}")
        self.policy = policy
        self.config = config

    def reseed(self, seed: int):
        self.policy.reseed(seed)

    def begin_episode(self, state):
        self.policy.begin_episode(state)

    def act(self, state, last_actions):
        return [scripted_act(self.policy, state, i)
                for i in range(state.n_agents)]

    def observe(self, state, result):
        self.policy.observe(state, result.events)


def make_driver(policy, config: dict):
    if isinstance(policy, ScriptedPolicy):
        return ScriptedDriver(policy, config)
    if isinstance(policy, (list, tuple)):
        return AgentPolicy(list(policy), config)
    if isinstance(policy, (ScriptedDriver, AgentPolicy)):
        return policy
    raise ConfigurationError(
        f"cannot drive collection with {type(policy).__name__}")


def collect_episode(config: dict, driver, seed: int) -> Episode:
    """Roll one seeded episode; graphs carry the previous step's actions."""
    state = reset(config, seed=seed)
    driver.reseed(seed)
    driver.begin_episode(state)
    meta = {"vertex_types": vertex_order(config)}
    if config["game"] == "coin":
        meta["coin_colors"] = state.coin_colors.tolist()
        meta["coin_roles"] = {
            "bad": int(state.coin_roles["bad"]),
            "revealed": [int(c) for c in state.coin_roles["revealed"]],
        }
    steps = []
    last_actions = None
    while not state.done:
        graph = to_graph(state, last_actions)
        actions = driver.act(state, last_actions)
        state, result = env_step(state, actions)
        driver.observe(state, result)
        steps.append(EpisodeStep(graph=graph,
                                 actions=[int(a) for a in actions],
                                 rewards=result.rewards.copy(),
                                 events=result.events))
        last_actions = actions
    return Episode(config=dict(config), seed=seed, steps=steps, meta=meta)


def collect(config: dict, policy, n_episodes: int, base_seed: int = 0,
            n_eval: int = 0, policy_description: str = "scripted") -> Dataset:
    """Collect n_episodes; episode i uses seed base_seed + i.

    The last ``n_eval`` episodes are labeled eval, the rest train.
    """
    if n_eval > n_episodes:
        raise ConfigurationError(
            f"n_eval={n_eval} exceeds n_episodes={n_episodes}")
    driver = make_driver(policy, config)
    episodes = [collect_episode(config, driver, base_seed + i)
                for i in range(n_episodes)]
    splits = (["train"] * (n_episodes - n_eval)) + (["eval"] * n_eval)
    header = {
        "format_version": DATASET_FORMAT,
        "game": config["game"],
        "n_episodes": n_episodes,
        "base_seed": base_seed,
        "policy": policy_description,
    }
    return Dataset(header=header, episodes=episodes, splits=splits)


# ---------------------------------------------------------------------------
# serialization


def _episode_doc(episode: Episode, split: str) -> dict:
    first = episode.steps[0].graph
    return {
        "config": episode.config,
        "seed": episode.seed,
        "split": split,
        "senders": first.senders.tolist(),
        "receivers": first.receivers.tolist(),
        "meta": episode.meta,
        "steps": [
            {
                "v": step.graph.v.values.tolist(),
                "actions": step.actions,
                "rewards": step.rewards.tolist(),
                "events": step.events,
            }
            for step in episode.steps
        ],
    }


def serialize(dataset: Dataset, path):
    with open(path, "w") as f:
        json.dump(dataset.header, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
        for episode, split in zip(dataset.episodes, dataset.splits):
            json.dump(_episode_doc(episode, split), f, sort_keys=True,
                      separators=(",", ":"))
            f.write("\n")


def _parse_episode(doc: dict, line: int) -> tuple:
    try:
        config = doc["config"]
        senders = np.asarray(doc["senders"], dtype=np.int64)
        receivers = np.asarray(doc["receivers"], dtype=np.int64)
        steps = []
        for raw in doc["steps"]:
            actions = [int(a) for a in raw["actions"]]
            if any(a < 0 or a >= N_ACTIONS for a in actions):
                raise ParseError(f"action out of range in {actions}", line=line)
            graph = make_graph(np.asarray(raw["v"], dtype=np.float64),
                               senders, receivers)
            graph.validate()
            steps.append(EpisodeStep(
                graph=graph,
                actions=actions,
                rewards=np.asarray(raw["rewards"], dtype=np.float64),
                events=raw["events"]))
        episode = Episode(config=config, seed=int(doc["seed"]), steps=steps,
                          meta=doc.get("meta", {}))
        return episode, doc["split"]
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad episode document: {exc}", line=line) from exc


def deserialize(path) -> Dataset:
    episodes = []
    splits = []
    header = None
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc}", line=line_no) from exc
            if line_no == 1:
                version = doc.get("format_version")
                if version != DATASET_FORMAT:
                    raise FormatError(
                        f"unsupported dataset format_version {version!r}")
                header = doc
                continue
            episode, split = _parse_episode(doc, line_no)
            episodes.append(episode)
            splits.append(split)
    if header is None:
        raise ParseError("empty file: missing header line", line=1)
    return Dataset(header=header, episodes=episodes, splits=splits)


# ---------------------------------------------------------------------------
# targets


def make_return_targets(episode: Episode, discount: float = 1.0) -> np.ndarray:
    """[T, n_agents] return-to-go: R_t = r_t + discount * R_{t+1}."""
    rewards = episode.reward_matrix()
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1])
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out
