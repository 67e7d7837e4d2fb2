"""Behavior generators.

Three families live here:

* scripted experts, one heuristic per game, used to collect training
  trajectories that actually contain coordination and competition;
* a small actor-critic learner (conv -> MLP -> LSTM -> policy/value
  heads) with strictly per-agent parameters;
* an augmented agent that carries an on-board forward model over the
  environment graph, renders its predictions of fellow agents' actions
  as probability planes, and appends those planes to its observation.

The forward model on board the augmented agent is trained on-line,
one step delayed: the prediction made at step t is scored against the
actions revealed at step t+1. No gradient crosses between the policy
network and the forward model; they live in separate parameter stores
with separate optimizers.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .envs import (
    ACTION_DELTAS,
    Action,
    ENTITY_TYPES,
    GAME_NAMES,
    observation_channels,
    render_observation,
    reset,
    step as env_step,
    to_graph,
)
from .errors import ConfigurationError, DimensionError
from .models import RFMModel, agent_logit_rows
from .nn import Linear, LSTMCell
from .optim import Adam
from .params import ParamStore, load_checkpoint, save_checkpoint
from .tensor import Tensor

LAST_ACTION_COL = 2 + len(ENTITY_TYPES) + 1 + 3  # action one-hot start in vertex rows


# ---------------------------------------------------------------------------
# scripted experts


def _manhattan(p, q):
    return abs(int(p[0]) - int(q[0])) + abs(int(p[1]) - int(q[1]))


def _greedy_action(src, dst) -> Action:
    """Step that reduces Manhattan distance; longer axis first, x on ties."""
    dx = int(dst[0]) - int(src[0])
    dy = int(dst[1]) - int(src[1])
    if dx == 0 and dy == 0:
        return Action.STAY
    if dy == 0 or (dx != 0 and abs(dx) >= abs(dy)):
        return Action.RIGHT if dx > 0 else Action.LEFT
    return Action.DOWN if dy > 0 else Action.UP


class ScriptedPolicy:
    """Hand-written expert for one game; a single instance drives all agents.

    For the coin game the policy tracks, per agent, which colors are
    known good: the agent's own revealed color plus any color it has
    seen the teammate collect. Call ``begin_episode`` at each reset and
    ``observe`` after each environment step to keep that book up to date.
    """

    def __init__(self, game: str, epsilon: float = 0.05, seed: int = 0):
        if game not in GAME_NAMES:
            raise ConfigurationError(f"unknown game {game!r}")
        if not 0.0 <= epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must be in [0, 1], got {epsilon}")
        self.game = game
        self.epsilon = float(epsilon)
        self.rng = np.random.default_rng(seed)
        self._known_good: dict[int, set[int]] = {}

    def reseed(self, seed: int):
        """Fresh exploration stream, decoupled from the environment's."""
        self.rng = np.random.default_rng([int(seed), 929])

    def begin_episode(self, state):
        self._check_game(state)
        if self.game == "coin":
            revealed = state.coin_roles["revealed"]
            self._known_good = {i: {int(c)} for i, c in enumerate(revealed)}

    def observe(self, state, events):
        if self.game != "coin":
            return
        for ev in events:
            if ev["type"] != "coin_collected":
                continue
            color = int(state.coin_colors[ev["entity"]])
            collector = ev["agents"][0]
            for agent_id, known in self._known_good.items():
                if agent_id != collector:
                    known.add(color)

    def _check_game(self, state):
        if state.config["game"] != self.game:
            raise ConfigurationError(
                f"policy for {self.game!r} applied to {state.config['game']!r}"
            )

    def _known(self, state, agent_id: int) -> set[int]:
        if agent_id in self._known_good:
            return self._known_good[agent_id]
        return {int(state.coin_roles["revealed"][agent_id])}


def _coopnav_target(state, agent_id: int):
    agents, tiles = state.agents, state.entity_pos
    straight = _manhattan(agents[0], tiles[0]) + _manhattan(agents[1], tiles[1])
    swapped = _manhattan(agents[0], tiles[1]) + _manhattan(agents[1], tiles[0])
    tile = agent_id if straight <= swapped else 1 - agent_id
    return tuple(tiles[tile])


def _coin_target(policy, state, agent_id: int):
    known = policy._known(state, agent_id)
    me = state.agents[agent_id]
    best = None
    best_d = None
    for e in range(len(state.entity_types)):
        if not state.entity_available[e]:
            continue
        if int(state.coin_colors[e]) not in known:
            continue
        d = _manhattan(me, state.entity_pos[e])
        if best is None or d < best_d:
            best, best_d = tuple(state.entity_pos[e]), d
    return best


def _block_cells(pos):
    x, y = int(pos[0]), int(pos[1])
    return ((x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1))


def _block_distance(p, block_pos):
    return min(_manhattan(p, c) for c in _block_cells(block_pos))


def _nearest_block_cell(p, block_pos):
    return min(_block_cells(block_pos), key=lambda c: _manhattan(p, c))


def _staghunt_target(state, agent_id: int):
    me = state.agents[agent_id]
    apples = [e for e, t in enumerate(state.entity_types)
              if t == "apple" and state.entity_available[e]]
    stags = [e for e, t in enumerate(state.entity_types)
             if t == "stag" and state.entity_available[e]]
    # a stag is worth committing to once some other agent is already close
    hot = [e for e in stags
           if any(_block_distance(state.agents[j], state.entity_pos[e]) <= 2
                  for j in range(state.n_agents) if j != agent_id)]
    for pool, is_stag in ((hot, True), (apples, False), (stags, True)):
        if not pool:
            continue
        if is_stag:
            e = min(pool, key=lambda e: _block_distance(me, state.entity_pos[e]))
            return _nearest_block_cell(me, state.entity_pos[e])
        e = min(pool, key=lambda e: _manhattan(me, state.entity_pos[e]))
        return tuple(state.entity_pos[e])
    return None


def scripted_act(policy: ScriptedPolicy, state, agent_id: int) -> Action:
    policy._check_game(state)
    if policy.rng.random() < policy.epsilon:
        return Action(int(policy.rng.integers(5)))
    if policy.game == "coopnav":
        target = _coopnav_target(state, agent_id)
    elif policy.game == "coin":
        target = _coin_target(policy, state, agent_id)
    else:
        target = _staghunt_target(state, agent_id)
    if target is None:
        return Action.STAY
    return _greedy_action(state.agents[agent_id], target)


# ---------------------------------------------------------------------------
# actor-critic learner


_A2C_DEFAULTS = {
    "n_actions": 5,
    "conv_channels": 6,
    "mlp_size": 256,
    "lstm_size": 256,
    "discount": 0.99,
    "entropy_coef": 0.01,
    "value_coef": 0.5,
    "rollout_length": 16,
    "lr": 7e-4,
}


def a2c_config(in_channels: int, obs_height: int, obs_width: int,
               d_extra: int, **overrides) -> dict:
    config = {
        "in_channels": int(in_channels),
        "obs_height": int(obs_height),
        "obs_width": int(obs_width),
        "d_extra": int(d_extra),
    }
    config.update(_A2C_DEFAULTS)
    for key, value in overrides.items():
        if key not in config:
            raise ConfigurationError(f"unknown a2c option {key!r}")
        config[key] = value
    return config


class A2CAgent:
    """Conv -> MLP -> (features | extras) -> LSTM -> policy and value heads.

    Every agent owns its full parameter store; nothing is shared.
    """

    def __init__(self, config: dict, seed: int = 0):
        self.config = dict(config)
        self.seed = seed
        c = self.config
        self.store = ParamStore(seed)
        cc, ic = c["conv_channels"], c["in_channels"]
        self.kernels = self.store.glorot(
            "conv.k", ic * 9, cc, shape=(cc, ic, 3, 3))
        flat = cc * c["obs_height"] * c["obs_width"]
        self.trunk = Linear(self.store, "trunk", flat, c["mlp_size"])
        self.lstm = LSTMCell(self.store, "lstm",
                             c["mlp_size"] + c["d_extra"], c["lstm_size"])
        self.policy = Linear(self.store, "policy", c["lstm_size"], c["n_actions"])
        self.value = Linear(self.store, "value", c["lstm_size"], 1)
        self.optimizer = Adam(self.store, lr=c["lr"])
        self.rng = np.random.default_rng(seed)

    def init_memory(self):
        d = self.config["lstm_size"]
        return (np.zeros((1, d)), np.zeros((1, d)))

    def _check_obs(self, values: np.ndarray, batched: bool):
        c = self.config
        want = (c["in_channels"], c["obs_height"], c["obs_width"])
        got = values.shape[1:] if batched else values.shape
        if got != want:
            raise DimensionError(f"expected observation {want}, got {got}")

    def features(self, obs_batch: np.ndarray) -> Tensor:
        """Conv + trunk over a [t, c, h, w] stack of observations."""
        self._check_obs(obs_batch, batched=True)
        t = obs_batch.shape[0]
        conv = T.relu(T.conv2d(Tensor(obs_batch), self.kernels))
        flat = T.reshape(conv, (t, -1))
        return T.relu(self.trunk(flat))


def a2c_extras(config: dict, last_reward: float, last_action,
               static_extra=None) -> np.ndarray:
    """[1, d_extra] row: last reward, one-hot last action, fixed extras."""
    n = config["n_actions"]
    row = np.zeros(config["d_extra"])
    row[0] = float(last_reward)
    if last_action is not None:
        row[1 + int(last_action)] = 1.0
    tail = np.asarray(static_extra, dtype=np.float64) if static_extra is not None else np.zeros(0)
    if 1 + n + tail.size != config["d_extra"]:
        raise DimensionError(
            f"extras of size {1 + n + tail.size} do not fill d_extra="
            f"{config['d_extra']}")
    row[1 + n:] = tail
    return row[None, :]


def a2c_logits(agent: A2CAgent, observation: np.ndarray, extras: np.ndarray,
               memory):
    """One forward step; returns (logits, value, new memory) as Tensors."""
    obs = np.asarray(observation, dtype=np.float64)
    agent._check_obs(obs, batched=False)
    feats = agent.features(obs[None])
    x = T.concat([feats, Tensor(extras)], axis=1)
    h, c = (Tensor(memory[0]), Tensor(memory[1]))
    h2, c2 = agent.lstm(x, h, c)
    return agent.policy(h2), agent.value(h2), (h2.values, c2.values)


def a2c_act(agent: A2CAgent, observation, last_reward: float, last_action,
            memory, static_extra=None):
    """Sample an action; returns (action, value estimate, new memory)."""
    if memory is None:
        memory = agent.init_memory()
    extras = a2c_extras(agent.config, last_reward, last_action, static_extra)
    logits, value, memory = a2c_logits(agent, observation, extras, memory)
    lv = logits.values[0]
    p = np.exp(lv - lv.max())
    p /= p.sum()
    action = Action(int(agent.rng.choice(agent.config["n_actions"], p=p)))
    return action, float(value.values[0, 0]), memory


@dataclass
class Rollout:
    """One truncated-backprop window of experience for a single agent."""

    observations: list      # [c, h, w] arrays, one per step
    extras: list            # [1, d_extra] arrays, one per step
    actions: list           # ints taken
    rewards: list           # floats received
    values: list            # act-time value estimates, for logging
    dones: list             # True where the episode ended at that step
    bootstrap_value: float  # value of the state after the last step
    initial_memory: tuple   # LSTM (h, c) at the window start

    def __len__(self):
        return len(self.actions)


def n_step_returns(rewards, dones, bootstrap_value: float, discount: float):
    out = np.zeros(len(rewards))
    acc = float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            acc = 0.0
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def a2c_loss(agent: A2CAgent, rollout: Rollout, advantages=None):
    """Policy gradient + value + entropy objective over one window.

    The advantage multiplies the log-likelihood as a constant; only the
    value loss moves the value head toward the n-step returns. Passing
    ``advantages`` overrides the computed ones with fixed numbers (the
    finite-difference oracle needs the weighting held constant).
    """
    n = len(rollout)
    if n == 0:
        raise ConfigurationError("empty rollout")
    cfg = agent.config
    feats = agent.features(np.stack(rollout.observations))
    extras = np.concatenate(rollout.extras, axis=0)
    h, c = Tensor(rollout.initial_memory[0]), Tensor(rollout.initial_memory[1])
    hs = []
    for t in range(n):
        x = T.concat([T.gather_rows(feats, [t]),
                      Tensor(extras[t:t + 1])], axis=1)
        h, c = agent.lstm(x, h, c)
        hs.append(h)
    hidden = T.concat(hs, axis=0)
    logits = agent.policy(hidden)
    values = agent.value(hidden)

    returns = n_step_returns(rollout.rewards, rollout.dones,
                             rollout.bootstrap_value, cfg["discount"])
    if advantages is None:
        advantages = returns - values.values[:, 0]
    policy_loss = T.mul(
        T.softmax_cross_entropy(logits, rollout.actions,
                                weights=advantages, reduction="sum"),
        Tensor(1.0 / n))
    value_loss = T.mse(values, returns[:, None])
    logp = T.log_softmax(logits)
    entropy = T.mul(T.reduce_sum(T.mul(T.exp(logp), logp)), Tensor(-1.0 / n))

    total = T.add(policy_loss, T.mul(value_loss, Tensor(cfg["value_coef"])))
    total = T.sub(total, T.mul(entropy, Tensor(cfg["entropy_coef"])))
    metrics = {
        "policy_loss": float(policy_loss.values),
        "value_loss": float(value_loss.values),
        "entropy": float(entropy.values),
        "mean_return": float(returns.mean()),
    }
    return total, metrics


def a2c_update(agent: A2CAgent, rollout: Rollout) -> dict:
    with T.Tape() as tape:
        loss, metrics = a2c_loss(agent, rollout)
        tape.backward(loss)
    metrics["total_loss"] = float(loss.values)
    metrics["grad_norm"] = agent.optimizer.step()
    return metrics


# ---------------------------------------------------------------------------
# prediction planes


def render_prediction_planes(logits, positions, host_position, width: int,
                             height: int) -> np.ndarray:
    """Egocentric probability planes, one per fellow agent.

    Each row of ``logits`` is softmaxed and the probability mass of each
    action lands in the cell that action would move the fellow agent to
    (walls clip moves onto the current cell, so mass can accumulate).
    Planes share the host agent's frame: the host sits at the center of
    a [2*height-1, 2*width-1] plane.
    """
    logits = np.asarray(logits, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    hx, hy = int(host_position[0]), int(host_position[1])
    if not (0 <= hx < width and 0 <= hy < height):
        raise IndexError(f"host position {(hx, hy)} outside {width}x{height}")
    planes = np.zeros((logits.shape[0], 2 * height - 1, 2 * width - 1))
    for f in range(logits.shape[0]):
        x, y = int(positions[f][0]), int(positions[f][1])
        if not (0 <= x < width and 0 <= y < height):
            raise IndexError(f"position {(x, y)} outside {width}x{height}")
        row = logits[f]
        p = np.exp(row - row.max())
        p /= p.sum()
        for action in Action:
            dx, dy = ACTION_DELTAS[action]
            tx = min(max(x + dx, 0), width - 1)
            ty = min(max(y + dy, 0), height - 1)
            planes[f, ty - hy + height - 1, tx - hx + width - 1] += p[action]
    return planes


# ---------------------------------------------------------------------------
# augmented agent


@dataclass
class AugmentedMemory:
    a2c: tuple
    rfm_state: object
    pending: tuple | None  # (graph, rfm state before it, logits) awaiting labels


class RFMAugmentedAgent:
    """An actor-critic agent plus an on-board forward model.

    The forward model reads the environment graph, predicts each fellow
    agent's next action, and the resulting probability planes are
    appended to the observation before the policy network sees it. The
    planes are plain numbers to the policy (no gradient path), and the
    forward model is trained by its own optimizer on its own store.

    ``predict`` selects the supervision timing: ``"next"`` scores the
    step-t prediction against actions revealed at t+1; ``"last"`` scores
    the prediction against the fellow actions already encoded in the
    current graph.
    """

    def __init__(self, game_config: dict, agent_id: int, d_vertex: int,
                 a2c_overrides=None, rfm_overrides=None, seed: int = 0,
                 predict: str = "next", rfm_lr: float = 1e-3):
        if predict not in ("next", "last"):
            raise ConfigurationError(f"unknown prediction timing {predict!r}")
        self.predict = predict
        self.agent_id = agent_id
        n_agents = game_config["n_agents"]
        self.fellow_rows = [i for i in range(n_agents) if i != agent_id]
        self.width = game_config["width"]
        self.height = game_config["height"]

        in_channels = observation_channels(game_config) + len(self.fellow_rows)
        d_extra = 1 + 5 + (game_config.get("n_colors", 0) if game_config["game"] == "coin" else 0)
        overrides = dict(a2c_overrides or {})
        self.a2c = A2CAgent(
            a2c_config(in_channels, 2 * self.height - 1, 2 * self.width - 1,
                       d_extra, **overrides),
            seed=seed)

        rfm_cfg = {"d_v_in": d_vertex, "head_size": 5}
        rfm_cfg.update(rfm_overrides or {})
        self.rfm = RFMModel(ParamStore(seed + 1), rfm_cfg)
        self.rfm_optimizer = Adam(self.rfm.store, lr=rfm_lr)

    def init_memory(self, env_graph) -> AugmentedMemory:
        return AugmentedMemory(a2c=self.a2c.init_memory(),
                               rfm_state=self.rfm.init_state(env_graph),
                               pending=None)

    def _revealed_actions(self, env_graph):
        """Fellow actions one-hot encoded in the graph, or None at reset."""
        rows = env_graph.v.values[self.fellow_rows, LAST_ACTION_COL:LAST_ACTION_COL + 5]
        if rows.sum() < len(self.fellow_rows):
            return None
        return rows.argmax(axis=1)

    def _train_pending(self, graph, state_before, labels) -> float:
        with T.Tape() as tape:
            out, _ = self.rfm.step(graph, state_before)
            logits = agent_logit_rows(out, self.fellow_rows)
            loss = T.softmax_cross_entropy(logits, labels)
            tape.backward(loss)
        self.rfm_optimizer.step()
        return float(loss.values)


AugmentedStep = namedtuple(
    "AugmentedStep", ["action", "memory", "rfm_loss", "value", "observation"])


def augmented_step(agent: RFMAugmentedAgent, observation, env_graph, memory,
                   last_reward: float = 0.0, last_action=None,
                   static_extra=None) -> AugmentedStep:
    """Act with prediction planes appended to the observation.

    ``rfm_loss`` is None on steps where no supervision label was
    available (the first step of an episode in next-action mode);
    ``observation`` is the augmented observation the policy actually
    saw, and ``value`` the act-time value estimate, both kept for
    rollout bookkeeping.
    """
    if memory is None:
        memory = agent.init_memory(env_graph)

    rfm_loss = None
    if agent.predict == "next" and memory.pending is not None:
        labels = agent._revealed_actions(env_graph)
        if labels is not None:
            graph, state_before, _ = memory.pending
            rfm_loss = agent._train_pending(graph, state_before, labels)
    elif agent.predict == "last":
        labels = agent._revealed_actions(env_graph)
        if labels is not None:
            rfm_loss = agent._train_pending(env_graph, memory.rfm_state, labels)

    out, rfm_state = agent.rfm.step(env_graph, memory.rfm_state)
    fellow_logits = out.v.values[agent.fellow_rows, :]
    positions = env_graph.v.values[agent.fellow_rows, 0:2]
    host_position = env_graph.v.values[agent.agent_id, 0:2]
    planes = render_prediction_planes(fellow_logits, positions, host_position,
                                      agent.width, agent.height)
    augmented_obs = np.concatenate([np.asarray(observation, dtype=np.float64),
                                    planes], axis=0)

    action, value, a2c_memory = a2c_act(agent.a2c, augmented_obs, last_reward,
                                        last_action, memory.a2c, static_extra)
    pending = None
    if agent.predict == "next":
        pending = (env_graph, memory.rfm_state, fellow_logits)
    new_memory = AugmentedMemory(a2c=a2c_memory, rfm_state=rfm_state,
                                 pending=pending)
    return AugmentedStep(action, new_memory, rfm_loss, value, augmented_obs)


# ---------------------------------------------------------------------------
# agent checkpoints


def save_agent(path, agent, game_config: dict | None = None):
    """Write an agent checkpoint; augmented agents get a second ``.rfm`` file."""
    if isinstance(agent, RFMAugmentedAgent):
        if game_config is None:
            raise ConfigurationError(
                "augmented agent checkpoints need the game config")
        meta = {
            "kind": "augmented",
            "a2c_config": agent.a2c.config,
            "game_config": game_config,
            "agent_id": agent.agent_id,
            "predict": agent.predict,
        }
        save_checkpoint(path, agent.a2c.store, model_config=meta,
                        optimizer_state=agent.a2c.optimizer.state())
        save_checkpoint(f"{path}.rfm", agent.rfm.store,
                        model_config={"kind": "rfm-onboard",
                                      "config": agent.rfm.config},
                        optimizer_state=agent.rfm_optimizer.state())
    else:
        meta = {"kind": "a2c", "a2c_config": agent.config}
        save_checkpoint(path, agent.store, model_config=meta,
                        optimizer_state=agent.optimizer.state())


def load_agent(path):
    doc = load_checkpoint(path)
    meta = doc["model_config"]
    kind = meta.get("kind")
    if kind == "a2c":
        agent = A2CAgent(meta["a2c_config"], seed=doc["seed"])
        agent.store.load_values(doc["values"])
        agent.optimizer.load_state(doc["optimizer"])
        return agent
    if kind == "augmented":
        game = meta["game_config"]
        agent = RFMAugmentedAgent.__new__(RFMAugmentedAgent)
        agent.predict = meta["predict"]
        agent.agent_id = meta["agent_id"]
        agent.fellow_rows = [i for i in range(game["n_agents"])
                             if i != agent.agent_id]
        agent.width, agent.height = game["width"], game["height"]
        agent.a2c = A2CAgent(meta["a2c_config"], seed=doc["seed"])
        agent.a2c.store.load_values(doc["values"])
        agent.a2c.optimizer.load_state(doc["optimizer"])
        rfm_doc = load_checkpoint(f"{path}.rfm")
        agent.rfm = RFMModel(ParamStore(rfm_doc["seed"]),
                             rfm_doc["model_config"]["config"])
        agent.rfm.store.load_values(rfm_doc["values"])
        agent.rfm_optimizer = Adam(agent.rfm.store)
        agent.rfm_optimizer.load_state(rfm_doc["optimizer"])
        return agent
    raise ConfigurationError(f"not an agent checkpoint: kind={kind!r}")


# ---------------------------------------------------------------------------
# environment loops


def _static_extra(config: dict, state, agent_id: int):
    if config["game"] != "coin":
        return None
    onehot = np.zeros(config["n_colors"])
    onehot[int(state.coin_roles["revealed"][agent_id])] = 1.0
    return onehot


def _baseline_d_extra(config: dict) -> int:
    return 1 + 5 + (config["n_colors"] if config["game"] == "coin" else 0)


def make_baseline_agents(config: dict, seed: int = 0, overrides=None):
    h, w = config["height"], config["width"]
    agents = []
    for i in range(config["n_agents"]):
        cfg = a2c_config(observation_channels(config), 2 * h - 1, 2 * w - 1,
                         _baseline_d_extra(config), **(overrides or {}))
        agents.append(A2CAgent(cfg, seed=seed * 1000 + i))
    return agents


def make_augmented_agents(config: dict, d_vertex: int, seed: int = 0,
                          a2c_overrides=None, rfm_overrides=None,
                          predict: str = "next"):
    return [
        RFMAugmentedAgent(config, agent_id=i, d_vertex=d_vertex,
                          a2c_overrides=a2c_overrides,
                          rfm_overrides=rfm_overrides,
                          seed=seed * 1000 + i, predict=predict)
        for i in range(config["n_agents"])
    ]


def train_agents(config: dict, agents, n_episodes: int, seed: int = 0,
                 log=None):
    """Run actor-critic training episodes; returns per-episode reward rows.

    Learning ``agents`` are either all A2CAgents or all
    RFMAugmentedAgents; any slot may instead hold a ScriptedPolicy
    expert, which acts with the game heuristic, is never updated, and
    produces no log rows. Each learner accumulates its own rollout
    window and updates once the window reaches ``rollout_length``
    steps (bootstrapping with the value of the state after the
    window) and again at episode end. Log rows are dicts
    {episode, agent, reward, mean_rfm_loss}; coin games add per-role
    pickup counts {r_coins, u_coins, b_coins}. ``log`` may be called
    with each row as it is produced.
    """
    n_agents = config["n_agents"]
    if len(agents) != n_agents:
        raise ConfigurationError(
            f"{len(agents)} agents for a {n_agents}-agent game")
    learners = [i for i, a in enumerate(agents)
                if not isinstance(a, ScriptedPolicy)]
    if not learners:
        raise ConfigurationError("train_agents needs at least one learner")
    augmented = isinstance(agents[learners[0]], RFMAugmentedAgent)
    a2c_of = (lambda i: agents[i].a2c) if augmented else (lambda i: agents[i])
    coin_game = config["game"] == "coin"
    rows = []
    for episode in range(n_episodes):
        state = reset(config, seed=seed + episode)
        memories = [None] * n_agents
        last_actions = None
        last_rewards = np.zeros(n_agents)
        statics = [_static_extra(config, state, i) for i in range(n_agents)]
        rollouts: list = [None] * n_agents
        episode_rewards = np.zeros(n_agents)
        rfm_losses = [[] for _ in range(n_agents)]
        coin_counts = np.zeros((n_agents, 3), dtype=int)
        coin_roles = state.coin_roles if coin_game else None

        def flush(i, bootstrap):
            if rollouts[i] is not None and len(rollouts[i]):
                rollouts[i].bootstrap_value = bootstrap
                a2c_update(a2c_of(i), rollouts[i])
            rollouts[i] = None

        while not state.done:
            graph = to_graph(state, last_actions) if augmented else None
            actions = []
            for i in range(n_agents):
                if i not in learners:
                    actions.append(scripted_act(agents[i], state, i))
                    continue
                a2c = a2c_of(i)
                window_start = (memories[i].a2c if augmented and memories[i]
                                else memories[i]) or a2c.init_memory()
                obs = render_observation(state, i)
                la = None if last_actions is None else last_actions[i]
                if augmented:
                    stepped = augmented_step(
                        agents[i], obs, graph, memories[i],
                        last_reward=last_rewards[i], last_action=la,
                        static_extra=statics[i])
                    action, memories[i] = stepped.action, stepped.memory
                    value, obs = stepped.value, stepped.observation
                    if stepped.rfm_loss is not None:
                        rfm_losses[i].append(stepped.rfm_loss)
                else:
                    action, value, memories[i] = a2c_act(
                        a2c, obs, last_rewards[i], la, memories[i],
                        static_extra=statics[i])
                if (rollouts[i] is not None
                        and len(rollouts[i]) >= a2c.config["rollout_length"]):
                    flush(i, bootstrap=value)
                if rollouts[i] is None:
                    rollouts[i] = Rollout([], [], [], [], [], [], 0.0,
                                          window_start)
                rollouts[i].observations.append(obs)
                rollouts[i].extras.append(a2c_extras(
                    a2c.config, last_rewards[i], la, statics[i]))
                rollouts[i].actions.append(int(action))
                rollouts[i].values.append(value)
                actions.append(action)
            state, result = env_step(state, actions)
            episode_rewards += result.rewards
            if coin_game:
                for ev in result.events:
                    if ev["type"] != "coin_collected":
                        continue
                    who = ev["agents"][0]
                    color = int(state.coin_colors[ev["entity"]])
                    if color == coin_roles["revealed"][who]:
                        coin_counts[who, 0] += 1
                    elif color == coin_roles["bad"]:
                        coin_counts[who, 2] += 1
                    else:
                        coin_counts[who, 1] += 1
            for i in learners:
                rollouts[i].rewards.append(float(result.rewards[i]))
                rollouts[i].dones.append(bool(state.done))
            last_rewards = result.rewards.copy()
            last_actions = list(actions)
        for i in learners:
            flush(i, 0.0)
            mean_rfm = (float(np.mean(rfm_losses[i]))
                        if rfm_losses[i] else None)
            row = {"episode": episode, "agent": i,
                   "reward": float(episode_rewards[i]),
                   "mean_rfm_loss": mean_rfm}
            if coin_game:
                row["r_coins"] = int(coin_counts[i, 0])
                row["u_coins"] = int(coin_counts[i, 1])
                row["b_coins"] = int(coin_counts[i, 2])
            rows.append(row)
            if log is not None:
                log(rows[-1])
    return rows
