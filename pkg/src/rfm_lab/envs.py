"""The three gridworld games, egocentric observations, and graph encoding.

Games are functional: ``reset`` builds an ``EnvState``, ``step`` maps a
state plus one action per agent to a new state and a ``StepResult``,
never mutating its input. All randomness comes from the generator
carried in the state, so (seed, action sequence) determines the whole
trajectory bit-exactly.

Coordinates are (x, y) with y growing downward: UP decreases y. Moves
are simultaneous and clipped at the walls; agents may share a cell.

Games:
  - coopnav: 6x6, 2 agents, 2 tiles, 20 steps; +1 to both agents on
    every step where each agent stands on a tile of its own.
  - coin: 8x8, 2 agents, 12 coins (4 each of 3 colors), 10 steps; one
    color is bad, two are good, each agent is told one good color;
    walking over a coin collects it (lowest agent id on ties); at the
    terminal step both agents receive +1 per good and -1 per bad coin
    collected by anyone.
  - staghunt: 10x10 (configurable), 2 or 4 agents, 12 apples, 3 stags
    on 2x2 blocks, 32 steps; +5 to an agent stepping on an available
    apple; when two or more agents stand on the same available stag's
    block it is captured and each of them gets +10; collected entities
    turn unavailable and respawn with probability 0.05 per step.

Events carry enough to recompute every reward exactly; CoopNav emits a
``tiles_covered`` event for its coverage reward since it has no entity
pickups.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigurationError, StateError
from .graph import Graph, make_graph

N_ACTIONS = 5


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


ACTION_DELTAS = {
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
    Action.STAY: (0, 0),
}

ENTITY_TYPES = ("agent", "tile", "coin", "apple", "stag")

GAME_NAMES = ("coopnav", "coin", "staghunt")


def game_config(game: str, **overrides) -> dict:
    """Fully explicit config document for a game; overrides checked by name."""
    if game == "coopnav":
        cfg = {
            "game": "coopnav", "width": 6, "height": 6, "n_agents": 2,
            "n_tiles": 2, "episode_length": 20, "reward_cover": 1.0,
        }
    elif game == "coin":
        cfg = {
            "game": "coin", "width": 8, "height": 8, "n_agents": 2,
            "n_colors": 3, "n_coins_per_color": 4, "episode_length": 10,
            "reward_good": 1.0, "reward_bad": -1.0,
        }
    elif game == "staghunt":
        cfg = {
            "game": "staghunt", "width": 10, "height": 10, "n_agents": 2,
            "n_stags": 3, "n_apples": 12, "episode_length": 32,
            "p_respawn": 0.05, "reward_apple": 5.0, "reward_stag": 10.0,
        }
    else:
        raise ConfigurationError(
            f"unknown game {game!r}; expected one of {GAME_NAMES}"
        )
    for key, val in overrides.items():
        if key not in cfg:
            raise ConfigurationError(f"unknown config key {key!r} for {game}")
        cfg[key] = val
    if cfg["game"] == "staghunt":
        if cfg["n_agents"] not in (2, 4):
            raise ConfigurationError("staghunt supports 2 or 4 agents")
    elif cfg["n_agents"] != 2:
        raise ConfigurationError(f"{game} supports exactly 2 agents")
    return cfg


def entity_types_for(config: dict) -> list[str]:
    """Entity list in canonical order (type, then id within type)."""
    game = config["game"]
    if game == "coopnav":
        return ["tile"] * config["n_tiles"]
    if game == "coin":
        return ["coin"] * (config["n_colors"] * config["n_coins_per_color"])
    return ["apple"] * config["n_apples"] + ["stag"] * config["n_stags"]


@dataclass
class EnvState:
    config: dict
    agents: np.ndarray            # [n_agents, 2] int cell coordinates
    entity_types: tuple           # canonical order, constant per config
    entity_pos: np.ndarray        # [n_entities, 2]; stags store the 2x2 top-left
    entity_available: np.ndarray  # [n_entities] bool
    coin_colors: np.ndarray       # [n_entities] int color id, -1 for non-coins
    coin_roles: dict | None       # {"bad": color, "revealed": [c_agent0, c_agent1]}
    step_count: int
    rng: np.random.Generator

    @property
    def done(self) -> bool:
        return self.step_count >= self.config["episode_length"]

    @property
    def n_agents(self) -> int:
        return self.config["n_agents"]


@dataclass
class StepResult:
    rewards: np.ndarray  # [n_agents] float
    done: bool
    events: list         # dicts: {type, entity, agents, step}


def _stag_cells(pos):
    x, y = int(pos[0]), int(pos[1])
    return [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]


def _occupied_cells(entity_type, pos):
    if entity_type == "stag":
        return _stag_cells(pos)
    return [(int(pos[0]), int(pos[1]))]


def reset(config: dict, seed: int) -> EnvState:
    """Place agents and entities on distinct cells; same seed, same layout."""
    w, h = config["width"], config["height"]
    types = entity_types_for(config)
    cells_needed = config["n_agents"] + sum(
        4 if t == "stag" else 1 for t in types
    )
    if cells_needed > w * h:
        raise ConfigurationError(
            f"arena {w}x{h} too small for {cells_needed} occupied cells"
        )
    rng = np.random.default_rng(seed)
    used = set()

    def sample_free():
        while True:
            c = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            if c not in used:
                used.add(c)
                return c

    agents = np.array([sample_free() for _ in range(config["n_agents"])],
                      dtype=np.int64)
    positions = []
    for t in types:
        if t == "stag":
            while True:
                x = int(rng.integers(0, w - 1))
                y = int(rng.integers(0, h - 1))
                block = _stag_cells((x, y))
                if not any(c in used for c in block):
                    used.update(block)
                    positions.append((x, y))
                    break
        else:
            positions.append(sample_free())
    entity_pos = np.array(positions, dtype=np.int64).reshape(len(types), 2)
    coin_colors = np.full(len(types), -1, dtype=np.int64)
    coin_roles = None
    if config["game"] == "coin":
        per = config["n_coins_per_color"]
        coin_colors = np.arange(len(types)) // per
        bad = int(rng.integers(0, config["n_colors"]))
        goods = [c for c in range(config["n_colors"]) if c != bad]
        if rng.integers(0, 2):
            goods.reverse()
        coin_roles = {"bad": bad, "revealed": goods}
    return EnvState(
        config=config, agents=agents, entity_types=tuple(types),
        entity_pos=entity_pos,
        entity_available=np.ones(len(types), dtype=bool),
        coin_colors=coin_colors, coin_roles=coin_roles,
        step_count=0, rng=rng,
    )


def _agents_on(cells, agents):
    hits = []
    cellset = set(cells)
    for i, (x, y) in enumerate(agents):
        if (int(x), int(y)) in cellset:
            hits.append(i)
    return hits


def step(state: EnvState, actions) -> tuple[EnvState, StepResult]:
    """Advance one step; returns the new state and rewards/events."""
    if state.done:
        raise StateError("episode already finished")
    n = state.n_agents
    if len(actions) != n:
        raise IndexError(f"expected {n} actions, got {len(actions)}")
    acts = [Action(int(a)) for a in actions]
    cfg = state.config
    w, h = cfg["width"], cfg["height"]
    rng = copy.deepcopy(state.rng)

    agents = state.agents.copy()
    for i, a in enumerate(acts):
        dx, dy = ACTION_DELTAS[a]
        agents[i, 0] = min(max(agents[i, 0] + dx, 0), w - 1)
        agents[i, 1] = min(max(agents[i, 1] + dy, 0), h - 1)

    available = state.entity_available.copy()
    rewards = np.zeros(n)
    events = []
    game = cfg["game"]
    t = state.step_count

    if game == "coopnav":
        # each agent on a tile of its own: a perfect agent-tile matching
        on_tile = [
            _agents_on([(int(p[0]), int(p[1]))], agents)
            for p in state.entity_pos
        ]
        covered = False
        if len(on_tile) == 2:
            covered = any(
                a0 in on_tile[0] and a1 in on_tile[1]
                for a0 in range(n) for a1 in range(n) if a0 != a1
            )
        if covered:
            rewards += cfg["reward_cover"]
            events.append({"type": "tiles_covered", "entity": None,
                           "agents": list(range(n)), "step": t})
    elif game == "coin":
        for e, etype in enumerate(state.entity_types):
            if not available[e]:
                continue
            here = _agents_on(_occupied_cells(etype, state.entity_pos[e]), agents)
            if here:
                collector = min(here)
                available[e] = False
                events.append({"type": "coin_collected", "entity": e,
                               "agents": [collector], "step": t})
        if t + 1 == cfg["episode_length"]:
            bad = state.coin_roles["bad"]
            total = 0.0
            for e in range(len(state.entity_types)):
                if not available[e]:
                    role_bad = int(state.coin_colors[e]) == bad
                    total += cfg["reward_bad"] if role_bad else cfg["reward_good"]
            rewards += total
    else:  # staghunt
        was_unavailable = ~state.entity_available
        for e, etype in enumerate(state.entity_types):
            if not available[e]:
                continue
            here = _agents_on(_occupied_cells(etype, state.entity_pos[e]), agents)
            if etype == "apple" and here:
                collector = min(here)
                rewards[collector] += cfg["reward_apple"]
                available[e] = False
                events.append({"type": "apple_collected", "entity": e,
                               "agents": [collector], "step": t})
            elif etype == "stag" and len(here) >= 2:
                for i in here:
                    rewards[i] += cfg["reward_stag"]
                available[e] = False
                events.append({"type": "stag_captured", "entity": e,
                               "agents": sorted(here), "step": t})
        # entities unavailable at step start may come back
        for e in np.flatnonzero(was_unavailable):
            if rng.random() < cfg["p_respawn"]:
                available[e] = True
                events.append({"type": f"{state.entity_types[e]}_respawn",
                               "entity": int(e), "agents": [], "step": t})

    new_state = EnvState(
        config=cfg, agents=agents, entity_types=state.entity_types,
        entity_pos=state.entity_pos, entity_available=available,
        coin_colors=state.coin_colors, coin_roles=state.coin_roles,
        step_count=t + 1, rng=rng,
    )
    return new_state, StepResult(
        rewards=rewards, done=new_state.done, events=events,
    )


def rewards_from_events(config: dict, events_per_step, coin_roles=None,
                        coin_colors=None) -> np.ndarray:
    """Recompute the per-step per-agent rewards implied by an event log."""
    n = config["n_agents"]
    length = config["episode_length"]
    out = np.zeros((length, n))
    game = config["game"]
    collected_coins = []
    for t, events in enumerate(events_per_step):
        for ev in events:
            kind = ev["type"]
            if kind == "tiles_covered":
                out[t, ev["agents"]] += config["reward_cover"]
            elif kind == "apple_collected":
                out[t, ev["agents"][0]] += config["reward_apple"]
            elif kind == "stag_captured":
                for i in ev["agents"]:
                    out[t, i] += config["reward_stag"]
            elif kind == "coin_collected":
                collected_coins.append(ev["entity"])
    if game == "coin" and collected_coins:
        bad = coin_roles["bad"]
        total = sum(
            config["reward_bad"] if int(coin_colors[e]) == bad
            else config["reward_good"]
            for e in collected_coins
        )
        out[length - 1, :] += total
    return out


# ---------------------------------------------------------------------------
# observations


def observation_channels(config: dict) -> int:
    game = config["game"]
    if game == "coopnav":
        return 4   # self, others, tiles, dimmed
    if game == "coin":
        return 3 + config["n_colors"]  # self, others, per-color, dimmed
    return 5       # self, others, apples, stags, dimmed


def render_observation(state: EnvState, agent_id: int) -> np.ndarray:
    """Egocentric top-down planes, observer at the center pixel.

    Spatial size (2h-1)x(2w-1) so the whole arena is visible from any
    cell. Channel 0 is the observer, channel 1 other agents, then one
    plane per visible entity kind, and a final plane holding every
    unavailable entity regardless of kind.
    """
    cfg = state.config
    n = state.n_agents
    if not 0 <= agent_id < n:
        raise IndexError(f"agent id {agent_id} out of range")
    w, h = cfg["width"], cfg["height"]
    c = observation_channels(cfg)
    obs = np.zeros((c, 2 * h - 1, 2 * w - 1))
    ax, ay = int(state.agents[agent_id, 0]), int(state.agents[agent_id, 1])

    def paint(plane, x, y):
        obs[plane, y - ay + h - 1, x - ax + w - 1] = 1.0

    paint(0, ax, ay)
    for j in range(n):
        if j != agent_id:
            paint(1, int(state.agents[j, 0]), int(state.agents[j, 1]))
    dim = c - 1
    for e, etype in enumerate(state.entity_types):
        cells = _occupied_cells(etype, state.entity_pos[e])
        if not state.entity_available[e]:
            plane = dim
        elif etype == "tile":
            plane = 2
        elif etype == "coin":
            plane = 2 + int(state.coin_colors[e])
        elif etype == "apple":
            plane = 2
        else:  # stag
            plane = 3
        for (x, y) in cells:
            paint(plane, x, y)
    return obs


# ---------------------------------------------------------------------------
# graph encoding

D_VERTEX = 2 + len(ENTITY_TYPES) + 1 + 3 + N_ACTIONS  # 16


def vertex_order(config: dict) -> list[str]:
    """Types of the graph vertices: agents first by id, then entities."""
    return ["agent"] * config["n_agents"] + entity_types_for(config)


def graph_edges(config: dict, prune_agent_edges: bool = False,
                self_edges_only: bool = False):
    """Canonical (senders, receivers): entities feed every agent, agents
    feed each other both ways. Receiver-major order keeps segment ids
    sorted with uniform counts."""
    n_a = config["n_agents"]
    n_v = n_a + len(entity_types_for(config))
    if self_edges_only:
        idx = np.arange(n_v, dtype=np.int64)
        return idx, idx.copy()
    senders, receivers = [], []
    for a in range(n_a):
        for e in range(n_a, n_v):
            senders.append(e)
            receivers.append(a)
        if not prune_agent_edges:
            for b in range(n_a):
                if b != a:
                    senders.append(b)
                    receivers.append(a)
    return (np.asarray(senders, dtype=np.int64),
            np.asarray(receivers, dtype=np.int64))


def vertex_attributes(state: EnvState, last_actions=None) -> np.ndarray:
    """Per-vertex features, zero-padded where a slot does not apply.

    Layout: [x, y | one-hot type (agent,tile,coin,apple,stag) | available
    | one-hot coin color (3) | one-hot last action (5)].
    """
    cfg = state.config
    n_a = state.n_agents
    types = vertex_order(cfg)
    v = np.zeros((len(types), D_VERTEX))
    for i, tname in enumerate(types):
        v[i, 2 + ENTITY_TYPES.index(tname)] = 1.0
    v[:n_a, 0:2] = state.agents
    v[n_a:, 0:2] = state.entity_pos
    v[n_a:, 7] = state.entity_available.astype(np.float64)
    coin_mask = state.coin_colors >= 0
    rows = n_a + np.flatnonzero(coin_mask)
    v[rows, 8 + state.coin_colors[coin_mask]] = 1.0
    if last_actions is not None:
        if len(last_actions) != n_a:
            raise IndexError(f"expected {n_a} last actions")
        for i, a in enumerate(last_actions):
            v[i, 11 + int(a)] = 1.0
    return v


def to_graph(state: EnvState, last_actions=None, prune_agent_edges=False,
             self_edges_only=False) -> Graph:
    """Semantic scene graph: edges carry no attributes, globals are empty."""
    senders, receivers = graph_edges(
        state.config, prune_agent_edges=prune_agent_edges,
        self_edges_only=self_edges_only,
    )
    return make_graph(vertex_attributes(state, last_actions), senders, receivers)
