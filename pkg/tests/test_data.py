"""Collection, dataset serialization, and return targets."""

import json

import numpy as np
import pytest

from rfm_lab.data import (
    AgentPolicy, Dataset, Episode, collect, collect_episode, deserialize,
    make_driver, make_return_targets, serialize,
)
from rfm_lab.envs import D_VERTEX, game_config, observation_channels
from rfm_lab.errors import ConfigurationError, FormatError, ParseError
from rfm_lab.policies import A2CAgent, ScriptedPolicy, a2c_config

from oracles import returns_to_go_loop


def small_dataset(game="coopnav", n=2, base_seed=50, n_eval=0):
    cfg = game_config(game)
    return collect(cfg, ScriptedPolicy(game), n, base_seed=base_seed,
                   n_eval=n_eval)


def episodes_equal(a: Episode, b: Episode) -> bool:
    if a.config != b.config or a.seed != b.seed or a.meta != b.meta:
        return False
    if len(a) != len(b):
        return False
    for sa, sb in zip(a.steps, b.steps):
        if sa.actions != sb.actions or sa.events != sb.events:
            return False
        if not np.array_equal(sa.rewards, sb.rewards):
            return False
        if not np.array_equal(sa.graph.v.values, sb.graph.v.values):
            return False
        if not np.array_equal(sa.graph.senders, sb.graph.senders):
            return False
        if not np.array_equal(sa.graph.receivers, sb.graph.receivers):
            return False
    return True


# ---------------------------------------------------------------------------
# collection


def test_collect_episode_lengths_and_vertices():
    ds = small_dataset("coopnav", n=1)
    assert len(ds.episodes[0]) == 20
    ds = small_dataset("coin", n=1)
    episode = ds.episodes[0]
    assert len(episode) == 10
    assert all(s.graph.n_vertices == 14 for s in episode.steps)


def test_collect_seeds_and_determinism(tmp_path):
    a = small_dataset(n=3, base_seed=100)
    assert [e.seed for e in a.episodes] == [100, 101, 102]
    b = small_dataset(n=3, base_seed=100)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    serialize(a, pa)
    serialize(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_collect_episodes_independent_of_batch():
    whole = small_dataset(n=4, base_seed=200)
    single = small_dataset(n=1, base_seed=202)
    assert episodes_equal(whole.episodes[2], single.episodes[0])


def test_collect_graphs_carry_previous_actions():
    ds = small_dataset("staghunt", n=1)
    episode = ds.episodes[0]
    first = episode.steps[0].graph.v.values
    assert first[:, 11:16].sum() == 0.0  # no actions before the first step
    for t in range(1, 4):
        rows = episode.steps[t].graph.v.values[:2, 11:16]
        assert np.array_equal(rows.argmax(axis=1), episode.steps[t - 1].actions)
        assert np.array_equal(rows.sum(axis=1), [1.0, 1.0])


def test_collect_splits_partition():
    ds = small_dataset(n=10, n_eval=3)
    assert len(ds.train_episodes) == 7
    assert len(ds.eval_episodes) == 3
    assert len(ds.train_episodes) + len(ds.eval_episodes) == len(ds)
    train_seeds = {e.seed for e in ds.train_episodes}
    eval_seeds = {e.seed for e in ds.eval_episodes}
    assert not train_seeds & eval_seeds
    with pytest.raises(ConfigurationError):
        small_dataset(n=2, n_eval=3)


def test_collect_policy_game_mismatch():
    cfg = game_config("coopnav")
    with pytest.raises(ConfigurationError):
        collect(cfg, ScriptedPolicy("coin"), 1)


def test_agent_policy_validation_and_collection():
    cfg = game_config("coopnav")
    tiny = dict(conv_channels=3, mlp_size=8, lstm_size=6)
    good = [A2CAgent(a2c_config(observation_channels(cfg), 11, 11, 6, **tiny),
                     seed=i) for i in range(2)]
    ds = collect(cfg, good, 1, base_seed=7)
    assert len(ds.episodes[0]) == 20
    assert all(0 <= a <= 4 for s in ds.episodes[0].steps for a in s.actions)

    with pytest.raises(ConfigurationError):
        AgentPolicy(good[:1], cfg)
    bad = [A2CAgent(a2c_config(9, 11, 11, 6, **tiny), seed=i)
           for i in range(2)]
    with pytest.raises(ConfigurationError):
        AgentPolicy(bad, cfg)
    with pytest.raises(ConfigurationError):
        make_driver("not a policy", cfg)


def test_coin_episode_meta():
    ds = small_dataset("coin", n=1)
    meta = ds.episodes[0].meta
    assert meta["coin_roles"]["bad"] in (0, 1, 2)
    assert len(meta["coin_colors"]) == 12
    assert meta["vertex_types"][:2] == ["agent", "agent"]


# ---------------------------------------------------------------------------
# serialization


def test_round_trip_identity(tmp_path):
    for game in ("coopnav", "coin", "staghunt"):
        ds = small_dataset(game, n=2, n_eval=1)
        path = tmp_path / f"{game}.jsonl"
        serialize(ds, path)
        back = deserialize(path)
        assert back.header == ds.header
        assert back.splits == ds.splits
        assert all(episodes_equal(a, b)
                   for a, b in zip(ds.episodes, back.episodes))


def test_empty_dataset_header_only(tmp_path):
    ds = small_dataset(n=1)
    empty = Dataset(header=ds.header, episodes=[], splits=[])
    path = tmp_path / "empty.jsonl"
    serialize(empty, path)
    assert path.read_text().count("\n") == 1
    back = deserialize(path)
    assert len(back) == 0
    assert back.header["format_version"] == 1


def test_truncated_line_names_line_number(tmp_path):
    ds = small_dataset(n=2)
    path = tmp_path / "data.jsonl"
    serialize(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-40])  # chop the tail of the final episode
    with pytest.raises(ParseError) as err:
        deserialize(path)
    assert "line 3" in str(err.value)
    assert err.value.line == 3


def test_version_mismatch(tmp_path):
    ds = small_dataset(n=1)
    path = tmp_path / "data.jsonl"
    serialize(ds, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["format_version"] = 99
    lines[0] = json.dumps(header)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError):
        deserialize(path)


def test_bad_action_rejected_on_load(tmp_path):
    ds = small_dataset(n=1)
    path = tmp_path / "data.jsonl"
    serialize(ds, path)
    lines = path.read_text().splitlines()
    doc = json.loads(lines[1])
    doc["steps"][0]["actions"][0] = 7
    lines[1] = json.dumps(doc)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        deserialize(path)
    assert err.value.line == 2


def test_missing_header(tmp_path):
    path = tmp_path / "nothing.jsonl"
    path.write_text("")
    with pytest.raises(ParseError):
        deserialize(path)


def test_loaded_graphs_validate(tmp_path):
    ds = small_dataset("staghunt", n=1)
    path = tmp_path / "data.jsonl"
    serialize(ds, path)
    back = deserialize(path)
    for step in back.episodes[0].steps:
        step.graph.validate()  # raises on any broken invariant
        assert step.graph.v.values.shape[1] == D_VERTEX


# ---------------------------------------------------------------------------
# return targets


def test_return_targets_trivial_cases():
    ds = small_dataset("coopnav", n=1, base_seed=3)
    episode = ds.episodes[0]
    zero = Episode(config=episode.config, seed=0, steps=[
        type(s)(graph=s.graph, actions=s.actions,
                rewards=np.zeros_like(s.rewards), events=[])
        for s in episode.steps])
    assert (make_return_targets(zero) == 0).all()


def test_return_targets_last_step_reward():
    ds = small_dataset("coopnav", n=1, base_seed=3)
    episode = ds.episodes[0]
    steps = [type(s)(graph=s.graph, actions=s.actions,
                     rewards=np.zeros(2), events=[])
             for s in episode.steps[:3]]
    steps[2].rewards = np.array([1.0, 1.0])
    short = Episode(config=episode.config, seed=0, steps=steps)
    assert make_return_targets(short).tolist() == [[1, 1], [1, 1], [1, 1]]


def test_return_targets_match_reversed_cumsum_oracle():
    rng = np.random.default_rng(8)
    ds = small_dataset("staghunt", n=2, base_seed=11)
    for episode in ds.episodes:
        # overwrite with random rewards to exercise arbitrary values
        for s in episode.steps:
            s.rewards = rng.normal(size=2)
        got = make_return_targets(episode)
        want = returns_to_go_loop(episode.reward_matrix())
        assert np.allclose(got, want, atol=1e-12)
        # consistency: R_t = r_t + R_{t+1}
        rewards = episode.reward_matrix()
        for t in range(len(episode) - 1):
            assert np.allclose(got[t], rewards[t] + got[t + 1])


def test_return_targets_discounted():
    ds = small_dataset("coopnav", n=1, base_seed=5)
    episode = ds.episodes[0]
    rng = np.random.default_rng(2)
    for s in episode.steps:
        s.rewards = rng.normal(size=2)
    rewards = episode.reward_matrix()
    got = make_return_targets(episode, discount=0.9)
    T_len = rewards.shape[0]
    want = np.zeros_like(rewards)
    for t in range(T_len):
        for k in range(t, T_len):
            want[t] += (0.9 ** (k - t)) * rewards[k]
    assert np.allclose(got, want, atol=1e-10)


def test_dataset_split_length_mismatch():
    ds = small_dataset(n=2)
    with pytest.raises(ConfigurationError):
        Dataset(header=ds.header, episodes=ds.episodes, splits=["train"])
