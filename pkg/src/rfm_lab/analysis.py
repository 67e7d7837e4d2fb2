"""Interpretability pipelines over trained predictors.

Three questions, three tools:

* Do large decoder-output edge norms point at entities the receiving
  agent is about to approach? (``extract_edge_norms`` +
  ``displacement_by_rank`` + ``align_on_events``)
* Do agent-to-agent edges light up around joint stag captures and dim
  when solo food is plentiful? (``teammate_edge_tests``)
* Does a return model trained with pruned-graph mixing price the
  presence of a teammate? (``return_marginal``)

Everything is a pure function of (model, episodes, seed): reruns give
identical results. Analyses emit columnar records (dicts of numpy
arrays) plus plain-dict summaries; ``*_csv`` writers fix the on-disk
schemas.
"""

from __future__ import annotations

import csv

import numpy as np

from .envs import vertex_order
from .errors import ConfigurationError
from .graph import batch_graphs
from .stats import pearson_r, permutation_test, stderr
from .training import prune_teammate_edges

ALIGN_WINDOW = 5
LOW_POWER_EVENTS = 20
CORRELATION_BURN_IN = 3


def _vertex_types(episode) -> list:
    return episode.meta.get("vertex_types") or vertex_order(episode.config)


def _positions(episode) -> np.ndarray:
    """[T, n_vertices, 2] vertex positions straight off the graphs."""
    return np.stack([s.graph.v.values[:, 0:2] for s in episode.steps])


def _availability(episode) -> np.ndarray:
    """[T, n_vertices] availability attribute (agents carry 0)."""
    return np.stack([s.graph.v.values[:, 7] for s in episode.steps])


def _window_stats(aligned: np.ndarray, n_offsets: int):
    """Per-offset count, mean, stderr over rows that reach the offset."""
    if not aligned.size:
        return (np.zeros(n_offsets, dtype=int),
                np.full(n_offsets, np.nan),
                np.zeros(n_offsets))
    counts = np.zeros(n_offsets, dtype=int)
    means = np.full(n_offsets, np.nan)
    errs = np.zeros(n_offsets)
    for i in range(n_offsets):
        col = aligned[:, i]
        col = col[~np.isnan(col)]
        counts[i] = col.size
        if col.size:
            means[i] = col.mean()
            errs[i] = stderr(col)
    return counts, means, errs


# ---------------------------------------------------------------------------
# edge-norm extraction


def extract_edge_norms(model, episodes, batch_size: int = 32) -> dict:
    """Norms of decoder-output edges whose receiver is an agent.

    Teacher-forced unroll. Returns parallel arrays: episode, step,
    sender, receiver (vertex ids local to the episode), sender_type,
    and norm. One record per (step, agent-receiving edge); for an
    episode that is episode length x edge count records.
    """
    if not episodes:
        raise ConfigurationError("no episodes to analyze")
    cols = {"episode": [], "step": [], "sender": [], "receiver": [],
            "sender_type": [], "norm": []}
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        steps = [batch_graphs([ep.steps[t].graph for ep in chunk])
                 for t in range(len(chunk[0]))]
        outs = model.unroll(steps)
        # output connectivity can differ from the input (a model may
        # restrict itself to self-edges), so read it off the output
        out0 = outs[0]
        vertex_offsets = np.concatenate(
            [[0], np.cumsum([ep.steps[0].graph.n_vertices for ep in chunk])])
        edge_graph = out0.edge_graph
        local_senders = out0.senders - vertex_offsets[edge_graph]
        local_receivers = out0.receivers - vertex_offsets[edge_graph]
        types = [_vertex_types(ep) for ep in chunk]
        receiver_is_agent = np.array(
            [types[g][r] == "agent"
             for g, r in zip(edge_graph, local_receivers)])
        keep = np.flatnonzero(receiver_is_agent)
        for t, out in enumerate(outs):
            norms = np.linalg.norm(out.e.values, axis=1) if \
                out.e.values.shape[1] else np.zeros(out.n_edges)
            cols["episode"].append(start + edge_graph[keep])
            cols["step"].append(np.full(keep.size, t, dtype=np.int64))
            cols["sender"].append(local_senders[keep])
            cols["receiver"].append(local_receivers[keep])
            cols["sender_type"].append(
                np.array([types[edge_graph[k]][local_senders[k]]
                          for k in keep], dtype=object))
            cols["norm"].append(norms[keep])
    return {k: np.concatenate(v) for k, v in cols.items()}


def filter_records(records: dict, sender_type=None,
                   teammate_only: bool = False) -> dict:
    """Subset of edge records by sender type or teammate edges."""
    mask = np.ones(records["norm"].size, dtype=bool)
    if sender_type is not None:
        mask &= records["sender_type"] == sender_type
    if teammate_only:
        mask &= ((records["sender_type"] == "agent")
                 & (records["sender"] != records["receiver"]))
    return {k: v[mask] for k, v in records.items()}


# ---------------------------------------------------------------------------
# rank vs displacement


def displacement_by_rank(records: dict, episodes, horizon: int = 1) -> list:
    """Mean change of receiver-sender distance, grouped by norm rank.

    Per step and receiving agent, incoming edges are ranked by norm
    (descending, ties by edge order); the signed distance change over
    the next ``horizon`` steps is accumulated per rank. Negative means
    the receiver closed in on the sender. Self-edges are skipped.
    """
    per_rank: dict[int, list] = {}
    for e_idx, ep in enumerate(episodes):
        mask = records["episode"] == e_idx
        if not mask.any():
            continue
        steps = records["step"][mask]
        senders = records["sender"][mask]
        receivers = records["receiver"][mask]
        norms = records["norm"][mask]
        pos = _positions(ep)
        T_len = len(ep)
        usable = steps < T_len - horizon
        for a in np.unique(receivers):
            sel = usable & (receivers == a) & (senders != a)
            if not sel.any():
                continue
            s_t = steps[sel]
            s_s = senders[sel]
            s_n = norms[sel]
            d_now = np.linalg.norm(
                pos[s_t, int(a)] - pos[s_t, s_s], axis=1)
            d_next = np.linalg.norm(
                pos[s_t + horizon, int(a)] - pos[s_t + horizon, s_s],
                axis=1)
            disp = d_next - d_now
            for t in np.unique(s_t):
                at_t = np.flatnonzero(s_t == t)
                order = at_t[np.argsort(-s_n[at_t], kind="stable")]
                for rank, k in enumerate(order, start=1):
                    per_rank.setdefault(rank, []).append(disp[k])
    rows = []
    for rank in sorted(per_rank):
        vals = np.asarray(per_rank[rank])
        rows.append({"rank": rank, "mean_displacement": float(vals.mean()),
                     "stderr": stderr(vals), "n": int(vals.size)})
    return rows


# ---------------------------------------------------------------------------
# event alignment


def _events(episodes, event_type: str) -> list:
    """(episode index, step, entity id or None) per matching event."""
    found = []
    for e_idx, ep in enumerate(episodes):
        for t, step in enumerate(ep.steps):
            for ev in step.events:
                if ev["type"] == event_type:
                    found.append((e_idx, t, ev.get("entity")))
    return found


def align_on_events(records: dict, episodes, event_type: str,
                    window: int = ALIGN_WINDOW) -> dict:
    """Edge-norm windows around events, plus sender-state group means.

    Per event, the mean norm over the event entity's outgoing records
    at offsets -window..window (NaN where the episode boundary cuts the
    window). Events without an entity average all records at the step.
    An absent event type yields an empty (flagged) alignment; the group
    means, which condition on the sender's availability attribute
    rather than on events, are always computed.
    """
    events = _events(episodes, event_type)
    offsets = list(range(-window, window + 1))
    aligned = []
    for e_idx, te, entity in events:
        ep = episodes[e_idx]
        mask = records["episode"] == e_idx
        if entity is not None:
            mask &= records["sender"] == ep.n_agents + entity
        steps = records["step"][mask]
        norms = records["norm"][mask]
        row = np.full(len(offsets), np.nan)
        for i, off in enumerate(offsets):
            t = te + off
            if not 0 <= t < len(ep):
                continue
            at = steps == t
            if at.any():
                row[i] = norms[at].mean()
        aligned.append(row)
    aligned = np.asarray(aligned) if aligned else np.zeros((0, len(offsets)))
    counts, means, errs = _window_stats(aligned, len(offsets))

    # availability-conditioned means over the records themselves
    avail_vals, unavail_vals = [], []
    for e_idx, ep in enumerate(episodes):
        mask = records["episode"] == e_idx
        if not mask.any():
            continue
        availability = _availability(ep)
        sender_avail = availability[records["step"][mask],
                                    records["sender"][mask]] > 0.5
        norms = records["norm"][mask]
        avail_vals.append(norms[sender_avail])
        unavail_vals.append(norms[~sender_avail])
    avail = np.concatenate(avail_vals) if avail_vals else np.zeros(0)
    unavail = np.concatenate(unavail_vals) if unavail_vals else np.zeros(0)
    return {
        "event_type": event_type,
        "n_events": len(events),
        "empty": len(events) == 0,
        "offsets": offsets,
        "aligned": aligned,
        "mean": means,
        "stderr": errs,
        "n": counts,
        "state_means": {
            "available": float(avail.mean()) if avail.size else None,
            "unavailable": float(unavail.mean()) if unavail.size else None,
            "n_available": int(avail.size),
            "n_unavailable": int(unavail.size),
        },
        "state_samples": {"available": avail, "unavailable": unavail},
    }


# ---------------------------------------------------------------------------
# teammate-edge statistics


def _teammate_series(records: dict, episodes) -> list:
    """Per-episode [T] mean agent-to-agent edge norm."""
    team = filter_records(records, teammate_only=True)
    t_max = max(len(ep) for ep in episodes)
    sums = np.zeros((len(episodes), t_max))
    counts = np.zeros((len(episodes), t_max))
    np.add.at(sums, (team["episode"], team["step"]), team["norm"])
    np.add.at(counts, (team["episode"], team["step"]), 1.0)
    series = []
    for e_idx, ep in enumerate(episodes):
        vals = np.full(len(ep), np.nan)
        has = counts[e_idx, :len(ep)] > 0
        vals[has] = sums[e_idx, :len(ep)][has] / counts[e_idx, :len(ep)][has]
        series.append(vals)
    return series


def _before_after(series, events, reach: int):
    """Mean of the series over the ``reach`` steps before vs after events."""
    before, after = [], []
    for e_idx, te, _entity in events:
        vals = series[e_idx]
        b = vals[max(0, te - reach):te]
        a = vals[te + 1:min(len(vals), te + 1 + reach)]
        b = b[~np.isnan(b)]
        a = a[~np.isnan(a)]
        if b.size and a.size:
            before.append(b.mean())
            after.append(a.mean())
    return np.asarray(before), np.asarray(after)


def _paired_result(before, after, n_events, seed) -> dict:
    out = {
        "n_events": int(n_events),
        "n_used": int(before.size),
        "low_power": n_events < LOW_POWER_EVENTS,
        "before_mean": float(before.mean()) if before.size else None,
        "after_mean": float(after.mean()) if after.size else None,
        "p": None,
    }
    if before.size >= 2:
        out["p"] = permutation_test(before, after, paired=True, seed=seed)
    return out


def teammate_edge_tests(records: dict, episodes, seed: int = 0,
                        burn_in: int = CORRELATION_BURN_IN) -> dict:
    """Agent-to-agent edge norms around captures, pickups, and food supply.

    Paired before/after comparisons use the step just before vs just
    after each event, plus a 3-step-mean variant. The apple-supply
    check correlates the available-apple count with the mean teammate
    norm across steps, skipping the first ``burn_in`` steps of each
    episode where the recurrent state is still warming up.
    """
    series = _teammate_series(records, episodes)
    out = {}
    for key, event_type in (("stag_capture", "stag_captured"),
                            ("apple_pickup", "apple_collected")):
        events = _events(episodes, event_type)
        b1, a1 = _before_after(series, events, reach=1)
        entry = _paired_result(b1, a1, len(events), seed)
        b3, a3 = _before_after(series, events, reach=3)
        entry["before3_mean"] = float(b3.mean()) if b3.size else None
        entry["after3_mean"] = float(a3.mean()) if a3.size else None
        entry["p3"] = permutation_test(b3, a3, paired=True, seed=seed + 1) \
            if b3.size >= 2 else None
        out[key] = entry

    xs, ys = [], []
    for e_idx, ep in enumerate(episodes):
        types = np.array(_vertex_types(ep), dtype=object)
        apple_rows = np.flatnonzero(types == "apple")
        if apple_rows.size == 0:
            continue
        availability = _availability(ep)
        counts = availability[:, apple_rows].sum(axis=1)
        vals = series[e_idx]
        for t in range(burn_in, len(ep)):
            if not np.isnan(vals[t]):
                xs.append(counts[t])
                ys.append(vals[t])
    if len(xs) >= 2 and np.std(xs) > 0 and np.std(ys) > 0:
        r, p = pearson_r(xs, ys, seed=seed + 2)
        out["apple_correlation"] = {"r": r, "p": p, "n": len(xs)}
    else:
        out["apple_correlation"] = {"r": None, "p": None, "n": len(xs)}
    return out


# ---------------------------------------------------------------------------
# return marginalization


def return_marginal(model, episodes, seed: int = 0,
                    window: int = ALIGN_WINDOW, batch_size: int = 32) -> dict:
    """Full-graph vs teammate-pruned return estimates, capture-aligned.

    The delta r_full - r_pruned prices what seeing the other agents is
    worth. Requires a model trained with pruned-graph mixing: one that
    never saw pruned graphs would be evaluated out of distribution.
    """
    if not episodes:
        raise ConfigurationError("no episodes to analyze")
    if not model.config.get("mixing_trained"):
        raise ConfigurationError(
            "return_marginal needs a model trained with pruned-graph "
            "mixing; train with mixing=True")
    from .training import unrolled_agent_outputs

    r_full, r_pruned = [], []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        outs_full = unrolled_agent_outputs(model, chunk)
        outs_pruned = unrolled_agent_outputs(
            model, chunk, [True] * len(chunk))
        full = np.stack([o.values[:, 0] for o in outs_full])
        pruned = np.stack([o.values[:, 0] for o in outs_pruned])
        col = 0
        for ep in chunk:
            r_full.append(full[:, col:col + ep.n_agents])
            r_pruned.append(pruned[:, col:col + ep.n_agents])
            col += ep.n_agents
    delta = [f - p for f, p in zip(r_full, r_pruned)]

    events = _events(episodes, "stag_captured")
    series = [d.mean(axis=1) for d in delta]
    before, after = _before_after(series, events, reach=3)
    capture = _paired_result(before, after, len(events), seed)

    offsets = list(range(-window, window + 1))
    aligned = []
    for e_idx, te, _entity in events:
        vals = series[e_idx]
        row = np.full(len(offsets), np.nan)
        for i, off in enumerate(offsets):
            t = te + off
            if 0 <= t < len(vals):
                row[i] = vals[t]
        aligned.append(row)
    aligned = np.asarray(aligned) if aligned else np.zeros((0, len(offsets)))
    counts, means, errs = _window_stats(aligned, len(offsets))
    capture.update({"offsets": offsets, "aligned_mean": means,
                    "aligned_stderr": errs, "aligned_n": counts})
    return {"r_full": r_full, "r_pruned": r_pruned, "delta": delta,
            "capture": capture}


# ---------------------------------------------------------------------------
# coin-collection curves


COIN_ROLES = ("R", "U", "B")


def coin_pickup_counts(episode) -> np.ndarray:
    """[n_agents, 3] counts of (revealed-good, unrevealed-good, bad)
    coins each agent collected, from the episode's event log."""
    roles = episode.meta.get("coin_roles")
    colors = episode.meta.get("coin_colors")
    if roles is None or colors is None:
        raise ConfigurationError("episode lacks coin role metadata")
    counts = np.zeros((episode.n_agents, 3), dtype=np.int64)
    for step in episode.steps:
        for ev in step.events:
            if ev["type"] != "coin_collected":
                continue
            agent = ev["agents"][0]
            color = colors[ev["entity"]]
            if color == roles["revealed"][agent]:
                counts[agent, 0] += 1
            elif color == roles["bad"]:
                counts[agent, 2] += 1
            else:
                counts[agent, 1] += 1
    return counts


def coin_analysis(rows, window: int = 50) -> dict:
    """Smoothed per-episode R/U/B collection curves from run-log rows.

    ``rows`` carry one record per episode per agent with keys
    ``episode``, ``r_coins``, ``u_coins``, ``b_coins`` (the agent-train
    log emits them for coin games). The gap is the mean U - B over the
    final smoothing window.
    """
    if not rows:
        raise ConfigurationError("no rows to analyze")
    by_episode: dict[int, list] = {}
    for row in rows:
        by_episode.setdefault(int(row["episode"]), []).append(row)
    episodes = sorted(by_episode)
    raw = np.zeros((len(episodes), 3))
    for i, e in enumerate(episodes):
        group = by_episode[e]
        for j, key in enumerate(("r_coins", "u_coins", "b_coins")):
            raw[i, j] = np.mean([float(g[key]) for g in group])
    smooth = np.empty_like(raw)
    for i in range(len(episodes)):
        lo = max(0, i - window + 1)
        smooth[i] = raw[lo:i + 1].mean(axis=0)
    tail = raw[max(0, len(episodes) - window):]
    return {
        "episodes": np.asarray(episodes),
        "R": smooth[:, 0], "U": smooth[:, 1], "B": smooth[:, 2],
        "raw": raw,
        "gap": float(tail[:, 1].mean() - tail[:, 2].mean()),
    }


# ---------------------------------------------------------------------------
# CSV schemas (one file per figure-analog)


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def fig3_top_csv(path, rank_rows):
    """Columns: rank, mean_displacement, stderr, n."""
    _write_csv(path, ["rank", "mean_displacement", "stderr", "n"], rank_rows)


def fig3_middle_csv(path, alignment):
    """Columns: series, key, mean, stderr, n.

    series "offset" rows hold the event-aligned window; series "state"
    rows hold availability-conditioned means.
    """
    rows = []
    for i, off in enumerate(alignment["offsets"]):
        mean = alignment["mean"][i]
        rows.append({"series": "offset", "key": off,
                     "mean": "" if np.isnan(mean) else mean,
                     "stderr": alignment["stderr"][i],
                     "n": int(alignment["n"][i])})
    state = alignment["state_means"]
    for name in ("available", "unavailable"):
        rows.append({"series": "state", "key": name,
                     "mean": "" if state[name] is None else state[name],
                     "stderr": "", "n": state[f"n_{name}"]})
    _write_csv(path, ["series", "key", "mean", "stderr", "n"], rows)


def fig3_bottom_csv(path, tests):
    """Columns: test, n_events, before_mean, after_mean, r, p, low_power."""
    rows = []
    for key in ("stag_capture", "apple_pickup"):
        t = tests[key]
        rows.append({"test": key, "n_events": t["n_events"],
                     "before_mean": t["before_mean"],
                     "after_mean": t["after_mean"], "r": "",
                     "p": t["p"], "low_power": int(t["low_power"])})
        rows.append({"test": key + "_3step", "n_events": t["n_events"],
                     "before_mean": t["before3_mean"],
                     "after_mean": t["after3_mean"], "r": "",
                     "p": t["p3"], "low_power": int(t["low_power"])})
    corr = tests["apple_correlation"]
    rows.append({"test": "apple_correlation", "n_events": corr["n"],
                 "before_mean": "", "after_mean": "",
                 "r": corr["r"], "p": corr["p"], "low_power": ""})
    _write_csv(path, ["test", "n_events", "before_mean", "after_mean",
                      "r", "p", "low_power"], rows)


def fig4_csv(path, marginal):
    """Columns: key, mean_delta, stderr, n; offsets then the summary
    rows before3/after3/p_value/n_events."""
    cap = marginal["capture"]
    rows = []
    for i, off in enumerate(cap["offsets"]):
        mean = cap["aligned_mean"][i]
        rows.append({"key": f"offset_{off}",
                     "mean_delta": "" if np.isnan(mean) else mean,
                     "stderr": cap["aligned_stderr"][i],
                     "n": int(cap["aligned_n"][i])})
    rows.append({"key": "before3", "mean_delta": cap["before_mean"],
                 "stderr": "", "n": cap["n_used"]})
    rows.append({"key": "after3", "mean_delta": cap["after_mean"],
                 "stderr": "", "n": cap["n_used"]})
    rows.append({"key": "p_value", "mean_delta": cap["p"], "stderr": "",
                 "n": cap["n_events"]})
    _write_csv(path, ["key", "mean_delta", "stderr", "n"], rows)


def fig6_csv(path, curves):
    """Columns: episode, r_mean, u_mean, b_mean (smoothed)."""
    rows = [{"episode": int(e), "r_mean": curves["R"][i],
             "u_mean": curves["U"][i], "b_mean": curves["B"][i]}
            for i, e in enumerate(curves["episodes"])]
    _write_csv(path, ["episode", "r_mean", "u_mean", "b_mean"], rows)


__all__ = [
    "extract_edge_norms", "filter_records", "displacement_by_rank",
    "align_on_events", "teammate_edge_tests", "return_marginal",
    "coin_pickup_counts", "coin_analysis",
    "fig3_top_csv", "fig3_middle_csv", "fig3_bottom_csv", "fig4_csv",
    "fig6_csv", "prune_teammate_edges",
]
