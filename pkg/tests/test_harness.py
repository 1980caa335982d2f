"""Trainer, metrics, evaluation, artifacts, and the ablation runner."""

from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocknav.graph import Action, AgentState, EnvGraph
from blocknav.harness import (
    DatasetWorldMismatch,
    EpisodeRow,
    EvalResult,
    TrainConfig,
    ablation_report,
    action_menu,
    all_flag_combinations,
    association_grid,
    complexity_buckets,
    drive,
    edit_distance,
    episode_loss,
    evaluate,
    k_grid,
    locating_grid,
    metric_sed,
    metric_spd,
    metric_tc,
    overall_grid,
    run_ablation_suite,
    spatial_grid,
    train,
    write_run_artifacts,
)
from blocknav.model import Agent, AgentConfig
from blocknav.worldgen import (
    InstructionRecord,
    WorldParams,
    build_records,
    generate_world,
    load_dataset,
    save_dataset,
)

AGENT_DIMS = dict(d=8, d_t=8, d_v=4, dim_timestep=4, dim_action=3,
                  dim_junction=3, K=2, heads=2, num_bins=4, max_T=8)


def hcfg(**kw) -> AgentConfig:
    merged = dict(AGENT_DIMS)
    merged.update(kw)
    return AgentConfig(**merged)


def htrain(**kw) -> TrainConfig:
    kw.setdefault("agent", hcfg())
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 3)
    return TrainConfig(**kw)


def _make_dataset(tmp_path_factory, name, n_records, world_seed, **route_kw):
    w = generate_world(WorldParams(seed=world_seed, grid_w=4, grid_h=4,
                                   edge_keep_prob=1.0, landmark_vocab_size=4,
                                   d_v=4, num_bins=4))
    records = build_records(w, n_records, seed=world_seed, **route_kw)
    path = tmp_path_factory.mktemp(name) / "data.jsonl"
    save_dataset(records, [w], str(path))
    return load_dataset(str(path))


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    return _make_dataset(tmp_path_factory, "small", 6, world_seed=5)


@pytest.fixture(scope="module")
def short_ds(tmp_path_factory):
    # single-block routes keep episodes a handful of steps long
    return _make_dataset(tmp_path_factory, "short", 4, world_seed=9,
                         min_blocks=1, max_blocks=1)


@pytest.fixture(scope="module")
def city_graph():
    return generate_world(WorldParams(seed=3)).graph


def path_graph(n=4) -> EnvGraph:
    edges = []
    for i in range(n - 1):
        edges.append((i, i + 1, 0.0))
        edges.append((i + 1, i, 180.0))
    return EnvGraph(range(n), edges, num_bins=4)


# ------------------------------------------------------------- action menu


def test_action_menu_interior_crossing(small_ds):
    g = next(iter(small_ds.graphs.values()))
    node = next(n for n in g.nodes if len(g.out_edges[n]) == 4)
    menu = action_menu(g, AgentState(node, 0.0, 0.0))
    assert menu.legal.all()
    assert menu.angles[Action.FORWARD] == 0.0
    assert menu.angles[Action.STOP] == 0.0
    assert menu.angles[Action.LEFT] == -0.5   # -90 deg, normalized by 180
    assert menu.angles[Action.RIGHT] == 0.5


def test_action_menu_heading_180_wraps(small_ds):
    g = next(iter(small_ds.graphs.values()))
    node = next(n for n in g.nodes if len(g.out_edges[n]) == 4)
    menu = action_menu(g, AgentState(node, 180.0, 180.0))
    assert menu.legal.all()
    assert menu.angles[Action.LEFT] == -0.5
    assert menu.angles[Action.RIGHT] == 0.5


def test_action_menu_dead_end_and_off_edge_heading():
    g = EnvGraph([0, 1], [(0, 1, 0.0)], num_bins=4)
    only_stop = np.array([False, False, False, True])
    assert np.array_equal(action_menu(g, AgentState(1, 0.0, 0.0)).legal, only_stop)
    # edges exist at node 0 but the heading lies on none of them
    assert np.array_equal(action_menu(g, AgentState(0, 90.0, 90.0)).legal, only_stop)


# ------------------------------------------------------------- driving


def test_teacher_drive_closes_on_gold(small_ds):
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=1)
    for rec in small_ds.records:
        g = small_ds.graph_for(rec)
        trace = drive(agent, g, rec, policy="teacher")
        assert trace.path == rec.gold_path
        assert trace.actions == list(rec.gold_actions)
        assert not trace.forced_stop
        stop, goal = trace.states[-1].node, rec.gold_path[-1]
        assert stop == goal
        assert metric_tc(stop, goal, g, "exact") == 1
        assert metric_spd(stop, goal, g) == 0
        assert metric_sed(trace.path, rec.gold_path, 1) == 1.0


def test_single_step_stop_trace(small_ds):
    g = next(iter(small_ds.graphs.values()))
    start = small_ds.records[0].gold_path[0]
    rec = InstructionRecord(
        tokens=[1, 2], sentence_spans=[(0, 2)], gold_path=[start],
        gold_actions=[Action.STOP], initial_heading=0.0,
        relevance_labels=np.ones((1, 1)), progress_labels=[0.0],
        episode_id="stop0")
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=1)
    trace = drive(agent, g, rec, policy="teacher")
    assert len(trace.outputs) == 1
    assert trace.actions == [Action.STOP]
    assert trace.path == [start]
    assert len(trace.states) == 1


def test_greedy_trace_replays_through_environment(small_ds):
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=2)
    rec = small_ds.records[0]
    g = small_ds.graph_for(rec)
    trace = drive(agent, g, rec, policy="greedy")
    state = AgentState(rec.gold_path[0], rec.initial_heading, rec.initial_heading)
    walked = [state]
    path = [state.node]
    for a in trace.actions:
        if a == Action.STOP:
            break
        state = g.step(state, a)
        walked.append(state)
        if a == Action.FORWARD:
            path.append(state.node)
    assert trace.states == walked
    assert trace.path == path


def test_greedy_hits_step_bound_when_never_stopping(small_ds):
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=0)
    # zero action weights -> all scores tie -> ordinal tie-break walks FORWARD
    agent.params["plan.w_act"].data[:] = 0.0
    rec = small_ds.records[1]
    trace = drive(agent, small_ds.graph_for(rec), rec, policy="greedy")
    assert trace.forced_stop
    assert len(trace.actions) == agent.config.max_T
    assert Action.STOP not in trace.actions


def test_drive_rejects_unknown_policy(small_ds):
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=0)
    rec = small_ds.records[0]
    with pytest.raises(ValueError, match="policy"):
        drive(agent, small_ds.graph_for(rec), rec, policy="beam")


# ------------------------------------------------------------- metrics


def _floyd_warshall(graph: EnvGraph):
    nodes = list(graph.nodes)
    idx = {n: i for i, n in enumerate(nodes)}
    big = math.inf
    dist = [[0 if i == j else big for j in range(len(nodes))] for i in range(len(nodes))]
    for u in nodes:
        for v, _ in graph.out_edges[u]:
            dist[idx[u]][idx[v]] = 1
    for k in range(len(nodes)):
        for i in range(len(nodes)):
            dik = dist[i][k]
            if dik == big:
                continue
            for j in range(len(nodes)):
                alt = dik + dist[k][j]
                if alt < dist[i][j]:
                    dist[i][j] = alt
    return idx, dist


def test_spd_matches_second_algorithm(city_graph):
    idx, dist = _floyd_warshall(city_graph)
    rng = np.random.default_rng(17)
    nodes = list(city_graph.nodes)
    for _ in range(100):
        u, v = rng.choice(len(nodes), size=2)
        want = dist[idx[nodes[u]]][idx[nodes[v]]]
        assert metric_spd(nodes[u], nodes[v], city_graph) == want


def test_spd_path_graph_known_lengths():
    g = path_graph(4)
    assert metric_spd(0, 0, g) == 0
    assert metric_spd(0, 3, g) == 3
    assert metric_spd(3, 0, g) == 3


def test_spd_unreachable_raises():
    g = EnvGraph([0, 1], [(0, 1, 0.0)], num_bins=4)
    with pytest.raises(ValueError, match="unreachable"):
        metric_spd(1, 0, g)


def test_tc_adjacency_rule():
    g = path_graph(4)
    assert metric_tc(2, 2, g, "exact") == 1
    assert metric_tc(1, 2, g, "exact") == 0
    assert metric_tc(1, 2, g, "adjacent") == 1
    assert metric_tc(0, 3, g, "adjacent") == 0  # three hops away
    with pytest.raises(ValueError, match="mode"):
        metric_tc(0, 0, g, "near")


def test_tc_one_way_neighbor_counts():
    g = EnvGraph([0, 1], [(0, 1, 0.0)], num_bins=4)
    assert metric_tc(1, 0, g, "adjacent") == 1  # reachable only goal -> stop
    assert metric_tc(0, 1, g, "adjacent") == 1


def _ed_recursive(a, b):
    memo = {}

    def rec(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        key = (i, j)
        if key not in memo:
            memo[key] = min(rec(i + 1, j) + 1,
                            rec(i, j + 1) + 1,
                            rec(i + 1, j + 1) + (a[i] != b[j]))
        return memo[key]

    return rec(0, 0)


def test_edit_distance_matches_recursion_oracle():
    rng = np.random.default_rng(23)
    for _ in range(60):
        a = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        assert edit_distance(a, b) == _ed_recursive(a, b)


def test_sed_examples():
    assert metric_sed([1, 2, 3], [1, 2, 3], 1) == 1.0
    assert metric_sed([1, 2, 3], [1, 2, 4], 0) == 0.0
    assert metric_sed([1, 2, 3], [1, 2, 4], 1) == pytest.approx(1 - 1 / 3)
    assert metric_sed([], [], 1) == 0.0


@settings(deadline=None)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_sed_bounds_and_equality(a, b):
    sed = metric_sed(a, b, 1)
    assert 0.0 <= sed <= 1.0
    assert (sed == 1.0) == (a == b and len(a) > 0)


def test_eval_result_aggregates_equal_recomputation(small_ds):
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=6)
    result = evaluate(agent, small_ds)
    assert len(result.rows) == len(small_ds.records)
    n = len(result.rows)
    assert result.tc == 100.0 * sum(r.success for r in result.rows) / n
    assert result.spd == sum(r.spd for r in result.rows) / n
    assert result.sed == sum(r.sed for r in result.rows) / n


def test_empty_eval_result():
    r = EvalResult.from_rows([])
    assert (r.tc, r.spd, r.sed, r.rows) == (0.0, 0.0, 0.0, [])


# ------------------------------------------------------------- training


def test_zero_epochs_checkpoint_equals_init(small_ds):
    tc = htrain(epochs=0, seed=4)
    agent, log = train(tc, small_ds)
    fresh = Agent(tc.agent, vocab_size=len(small_ds.vocab), seed=4)
    assert log == []
    for name, t in fresh.params.items():
        assert np.array_equal(agent.params[name].data, t.data)


def test_training_bitwise_deterministic(small_ds, tmp_path):
    tc = htrain(epochs=3, seed=7, lr=3e-3)
    a1, log1 = train(tc, small_ds)
    a2, log2 = train(tc, small_ds)
    assert log1 == log2
    for name, t in a1.params.items():
        assert np.array_equal(t.data, a2.params[name].data)
    a1.save(str(tmp_path / "a.bin"))
    a2.save(str(tmp_path / "b.bin"))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_loss_decreases_on_fixed_batch(short_ds):
    for seed in (0, 1, 2):
        tc = htrain(epochs=50, seed=seed, lr=1e-2, batch_size=4)
        _, log = train(tc, short_ds)
        first = log[0]["loss_action"] + log[0]["loss_progress"] + log[0]["loss_relevance"]
        last = log[-1]["loss_action"] + log[-1]["loss_progress"] + log[-1]["loss_relevance"]
        assert last < 0.7 * first, f"seed {seed}: {first} -> {last}"


def test_epoch_log_schema(short_ds):
    _, log = train(htrain(epochs=2), short_ds)
    assert [row["epoch"] for row in log] == [0, 1]
    for row in log:
        assert set(row) == {"epoch", "loss_action", "loss_progress",
                            "loss_relevance", "batches", "clipped"}


def test_dataset_shape_mismatch_rejected(small_ds):
    with pytest.raises(DatasetWorldMismatch, match="feature dim"):
        train(htrain(agent=hcfg(d_v=8)), small_ds)
    with pytest.raises(DatasetWorldMismatch, match="bins"):
        evaluate(Agent(hcfg(num_bins=8), vocab_size=len(small_ds.vocab)), small_ds)


def test_episode_loss_is_finite(small_ds):
    agent = Agent(hcfg(), vocab_size=len(small_ds.vocab), seed=3)
    rec = small_ds.records[0]
    losses = episode_loss(agent, small_ds.graph_for(rec), rec)
    for part in (losses.action, losses.progress, losses.relevance, losses.total):
        assert math.isfinite(part.item())


def test_train_config_round_trip_and_hash():
    tc = htrain(epochs=9, lr=2e-3, agent=hcfg(K=4))
    again = TrainConfig.from_dict(tc.to_dict())
    assert again == tc
    assert again.config_hash() == tc.config_hash()
    assert len(tc.config_hash()) == 12
    other = htrain(epochs=9, lr=5e-3, agent=hcfg(K=4))
    assert other.config_hash() != tc.config_hash()
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({**tc.to_dict(), "momentum": 0.9})


# ------------------------------------------------------------- artifacts


def _run_artifacts(ds, run_dir, epochs=2):
    tc = htrain(epochs=epochs, seed=1, lr=3e-3)
    agent, log = train(tc, ds)
    result = evaluate(agent, ds)
    write_run_artifacts(str(run_dir), tc, log, {"eval": result}, agent, ds)
    return tc, log, result


def test_run_artifact_layout(short_ds, tmp_path):
    run = tmp_path / "run0"
    tc, log, result = _run_artifacts(short_ds, run)
    for rel in ("config.json", "metrics.csv", "log.jsonl", "checkpoint.bin",
                "plots/loss.svg", "plots/sed_by_complexity.svg", "plots/progress.svg"):
        assert (run / rel).exists(), rel

    assert TrainConfig.from_dict(json.loads((run / "config.json").read_text())) == tc
    logged = [json.loads(line) for line in (run / "log.jsonl").read_text().splitlines()]
    assert logged == log
    reloaded = Agent.load(str(run / "checkpoint.bin"))
    assert reloaded.config == tc.agent

    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["run_id", "split", "tc", "spd", "sed", "seed", "config_hash"]
    assert rows[0]["run_id"] == "run0"
    assert rows[0]["split"] == "eval"
    assert rows[0]["tc"] == f"{result.tc:.4f}"
    assert rows[0]["sed"] == f"{result.sed:.4f}"
    assert rows[0]["config_hash"] == tc.config_hash()


def test_empty_evals_write_header_only_csv(short_ds, tmp_path):
    tc = htrain(epochs=0)
    agent, log = train(tc, short_ds)
    write_run_artifacts(str(tmp_path / "r"), tc, log, {}, agent)
    text = (tmp_path / "r" / "metrics.csv").read_text()
    assert text == "run_id,split,tc,spd,sed,seed,config_hash\n"


def test_metrics_files_identical_across_reruns(short_ds, tmp_path):
    _run_artifacts(short_ds, tmp_path / "a" / "run0")
    _run_artifacts(short_ds, tmp_path / "b" / "run0")
    for rel in ("metrics.csv", "checkpoint.bin", "log.jsonl", "plots/loss.svg"):
        assert (tmp_path / "a" / "run0" / rel).read_bytes() == \
            (tmp_path / "b" / "run0" / rel).read_bytes()


def test_complexity_buckets_quartile_oracle():
    lens = [2, 2, 3, 5, 7, 9, 9, 11]
    seds = [1.0, 0.5, 0.25, 0.75, 0.0, 1.0, 0.5, 1.0]
    rows = [EpisodeRow(f"ep{i}", 0, 0, 0, seds[i], 1) for i in range(8)]
    gold_len = {f"ep{i}": lens[i] for i in range(8)}
    xs, ys = complexity_buckets(EvalResult.from_rows(rows), gold_len)
    assert xs == [2, 5, 9, 11]
    assert ys == [0.75, 0.5, 0.5, 1.0]


def test_plot_point_count_equals_bucket_count(short_ds, tmp_path):
    run = tmp_path / "run0"
    _, _, result = _run_artifacts(short_ds, run)
    gold_len = {r.episode_id: len(r.gold_path) for r in short_ds.records}
    xs, _ = complexity_buckets(result, gold_len)
    svg = (run / "plots" / "sed_by_complexity.svg").read_text()
    assert svg.count("<circle") == len(xs)


# ------------------------------------------------------------- ablation


def test_grid_shapes_and_flags():
    base = hcfg()
    names = [n for n, _ in overall_grid(base)]
    assert names == ["baseline", "locating only", "planning only", "full"]
    planning = dict(overall_grid(base))["planning only"]
    assert not planning.use_locating and not planning.use_turn_history
    assert planning.use_token_attn

    k_names = [n for n, _ in k_grid(base)]
    assert k_names == ["K=1", "K=2", "K=3 (default)", "K=4", "K=5"]
    assert [c.K for _, c in k_grid(base)] == [1, 2, 3, 4, 5]

    assert [n for n, _ in spatial_grid(base)] == ["no spatial feature", "full"]
    assert not dict(spatial_grid(base))["no spatial feature"].use_spatial_in_planner

    assoc = dict(association_grid(base))
    assert not assoc["token only"].use_sentence_filter
    assert not assoc["sentence only"].use_token_attn
    assert not assoc["no relevance loss"].use_relevance_loss

    loc = dict(locating_grid(base))
    assert not loc["no turn signal"].use_turn_signal
    assert loc["global progress"].global_progress_labels


def test_all_flag_combinations_distinct():
    combos = all_flag_combinations(hcfg())
    keys = [json.dumps(c.to_dict(), sort_keys=True) for _, c in combos]
    assert len(keys) == len(set(keys))
    names = [n for n, _ in combos]
    assert "overall/baseline" in names and "overall/full" in names
    assert sum(1 for n in names if n.startswith("k/")) == 4  # K=3 dedupes into full
    assert len(combos) >= 12


def test_ablation_suite_single_config(short_ds, tmp_path):
    table = run_ablation_suite([("full", hcfg())], htrain(epochs=1),
                               short_ds, short_ds, seeds=(0,),
                               out_dir=str(tmp_path))
    assert len(table) == 1
    row = table[0]
    assert row["id"] == 1 and row["name"] == "full" and row["seeds"] == 1
    assert math.isfinite(row["tc_mean"]) and row["tc_std"] == 0.0
    assert (tmp_path / "01-full-s0" / "metrics.csv").exists()


def test_ablation_suite_records_failures_and_continues(short_ds):
    grid = [("bad", hcfg(d_v=8)), ("good", hcfg())]
    table = run_ablation_suite(grid, htrain(epochs=1), short_ds, short_ds, seeds=(0,))
    assert "DatasetWorldMismatch" in table[0]["errors"]
    assert math.isnan(table[0]["tc_mean"]) and table[0]["seeds"] == 0
    assert "errors" not in table[1] and table[1]["seeds"] == 1


def test_ablation_report_shape():
    table = [
        {"id": 1, "name": "baseline", "tc_mean": 50.0, "tc_std": 5.0,
         "spd_mean": 2.0, "spd_std": 0.5, "sed_mean": 0.4, "sed_std": 0.1, "seeds": 3},
        {"id": 2, "name": "full", "tc_mean": 80.0, "tc_std": 2.0,
         "spd_mean": 1.0, "spd_std": 0.25, "sed_mean": 0.7, "sed_std": 0.05, "seeds": 3},
    ]
    csv_text, md = ablation_report(table, "overall design")
    lines = csv_text.strip().splitlines()
    assert lines[0] == "id,name,tc_mean,tc_std,spd_mean,spd_std,sed_mean,sed_std,seeds"
    assert len(lines) == 3
    assert "| ID | Model | TC | SPD | SED |" in md
    assert "| 2 | full | 80.0 ± 2.0 | 1.00 ± 0.25 | 0.700 ± 0.050 |" in md
