"""Teacher-forced training, greedy evaluation, metrics, and experiment grids.

The driver walks one episode at a time: teacher mode advances the
environment with gold actions while the model's scores are supervised;
greedy mode follows the argmax until STOP or the step bound. Everything
downstream (loss, metrics, reports) consumes the resulting trace.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Action, AgentState, EnvGraph, NodeId, UNREACHABLE, normalize_heading_delta, turn_signals
from .model import ActionMenu, Agent, AgentConfig, Losses, StepOutput, act_greedy
from .optim import AdamState, adam_step, clip_global_norm
from .worldgen import Dataset, InstructionRecord


class DatasetWorldMismatch(ValueError):
    """Dataset references worlds or shapes the run cannot serve."""


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip_norm: float = 5.0
    eval_every: int = 0  # epochs between held-out evals; 0 = none
    train_path: str = ""
    eval_path: str = ""
    agent: AgentConfig = field(default_factory=AgentConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        agent = d.pop("agent", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(agent=AgentConfig.from_dict(agent), **d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EpisodeTrace:
    episode_id: str
    outputs: list[StepOutput]
    actions: list[Action]
    path: list[NodeId]          # nodes visited by forward moves, start included
    states: list[AgentState]    # state before each recorded step
    forced_stop: bool = False


@dataclass
class EpisodeRow:
    episode_id: str
    stop_node: NodeId
    goal_node: NodeId
    spd: int
    sed: float
    success: int


@dataclass
class EvalResult:
    tc: float   # percentage
    spd: float  # mean hops
    sed: float  # mean score in [0, 1]
    rows: list[EpisodeRow]

    @classmethod
    def from_rows(cls, rows: list[EpisodeRow]) -> "EvalResult":
        if not rows:
            return cls(0.0, 0.0, 0.0, [])
        return cls(
            tc=100.0 * sum(r.success for r in rows) / len(rows),
            spd=sum(r.spd for r in rows) / len(rows),
            sed=sum(r.sed for r in rows) / len(rows),
            rows=rows,
        )


# ---------------------------------------------------------------- driving


def action_menu(graph: EnvGraph, state: AgentState) -> ActionMenu:
    """Turning angle and legality for each action at the current state.

    Forward keeps the heading (angle 0); rotations report the normalized
    delta to the edge they select; STOP is always legal. At a node with no
    outgoing edges only STOP survives.
    """
    angles = np.zeros(4)
    legal = np.zeros(4, dtype=bool)
    legal[Action.STOP] = True
    edges = graph.out_edges[state.node]
    if edges:
        angs = [a for _, a in edges]
        if state.heading in angs:
            i = angs.index(state.heading)
            n = len(angs)
            legal[Action.FORWARD] = legal[Action.LEFT] = legal[Action.RIGHT] = True
            angles[Action.LEFT] = normalize_heading_delta(state.heading, angs[(i - 1) % n])
            angles[Action.RIGHT] = normalize_heading_delta(state.heading, angs[(i + 1) % n])
    return ActionMenu(angles=angles, legal=legal)


def drive(agent: Agent, graph: EnvGraph, record: InstructionRecord,
          policy: str = "teacher") -> EpisodeTrace:
    """Run one episode. policy: 'teacher' replays gold actions, 'greedy'
    follows the model until STOP or max_T actions (forced stop)."""
    if policy not in ("teacher", "greedy"):
        raise ValueError(f"unknown policy {policy!r}")
    enc = agent.encode_instruction(record.tokens, record.sentence_spans)
    state = AgentState(
        node=record.gold_path[0],
        heading=record.initial_heading,
        prev_heading=record.initial_heading,
    )
    ctx = agent.fresh_context()
    g_hist: list[float] = []
    outputs: list[StepOutput] = []
    actions: list[Action] = []
    states = [state]
    path = [state.node]
    forced = False
    while True:
        sig = turn_signals(graph, state, g_hist, agent.config.K)
        g_hist.append(sig.g_c)
        out = agent.step(ctx, enc, graph.observe(state), sig.g_c, sig.g_l,
                         sig.junction_count, action_menu(graph, state))
        outputs.append(out)
        if policy == "teacher":
            a = record.gold_actions[len(actions)]
        else:
            a = act_greedy(out.action_scores)
        actions.append(a)
        ctx.advance(a)
        if a == Action.STOP:
            break
        state = agent_step = graph.step(state, a)
        states.append(agent_step)
        if a == Action.FORWARD:
            path.append(state.node)
        if policy == "greedy" and len(actions) >= agent.config.max_T:
            forced = True
            break
    return EpisodeTrace(record.episode_id, outputs, actions, path, states, forced)


def episode_loss(agent: Agent, graph: EnvGraph, record: InstructionRecord) -> Losses:
    trace = drive(agent, graph, record, policy="teacher")
    return agent.compute_losses(trace.outputs, record.gold_actions,
                                record.progress_labels, record.relevance_labels)


def _check_dataset(agent_cfg: AgentConfig, dataset: Dataset) -> None:
    for h, g in dataset.graphs.items():
        if g.d_v != agent_cfg.d_v:
            raise DatasetWorldMismatch(
                f"world {h}: feature dim {g.d_v} != configured d_v {agent_cfg.d_v}")
        if g.num_bins != agent_cfg.num_bins:
            raise DatasetWorldMismatch(
                f"world {h}: {g.num_bins} heading bins != configured {agent_cfg.num_bins}")


# ---------------------------------------------------------------- training


def train(tc: TrainConfig, dataset: Dataset,
          log_hook=None) -> tuple[Agent, list[dict]]:
    """Teacher-forced training; returns the agent and per-epoch log rows.

    Deterministic for a fixed (config, dataset): initialization, batch
    order, and every update depend only on tc.seed.
    """
    _check_dataset(tc.agent, dataset)
    agent = Agent(tc.agent, vocab_size=len(dataset.vocab), seed=tc.seed)
    adam = AdamState(agent.params)
    order = np.random.default_rng([tc.seed, 0x0DE4])
    records = dataset.records
    log: list[dict] = []
    for epoch in range(tc.epochs):
        perm = order.permutation(len(records))
        sums = {"action": 0.0, "progress": 0.0, "relevance": 0.0}
        clip_hits = 0
        n_batches = 0
        for lo in range(0, len(perm), tc.batch_size):
            batch = perm[lo:lo + tc.batch_size]
            agent.params.zero_grad()
            total = None
            for idx in batch:
                rec = records[idx]
                losses = episode_loss(agent, dataset.graph_for(rec), rec)
                sums["action"] += losses.action.item()
                sums["progress"] += losses.progress.item()
                sums["relevance"] += losses.relevance.item()
                total = losses.total if total is None else total + losses.total
            (total / len(batch)).backward()
            norm = clip_global_norm(agent.params, tc.grad_clip_norm)
            clip_hits += norm > tc.grad_clip_norm
            adam_step(agent.params, adam, tc.lr, tc.beta1, tc.beta2, tc.eps)
            n_batches += 1
        row = {
            "epoch": epoch,
            "loss_action": sums["action"] / len(records),
            "loss_progress": sums["progress"] / len(records),
            "loss_relevance": sums["relevance"] / len(records),
            "batches": n_batches,
            "clipped": int(clip_hits),
        }
        log.append(row)
        if log_hook is not None:
            log_hook(row)
    return agent, log


# ---------------------------------------------------------------- metrics


def metric_tc(stop_node: NodeId, goal_node: NodeId, graph: EnvGraph,
              mode: str = "adjacent") -> int:
    """1 if stopped at the goal (mode 'exact') or at the goal or one of its
    immediate neighbors (mode 'adjacent', the default convention)."""
    if mode not in ("exact", "adjacent"):
        raise ValueError(f"unknown tc mode {mode!r}")
    if stop_node == goal_node:
        return 1
    if mode == "adjacent":
        hops = graph.shortest_path_hops(stop_node, goal_node)
        if hops is not UNREACHABLE and hops == 1:
            return 1
        back = graph.shortest_path_hops(goal_node, stop_node)
        if back is not UNREACHABLE and back == 1:
            return 1
    return 0


def metric_spd(stop_node: NodeId, goal_node: NodeId, graph: EnvGraph) -> int:
    hops = graph.shortest_path_hops(stop_node, goal_node)
    if hops is UNREACHABLE:
        raise ValueError(f"goal {goal_node} unreachable from {stop_node}")
    return hops


def edit_distance(a, b) -> int:
    """Levenshtein distance over two sequences, standard dynamic program."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[len(b)]


def metric_sed(pred_path, gold_path, success: int) -> float:
    """Success weighted by the normalized edit similarity of node paths."""
    if not success:
        return 0.0
    denom = max(len(pred_path), len(gold_path))
    if denom == 0:
        return 0.0
    return success * (1.0 - edit_distance(pred_path, gold_path) / denom)


def evaluate(agent: Agent, dataset: Dataset, tc_mode: str = "adjacent") -> EvalResult:
    """Greedy rollout on every record; aggregates recomputed from the rows."""
    _check_dataset(agent.config, dataset)
    rows = []
    for rec in dataset.records:
        graph = dataset.graph_for(rec)
        trace = drive(agent, graph, rec, policy="greedy")
        stop = trace.states[-1].node
        goal = rec.gold_path[-1]
        success = metric_tc(stop, goal, graph, tc_mode)
        rows.append(EpisodeRow(
            episode_id=rec.episode_id,
            stop_node=stop,
            goal_node=goal,
            spd=metric_spd(stop, goal, graph),
            sed=metric_sed(trace.path, rec.gold_path, success),
            success=success,
        ))
    return EvalResult.from_rows(rows)


# ---------------------------------------------------------------- reporting


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _svg_line_plot(path: Path, series, title: str, xlabel: str, ylabel: str,
                   width: int = 640, height: int = 400) -> None:
    """Hand-rolled SVG line plot: axes, one polyline + circles per series,
    small legend. Deterministic output for identical inputs."""
    ml, mr, mt, mb = 60, 20, 40, 50
    iw, ih = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0], [0.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return ml + iw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ih * (1.0 - (y - y0) / (y1 - y0))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{ml}" y1="{mt + ih}" x2="{ml + iw}" y2="{mt + ih}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ih}" stroke="black"/>',
        f'<text x="{ml + iw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{xlabel}</text>',
        f'<text x="15" y="{mt + ih / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 15 {mt + ih / 2:.1f})">{ylabel}</text>',
        f'<text x="{ml - 8}" y="{mt + ih + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{_fmt(y0)}</text>',
        f'<text x="{ml - 8}" y="{mt + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{_fmt(y1)}</text>',
        f'<text x="{ml}" y="{mt + ih + 16}" text-anchor="middle" font-size="10" '
        f'font-family="sans-serif">{_fmt(x0)}</text>',
        f'<text x="{ml + iw}" y="{mt + ih + 16}" text-anchor="middle" font-size="10" '
        f'font-family="sans-serif">{_fmt(x1)}</text>',
    ]
    for s, (label, xs, ys) in enumerate(series):
        color = colors[s % len(colors)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        if len(xs) > 1:
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        parts.append(
            f'<text x="{ml + iw - 8}" y="{mt + 14 + 14 * s}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif" fill="{color}">{label}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def complexity_buckets(result: EvalResult, gold_len: dict[str, int],
                       n_buckets: int = 4):
    """Bucket episodes by gold path length quartiles; mean SED per bucket.

    Returns (bucket centers, mean seds); buckets with no episodes are
    dropped, so the plotted point count equals the bucket count.
    """
    if not result.rows:
        return [], []
    lens = sorted(gold_len[r.episode_id] for r in result.rows)
    edges = [lens[min(len(lens) - 1, math.ceil(len(lens) * q / n_buckets) - 1)]
             for q in range(1, n_buckets + 1)]
    xs, ys = [], []
    lo = -1
    for hi in sorted(set(edges)):
        member = [r.sed for r in result.rows if lo < gold_len[r.episode_id] <= hi]
        if member:
            xs.append(hi)
            ys.append(sum(member) / len(member))
        lo = hi
    return xs, ys


def write_run_artifacts(run_dir: str, tc: TrainConfig, log: list[dict],
                        evals: dict[str, EvalResult], agent: Agent,
                        dataset: Dataset | None = None) -> None:
    """Results layout: config.json, metrics.csv, log.jsonl, checkpoint.bin,
    plots/*.svg under one run directory."""
    d = Path(run_dir)
    (d / "plots").mkdir(parents=True, exist_ok=True)
    run_id = d.name
    (d / "config.json").write_text(json.dumps(tc.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(d / "log.jsonl", "w") as fh:
        for row in log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    lines = ["run_id,split,tc,spd,sed,seed,config_hash"]
    for split in sorted(evals):
        r = evals[split]
        lines.append(f"{run_id},{split},{_fmt(r.tc)},{_fmt(r.spd)},{_fmt(r.sed)},"
                     f"{tc.seed},{tc.config_hash()}")
    (d / "metrics.csv").write_text("\n".join(lines) + "\n")
    agent.save(str(d / "checkpoint.bin"))
    if log:
        xs = [row["epoch"] for row in log]
        _svg_line_plot(
            d / "plots" / "loss.svg",
            [("action", xs, [r["loss_action"] for r in log]),
             ("progress", xs, [r["loss_progress"] for r in log]),
             ("relevance", xs, [r["loss_relevance"] for r in log])],
            "training loss per epoch", "epoch", "loss",
        )
    if dataset is not None and evals:
        gold_len = {r.episode_id: len(r.gold_path) for r in dataset.records}
        split, result = sorted(evals.items())[0]
        xs, ys = complexity_buckets(result, gold_len)
        if xs:
            _svg_line_plot(d / "plots" / "sed_by_complexity.svg",
                           [("mean sed", xs, ys)],
                           f"sed by gold path length ({split})",
                           "gold path length (bucket upper edge)", "mean sed")
        if agent.config.use_locating and dataset.records:
            rec = dataset.records[0]
            trace = drive(agent, dataset.graph_for(rec), rec, policy="teacher")
            steps = list(range(len(trace.outputs)))
            preds = [o.e_p for o in trace.outputs]
            _svg_line_plot(d / "plots" / "progress.svg",
                           [("label", steps, list(rec.progress_labels)),
                            ("predicted", steps, preds)],
                           f"block progress ({rec.episode_id})", "step", "progress")


# ---------------------------------------------------------------- ablation


def overall_grid(base: AgentConfig) -> list[tuple[str, AgentConfig]]:
    """Overall-design rows: baseline, locating only, planning attention
    only, full model."""
    full = base.to_dict()

    def mk(**kw):
        d = dict(full)
        d.update(kw)
        return AgentConfig.from_dict(d)

    return [
        ("baseline", mk(baseline_mode=True)),
        ("locating only", mk(use_sentence_filter=False, use_relevance_loss=False,
                             use_token_attn=False)),
        ("planning only", mk(use_locating=False, use_progress_loss=False,
                             use_turn_history=False, use_spatial_in_planner=False)),
        ("full", mk()),
    ]


def locating_grid(base: AgentConfig) -> list[tuple[str, AgentConfig]]:
    """Locating-module internals: turning-angle inputs and the progress
    supervision variants."""
    full = base.to_dict()

    def mk(**kw):
        d = dict(full)
        d.update(kw)
        return AgentConfig.from_dict(d)

    return [
        ("no turn history", mk(use_turn_history=False)),
        ("no turn signal", mk(use_turn_signal=False)),
        ("no progress loss", mk(use_progress_loss=False, global_progress_labels=False)),
        ("global progress", mk(global_progress_labels=True)),
        ("full", mk()),
    ]


def k_grid(base: AgentConfig, ks=(1, 2, 3, 4, 5)) -> list[tuple[str, AgentConfig]]:
    """Turning-angle window sweep; K=3 is the default setting."""
    rows = []
    for k in ks:
        d = base.to_dict()
        d["K"] = int(k)
        name = f"K={k} (default)" if int(k) == 3 else f"K={k}"
        rows.append((name, AgentConfig.from_dict(d)))
    return rows


def spatial_grid(base: AgentConfig) -> list[tuple[str, AgentConfig]]:
    """Planner input: raw state vs spatial feature."""
    no_spatial = base.to_dict()
    no_spatial["use_spatial_in_planner"] = False
    return [
        ("no spatial feature", AgentConfig.from_dict(no_spatial)),
        ("full", AgentConfig.from_dict(base.to_dict())),
    ]


def association_grid(base: AgentConfig) -> list[tuple[str, AgentConfig]]:
    """Instruction-filter internals: token attention, sentence filter,
    relevance supervision."""
    full = base.to_dict()

    def mk(**kw):
        d = dict(full)
        d.update(kw)
        return AgentConfig.from_dict(d)

    return [
        ("token only", mk(use_sentence_filter=False, use_relevance_loss=False)),
        ("sentence only", mk(use_token_attn=False)),
        ("no relevance loss", mk(use_relevance_loss=False)),
        ("full", mk()),
    ]


def all_flag_combinations(base: AgentConfig) -> list[tuple[str, AgentConfig]]:
    """Every distinct config across the five experiment grids."""
    seen = {}
    for grid_name, grid in (
        ("overall", overall_grid(base)),
        ("locating", locating_grid(base)),
        ("k", k_grid(base)),
        ("spatial", spatial_grid(base)),
        ("association", association_grid(base)),
    ):
        for name, cfg in grid:
            key = json.dumps(cfg.to_dict(), sort_keys=True)
            if key not in seen:
                seen[key] = (f"{grid_name}/{name}", cfg)
    return list(seen.values())


def run_ablation_suite(grid: list[tuple[str, AgentConfig]], base_train: TrainConfig,
                       train_ds: Dataset, eval_ds: Dataset,
                       seeds=(0, 1, 2), out_dir: str | None = None,
                       tc_mode: str = "adjacent", log_hook=None) -> list[dict]:
    """Train/evaluate each config over the seeds; mean +/- std per metric.

    Per-run failures are recorded in the row and do not abort the grid.
    """
    table: list[dict] = []
    for i, (name, cfg) in enumerate(grid, start=1):
        per_seed = {"tc": [], "spd": [], "sed": []}
        errors = []
        for seed in seeds:
            tc = dataclasses.replace(base_train, seed=int(seed), agent=cfg)
            try:
                agent, log = train(tc, train_ds)
                result = evaluate(agent, eval_ds, tc_mode=tc_mode)
            except Exception as exc:  # keep the grid running
                errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                continue
            per_seed["tc"].append(result.tc)
            per_seed["spd"].append(result.spd)
            per_seed["sed"].append(result.sed)
            if out_dir is not None:
                run_dir = Path(out_dir) / f"{i:02d}-{name.replace(' ', '-').replace('=', '')}-s{seed}"
                write_run_artifacts(str(run_dir), tc, log, {"eval": result}, agent, eval_ds)
        row = {"id": i, "name": name}
        for metric, vals in per_seed.items():
            row[f"{metric}_mean"] = sum(vals) / len(vals) if vals else float("nan")
            row[f"{metric}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        row["seeds"] = len(per_seed["tc"])
        if errors:
            row["errors"] = "; ".join(errors)
        table.append(row)
        if log_hook is not None:
            log_hook(row)
    return table


def ablation_report(table: list[dict], title: str) -> tuple[str, str]:
    """(csv, markdown) in the experiment-table shape: one row per config,
    mean +/- std for TC/SPD/SED."""
    csv_lines = ["id,name,tc_mean,tc_std,spd_mean,spd_std,sed_mean,sed_std,seeds"]
    md = [f"### {title}", "",
          "| ID | Model | TC | SPD | SED |",
          "|---:|---|---|---|---|"]
    for row in table:
        csv_lines.append(
            f"{row['id']},{row['name']},{_fmt(row['tc_mean'])},{_fmt(row['tc_std'])},"
            f"{_fmt(row['spd_mean'])},{_fmt(row['spd_std'])},{_fmt(row['sed_mean'])},"
            f"{_fmt(row['sed_std'])},{row['seeds']}")
        md.append(
            f"| {row['id']} | {row['name']} | {row['tc_mean']:.1f} ± {row['tc_std']:.1f} "
            f"| {row['spd_mean']:.2f} ± {row['spd_std']:.2f} "
            f"| {row['sed_mean']:.3f} ± {row['sed_std']:.3f} |")
        if row.get("errors"):
            md.append(f"| | _errors: {row['errors']}_ | | | |")
    return "\n".join(csv_lines) + "\n", "\n".join(md) + "\n"
